"""Binary morphological neural networks: learnable erosion/dilation neurons,
union/intersection layers, training, and exact extraction of the learned
morphological operators."""
from .bise import (
    BINARY,
    ActivationStatus,
    AlmostBinaryBounds,
    BiseParams,
    NotActivatedError,
    binarize_bise,
    bise_backward,
    bise_forward,
    check_activation,
    dual_bounds,
    find_activation,
    ideal_params,
    verify_almost_binary,
)
from .grid import correlate2d, correlate2d_backward, softplus_half, xi
from .lui import BiselParams, LuiParams, bisel_forward, find_lui_activation, lui_forward
from .morphology import closing, complement, dilate, erode, make_se, opening
from .network import Adam, Bimonn, BiseLayer, BiselLayer, TrainConfig, init_network, train

__version__ = "0.1.0"
