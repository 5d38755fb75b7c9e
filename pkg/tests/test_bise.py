import numpy as np
import pytest

from bimonn import bise, morphology
from bimonn.bise import (BINARY, AlmostBinaryBounds, BiseParams, NotActivatedError, StaleCacheError,
                         bise_backward, bise_forward, check_activation, check_activation_effective,
                         find_activation, find_activation_effective)
from bimonn.grid import softplus_half, xi

from conftest import numerical_grad, rel_err
from helpers import almost_binary, random_activated, random_bounds


def hard(x, params):
    return bise_forward(x, params)[0] > 0.5


class TestBounds:
    def test_validation(self):
        with pytest.raises(ValueError):
            AlmostBinaryBounds(0.6, 0.4)
        with pytest.raises(ValueError):
            AlmostBinaryBounds(-0.1, 0.9)

    def test_verify_almost_binary(self, rng):
        b = AlmostBinaryBounds(0.2, 0.7)
        img = (rng.random((8, 8)) < 0.5).astype(float)
        assert bise.verify_almost_binary(img, b)
        img[0, 0] = 0.45
        assert not bise.verify_almost_binary(img, b)
        assert bise.verify_almost_binary(np.array([0.2, 0.7]), b)


class TestParams:
    def test_effective_ranges(self, rng):
        p = BiseParams(rng.normal(size=(5, 5)) * 3, rng.normal() * 3)
        assert np.all((p.weights > 0) & (p.weights < 1))
        assert p.bias > 0.5

    def test_from_effective_roundtrip(self, rng):
        w = rng.uniform(0.05, 0.95, (3, 3))
        p = BiseParams.from_effective(w, 1.7)
        np.testing.assert_allclose(p.weights, w, rtol=1e-12)
        assert p.bias == pytest.approx(1.7, rel=1e-12)

    def test_dict_roundtrip(self, rng):
        p = BiseParams(rng.normal(size=(5, 5)), 0.3, 4.0)
        q = BiseParams.from_dict(p.to_dict())
        np.testing.assert_array_equal(q.w_raw, p.w_raw)
        assert float(q.b_raw) == 0.3 and float(q.p) == 4.0
        bad = p.to_dict()
        bad["n"] = 1
        with pytest.raises(ValueError):
            BiseParams.from_dict(bad)

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            BiseParams(np.zeros((4, 4)))


class TestForward:
    def test_zero_input(self, rng):
        p = BiseParams(rng.normal(size=(3, 3)), 0.7, 4.0)
        out, _ = bise_forward(np.zeros((6, 6)), p)
        expected = xi(-4.0 * softplus_half(0.7))
        np.testing.assert_allclose(out, expected, rtol=1e-14)
        assert expected < 0.5

    def test_ideal_dilation_single_pixel(self):
        se = morphology.make_se("cross", 3)
        se[0, 2] = True  # asymmetric
        mask = morphology.reflect(se)
        params = BiseParams(np.where(mask, 10.0, -10.0), bise.softplus_half_inverse(0.75), 4.0)
        assert params.bias == pytest.approx(0.75)
        x = np.zeros((9, 9))
        x[4, 4] = 1.0
        np.testing.assert_array_equal(hard(x, params), morphology.dilate(x > 0.5, se))

    def test_p_zero(self, rng):
        p = BiseParams(rng.normal(size=(3, 3)), 1.0, 0.0)
        out, _ = bise_forward(rng.random((5, 5)), p)
        np.testing.assert_array_equal(out, 0.5)

    def test_range_and_shape(self, rng):
        p = BiseParams(rng.normal(size=(5, 5)), 0.0, 4.0)
        out, _ = bise_forward(rng.random((2, 9, 11)), p)
        assert out.shape == (2, 9, 11)
        assert np.all(np.isfinite(out)) and np.all((out >= 0) & (out <= 1))

    def test_kernel_larger_than_image(self):
        with pytest.raises(ValueError):
            bise_forward(np.zeros((3, 3)), BiseParams.zeros(5))


class TestBackward:
    def test_zero_grad(self, rng):
        p = BiseParams(rng.normal(size=(3, 3)), 0.5, 4.0)
        out, cache = bise_forward(rng.random((7, 7)), p)
        g = bise_backward(np.zeros_like(out), cache)
        assert not g.x.any() and not g.w_raw.any() and g.b_raw == 0 and g.p == 0

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        x = r.random((7, 7))
        p = BiseParams(r.normal(size=(3, 3)), r.normal() * 0.5, r.uniform(0.5, 4.0))

        def loss():
            return float((bise_forward(x, p)[0] ** 2).sum())

        out, cache = bise_forward(x, p)
        g = bise_backward(2 * out, cache)
        assert rel_err(g.w_raw, numerical_grad(loss, p.w_raw)) < 1e-4
        assert rel_err(g.b_raw, numerical_grad(loss, p.b_raw)) < 1e-4
        assert rel_err(g.p, numerical_grad(loss, p.p)) < 1e-4
        assert rel_err(g.x, numerical_grad(loss, x)) < 1e-4
        assert g.x.shape == x.shape and g.w_raw.shape == p.w_raw.shape

    def test_stale_cache(self, rng):
        p = BiseParams(rng.normal(size=(3, 3)))
        out, cache = bise_forward(rng.random((6, 6)), p)
        p.w_raw[0, 0] += 1.0
        with pytest.raises(StaleCacheError):
            bise_backward(out, cache)

    def test_saturated_weights_vanish(self, rng):
        w_raw = np.where(rng.random((3, 3)) < 0.5, 12.0, -12.0)
        p = BiseParams(w_raw, 0.5, 4.0)
        x = rng.random((8, 8))
        out, cache = bise_forward(x, p)
        grad_out = rng.normal(size=out.shape)
        g = bise_backward(grad_out, cache)
        # |d out / d w_eff| <= p * xi' <= p / 2 per pixel, and d w_eff / d w_raw = (1 - tanh^2) / 2
        bound = 0.5 * (1 - np.tanh(w_raw) ** 2) * 0.5 * 4.0 * np.abs(grad_out).sum()
        assert np.all(np.abs(g.w_raw) <= bound + 1e-300)
        assert np.abs(g.w_raw).max() < 1e-7


class TestCheckActivation:
    def setup_method(self):
        self.mask = np.zeros((3, 3), dtype=bool)
        self.mask[1, :] = True
        self.w = np.where(self.mask, 0.9, 0.01)
        self.bounds = AlmostBinaryBounds(0.1, 0.9)

    def test_dilation_example(self):
        # 0.06 + 0.1 * 2.7 = 0.33 <= 0.6 < 0.9 * 0.9 = 0.81
        r = check_activation_effective(self.w, 0.6, self.mask, self.bounds)
        assert r == {"is_dilation": True, "is_erosion": False}

    def test_erosion_example(self):
        # 2.76 - 0.9 * 0.9 = 1.95 <= 2.0 < 0.9 * 2.7 = 2.43
        r = check_activation_effective(self.w, 2.0, self.mask, self.bounds)
        assert r == {"is_dilation": False, "is_erosion": True}

    def test_neither(self):
        r = check_activation_effective(self.w, 1.2, self.mask, self.bounds)
        assert r == {"is_dilation": False, "is_erosion": False}

    def test_empty_se(self):
        with pytest.raises(ValueError):
            check_activation_effective(self.w, 1.0, np.zeros((3, 3), bool))

    def test_never_both_for_large_se(self, rng):
        for _ in range(300):
            w = rng.uniform(0.01, 0.99, (3, 3))
            s = rng.random((3, 3)) < 0.5
            if s.sum() < 2:
                continue
            b = float(rng.uniform(0.5, 5))
            r = check_activation_effective(w, b, s, random_bounds(rng))
            assert not (r["is_dilation"] and r["is_erosion"])

    def test_via_params(self):
        params = BiseParams.from_effective(self.w, 0.6)
        assert check_activation(params, self.mask, self.bounds)["is_dilation"]

    def test_tie_policy(self):
        mask = np.zeros((3, 3), bool)
        mask[1, 1] = True
        w = np.where(mask, 0.8, 0.05)
        lo, hi = bise.dilation_interval(w, mask, BINARY)
        assert check_activation_effective(w, lo, mask)["is_dilation"]
        assert not check_activation_effective(w, hi, mask)["is_dilation"]


class TestSoundness:
    @pytest.mark.parametrize("op", ["dilation", "erosion"])
    def test_hard_threshold_equals_oracle(self, op):
        r = np.random.default_rng(7)
        for _ in range(10):
            bounds = random_bounds(r)
            w, b, se = random_activated(r, op, size=int(r.choice([3, 5])), bounds=bounds)
            assert check_activation_effective(w, b, se, bounds)[f"is_{op}"]
            params = BiseParams.from_effective(w, b, p=1000.0)
            x, fg = almost_binary(r, (50, 12, 12), bounds)
            expected = morphology.apply(op, fg, se)
            np.testing.assert_array_equal(hard(x, params), expected)
            # finite p gives the same hard decision
            params.p[...] = 4.0
            np.testing.assert_array_equal(hard(x, params), expected)


class TestFindActivation:
    def test_ideal_dilation(self):
        se = np.zeros((3, 3), bool)
        se[1, 1] = se[0, 1] = se[1, 2] = True
        params = BiseParams(np.where(morphology.reflect(se), 5.0, -5.0), bise.softplus_half_inverse(0.75))
        assert params.weights.min() == pytest.approx(4.54e-5, rel=1e-2)
        status = find_activation(params)
        assert status.op == "dilation"
        np.testing.assert_array_equal(status.se, se)

    def test_ideal_erosion(self):
        se = np.zeros((3, 3), bool)
        se[0, 0] = se[1, 1] = se[2, 1] = True
        params = BiseParams(np.where(se, 5.0, -5.0), bise.softplus_half_inverse(2.5))
        status = find_activation(params)
        assert status.op == "erosion"
        np.testing.assert_array_equal(status.se, se)

    def test_uniform_weights(self):
        status = find_activation_effective(np.full((3, 3), 0.5), 0.7)
        assert not status.activated
        assert status.margin < 0
        with pytest.raises(NotActivatedError):
            bise.binarize_bise(BiseParams.from_effective(np.full((3, 3), 0.5), 0.7))

    @pytest.mark.parametrize("op", ["dilation", "erosion"])
    @pytest.mark.parametrize("shape", ["disk", "stick", "cross"])
    def test_ideal_roundtrip(self, op, shape):
        se = morphology.make_se(shape, 7)
        status = find_activation(bise.ideal_params(op, se))
        assert status.op == op
        np.testing.assert_array_equal(status.se, se)

    def test_roundtrip_random_asymmetric(self, rng):
        for _ in range(100):
            op = str(rng.choice(["dilation", "erosion"]))
            se = rng.random((5, 5)) < 0.35
            if not se.any():
                continue
            status = find_activation(bise.ideal_params(op, se))
            assert status.op == op
            np.testing.assert_array_equal(status.se, se)

    def test_returned_se_passes_check(self, rng):
        hits = 0
        for _ in range(500):
            w = rng.uniform(0.001, 0.999, (3, 3))
            b = float(rng.uniform(0.5, 6))
            bounds = random_bounds(rng)
            status = find_activation_effective(w, b, bounds)
            if status.activated:
                hits += 1
                assert check_activation_effective(w, b, status.se, bounds)[f"is_{status.op}"]
        assert hits > 0

    def test_finds_random_activated(self, rng):
        for op in ("dilation", "erosion"):
            for _ in range(50):
                bounds = random_bounds(rng)
                w, b, se = random_activated(rng, op, 5, bounds)
                status = find_activation_effective(w, b, bounds)
                if se.sum() == 1 and status.op != op:
                    # one point: dilation by {a} is erosion by {-a}
                    np.testing.assert_array_equal(status.se, morphology.reflect(se))
                    continue
                assert status.op == op
                np.testing.assert_array_equal(status.se, se)

    def test_sort_free(self, monkeypatch, rng):
        def boom(*a, **k):
            raise AssertionError("find_activation must not sort")

        for name in ("sort", "argsort", "partition", "argpartition"):
            monkeypatch.setattr(np, name, boom)
        for size in (3, 5, 7):
            status = find_activation(bise.ideal_params("erosion", morphology.make_se("disk", size)))
            assert status.activated

    def test_binarize(self, rng):
        se = morphology.make_se("stick", 5)
        for op in ("dilation", "erosion"):
            params = bise.ideal_params(op, se)
            got_op, got_se = bise.binarize_bise(params)
            assert got_op == op
            np.testing.assert_array_equal(got_se, se)
            for _ in range(20):
                x, fg = almost_binary(rng, (16, 16), BINARY)
                np.testing.assert_array_equal(hard(x, params), morphology.apply(op, fg, se))


class TestOutputBounds:
    def test_propagation(self, rng):
        for op in ("dilation", "erosion"):
            for _ in range(20):
                bounds = random_bounds(rng)
                w, b, se = random_activated(rng, op, 3, bounds)
                params = BiseParams.from_effective(w, b, p=4.0)
                status = find_activation(params, bounds)
                out_b = status.output_bounds(4.0)
                assert out_b.u < 0.5 < out_b.v or (out_b.u <= 0.5 < out_b.v)
                x, _ = almost_binary(rng, (10, 10, 10), bounds)
                out, _ = bise_forward(x, params)
                assert bise.verify_almost_binary(out, out_b)

    def test_not_activated_has_no_bounds(self):
        status = find_activation_effective(np.full((3, 3), 0.5), 0.7)
        with pytest.raises(NotActivatedError):
            status.output_bounds(4.0)


class TestDualBounds:
    def test_unit_weights(self):
        u_e, v_e = bise.dual_bounds(np.ones((3, 3)), 0.0, 1.0)
        assert v_e == 9.0 and u_e == 8.0

    def test_zero_mass_flagged(self):
        with pytest.warns(RuntimeWarning):
            bise.dual_bounds(np.zeros((3, 3)), 0.0, 1.0)

    def test_identities(self, rng):
        for _ in range(100):
            w = rng.uniform(0, 1, (5, 5))
            u_d, v_d = sorted(rng.uniform(0, 3, 2))
            u_e, v_e = bise.dual_bounds(w, u_d, v_d)
            assert abs(v_e + u_d - w.sum()) < 1e-12
            assert abs(u_e + v_d - w.sum()) < 1e-12

    def test_transfer_matches_direct_erosion_bounds(self, rng):
        for _ in range(100):
            w = rng.uniform(0, 1, (5, 5))
            mask = rng.random((5, 5)) < 0.4
            if not mask.any():
                continue
            # the dilation interval of (w, S) transfers onto the erosion one
            lo_d, hi_d = bise.dilation_interval(w, mask, BINARY)
            u_e, v_e = bise.dual_bounds(w, lo_d, hi_d)
            lo_e, hi_e = bise.erosion_interval(w, mask, BINARY)
            assert abs(u_e - lo_e) < 1e-12 and abs(v_e - hi_e) < 1e-12
