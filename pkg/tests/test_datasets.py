import json
import struct

import numpy as np
import pytest
from PIL import Image

from bimonn import morphology
from bimonn.datasets import (ArrayTask, DiskorectConfig, DiskorectTask, binarize_mnist, cubic_resize_matrix,
                             diskorect_batch, diskorect_image, diskorect_manifest, draw_disk, draw_rectangle,
                             export_png_dataset, find_mnist, gen_diskorect, invert_dataset, keys_cubic,
                             load_mnist, make_task, read_idx_images, resize_bicubic, write_idx_images)

ONE_RECT = dict(n_shapes=(1, 1), rect_probability=1.0, rotation=(0.0, 0.0), noise_p=0.0, invert_p=0.0)


class TestDiskorect:
    def test_single_axis_aligned_rectangle(self):
        cfg = DiskorectConfig(**ONE_RECT)
        for index in range(20):
            img, info = diskorect_image(cfg, index, return_shapes=True)
            (_, (cy, cx), (h, w), _), = info["shapes"]
            rows, cols = np.arange(50)[:, None], np.arange(50)[None, :]
            expected = (np.abs(rows - cy) <= h / 2) & (np.abs(cols - cx) <= w / 2)
            np.testing.assert_array_equal(img, expected)
            # filled, axis aligned: the foreground is its own bounding box
            r, c = np.nonzero(img)
            assert img[r.min():r.max() + 1, c.min():c.max() + 1].all()

    def test_integer_centred_rectangle_size(self):
        canvas = np.zeros((20, 20), dtype=bool)
        draw_rectangle(canvas, (10.0, 10.0), (5, 7), 0.0)
        assert canvas.sum() == 35 and canvas[8:13, 7:14].all()

    def test_disk(self):
        canvas = np.zeros((15, 15), dtype=bool)
        draw_disk(canvas, (7.0, 7.0), 2.0)
        np.testing.assert_array_equal(canvas[5:10, 5:10], morphology.make_se("disk", 5))
        assert canvas.sum() == 13

    def test_invert_pairing(self):
        plain = DiskorectConfig(invert_p=0.0)
        inverted = DiskorectConfig(invert_p=1.0)
        for index in range(10):
            np.testing.assert_array_equal(diskorect_image(inverted, index), ~diskorect_image(plain, index))
            np.testing.assert_array_equal(invert_dataset(diskorect_image(plain, index)),
                                          diskorect_image(inverted, index))

    def test_deterministic_and_batched(self):
        cfg = DiskorectConfig(seed=4)
        batch = diskorect_batch(cfg, 10, 5)
        for i in range(5):
            np.testing.assert_array_equal(batch[i], diskorect_image(cfg, 10 + i))
        np.testing.assert_array_equal(np.stack(list(gen_diskorect(cfg, 5, start=10))), batch)
        assert not np.array_equal(diskorect_image(cfg, 0), diskorect_image(DiskorectConfig(seed=5), 0))

    def test_monte_carlo_rates(self):
        cfg = DiskorectConfig()
        fractions, inverted = [], []
        for index in range(1000):
            img, info = diskorect_image(cfg, index, return_shapes=True)
            fractions.append(img.mean())
            inverted.append(info["inverted"])
        assert 0.05 < np.mean(fractions) < 0.95
        assert abs(np.mean(inverted) - 0.5) <= 0.05

    def test_noise_rate(self):
        cfg = DiskorectConfig(invert_p=0.0)
        flips = [diskorect_image(cfg, i, return_shapes=True)[1]["noise"].mean() for i in range(200)]
        assert abs(np.mean(flips) - 0.02) < 0.002

    @pytest.mark.parametrize("bad", [dict(noise_p=1.5), dict(n_shapes=(5, 2)), dict(rect_size=(3, 60)),
                                     dict(n_shapes=(0, 0))])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            DiskorectConfig(**bad)

    def test_manifest_and_png_export(self, tmp_path):
        cfg = DiskorectConfig()
        imgs = diskorect_batch(cfg, 0, 3)
        path = export_png_dataset(imgs, tmp_path, diskorect_manifest(cfg), targets=~imgs)
        doc = json.loads(path.read_text())
        assert doc["generator"] == "diskorect" and len(doc["samples"]) == 3
        assert "noise_p" in doc["assumed_parameters"]
        back = np.asarray(Image.open(tmp_path / doc["samples"][1]["input"])) > 127
        np.testing.assert_array_equal(back, imgs[1])
        target = np.asarray(Image.open(tmp_path / doc["samples"][1]["target"])) > 127
        np.testing.assert_array_equal(target, ~imgs[1])


class TestIdx:
    def test_roundtrip(self, tmp_path, rng):
        imgs = rng.integers(0, 256, (4, 5, 6)).astype(np.uint8)
        write_idx_images(tmp_path / "a.idx", imgs)
        np.testing.assert_array_equal(read_idx_images(tmp_path / "a.idx"), imgs)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "b").write_bytes(struct.pack(">IIII", 0x801, 1, 2, 2) + b"\0" * 4)
        with pytest.raises(ValueError, match="magic"):
            read_idx_images(tmp_path / "b")

    def test_truncated(self, tmp_path):
        (tmp_path / "t").write_bytes(struct.pack(">IIII", 0x803, 2, 3, 3) + b"\0" * 10)
        with pytest.raises(ValueError, match="truncated"):
            read_idx_images(tmp_path / "t")
        (tmp_path / "h").write_bytes(b"\0\0\x08")
        with pytest.raises(ValueError, match="truncated"):
            read_idx_images(tmp_path / "h")

    def test_find_mnist(self, tmp_path, monkeypatch):
        monkeypatch.delenv("BIMONN_MNIST", raising=False)
        with pytest.raises(FileNotFoundError):
            find_mnist()
        (tmp_path / "train-images-idx3-ubyte").write_bytes(b"")
        monkeypatch.setenv("BIMONN_MNIST", str(tmp_path))
        assert find_mnist() == tmp_path / "train-images-idx3-ubyte"


class TestResize:
    def test_keys_kernel(self):
        assert keys_cubic(0.0) == 1.0
        np.testing.assert_allclose(keys_cubic(np.array([1.0, 2.0, 2.5])), 0.0, atol=1e-15)
        # partition of unity at any phase
        for phase in np.linspace(0, 1, 7):
            assert keys_cubic(np.array([phase + 1, phase, phase - 1, phase - 2])).sum() == pytest.approx(1.0)

    def test_rows_sum_to_one(self):
        np.testing.assert_allclose(cubic_resize_matrix(28, 50).sum(axis=1), 1.0, rtol=1e-12)

    def test_linear_ramp_preserved_in_interior(self):
        ramp = np.tile(np.arange(28, dtype=float), (28, 1))
        out = resize_bicubic(ramp, 56)
        src = (np.arange(56) + 0.5) * 0.5 - 0.5
        np.testing.assert_allclose(out[5, 4:-4], src[4:-4], atol=1e-12)

    def test_identity_size(self, rng):
        img = rng.random((9, 9))
        np.testing.assert_allclose(resize_bicubic(img, 9), img, atol=1e-12)

    @pytest.mark.parametrize("value,expected", [(0, False), (255, True), (128, True), (127, False)])
    def test_constant_images(self, value, expected):
        out = binarize_mnist(np.full((2, 28, 28), value, dtype=np.uint8))
        assert out.shape == (2, 50, 50)
        assert (out == expected).all()
        assert 128 / 255 == pytest.approx(0.50196, abs=1e-5)


class TestMnist:
    def test_load(self, mnist_idx):
        imgs = load_mnist(mnist_idx, limit=50)
        assert imgs.shape == (50, 50, 50) and imgs.dtype == bool
        assert 0.05 < imgs.mean() < 0.4

    def test_inversion(self, mnist_idx):
        imgs = load_mnist(mnist_idx, limit=20)
        np.testing.assert_array_equal(invert_dataset(invert_dataset(imgs)), imgs)
        assert invert_dataset(imgs).mean() == pytest.approx(1 - imgs.mean())
        lazy = list(invert_dataset(iter(imgs[:3])))
        np.testing.assert_array_equal(np.stack(lazy), ~imgs[:3])


class TestTasks:
    def test_identity_target(self, rng):
        origin = np.ones((1, 1), bool)
        for pair in make_task(rng.random((5, 10, 10)) < 0.5, "dilation", origin):
            np.testing.assert_array_equal(pair.target, pair.input)
            assert pair.verify()

    def test_opening_targets_idempotent(self):
        se = morphology.make_se("disk", 5)
        for pair in make_task(diskorect_batch(DiskorectConfig(), 0, 10), "opening", se):
            np.testing.assert_array_equal(morphology.opening(pair.target, se), pair.target)

    def test_erosion_shrinks(self):
        x, y = DiskorectTask("erosion", morphology.make_se("disk", 7)).batch(0, 32)
        assert y.mean() < x.mean()

    def test_diskorect_task(self):
        task = DiskorectTask("dilation", morphology.make_se("cross", 5), n_val=6)
        x, y = task.batch(3, 4)
        np.testing.assert_array_equal(x, diskorect_batch(task.cfg, 12, 4))
        xv, yv = task.validation()
        assert xv.shape == (6, 50, 50)
        assert not any(np.array_equal(a, b) for a in xv for b in x)
        comp = DiskorectTask("dilation", morphology.make_se("cross", 5), complement_inputs=True)
        np.testing.assert_array_equal(comp.batch(3, 4)[0], ~x)

    def test_array_task(self, rng):
        imgs = rng.random((40, 12, 12)) < 0.3
        task = ArrayTask(imgs, "closing", morphology.make_se("disk", 3), n_val=10)
        assert len(task.x_train) == 30
        x, y = task.batch(0, 8)
        assert x.shape == (8, 12, 12)
        np.testing.assert_array_equal(y, morphology.closing(x, morphology.make_se("disk", 3)))
        a, _ = task.batch(5, 8)
        b, _ = task.batch(5, 8)
        np.testing.assert_array_equal(a, b)
