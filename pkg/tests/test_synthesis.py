import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from umsn import imageio
from umsn.semantics import group_labels
from umsn.synthesis import (
    DatasetConfig,
    TrajectoryParams,
    add_noise,
    blur,
    build_dataset,
    camera_trajectory,
    class_blur,
    delta_kernel,
    generate_kernel,
    generate_samples,
    load_samples,
    toy_face,
)

from conftest import brute_convolve, toy_config


class TestKernels:
    def test_default_kernel_is_normalized(self):
        k = generate_kernel(7, 13)
        assert k.shape == (13, 13)
        assert k.min() >= 0
        assert abs(k.sum() - 1.0) < 1e-6

    def test_stationary_trajectory_gives_delta(self):
        k = generate_kernel(7, 13, TrajectoryParams(steps=1, inertia=0.0, jitter=0.0))
        np.testing.assert_array_equal(k, delta_kernel(13))
        k = generate_kernel(3, 15, TrajectoryParams(steps=40, inertia=0.0, jitter=0.0))
        np.testing.assert_array_equal(k, delta_kernel(15))

    def test_deterministic(self):
        a = generate_kernel(7, 21)
        b = generate_kernel(7, 21)
        assert a.tobytes() == b.tobytes()
        assert not np.array_equal(a, generate_kernel(8, 21))

    @pytest.mark.parametrize("side", [12, 11, 31, 14])
    def test_bad_side(self, side):
        with pytest.raises(ValueError):
            generate_kernel(0, side)

    def test_trajectory_contract(self):
        t = camera_trajectory(5, TrajectoryParams(steps=30))
        assert t.length == 30
        assert np.all(np.isfinite(t.positions))
        with pytest.raises(ValueError):
            camera_trajectory(5, TrajectoryParams(steps=0))

    @settings(max_examples=60, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), side=st.sampled_from(range(13, 30, 2)),
           inertia=st.floats(0, 0.95), jitter=st.floats(0, 3))
    def test_invariants_any_params(self, seed, side, inertia, jitter):
        k = generate_kernel(seed, side, TrajectoryParams(32, inertia, jitter))
        assert k.min() >= 0
        assert abs(k.sum() - 1) < 1e-6


class TestBlur:
    def test_delta_is_identity(self, rng):
        img = rng.random((20, 17, 3))
        np.testing.assert_allclose(blur(img, delta_kernel(5)), img, atol=1e-6)

    def test_constant_preserved(self):
        img = np.full((32, 32, 3), 0.37)
        np.testing.assert_allclose(blur(img, generate_kernel(1, 13)), img, atol=1e-6)

    def test_matches_brute_force(self, rng):
        img = rng.random((16, 16, 3))
        k = rng.random((5, 5))
        k /= k.sum()
        assert np.abs(blur(img, k) - brute_convolve(img, k)).max() < 1e-5

    def test_asymmetric_kernel_orientation(self):
        # single off-centre tap shifts content: convolution, not correlation
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        k = np.zeros((3, 3))
        k[0, 2] = 1.0
        out = blur(img, k)
        assert out[3, 5] == 1.0

    def test_kernel_larger_than_image(self, rng):
        with pytest.raises(ValueError):
            blur(rng.random((10, 10, 3)), delta_kernel(13))


class TestNoise:
    def test_zero_sigma(self, rng):
        img = rng.random((8, 8, 3))
        np.testing.assert_array_equal(add_noise(img, 0.0, 1), img)

    def test_range_and_determinism(self, rng):
        img = rng.random((32, 32, 3))
        a = add_noise(img, 0.03, 5)
        assert a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, add_noise(img, 0.03, 5))

    def test_sample_std(self):
        img = np.full((256, 256, 3), 0.5)
        out = add_noise(img, 0.03, 11)
        interior = (out > 0) & (out < 1)
        std = (out - img)[interior].std()
        assert abs(std - 0.03) < 0.003

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            add_noise(np.zeros((2, 2, 3)), -0.1, 0)


class TestClassBlur:
    def setup_method(self):
        img, labels = toy_face(3, 64)
        self.img = img
        self.masks = group_labels(labels)
        self.kernel = generate_kernel(2, 13)

    def test_empty_class(self):
        masks = np.zeros_like(self.masks)
        masks[0] = 1
        np.testing.assert_array_equal(class_blur(self.img, masks, 2, self.kernel), self.img)

    def test_full_class(self):
        masks = np.zeros_like(self.masks)
        masks[1] = 1
        np.testing.assert_allclose(class_blur(self.img, masks, 2, self.kernel), blur(self.img, self.kernel))

    def test_delta_kernel(self):
        for i in range(1, 5):
            np.testing.assert_allclose(class_blur(self.img, self.masks, i, delta_kernel(3)), self.img, atol=1e-6)

    def test_untouched_outside_class(self):
        for i in range(1, 5):
            out = class_blur(self.img, self.masks, i, self.kernel)
            off = self.masks[i - 1] == 0
            np.testing.assert_array_equal(out[off], self.img[off])

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            class_blur(self.img[:32], self.masks, 1, self.kernel)


class TestToyFace:
    def test_labels_and_range(self):
        img, labels = toy_face(0, 64)
        assert img.shape == (64, 64, 3)
        assert 0 <= img.min() and img.max() <= 1
        present = set(np.unique(labels))
        assert {0, 1, 6, 10} <= present
        assert present <= set(range(11))


class TestDataset:
    def test_count_and_paths(self, tmp_path):
        cfg = toy_config(num_samples=8, toy_count=3, kernel_sides=(13, 29), kernel_count=20,
                         trajectory={"steps": 64, "inertia": 0.7, "jitter": 1.0})
        records = build_dataset(cfg, tmp_path / "d")
        manifest = json.loads((tmp_path / "d" / "manifest.json").read_text())
        assert manifest == records
        assert len(manifest) == 8
        for rec in manifest:
            for key in ("clean", "blurry", "masks", "kernel"):
                assert (tmp_path / "d" / rec[key]).exists()
            for p in rec["class_blurred"].values():
                assert (tmp_path / "d" / p).exists()
            assert rec["kernel_side"] % 2 == 1 and 13 <= rec["kernel_side"] <= 29
            assert set(rec) >= {"id", "clean", "blurry", "masks", "kernel_id", "kernel_side", "noise_sigma", "seed"}
            k = imageio.read_array(tmp_path / "d" / rec["kernel"])
            assert k.shape == (rec["kernel_side"],) * 2 and abs(k.sum() - 1) < 1e-6
        meta = json.loads((tmp_path / "d" / "dataset.json").read_text())
        assert meta["classes"]["3"] == "inner_face"

    def test_replayable(self, tmp_path):
        cfg = toy_config(num_samples=4, toy_count=2)
        build_dataset(cfg, tmp_path / "a")
        build_dataset(cfg, tmp_path / "b", workers=3)
        files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_seed_changes_output(self, tmp_path):
        build_dataset(toy_config(num_samples=2, toy_count=2), tmp_path / "a")
        build_dataset(toy_config(num_samples=2, toy_count=2, master_seed=1), tmp_path / "b")
        a = (tmp_path / "a" / "blurry" / "s0000000.png").read_bytes()
        b = (tmp_path / "b" / "blurry" / "s0000000.png").read_bytes()
        assert a != b

    def test_roundtrip_load(self, tmp_path):
        build_dataset(toy_config(num_samples=3, toy_count=2), tmp_path / "d")
        samples = load_samples(tmp_path / "d" / "manifest.json", need_class_blurred=True)
        assert len(samples) == 3
        s = samples[0]
        assert s["clean"].shape == s["blurry"].shape == (64, 64, 3)
        assert s["masks"].shape == (4, 64, 64)
        assert set(s["class_blurred"]) == {1, 2, 3, 4}

    def test_in_memory_matches_shapes(self):
        samples = generate_samples(toy_config(num_samples=2, toy_count=2))
        for s in samples:
            assert s["blurry"].min() >= 0 and s["blurry"].max() <= 1
            assert all(v.shape == s["clean"].shape for v in s["class_blurred"].values())

    def test_directory_corpus(self, tmp_path):
        (tmp_path / "img").mkdir()
        (tmp_path / "lab").mkdir()
        for j in range(2):
            img, lab = toy_face(j, 80)
            imageio.write_image(tmp_path / "img" / f"f{j}.png", img)
            imageio.write_index(tmp_path / "lab" / f"f{j}.png", lab)
        cfg = toy_config(corpus=str(tmp_path / "img"), labels=str(tmp_path / "lab"), num_samples=3)
        records = build_dataset(cfg, tmp_path / "d")
        assert len(records) == 3

    def test_errors(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            build_dataset(toy_config(corpus=str(tmp_path / "missing"), labels="x"), tmp_path / "d")
        (tmp_path / "empty").mkdir()
        with pytest.raises(FileNotFoundError):
            build_dataset(toy_config(corpus=str(tmp_path / "empty"), labels="x"), tmp_path / "d")
        with pytest.raises(ValueError, match="at least"):
            build_dataset(toy_config(toy_size=32), tmp_path / "d")
        with pytest.raises(ValueError):
            build_dataset(toy_config(patch_size=63), tmp_path / "d")
        assert not (tmp_path / "d").exists()

    def test_unknown_config_key(self):
        with pytest.raises(ValueError, match="unknown"):
            DatasetConfig.from_dict({"bogus": 1})
