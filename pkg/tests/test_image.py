import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from svmrkpm.image import (
    ImageGrid,
    SyntheticTruth,
    load_image,
    make_training_set,
    otsu_threshold,
    synth_image,
    write_image,
)


def grid_from_flat(vals, dims, voxel_size=1.0):
    arr = np.asarray(vals, dtype=float).reshape(dims, order="F")
    origin = tuple(0.5 * voxel_size for _ in dims)
    return ImageGrid(dims=dims, voxel_size=voxel_size, origin=origin,
                     intensities=arr)


CIRCLE = SyntheticTruth(circles=((((5.0, 5.0), 2.1)),), extent=10.0)


class TestLoadImage:
    def test_p2_normalization(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_text("P2\n2 2\n255\n0 255\n255 0\n")
        img = load_image(p)
        assert img.dims == (2, 2)
        # row 0 = (0, 255), row 1 = (255, 0); arr[x, y]
        assert img.intensities[0, 0] == 0.0
        assert img.intensities[1, 0] == 1.0
        assert img.intensities[0, 1] == 1.0
        assert img.intensities[1, 1] == 0.0

    def test_p5_16bit(self, tmp_path):
        p = tmp_path / "t.pgm"
        payload = np.array([0, 65535, 32768, 16384], dtype=">u2").tobytes()
        p.write_bytes(b"P5\n2 2\n65535\n" + payload)
        img = load_image(p)
        assert img.intensities[0, 0] == 0.0
        assert img.intensities[1, 0] == 1.0

    def test_truncated_payload(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_text("P2\n2 2\n255\n0 255 255\n")
        with pytest.raises(ValueError, match="payload length mismatch"):
            load_image(p)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_text("P7\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(ValueError, match="malformed header"):
            load_image(p)

    def test_bad_maxval(self, tmp_path):
        p = tmp_path / "t.pgm"
        p.write_text("P2\n1 1\n70000\n0\n")
        with pytest.raises(ValueError, match="unsupported bit depth"):
            load_image(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.pgm")

    def test_raw_roundtrip_bit_exact(self, tmp_path):
        img = synth_image(CIRCLE, 100, noise_sigma=0.05, seed=3)
        p = tmp_path / "synth.raw"
        write_image(img, p)
        back = load_image(p)
        assert back.dims == img.dims
        assert back.voxel_size == img.voxel_size
        assert back.origin == img.origin
        assert np.array_equal(back.intensities, img.intensities)

    def test_raw_payload_mismatch(self, tmp_path):
        img = grid_from_flat([0.0, 1.0, 0.5, 0.25], (2, 2))
        p = tmp_path / "t.raw"
        write_image(img, p)
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError, match="payload length mismatch"):
            load_image(p)

    def test_pgm_roundtrip_quantized(self, tmp_path):
        vals = np.array([0, 51, 102, 255]) / 255.0
        img = grid_from_flat(vals, (2, 2))
        p = tmp_path / "q.pgm"
        write_image(img, p)
        back = load_image(p)
        assert np.array_equal(back.intensities, img.intensities)

    def test_csv_1d(self, tmp_path):
        p = tmp_path / "t.csv"
        p.write_text("0.0\n0.25\n1.0\n")
        img = load_image(p, voxel_size=0.5)
        assert img.dims == (3,)
        assert img.origin == (0.25,)
        assert np.array_equal(img.intensities, [0.0, 0.25, 1.0])


class TestOtsu:
    def test_symmetric_bimodal(self):
        vals = np.array([0.2] * 8 + [0.8] * 8)
        img = grid_from_flat(vals, (4, 4))
        lab = otsu_threshold(img)
        assert 0.2 < lab.threshold < 0.8
        assert (lab.labels == 1).sum() == 8

    def test_constant_image(self):
        img = grid_from_flat(np.full(4, 0.5), (2, 2))
        with pytest.raises(ValueError, match="degenerate histogram"):
            otsu_threshold(img)

    def test_noisy_circle_count_close_to_truth(self):
        # oracle: rasterized ground-truth membership at the output resolution
        img = synth_image(CIRCLE, 224, noise_sigma=0.1,
                          downscale_factor=2.24, seed=7)
        lab = otsu_threshold(img)
        true_inside = CIRCLE.contains(img.centroids()).sum()
        got = int((lab.labels == 1).sum())
        assert abs(got - true_inside) <= 0.03 * true_inside

    @given(st.floats(0.05, 0.45), st.floats(0.55, 0.95),
           st.integers(0, 2**32 - 1))
    @settings(max_examples=25, deadline=None)
    def test_affine_rescale_keeps_labels(self, lo, hi, seed):
        rng = np.random.default_rng(seed)
        vals = rng.choice([lo, hi], size=36)
        if len(set(np.minimum((vals * 256).astype(int), 255))) < 2:
            return
        img = grid_from_flat(vals, (6, 6))
        scaled = grid_from_flat(0.5 * vals + 0.25, (6, 6))
        assert np.array_equal(otsu_threshold(img).labels,
                              otsu_threshold(scaled).labels)


class TestTrainingSet:
    def test_centroids_2x2(self):
        img = grid_from_flat([0.0, 1.0, 1.0, 0.0], (2, 2))
        lab = otsu_threshold(img)
        data = make_training_set(img, lab)
        assert np.array_equal(
            data.points,
            [[0.5, 0.5], [1.5, 0.5], [0.5, 1.5], [1.5, 1.5]])
        assert np.array_equal(data.labels, [-1, 1, 1, -1])

    def test_single_pixel(self):
        from svmrkpm.image import LabelGrid
        img = grid_from_flat([0.3], (1,), voxel_size=2.0)
        data = make_training_set(img, LabelGrid(dims=(1,), labels=np.array([1])))
        assert np.array_equal(data.points, [[1.0]])

    def test_extent_mismatch(self):
        img = grid_from_flat([0.0, 1.0], (2,))
        from svmrkpm.image import LabelGrid
        with pytest.raises(ValueError, match="mismatch"):
            make_training_set(img, LabelGrid(dims=(3,), labels=np.ones(3, int)))

    def test_count_and_classes_on_synthetic(self):
        img = synth_image(CIRCLE, 100)
        data = make_training_set(img, otsu_threshold(img))
        assert len(data) == 10000
        data.require_both_classes()
        lo, hi = img.bounds()
        assert (data.points >= lo).all() and (data.points <= hi).all()


class TestSynthImage:
    def test_noiseless_values(self):
        img = synth_image(CIRCLE, 100)
        cent = img.centroids().reshape((100, 100, 2), order="F")
        assert img.intensities[50, 50] == 1.0
        assert img.intensities[0, 0] == 0.0

    def test_paper_configuration_downscale(self):
        img = synth_image(CIRCLE, 224, noise_sigma=0.1,
                          downscale_factor=2.24, seed=1)
        assert img.dims == (100, 100)
        assert img.voxel_size == pytest.approx(0.1)

    def test_deterministic(self):
        a = synth_image(CIRCLE, 64, noise_sigma=0.1, seed=42)
        b = synth_image(CIRCLE, 64, noise_sigma=0.1, seed=42)
        assert np.array_equal(a.intensities, b.intensities)

    def test_non_divisible_factor(self):
        with pytest.raises(ValueError, match="not divisible"):
            synth_image(CIRCLE, 10, downscale_factor=3.0)

    def test_noiseless_otsu_matches_truth(self):
        img = synth_image(CIRCLE, 64)
        lab = otsu_threshold(img)
        truth = np.where(CIRCLE.contains(img.centroids()), 1, -1)
        assert np.array_equal(lab.labels.ravel(order="F"), truth)
