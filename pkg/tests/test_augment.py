import numpy as np
import pytest
from scipy import stats

from dfseg.augment import (
    BezierCurve,
    bezier_intensity,
    flip,
    mixup,
    pad_to,
    random_bezier_curve,
    random_flip,
    sample_patch,
)

# ---------------------------------------------------------------------- mixup


def test_mixup_lambda_one_returns_first_sample():
    rng = np.random.default_rng(0)
    xi, xj = rng.standard_normal((2, 1, 2, 3, 3)).astype(np.float32)
    yi, yj = np.eye(3)[[0, 1]].astype(np.float32)
    out = mixup(xi, yi, xj, yj, lam=1.0)
    np.testing.assert_array_equal(out.x_tilde, xi)
    np.testing.assert_array_equal(out.y_tilde, yi)


def test_mixup_half_of_ones_and_zeros():
    out = mixup(np.ones((1, 2, 2, 2)), np.eye(3)[0], np.zeros((1, 2, 2, 2)), np.eye(3)[2], lam=0.5)
    np.testing.assert_array_equal(out.x_tilde, 0.5)
    np.testing.assert_array_equal(out.y_tilde, [0.5, 0, 0.5])


def test_mixup_lambda_follows_symmetric_beta():
    rng = np.random.default_rng(1)
    x = np.zeros((1, 1, 1, 1))
    lams = np.array([mixup(x, x, x, x, 0.2, rng).lam for _ in range(10_000)])
    assert lams.min() >= 0 and lams.max() <= 1
    # Beta(a, a) has variance 1 / (4 (2a + 1))
    se = np.sqrt(1 / (4 * (2 * 0.2 + 1)) / lams.size)
    assert abs(lams.mean() - 0.5) < 3 * se
    # U-shaped: most mass near the endpoints
    assert np.mean((lams < 0.1) | (lams > 0.9)) > 0.5


def test_mixup_rejects_bad_inputs():
    with pytest.raises(ValueError, match="matching shapes"):
        mixup(np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(3), lam=0.5)
    with pytest.raises(ValueError, match="lambda"):
        mixup(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(3), lam=1.5)


# --------------------------------------------------------------------- bezier


def test_bezier_collinear_controls_are_identity():
    x = np.linspace(0, 1, 1001)
    assert np.abs(BezierCurve()(x) - x).max() < 1e-6


def test_bezier_symmetric_controls_fix_midpoint():
    curve = BezierCurve((0.0, 1.0), (1.0, 0.0))
    f = curve(np.array([0.0, 0.5, 1.0]))
    np.testing.assert_allclose(f, [0.0, 0.5, 1.0], atol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_random_monotone_curve_is_non_decreasing(seed):
    curve = random_bezier_curve(np.random.default_rng(seed))
    y = curve(np.sort(np.random.default_rng(seed + 10).uniform(0, 1, 1000)))
    assert np.all(np.diff(y) >= -1e-12)


def test_bezier_intensity_keeps_range_and_constant_images():
    img = np.random.default_rng(3).uniform(-5, 7, (4, 5, 6)).astype(np.float32)
    out = bezier_intensity(img, random_bezier_curve(np.random.default_rng(4)))
    assert out.dtype == img.dtype
    assert out.min() == pytest.approx(img.min(), abs=1e-5)
    assert out.max() == pytest.approx(img.max(), abs=1e-5)
    const = np.full((2, 2, 2), 3.0)
    np.testing.assert_array_equal(bezier_intensity(const, BezierCurve((0, 1), (1, 0))), const)


def test_bezier_control_points_must_be_ordered():
    with pytest.raises(ValueError, match="ascending"):
        BezierCurve((0.8, 0.1), (0.2, 0.9))
    with pytest.raises(ValueError, match=r"\[0,1\]"):
        BezierCurve((1.5, 0.1), (0.2, 0.9))


# ---------------------------------------------------------------------- flips


def test_double_flip_is_identity():
    a = np.random.default_rng(5).standard_normal((2, 3, 4, 5))
    for axes in [(0,), (1, 2), (0, 1, 2)]:
        np.testing.assert_array_equal(flip(flip(a, axes), axes), a)


def test_flip_of_marker_patch():
    patch = np.zeros((2, 2, 2))
    patch[0, 0, 1] = 1  # z=0, y=0, x=1
    out = flip(patch, (0, 2))
    assert out[1, 0, 0] == 1 and out.sum() == 1
    out = flip(patch, (1,))
    assert out[0, 1, 1] == 1 and out.sum() == 1


def test_random_flip_moves_image_and_labels_together():
    rng = np.random.default_rng(6)
    labels = rng.integers(0, 3, (3, 4, 5))
    image = np.stack([labels * 10.0, labels * -1.0])
    for _ in range(10):
        img, lab, axes = random_flip(image, labels, (True, True, True), rng)
        np.testing.assert_array_equal(img[0], lab * 10.0)
        np.testing.assert_array_equal(img[1], lab * -1.0)
        np.testing.assert_array_equal(lab, flip(labels, axes))


def test_random_flip_without_rng_flips_every_masked_axis():
    labels = np.arange(8).reshape(2, 2, 2)
    _, lab, axes = random_flip(labels[None], labels, (True, False, True))
    assert axes == (0, 2)
    np.testing.assert_array_equal(lab, labels[::-1, :, ::-1])


# --------------------------------------------------------------- patch sampler


def test_foreground_voxel_inside_every_patch():
    rng = np.random.default_rng(7)
    labels = np.zeros((10, 12, 14), dtype=np.uint8)
    labels[1, 10, 2] = 2
    vol = labels[None].astype(np.float32)
    for _ in range(200):
        patch, lab, _ = sample_patch(vol, labels, (4, 4, 4), 1.0, rng)
        assert lab.sum() == 2 and patch.sum() == 2


def test_uniform_centers_without_foreground_bias():
    rng = np.random.default_rng(8)
    labels = np.zeros((4, 4, 4), dtype=np.uint8)
    labels[0, 0, 0] = 1
    counts = np.zeros(64)
    for _ in range(10_000):
        _, _, center = sample_patch(labels[None], labels, (2, 2, 2), 0.0, rng)
        counts[np.ravel_multi_index(center, (4, 4, 4))] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_full_size_patch_is_padded_volume():
    rng = np.random.default_rng(9)
    vol = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    labels = rng.integers(0, 3, (3, 4, 5)).astype(np.uint8)
    patch, lab, _ = sample_patch(vol, labels, (3, 4, 5), 0.5, rng)
    np.testing.assert_array_equal(patch, vol)
    np.testing.assert_array_equal(lab, labels)
    patch, _, _ = sample_patch(vol, labels, (4, 6, 5), 0.5, rng)
    np.testing.assert_array_equal(patch, pad_to(vol, (4, 6, 5))[0])
