"""MixUp, Bezier intensity remapping, axis flips and patch sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

MIXUP_ALPHA = 0.2


@dataclass
class MixUpSample:
    x_tilde: np.ndarray
    y_tilde: np.ndarray
    lam: float
    i: int = 0
    j: int = 1


def mixup(x_i, y_i, x_j, y_j, alpha: float = MIXUP_ALPHA, rng=None, lam: float | None = None, i: int = 0, j: int = 1) -> MixUpSample:
    """Convex combination of two patches and their one-hot labels.

    ``lam`` is drawn from Beta(alpha, alpha) unless given explicitly.
    """
    x_i, x_j = np.asarray(x_i), np.asarray(x_j)
    y_i, y_j = np.asarray(y_i), np.asarray(y_j)
    if x_i.shape != x_j.shape or y_i.shape != y_j.shape:
        raise ValueError(f"mixup needs matching shapes, got {x_i.shape}/{x_j.shape} and {y_i.shape}/{y_j.shape}")
    if lam is None:
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        rng = np.random.default_rng() if rng is None else rng
        lam = float(rng.beta(alpha, alpha))
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    dtype = np.result_type(x_i.dtype, np.float32)
    x = (lam * x_i + (1.0 - lam) * x_j).astype(dtype)
    y = (lam * y_i + (1.0 - lam) * y_j).astype(dtype)
    return MixUpSample(x, y, lam, i, j)


@dataclass(frozen=True)
class BezierCurve:
    """Cubic Bezier on [0,1]^2 with endpoints pinned at (0,0) and (1,1)."""

    p1: tuple[float, float] = (1 / 3, 1 / 3)
    p2: tuple[float, float] = (2 / 3, 2 / 3)

    def __post_init__(self):
        for p in (self.p1, self.p2):
            if not all(0.0 <= c <= 1.0 for c in p):
                raise ValueError(f"control points must lie in [0,1]^2, got {p}")
        if self.p1[0] > self.p2[0]:
            raise ValueError("control point x-coordinates must be ascending so x(t) is invertible")

    def point(self, t: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        s = 1.0 - t
        b1, b2, b3 = 3 * s * s * t, 3 * s * t * t, t**3
        return b1 * self.p1[0] + b2 * self.p2[0] + b3, b1 * self.p1[1] + b2 * self.p2[1] + b3

    def __call__(self, x: np.ndarray, iters: int = 60) -> np.ndarray:
        """Map normalized intensities by solving x(t) = x with bisection."""
        x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
        lo, hi = np.zeros_like(x), np.ones_like(x)
        for _ in range(iters):
            mid = 0.5 * (lo + hi)
            below = self.point(mid)[0] < x
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return self.point(0.5 * (lo + hi))[1]


def random_bezier_curve(rng, monotone: bool = True) -> BezierCurve:
    """x-coordinates sorted ascending; y sorted too when ``monotone``."""
    xs = np.sort(rng.uniform(0, 1, 2))
    ys = rng.uniform(0, 1, 2)
    if monotone:
        ys = np.sort(ys)
    return BezierCurve((float(xs[0]), float(ys[0])), (float(xs[1]), float(ys[1])))


def bezier_intensity(image: np.ndarray, curve: BezierCurve) -> np.ndarray:
    """Min-max normalize, map through ``curve``, restore the original range."""
    image = np.asarray(image)
    lo, hi = float(image.min()), float(image.max())
    if hi <= lo:
        return image.copy()
    mapped = curve((image - lo) / (hi - lo))
    return (mapped * (hi - lo) + lo).astype(image.dtype)


def flip(array: np.ndarray, axes) -> np.ndarray:
    """Flip the given spatial axes (0=z, 1=y, 2=x) of a [..., D, H, W] array."""
    nd = array.ndim
    axes = tuple(nd - 3 + a for a in axes)
    return np.flip(array, axes).copy() if axes else array.copy()


def random_flip(patch, labels, axes_mask=(True, True, True), rng=None, p: float = 0.5):
    """Flip image and labels together.

    Without ``rng`` every axis in ``axes_mask`` is flipped; with ``rng`` each
    masked axis is flipped independently with probability ``p``.
    Returns ``(patch, labels, flipped_axes)``.
    """
    axes = [a for a, on in enumerate(axes_mask) if on]
    if rng is not None:
        axes = [a for a in axes if rng.random() < p]
    return flip(patch, axes), flip(labels, axes), tuple(axes)


def sample_center(labels: np.ndarray, fg_prob: float, rng) -> tuple[int, int, int]:
    """Foreground voxel with probability ``fg_prob``, else uniform.

    Volumes without foreground always fall back to uniform sampling.
    """
    if fg_prob > 0 and rng.random() < fg_prob:
        fg = np.flatnonzero(labels)
        if fg.size:
            return tuple(int(i) for i in np.unravel_index(fg[rng.integers(fg.size)], labels.shape))
    return tuple(int(rng.integers(n)) for n in labels.shape)


def pad_to(array: np.ndarray, shape) -> tuple[np.ndarray, list[tuple[int, int]]]:
    """Zero-pad the last three axes symmetrically up to at least ``shape``."""
    pads = []
    for n, want in zip(array.shape[-3:], shape):
        extra = max(0, want - n)
        pads.append((extra // 2, extra - extra // 2))
    full = [(0, 0)] * (array.ndim - 3) + pads
    return (np.pad(array, full) if any(sum(p) for p in pads) else array), pads


def sample_patch(volume: np.ndarray, labels: np.ndarray, patch_size, fg_prob: float, rng):
    """Crop a patch of ``patch_size`` from a [C,D,H,W] volume and its [D,H,W] labels.

    The origin is clamped so the patch stays inside the (zero-padded) volume,
    which keeps the chosen center voxel inside the patch.
    Returns ``(patch, label_patch, center)`` with ``center`` in padded coordinates.
    """
    volume, pads = pad_to(volume, patch_size)
    labels, _ = pad_to(labels, patch_size)
    center = sample_center(labels, fg_prob, rng)
    origin = [min(max(c - p // 2, 0), n - p) for c, p, n in zip(center, patch_size, labels.shape)]
    sl = tuple(slice(o, o + p) for o, p in zip(origin, patch_size))
    return volume[(slice(None),) + sl].copy(), labels[sl].copy(), center
