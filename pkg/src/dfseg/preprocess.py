"""Body masking, cropping, histogram matching, resampling and Z-score
normalization, plus the geometry log needed to map predictions back."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import Volume

TARGET_SPACING = (1.2, 0.5, 0.5)
MRI_THRESHOLD = 60.0
CLOSING_RADIUS = 3
HIST_BINS = 1024

_CONN26 = np.ones((3, 3, 3), dtype=bool)


class PreprocessError(ValueError):
    pass


@dataclass
class BodyMask:
    mask: np.ndarray
    bbox: tuple[int, int, int, int, int, int]  # z0, z1, y0, y1, x0, x1 (half-open)

    @classmethod
    def from_array(cls, mask: np.ndarray) -> "BodyMask":
        mask = np.asarray(mask, dtype=bool)
        if not mask.any():
            raise PreprocessError("mask is empty")
        box = []
        for axis in range(3):
            other = tuple(a for a in range(3) if a != axis)
            idx = np.flatnonzero(mask.any(axis=other))
            box += [int(idx[0]), int(idx[-1]) + 1]
        return cls(mask, tuple(box))

    @property
    def dims(self):
        return self.mask.shape


def ball(radius: int) -> np.ndarray:
    r = np.arange(-radius, radius + 1)
    zz, yy, xx = np.meshgrid(r, r, r, indexing="ij")
    return zz**2 + yy**2 + xx**2 <= radius**2


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_CONN26)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def body_mask(vol: Volume, threshold: float = MRI_THRESHOLD, radius: int = CLOSING_RADIUS) -> BodyMask:
    """Threshold, keep the largest 26-connected component, close and fill holes."""
    fg = vol.data > threshold
    if not fg.any():
        raise PreprocessError(f"no voxel exceeds threshold {threshold}; scan unusable")
    fg = largest_component(fg)
    pad = radius + 1
    closed = ndimage.binary_closing(np.pad(fg, pad), structure=ball(radius))[pad:-pad, pad:-pad, pad:-pad]
    filled = ndimage.binary_fill_holes(closed | fg)
    return BodyMask.from_array(largest_component(filled))


@dataclass
class GeometryLog:
    original_shape: tuple[int, int, int]
    original_spacing: tuple[float, float, float]
    crop_yx: tuple[int, int, int, int] = (0, 0, 0, 0)  # y0, y1, x0, x1
    cropped_shape: tuple[int, int, int] = (0, 0, 0)
    target_spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    resampled_shape: tuple[int, int, int] = (0, 0, 0)
    notes: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GeometryLog":
        d = json.loads(text)
        for key in ("original_shape", "original_spacing", "crop_yx", "cropped_shape", "target_spacing", "resampled_shape"):
            d[key] = tuple(d[key])
        return cls(**d)


def crop_to_mask(vol: Volume, mask: BodyMask) -> tuple[Volume, tuple[int, int, int, int]]:
    """Crop y and x to the mask bounding box; z is kept whole."""
    _, _, y0, y1, x0, x1 = mask.bbox
    out = vol.with_data(vol.data[:, y0:y1, x0:x1].copy())
    return out, (y0, y1, x0, x1)


def uncrop(data: np.ndarray, crop_yx, original_shape, fill=0) -> np.ndarray:
    y0, y1, x0, x1 = crop_yx
    out = np.full(original_shape, fill, dtype=data.dtype)
    out[:, y0:y1, x0:x1] = data
    return out


def _quantiles(values: np.ndarray) -> np.ndarray:
    """Mid-rank empirical CDF of each value (ties share their average rank)."""
    uniq, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    upper = np.cumsum(counts)
    mid = (upper - counts / 2.0) / values.size
    return mid[inverse]


def match_histogram(source: np.ndarray, reference: np.ndarray, bins: int = HIST_BINS) -> np.ndarray:
    """Map every source voxel to the reference intensity at its source quantile.

    The reference CDF is tabulated on ``bins`` equal-width bins and inverted
    by linear interpolation inside the bin that contains the quantile; the
    source quantile comes from exact mid-ranks.
    """
    source = np.asarray(source, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    lo, hi = float(reference.min()), float(reference.max())
    if hi <= lo:
        raise PreprocessError("reference volume is constant; histogram matching undefined")
    counts, edges = np.histogram(reference, bins=bins, range=(lo, hi))
    cdf = np.concatenate([[0.0], np.cumsum(counts) / reference.size])
    q = _quantiles(source.ravel())
    # bin k with cdf[k] < q <= cdf[k + 1] is never empty, so the slope is finite
    k = np.clip(np.searchsorted(cdf, q, side="left") - 1, 0, bins - 1)
    frac = (q - cdf[k]) / (cdf[k + 1] - cdf[k])
    matched = edges[k] + frac * (edges[k + 1] - edges[k])
    return matched.reshape(source.shape)


def resample_shape(shape, spacing, target) -> tuple[int, int, int]:
    return tuple(max(1, int(round(n * s / t))) for n, s, t in zip(shape, spacing, target))


def resample(vol: Volume, target_spacing=TARGET_SPACING, is_label: bool = False, shape=None) -> Volume:
    """Trilinear (images) or nearest-neighbour (labels) resampling.

    New dims are ``round(dims * spacing / target)``; grid corners are aligned,
    so output index i samples input coordinate ``i * (n_in - 1) / (n_out - 1)``.
    """
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target spacing must be three positive values, got {target_spacing}")
    new_shape = tuple(shape) if shape is not None else resample_shape(vol.dims, vol.spacing, target)
    if new_shape == vol.dims:
        return Volume(vol.data.copy(), target if shape is None else vol.spacing, dict(vol.meta))
    axes = [
        np.linspace(0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
        for n_in, n_out in zip(vol.dims, new_shape)
    ]
    coords = np.meshgrid(*axes, indexing="ij")
    order = 0 if is_label else 1
    out = ndimage.map_coordinates(vol.data, coords, order=order, mode="nearest")
    spacing = tuple(s * n / m for s, n, m in zip(vol.spacing, vol.dims, new_shape))
    return Volume(out.astype(vol.data.dtype), spacing, dict(vol.meta))


def zscore(vol: Volume, mask: BodyMask | np.ndarray | None = None) -> Volume:
    """(x - mean) / std over the mask region (or all voxels), applied everywhere."""
    data = vol.data.astype(np.float64)
    if mask is not None:
        region = data[mask.mask if isinstance(mask, BodyMask) else np.asarray(mask, dtype=bool)]
    else:
        region = data.ravel()
    mu, sd = region.mean(), region.std()
    if not sd > 0:
        raise PreprocessError("zero intensity spread in normalization region")
    return vol.with_data(((data - mu) / sd).astype(np.float32))


@dataclass
class PreprocessedCase:
    images: list[Volume]
    labels: list[Volume]
    geometry: GeometryLog


def preprocess_case(
    images: list[Volume],
    labels: list[Volume] = (),
    threshold: float = MRI_THRESHOLD,
    target_spacing=TARGET_SPACING,
    match_reference: np.ndarray | None = None,
    bins: int = HIST_BINS,
    mask_channels: tuple[int, ...] = (),
) -> PreprocessedCase:
    """Run the full chain on co-registered channels.

    The body mask comes from the first image. Label-like inputs (reference
    segmentations in ``labels`` and image channels listed in
    ``mask_channels``) are cropped and resampled with nearest neighbour and
    never normalized. When ``match_reference`` is given the first image is
    histogram-matched to it before normalization.
    """
    primary = images[0]
    for k, img in enumerate(images):
        if img.dims != primary.dims:
            raise PreprocessError(f"channel {k} has dims {img.dims}, expected {primary.dims}")
    mask = body_mask(primary, threshold)
    geo = GeometryLog(primary.dims, primary.spacing, target_spacing=tuple(target_spacing))
    out_images, out_labels = [], []
    mvol, geo.crop_yx = crop_to_mask(Volume(mask.mask.astype(np.uint8), primary.spacing), mask)
    geo.cropped_shape = mvol.dims
    new_shape = resample_shape(mvol.dims, mvol.spacing, target_spacing)
    geo.resampled_shape = new_shape
    rmask = resample(mvol, target_spacing, is_label=True).data.astype(bool)
    for k, img in enumerate(images):
        cropped, _ = crop_to_mask(img, mask)
        if k in mask_channels:
            out_images.append(resample(cropped, target_spacing, is_label=True))
            continue
        if k == 0 and match_reference is not None:
            cropped = cropped.with_data(match_histogram(cropped.data, match_reference, bins).astype(np.float32))
            geo.notes["histogram_matched"] = True
        res = resample(cropped.with_data(cropped.data.astype(np.float32)), target_spacing)
        out_images.append(zscore(res, rmask if rmask.any() else None))
    for lab in labels:
        cropped, _ = crop_to_mask(lab, mask)
        out_labels.append(resample(cropped, target_spacing, is_label=True))
    return PreprocessedCase(out_images, out_labels, geo)


def restore_labels(labels: np.ndarray, geo: GeometryLog) -> np.ndarray:
    """Map a label map on the preprocessed grid back to the original grid."""
    vol = Volume(labels.astype(np.uint8))
    back = resample(vol, is_label=True, shape=geo.cropped_shape).data
    return uncrop(back.astype(np.uint8), geo.crop_yx, geo.original_shape)
