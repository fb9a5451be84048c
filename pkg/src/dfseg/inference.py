"""Sliding-window prediction, flip test-time augmentation, ensembling and the
aggregated Dice score."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import flip, pad_to
from .tensor import Tensor

ALL_FLIPS = tuple(
    tuple(a for a, on in zip(range(3), mask) if on) for mask in itertools.product((False, True), repeat=3)
)
CLASSES = (1, 2)

Predictor = Callable[[np.ndarray], np.ndarray]


def model_predictor(model) -> Predictor:
    """Wrap a network as ``[N,C,D,H,W] -> [N,3,D,H,W]`` softmax probabilities."""
    dtype = model.parameters()[0].dtype

    def predict(x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            logits = model(Tensor(np.ascontiguousarray(x, dtype=dtype)))[0]
            return T.softmax_channel(logits).data

    return predict


def window_origins(length: int, patch: int, overlap: float) -> list[int]:
    """Origins at stride ``patch * (1 - overlap)``; the last window is flush with the end."""
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must lie in [0, 1), got {overlap}")
    if patch >= length:
        return [0]
    step = max(1, int(patch * (1.0 - overlap)))
    origins = list(range(0, length - patch + 1, step))
    if origins[-1] != length - patch:
        origins.append(length - patch)
    return origins


def gaussian_weights(patch, sigma_scale: float = 1 / 8) -> np.ndarray:
    axes = []
    for n in patch:
        c = (n - 1) / 2.0
        s = max(n * sigma_scale, 1e-6)
        axes.append(np.exp(-0.5 * ((np.arange(n) - c) / s) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    w /= w.max()
    # keep far corners strictly positive
    return np.maximum(w, 1e-6)


def sliding_window(
    predict: Predictor,
    image: np.ndarray,
    patch_size,
    overlap: float = 0.5,
    n_classes: int = 3,
    batch_size: int = 2,
    order: Sequence[int] | None = None,
    return_weights: bool = False,
):
    """Gaussian-weighted average of per-window softmax maps over a [C,D,H,W] image.

    The image is zero-padded up to ``patch_size`` where needed and the result
    cropped back. ``order`` permutes the window visit order.
    """
    image = np.asarray(image)
    padded, pads = pad_to(image, patch_size)
    spatial = padded.shape[1:]
    starts = [window_origins(n, p, overlap) for n, p in zip(spatial, patch_size)]
    windows = list(itertools.product(*starts))
    if order is not None:
        windows = [windows[i] for i in order]
    weight = gaussian_weights(patch_size)
    acc = np.zeros((n_classes,) + spatial, dtype=np.float64)
    norm = np.zeros(spatial, dtype=np.float64)
    for k in range(0, len(windows), batch_size):
        chunk = windows[k : k + batch_size]
        sls = [tuple(slice(o, o + p) for o, p in zip(w, patch_size)) for w in chunk]
        batch = np.stack([padded[(slice(None),) + sl] for sl in sls])
        probs = predict(batch)
        for sl, pr in zip(sls, probs):
            acc[(slice(None),) + sl] += pr * weight
            norm[sl] += weight
    out = acc / norm
    crop = tuple(slice(lo, n - hi) for (lo, hi), n in zip(pads, spatial))
    out = out[(slice(None),) + crop]
    if return_weights:
        return out, norm[crop]
    return out


def tta_flips(
    predict_volume: Callable[[np.ndarray], np.ndarray],
    image: np.ndarray,
    flip_set=ALL_FLIPS,
) -> np.ndarray:
    """Average of inverse-flipped predictions over ``flip_set`` (tuples of spatial axes)."""
    flip_set = list(flip_set)
    if not flip_set:
        raise ValueError("flip_set must not be empty")
    total = None
    for axes in flip_set:
        if any(a not in (0, 1, 2) for a in axes):
            raise ValueError(f"flip axes must be spatial (0, 1, 2), got {axes}")
        pred = flip(predict_volume(flip(image, axes)), axes)
        total = pred if total is None else total + pred
    return total / len(flip_set)


def ensemble(maps: Sequence[np.ndarray]) -> np.ndarray:
    """Voxelwise mean of probability maps, then argmax (ties go to the lowest class)."""
    if not maps:
        raise ValueError("ensemble needs at least one probability map")
    shape = maps[0].shape
    for m in maps:
        if m.shape != shape:
            raise ValueError(f"probability maps differ in shape: {m.shape} vs {shape}")
    mean = np.mean(np.stack(maps), axis=0)
    return np.argmax(mean, axis=0).astype(np.uint8)


@dataclass
class EvalReport:
    per_case: list[dict] = field(default_factory=list)
    aggregate: dict[int, float] = field(default_factory=dict)
    counts: dict[int, tuple[int, int]] = field(default_factory=dict)  # class -> (sum |P n G|, sum |P| + |G|)

    @property
    def mean(self) -> float:
        return float(np.mean([self.aggregate[c] for c in CLASSES]))

    def records(self) -> list[dict]:
        """One record per case plus one aggregate record."""
        rows = [
            {"type": "case", "case_id": r["case_id"], "dsc_gtvp": r["dsc"][1], "dsc_gtvn": r["dsc"][2]}
            for r in self.per_case
        ]
        rows.append(
            {
                "type": "aggregate",
                "cases": len(self.per_case),
                "dsc_agg_gtvp": self.aggregate[1],
                "dsc_agg_gtvn": self.aggregate[2],
                "dsc_agg_mean": self.mean,
            }
        )
        return rows


def aggregated_dsc(cases: Sequence[tuple[np.ndarray, np.ndarray]], case_ids: Sequence[str] | None = None) -> EvalReport:
    """Per class: 2 * sum|P n G| / sum(|P| + |G|) pooled over cases."""
    report = EvalReport()
    inter = {c: 0 for c in CLASSES}
    sizes = {c: 0 for c in CLASSES}
    for k, (pred, ref) in enumerate(cases):
        pred, ref = np.asarray(pred), np.asarray(ref)
        if pred.shape != ref.shape:
            raise ValueError(f"case {k}: prediction shape {pred.shape} != reference {ref.shape}")
        dsc = {}
        for c in CLASSES:
            p, g = pred == c, ref == c
            i = int(np.count_nonzero(p & g))
            s = int(np.count_nonzero(p)) + int(np.count_nonzero(g))
            inter[c] += i
            sizes[c] += s
            dsc[c] = 2.0 * i / s if s else 1.0
        cid = case_ids[k] if case_ids is not None else f"case_{k:03d}"
        report.per_case.append({"case_id": cid, "dsc": dsc})
    for c in CLASSES:
        report.aggregate[c] = 2.0 * inter[c] / sizes[c] if sizes[c] else 1.0
        report.counts[c] = (inter[c], sizes[c])
    return report


def predict_case(models, image: np.ndarray, patch_size, overlap: float = 0.5, tta: bool = False) -> list[np.ndarray]:
    """Probability map of every model for one [C,D,H,W] image."""
    maps = []
    for model in models:
        predict = model_predictor(model)

        def volume_fn(img, predict=predict):
            return sliding_window(predict, img, patch_size, overlap)

        maps.append(tta_flips(volume_fn, image) if tta else volume_fn(image))
    return maps
