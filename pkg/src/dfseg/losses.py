"""Segmentation losses: cross entropy, soft Dice, the deep-supervised sum and
the soft-target cross entropy used for MixUp samples."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

DICE_SMOOTH = 1e-5
FOREGROUND = (1, 2)


def one_hot(labels: np.ndarray, n_classes: int = 3, dtype=np.float32) -> np.ndarray:
    """[N,D,H,W] integer labels -> [N,C,D,H,W] one-hot."""
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], n_classes) + labels.shape[1:], dtype=dtype)
    np.put_along_axis(out, labels[:, None].astype(np.intp), 1, axis=1)
    return out


def _target_array(target, logits: Tensor) -> np.ndarray:
    arr = target.data if isinstance(target, Tensor) else np.asarray(target)
    if arr.shape != logits.shape:
        raise ValueError(f"target shape {arr.shape} does not match logits {logits.shape}")
    return arr.astype(logits.dtype, copy=False)


def _check_one_hot(arr: np.ndarray) -> None:
    if not np.isin(arr, (0, 1)).all() or not np.all(arr.sum(axis=1) == 1):
        raise ValueError("target is not one-hot over the class axis")


def soft_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over voxels of -sum_c target_c * log softmax_c."""
    arr = _target_array(target, logits)
    logp = T.log_softmax_channel(logits)
    voxels = arr.size // arr.shape[1]
    return T.sum(logp * (-arr)) * (1.0 / voxels)


def cross_entropy(logits: Tensor, target_onehot) -> Tensor:
    arr = _target_array(target_onehot, logits)
    _check_one_hot(arr)
    return soft_cross_entropy(logits, arr)


def soft_dice(logits: Tensor, target_onehot, smooth: float = DICE_SMOOTH) -> Tensor:
    """1 - mean over GTVp/GTVn of (2 sum(p g) + s) / (sum p + sum g + s).

    Sums run over the whole batch and all voxels.
    """
    arr = _target_array(target_onehot, logits)
    probs = T.softmax_channel(logits)
    axes = (0,) + tuple(range(2, logits.ndim))
    inter = T.sum(probs * arr, axis=axes)
    psum = T.sum(probs, axis=axes)
    gsum = arr.sum(axis=axes, dtype=np.float64).astype(logits.dtype)
    ratio = (inter * 2.0 + smooth) / (psum + gsum + smooth)
    mask = np.zeros(logits.shape[1], dtype=logits.dtype)
    mask[list(FOREGROUND)] = 1.0 / len(FOREGROUND)
    return 1.0 - T.sum(ratio * mask)


def supervision_weights(levels: int) -> list[float]:
    return [1.0 / 2**d for d in range(levels)]


def deep_supervised_loss(logit_levels: Sequence[Tensor], pyramid: Sequence) -> Tensor:
    """sum_d 2^-d (CE_d + Dice_d); level 0 is full resolution."""
    if len(logit_levels) != len(pyramid):
        raise ValueError(
            f"got {len(logit_levels)} logit levels but {len(pyramid)} label levels"
        )
    total = None
    for w, logits, target in zip(supervision_weights(len(pyramid)), logit_levels, pyramid):
        term = (cross_entropy(logits, target) + soft_dice(logits, target)) * w
        total = term if total is None else total + term
    return total


def mixup_loss(logits: Tensor, mixed_target) -> Tensor:
    """Soft-target cross entropy at full resolution; no deep supervision."""
    arr = _target_array(mixed_target, logits)
    if np.abs(arr.sum(axis=1) - 1.0).max() > 1e-5:
        raise ValueError("mixed target does not sum to 1 over classes")
    if arr.min() < 0:
        raise ValueError("mixed target has negative entries")
    return soft_cross_entropy(logits, arr)


def downsample_labels(labels: np.ndarray, factor: tuple[int, int, int]) -> np.ndarray:
    """Nearest-neighbour decimation of [N,D,H,W] labels by integer factors."""
    fz, fy, fx = factor
    return np.ascontiguousarray(labels[:, ::fz, ::fy, ::fx])


def label_pyramid(labels: np.ndarray, strides: Sequence[tuple[int, int, int]], n_classes: int = 3, dtype=np.float32) -> list[np.ndarray]:
    """One-hot targets for every supervision level from full-resolution labels."""
    return [one_hot(downsample_labels(labels, s), n_classes, dtype) for s in strides]
