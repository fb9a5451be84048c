"""Synthetic head-and-neck-like phantoms.

Each case is an ellipsoidal body (about 100) on a dark background (below
10) carrying one or two bright GTVp blobs and up to three darker GTVn blobs.
Task-2 cases add a mid-RT scan in which every lesion has shrunk and drifted
slightly and has lower contrast; the pre-RT scan and its labels are emitted
as the already-registered prior.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

BODY_LEVEL = 100.0
PRE_OFFSETS = {1: 45.0, 2: -25.0}
MID_OFFSETS = {1: 22.0, 2: -16.0}
PRE_NOISE = 5.0
MID_NOISE = 7.0


@dataclass
class PhantomCase:
    case_id: str
    pre: np.ndarray
    pre_label: np.ndarray
    mid: np.ndarray | None = None
    mid_label: np.ndarray | None = None


def _grid(dims):
    return np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")


def _ellipsoid(grid, center, radii) -> np.ndarray:
    return sum(((g - c) / r) ** 2 for g, c, r in zip(grid, center, radii)) <= 1.0


def _blobs(rng, dims, body_center, body_radii, count, size_frac):
    blobs = []
    for _ in range(count):
        radii = [max(1.2, f * n * rng.uniform(0.8, 1.2)) for f, n in zip(size_frac, dims)]
        # keep lesions well inside the body
        center = [c + rng.uniform(-0.45, 0.45) * (r - rr) for c, r, rr in zip(body_center, body_radii, radii)]
        blobs.append((center, radii))
    return blobs


def _paint(grid, dims, blobs_by_class) -> np.ndarray:
    label = np.zeros(dims, dtype=np.uint8)
    for cls in (1, 2):
        for center, radii in blobs_by_class[cls]:
            region = _ellipsoid(grid, center, radii) & (label == 0)
            label[region] = cls
    return label


def _render(rng, body, label, offsets, noise) -> np.ndarray:
    img = rng.uniform(0.0, 6.0, body.shape)
    img[body] = BODY_LEVEL + rng.normal(0.0, noise, int(body.sum()))
    for cls, off in offsets.items():
        img[label == cls] += off
    return img.astype(np.float32)


def generate_case(rng, dims=(16, 48, 48), task: str = "task1", case_id: str = "case_000") -> PhantomCase:
    if min(dims) < 16:
        raise ValueError(f"phantom dims must be >= 16 per axis, got {dims}")
    if task not in ("task1", "task2"):
        raise ValueError(f"task must be task1 or task2, got {task!r}")
    grid = _grid(dims)
    center = [n / 2 - 0.5 + rng.uniform(-0.03, 0.03) * n for n in dims]
    radii = [n * rng.uniform(0.40, 0.45) for n in dims]
    body = _ellipsoid(grid, center, radii)
    blobs = {
        1: _blobs(rng, dims, center, radii, int(rng.integers(1, 3)), (0.18, 0.14, 0.14)),
        2: _blobs(rng, dims, center, radii, int(rng.integers(0, 4)), (0.14, 0.10, 0.10)),
    }
    pre_label = _paint(grid, dims, blobs) * body
    pre = _render(rng, body, pre_label, PRE_OFFSETS, PRE_NOISE)
    case = PhantomCase(case_id, pre, pre_label.astype(np.uint8))
    if task == "task2":
        shrunk = {
            cls: [
                (
                    [c + rng.uniform(-0.7, 0.7) for c in cen],
                    [r * rng.uniform(0.65, 0.9) for r in rad],
                )
                for cen, rad in items
            ]
            for cls, items in blobs.items()
        }
        mid_label = (_paint(grid, dims, shrunk) * body).astype(np.uint8)
        case.mid = _render(rng, body, mid_label, MID_OFFSETS, MID_NOISE)
        case.mid_label = mid_label
    return case


def generate_dataset(seed: int, n_cases: int, dims=(16, 48, 48), task: str = "task1") -> list[PhantomCase]:
    rng = np.random.default_rng(seed)
    return [generate_case(rng, dims, task, f"case_{i:03d}") for i in range(n_cases)]


def model_inputs(case: PhantomCase, task: str, channels: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Stack network input channels and pick the reference label.

    task1: [pre]; task2: [mid, registered pre, registered pre mask], or [mid]
    alone when ``channels`` is 1.
    """
    if task == "task1":
        return case.pre[None].copy(), case.pre_label
    stack = [case.mid, case.pre, case.pre_label.astype(np.float32)]
    return np.stack(stack[:channels]).astype(np.float32), case.mid_label
