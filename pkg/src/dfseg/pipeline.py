"""Dataset-level drivers behind the command-line subcommands.

Each function works on dataset directories (see :mod:`dfseg.dataset`) and is
deterministic for fixed inputs, seed and configuration.
"""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .dataset import IMAGE_KEYS, CaseRecord, load_case_arrays, read_manifest, write_manifest, write_phantoms
from .inference import EvalReport, aggregated_dsc, ensemble, predict_case
from .models import ModelConfig
from .phantom import generate_dataset
from .preprocess import GeometryLog, TARGET_SPACING, preprocess_case, restore_labels
from .trainer import Sample, load_config, load_model, run_fold, split_config
from .volume import Volume, read_volume, write_volume

log = logging.getLogger(__name__)

GEOMETRY = "geometry.json"
TASKS = {1: "task1", 2: "task2"}


def worker_count(n_jobs: int) -> int:
    """Thread pool size: DFSEG_THREADS if set, else the CPU count, never above ``n_jobs``."""
    env = os.environ.get("DFSEG_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    if cap < 1:
        raise ValueError(f"DFSEG_THREADS must be a positive integer, got {env!r}")
    return max(1, min(cap, n_jobs))


def _parallel_map(fn, items: list) -> list:
    workers = worker_count(len(items))
    if workers == 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


# ------------------------------------------------------------------- phantoms


def phantom_gen(out_dir, seed: int, n_cases: int, dims=(16, 48, 48), task: str = "task1", spacing=TARGET_SPACING) -> list[CaseRecord]:
    cases = generate_dataset(seed, n_cases, tuple(dims), task)
    return write_phantoms(out_dir, cases, task, tuple(spacing))


# -------------------------------------------------------------- preprocessing


def _preprocess_one(in_dir: Path, out_dir: Path, rec: CaseRecord, threshold, spacing, reference) -> CaseRecord:
    keys = IMAGE_KEYS[rec.task]
    images = [read_volume(in_dir / getattr(rec, k)) for k in keys]
    labels = [read_volume(in_dir / rec.label)] if rec.label else []
    mask_channels = tuple(i for i, k in enumerate(keys) if k.endswith("_mask"))
    pc = preprocess_case(images, labels, threshold, spacing, reference, mask_channels=mask_channels)
    case_dir = out_dir / rec.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for key, vol in zip(keys, pc.images):
        paths[key] = f"{rec.case_id}/{key}.dfsv"
        data = vol.data.astype(np.uint8) if key.endswith("_mask") else vol.data
        write_volume(out_dir / paths[key], vol.with_data(data))
    if pc.labels:
        paths["label"] = f"{rec.case_id}/label.dfsv"
        write_volume(out_dir / paths["label"], pc.labels[0])
    (case_dir / GEOMETRY).write_text(pc.geometry.to_json() + "\n")
    return CaseRecord(rec.case_id, rec.task, **paths)


def preprocess_dataset(in_dir, out_dir, threshold: float = 60.0, spacing=TARGET_SPACING, match_ref=None) -> list[CaseRecord]:
    """Preprocess every case of ``in_dir`` into ``out_dir`` with a geometry log per case."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    task, records, _ = read_manifest(in_dir)
    reference = read_volume(match_ref).data if match_ref is not None else None
    out_dir.mkdir(parents=True, exist_ok=True)
    spacing = tuple(float(s) for s in spacing)
    out = _parallel_map(lambda rec: _preprocess_one(in_dir, out_dir, rec, threshold, spacing, reference), records)
    write_manifest(out_dir, task, out, {"preprocessed": True, "threshold": threshold, "spacing": list(spacing)})
    return out


# ------------------------------------------------------------------- training


def load_samples(data_dir, channels: int) -> tuple[str, list[Sample]]:
    task, records, _ = read_manifest(data_dir)
    samples = []
    for rec in records:
        if rec.label is None:
            raise ValueError(f"case {rec.case_id} has no reference labels; cannot train on it")
        images, labels = load_case_arrays(data_dir, rec, channels)
        samples.append(Sample(images, labels, rec.case_id))
    return task, samples


def train(data_dir, out_dir, task: int, arch: str, fold: int, config_path, mixup: bool = False, pretrained=None):
    """Train one fold; checkpoints land in ``out_dir`` (best.ckpt, last.ckpt)."""
    values = load_config(config_path)
    values["arch"] = arch
    if arch == "dualflow":
        values["in_channels"] = 3
    else:
        values.setdefault("in_channels", 1 if task == 1 else 3)
    train_cfg, model_values = split_config(values, fold_id=fold, mixup=True if mixup else None)
    model_cfg = ModelConfig(**model_values)
    train_cfg.check_model(model_cfg)
    found, samples = load_samples(data_dir, model_cfg.in_channels)
    if found != TASKS[task]:
        raise ValueError(f"--task {task} given but {data_dir} holds a {found} dataset")
    if task == 1 and model_cfg.in_channels != 1:
        raise ValueError("task 1 models take exactly one input channel")
    trainer = run_fold(samples, fold, train_cfg, model_cfg, out_dir, pretrained)
    return trainer


# ------------------------------------------------------------------ inference


def infer(ckpts, in_dir, out_dir, tta: bool = False) -> list[str]:
    """Ensemble prediction for every case; labels are mapped back to the original grid."""
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    loaded = [load_model(p) for p in ckpts]
    if not loaded:
        raise ValueError("at least one checkpoint is required")
    models = [m for m, _ in loaded]
    channels = {m.config.in_channels for m in models}
    if len(channels) != 1:
        raise ValueError(f"checkpoints disagree on input channels: {sorted(channels)}")
    n_channels = channels.pop()
    train_cfg = loaded[0][1]["train_config"]
    patch, overlap = tuple(train_cfg["patch_size"]), train_cfg["overlap"]
    _, records, _ = read_manifest(in_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in records:
        images, _ = load_case_arrays(in_dir, rec, n_channels)
        labels = ensemble(predict_case(models, images, patch, overlap, tta))
        spacing = read_volume(in_dir / rec.image_paths()[0]).spacing
        geo_path = in_dir / rec.case_id / GEOMETRY
        if geo_path.is_file():
            geo = GeometryLog.from_json(geo_path.read_text())
            labels, spacing = restore_labels(labels, geo), geo.original_spacing
        write_volume(out_dir / f"{rec.case_id}.dfsv", Volume(labels.astype(np.uint8), spacing))
        written.append(rec.case_id)
    return written


# ----------------------------------------------------------------- evaluation


def label_files(directory) -> dict[str, Path]:
    """Case id -> label volume, from a dataset manifest or from ``<case_id>.dfsv`` files."""
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no such directory: {directory}")
    try:
        _, records, _ = read_manifest(directory)
    except FileNotFoundError:
        return {p.stem: p for p in sorted(directory.glob("*.dfsv"))}
    return {r.case_id: directory / r.label for r in records if r.label}


def evaluate(pred_dir, ref_dir, report_path=None) -> EvalReport:
    preds, refs = label_files(pred_dir), label_files(ref_dir)
    if not refs:
        raise ValueError(f"no reference label volumes in {ref_dir}")
    missing = sorted(set(refs) - set(preds))
    if missing:
        raise FileNotFoundError(f"no prediction for case(s): {', '.join(missing)}")
    ids = sorted(refs)
    pairs = [(read_volume(preds[c]).data, read_volume(refs[c]).data) for c in ids]
    report = aggregated_dsc(pairs, ids)
    if report_path is not None:
        with open(report_path, "w") as fh:
            for row in report.records():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return report
