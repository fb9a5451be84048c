"""Case records and the on-disk dataset layout.

A dataset directory holds ``dataset.json`` plus one sub-directory per case
with ``.dfsv`` volumes (and ``geometry.json`` once preprocessed).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .phantom import PhantomCase
from .volume import Volume, read_volume, write_volume

MANIFEST = "dataset.json"
IMAGE_KEYS = {"task1": ("pre",), "task2": ("mid", "pre_reg", "pre_reg_mask")}


@dataclass
class CaseRecord:
    case_id: str
    task: str
    pre: str | None = None
    mid: str | None = None
    pre_reg: str | None = None
    pre_reg_mask: str | None = None
    label: str | None = None

    def __post_init__(self):
        if self.task not in IMAGE_KEYS:
            raise ValueError(f"unknown task tag {self.task!r}")
        missing = [k for k in IMAGE_KEYS[self.task] if getattr(self, k) is None]
        if missing:
            raise ValueError(f"case {self.case_id}: {self.task} record is missing {', '.join(missing)}")

    def image_paths(self, channels: int | None = None) -> list[str]:
        keys = IMAGE_KEYS[self.task]
        return [getattr(self, k) for k in keys[: channels or len(keys)]]


def write_manifest(root: Path, task: str, records: list[CaseRecord], extra: dict | None = None) -> None:
    doc = {"task": task, "cases": [asdict(r) for r in records]}
    if extra:
        doc.update(extra)
    (Path(root) / MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_manifest(root) -> tuple[str, list[CaseRecord], dict]:
    path = Path(root) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {root}")
    doc = json.loads(path.read_text())
    records = [CaseRecord(**c) for c in doc["cases"]]
    return doc["task"], records, doc


def write_phantoms(root, cases: list[PhantomCase], task: str, spacing) -> list[CaseRecord]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for case in cases:
        d = root / case.case_id
        d.mkdir(exist_ok=True)
        files = {"pre": case.pre, "label": case.pre_label}
        if task == "task2":
            files = {
                "pre": case.pre,
                "mid": case.mid,
                "pre_reg": case.pre,
                "pre_reg_mask": case.pre_label,
                "label": case.mid_label,
            }
        rec = {}
        for key, arr in files.items():
            name = f"{case.case_id}/{key}.dfsv"
            write_volume(root / name, Volume(arr, spacing))
            rec[key] = name
        records.append(CaseRecord(case.case_id, task, **rec))
    write_manifest(root, task, records)
    return records


def load_case_arrays(root, rec: CaseRecord, channels: int | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Stack the record's image channels ([C,D,H,W] float32) and load its labels."""
    root = Path(root)
    images = np.stack([read_volume(root / p).data.astype(np.float32) for p in rec.image_paths(channels)])
    labels = read_volume(root / rec.label).data.astype(np.uint8) if rec.label else None
    return images, labels
