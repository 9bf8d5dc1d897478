"""Sensor datasets on disk: one SKLR file per sample plus an index CSV."""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from ..autodiff.checkpoint import atomic_write, load as load_arrays, save as save_arrays
from ..errors import DataError
from .synth import SensorSample
from .train import Split

INDEX_NAME = "index.csv"
LABELS_NAME = "labels.txt"


def save_sensor_dataset(directory, samples: Sequence[SensorSample], labels: Sequence[str],
                        split: Optional[Split] = None) -> None:
    root = Path(directory)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    part = {}
    if split is not None:
        for name in ("train", "val", "test"):
            for i in getattr(split, name):
                part[int(i)] = name
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["path", "label", "split", "subject"])
    for i, s in enumerate(samples):
        rel = f"samples/{i:06d}.sklr"
        save_arrays(root / rel, {"series": s.series})
        w.writerow([rel, labels[s.label], part.get(i, ""), s.subject_id])
    atomic_write(root / INDEX_NAME, buf.getvalue().encode("utf-8"))
    atomic_write(root / LABELS_NAME, ("\n".join(labels) + "\n").encode("utf-8"))


def load_sensor_dataset(directory) -> tuple[list[SensorSample], list[str], Optional[Split]]:
    root = Path(directory)
    index = root / INDEX_NAME
    if not index.exists():
        raise DataError(f"{os.fspath(root)}: no {INDEX_NAME}")
    labels_file = root / LABELS_NAME
    with open(index, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if labels_file.exists():
        labels = [ln for ln in labels_file.read_text(encoding="utf-8").splitlines() if ln]
    else:
        labels = sorted({r["label"] for r in rows})
    lookup = {name: i for i, name in enumerate(labels)}
    samples, parts = [], {"train": [], "val": [], "test": []}
    for i, row in enumerate(rows):
        if row["label"] not in lookup:
            raise DataError(f"{index}: row {i + 2} has unknown label {row['label']!r}")
        series = load_arrays(root / row["path"])["series"]
        samples.append(SensorSample(np.array(series), lookup[row["label"]], row["label"], row.get("subject", "")))
        if row.get("split") in parts:
            parts[row["split"]].append(i)
    split = None
    if all(parts.values()):
        split = Split(*(np.array(parts[k], dtype=np.int64) for k in ("train", "val", "test")))
    return samples, labels, split
