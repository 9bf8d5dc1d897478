"""On-disk storage of prepared windows: a SKLR record file plus an index CSV."""
from __future__ import annotations

import csv
import io
import os
from pathlib import Path
from typing import Sequence

import numpy as np

from ..autodiff import checkpoint
from ..errors import DataError
from .io import WindowedSample

INDEX_FIELDS = ("sample", "source", "offset", "activity", "subject")


def index_path(path) -> Path:
    return Path(path).with_suffix(".csv")


def save_corpus(path, samples: Sequence[WindowedSample]) -> None:
    records = {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(INDEX_FIELDS)
    for i, s in enumerate(samples):
        key = f"sample/{i:06d}/coords"
        records[key] = s.coords
        writer.writerow([key, s.source, s.offset, s.activity_label or "", s.subject_id or ""])
    checkpoint.save(path, records)
    checkpoint.atomic_write(index_path(path), buf.getvalue().encode("utf-8"))


def load_corpus(path) -> list[WindowedSample]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"corpus file {os.fspath(path)} not found")
    arrays = checkpoint.load(path)
    idx = index_path(path)
    rows = {}
    if idx.exists():
        with open(idx, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                rows[row["sample"]] = row
    out = []
    for key, coords in arrays.items():
        row = rows.get(key, {})
        out.append(WindowedSample(
            np.array(coords), source=row.get("source", ""), offset=int(row.get("offset", 0) or 0),
            activity_label=row.get("activity") or None, subject_id=row.get("subject") or None,
        ))
    return out
