"""Binary record files plus a JSON manifest.

``records.bin`` holds records back to back; each record is a fixed sequence
of serialized tensors (the field order is listed in the manifest).
``manifest.json`` carries field names, per-record offsets, per-class counts,
the seed and a config hash.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .tensor import deserialize, serialize


def write_records(out_dir: str | Path, fields: Sequence[str], records: Iterable[Sequence[np.ndarray]],
                  labels: Sequence[int], n_classes: int, extra: dict | None = None) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    offsets = []
    pos = 0
    with open(out_dir / "records.bin", "wb") as fh:
        for rec in records:
            if len(rec) != len(fields):
                raise ValueError(f"record has {len(rec)} tensors, manifest declares {len(fields)}")
            offsets.append(pos)
            for arr in rec:
                buf = serialize(np.asarray(arr, dtype=np.float64))
                fh.write(buf)
                pos += len(buf)
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).tolist()
    manifest = {"fields": list(fields), "count": len(offsets), "offsets": offsets,
                "class_counts": counts, **(extra or {})}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def read_records(out_dir: str | Path) -> tuple[list[dict[str, np.ndarray]], dict]:
    out_dir = Path(out_dir)
    manifest = json.loads((out_dir / "manifest.json").read_text())
    blob = (out_dir / "records.bin").read_bytes()
    out = []
    for off in manifest["offsets"]:
        rec = {}
        for name in manifest["fields"]:
            t, off = deserialize(blob, off)
            rec[name] = t.data
        out.append(rec)
    return out, manifest
