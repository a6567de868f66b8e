"""On-disk dataset format.

A dataset is a directory::

    manifest.json    format tag, version, counts, file checksums, generator metadata
    labels.jsonl     one JSON record per instance, in instance order
    features.bin     raw feature tensor, C order, dtype and shape in the manifest

Each ``labels.jsonl`` record is
``{"id", "ranks", "significance", "factors", "boxes"}``; NaN values are
written as ``null``, ``factors`` maps factor name to a length-K list and
``boxes`` (images only) is a length-K list of ``[row, col, h, w]`` or null.
Floats are written with ``repr`` precision, so a round trip is exact.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path

import numpy as np

from ..data import Dataset

FORMAT = "mlrank-dataset"
VERSION = 1


class DatasetFormatError(ValueError):
    pass


class VersionMismatch(DatasetFormatError):
    pass


class ChecksumError(DatasetFormatError):
    pass


class RecordParseError(DatasetFormatError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _nullable(values) -> list:
    return [None if (isinstance(v, float) and math.isnan(v)) else v for v in values]


def _floats(values) -> np.ndarray:
    return np.array([np.nan if v is None else float(v) for v in values], dtype=float)


def _records(ds: Dataset):
    for i in range(len(ds)):
        rec = {
            "id": i,
            "ranks": [int(r) for r in ds.ranks[i]],
            "significance": _nullable([float(v) for v in ds.significance[i]]),
            "factors": {k: _nullable([float(v) for v in arr[i]]) for k, arr in sorted(ds.factors.items())},
        }
        if ds.boxes is not None:
            rec["boxes"] = [None if b[0] < 0 else [int(v) for v in b] for b in ds.boxes[i]]
        yield json.dumps(rec, sort_keys=True)


def write_dataset(ds: Dataset, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    labels = ("\n".join(_records(ds)) + "\n").encode() if len(ds) else b""
    feats = np.ascontiguousarray(ds.features)
    dtype = feats.dtype.newbyteorder("<") if feats.dtype.itemsize > 1 else feats.dtype
    blob = feats.astype(dtype).tobytes()
    (path / "labels.jsonl").write_bytes(labels)
    (path / "features.bin").write_bytes(blob)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "n": len(ds),
        "K": ds.K,
        "features": {"file": "features.bin", "dtype": dtype.str, "shape": list(feats.shape), "sha256": _sha256(blob)},
        "labels": {"file": "labels.jsonl", "sha256": _sha256(labels)},
        "has_boxes": ds.boxes is not None,
        "meta": ds.meta,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{path}: no manifest.json") from None
    if manifest.get("format") != FORMAT:
        raise DatasetFormatError(f"{path}: not an {FORMAT} directory")
    if manifest.get("version") != VERSION:
        raise VersionMismatch(f"{path}: dataset format version {manifest.get('version')}, reader supports {VERSION}")
    return manifest


def read_dataset(path, verify: bool = True) -> Dataset:
    path = Path(path)
    manifest = read_manifest(path)
    labels_path = path / manifest["labels"]["file"]
    labels = labels_path.read_bytes()
    blob = (path / manifest["features"]["file"]).read_bytes()
    if verify:
        if _sha256(labels) != manifest["labels"]["sha256"]:
            raise ChecksumError(f"{labels_path}: checksum mismatch")
        if _sha256(blob) != manifest["features"]["sha256"]:
            raise ChecksumError(f"{path / manifest['features']['file']}: checksum mismatch")
    n, K = manifest["n"], manifest["K"]
    feats = np.frombuffer(blob, dtype=np.dtype(manifest["features"]["dtype"])).reshape(manifest["features"]["shape"])
    feats = feats.astype(feats.dtype.newbyteorder("="))
    ranks = np.zeros((n, K), dtype=np.int64)
    sig = np.full((n, K), np.nan)
    factors: dict[str, np.ndarray] = {}
    boxes = np.full((n, K, 4), -1, dtype=np.int64) if manifest.get("has_boxes") else None
    lines = labels.decode().splitlines()
    if len(lines) != n:
        raise DatasetFormatError(f"{labels_path}: manifest declares {n} records, file has {len(lines)}")
    for line_no, line in enumerate(lines, start=1):
        try:
            rec = json.loads(line)
            i = rec["id"]
            if i != line_no - 1:
                raise ValueError(f"record id {i} out of order")
            if len(rec["ranks"]) != K or len(rec["significance"]) != K:
                raise ValueError(f"expected {K} entries per record")
            ranks[i] = rec["ranks"]
            sig[i] = _floats(rec["significance"])
            for name, vals in rec["factors"].items():
                factors.setdefault(name, np.full((n, K), np.nan))[i] = _floats(vals)
            if boxes is not None:
                for j, b in enumerate(rec["boxes"]):
                    if b is not None:
                        boxes[i, j] = b
        except (ValueError, KeyError, TypeError) as exc:
            raise RecordParseError(labels_path, line_no, str(exc)) from None
    return Dataset(features=feats, ranks=ranks, significance=sig, factors=factors, meta=manifest["meta"], boxes=boxes)
