"""Dataset manifests: a JSON index plus one raw little-endian blob per sample.

Manifest layout::

    {"profile": "wimans-amp" | "widar-phase-ratio" | "synthetic",
     "num_classes": K, "max_users": M,            # optional, inferred otherwise
     "preprocess": "amplitude" | "phase-ratio",    # synthetic profile only
     "receivers": 6, "target_T": 1200,             # phase-ratio only
     "eval_only_labels": false,
     "samples": [{"blob", "shape", "dtype": "f32" | "c64", "labels",
                  "occupancy", "environment_id", "carrier_hz",
                  "checksum_sha256"}, ...]}
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional, Sequence

import jsonschema
import numpy as np

from .csi import (WIDAR_PROFILE, WIMANS_PROFILE, CsiTensor, DomainDescriptor,
                  PaddedLabelVector, Sample, amplitude_preprocess,
                  phase_ratio_preprocess, to_canonical)

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["profile", "samples"],
    "properties": {
        "profile": {"enum": ["wimans-amp", "widar-phase-ratio", "synthetic"]},
        "num_classes": {"type": "integer", "minimum": 1},
        "max_users": {"type": "integer", "minimum": 1},
        "preprocess": {"enum": ["amplitude", "phase-ratio", "none"]},
        "receivers": {"type": "integer", "minimum": 1},
        "target_T": {"type": "integer", "minimum": 1},
        "split": {"enum": ["source", "target"]},
        "eval_only_labels": {"type": "boolean"},
        "sample_rate_hz": {"type": "number", "exclusiveMinimum": 0},
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["blob", "shape", "dtype", "labels", "occupancy",
                             "environment_id", "carrier_hz", "checksum_sha256"],
                "properties": {
                    "blob": {"type": "string"},
                    "shape": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                    "dtype": {"enum": ["f32", "c64"]},
                    "labels": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "occupancy": {"type": "integer", "minimum": 0},
                    "environment_id": {"type": "string"},
                    "carrier_hz": {"type": "number", "exclusiveMinimum": 0},
                    "checksum_sha256": {"type": "string", "pattern": "^[0-9a-f]{64}$"},
                },
            },
        },
    },
}

_DTYPES = {"f32": np.dtype("<f4"), "c64": np.dtype("<c8")}


class DatasetLoadError(RuntimeError):
    pass


class LabelAccessError(PermissionError):
    """Raised when adaptation code touches target labels."""


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _features_from_blob(arr: np.ndarray, dtype: str, meta: dict) -> tuple[np.ndarray, Optional[CsiTensor], int]:
    profile = meta["profile"]
    if dtype == "f32":
        if arr.ndim != 3 or arr.shape[0] != 1:
            raise ValueError(f"f32 blobs must be (1, a, b), got {arr.shape}")
        if profile == "wimans-amp":
            return to_canonical(arr), None, 0
        return np.ascontiguousarray(arr), None, 0

    raw = CsiTensor(arr, sample_rate_hz=meta.get("sample_rate_hz", 1000.0), carrier_hz=meta["carrier_hz"])
    mode = meta.get("preprocess") or ("amplitude" if profile == "wimans-amp" else "phase-ratio")
    if mode == "amplitude":
        strict = profile == "wimans-amp"
        feats = to_canonical(amplitude_preprocess(raw, WIMANS_PROFILE if strict else None))
        return feats, raw, 0
    if mode == "phase-ratio":
        strict = profile == "widar-phase-ratio"
        feats, bad = phase_ratio_preprocess(
            raw, receivers=meta.get("receivers", 6), target_T=meta.get("target_T", 1200),
            profile=WIDAR_PROFILE if strict else None, with_quality=True)
        return feats, raw, bad
    raise ValueError(f"cannot derive features with preprocess={mode!r}")


def load_dataset(manifest_path) -> list[Sample]:
    """Read every sample listed in a manifest, in manifest order."""
    manifest_path = Path(manifest_path)
    try:
        meta = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetLoadError(f"cannot read manifest {manifest_path}: {exc}") from exc
    try:
        jsonschema.validate(meta, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise DatasetLoadError(f"{manifest_path}: schema violation: {exc.message}") from exc

    entries = meta["samples"]
    K = meta.get("num_classes")
    if K is None and entries:
        K = max(max(e["labels"], default=0) for e in entries)
    split = meta.get("split", "source")
    root = manifest_path.parent
    out = []
    for i, e in enumerate(entries):
        where = f"sample {i} ({e['blob']})"
        path = root / e["blob"]
        try:
            data = path.read_bytes()
        except OSError as exc:
            raise DatasetLoadError(f"{where}: missing blob: {exc}") from exc
        if _sha256(data) != e["checksum_sha256"]:
            raise DatasetLoadError(f"{where}: checksum mismatch")
        dt = _DTYPES[e["dtype"]]
        expected = int(np.prod(e["shape"])) * dt.itemsize
        if len(data) != expected:
            raise DatasetLoadError(f"{where}: blob has {len(data)} bytes, shape {e['shape']} needs {expected}")
        arr = np.frombuffer(data, dtype=dt).reshape(e["shape"]).copy()
        try:
            feats, raw, bad = _features_from_blob(arr, e["dtype"], {**meta, "carrier_hz": e["carrier_hz"]})
            labels = PaddedLabelVector(tuple(e["labels"]), K)
            if labels.occupancy != e["occupancy"]:
                raise ValueError(f"occupancy {e['occupancy']} disagrees with labels {e['labels']}")
            dom = DomainDescriptor(e["environment_id"], float(e["carrier_hz"]), split)
            sample = Sample(feats.astype(np.float32, copy=False), labels, dom, raw=raw, quality_flags=bad)
        except ValueError as exc:
            raise DatasetLoadError(f"{where}: {exc}") from exc
        if out and sample.features.shape != out[0].features.shape:
            raise DatasetLoadError(f"{where}: feature shape {sample.features.shape} "
                                   f"differs from {out[0].features.shape}")
        out.append(sample)
    return out


def write_dataset(samples: Sequence[Sample], out_dir, profile: str = "synthetic", *,
                  name: str = "manifest.json", store: str = "raw", **header) -> Path:
    """Write samples as blobs plus a manifest; returns the manifest path.

    ``store="raw"`` writes the complex CSI (c64) and requires ``sample.raw``;
    ``store="features"`` writes the (1, F, T) float32 features.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(name).stem
    entries = []
    for i, s in enumerate(samples):
        if store == "raw":
            if s.raw is None:
                raise ValueError(f"sample {i} has no raw CSI to store")
            arr, dtype = np.ascontiguousarray(s.raw.values, dtype=_DTYPES["c64"]), "c64"
        else:
            arr, dtype = np.ascontiguousarray(s.features, dtype=_DTYPES["f32"]), "f32"
        blob = f"{stem}_{i:06d}.bin"
        data = arr.tobytes()
        (out_dir / blob).write_bytes(data)
        entries.append({
            "blob": blob,
            "shape": list(arr.shape),
            "dtype": dtype,
            "labels": list(s.labels.slots) if s.labels is not None else [],
            "occupancy": s.labels.occupancy if s.labels is not None else 0,
            "environment_id": s.domain.environment_id,
            "carrier_hz": float(s.domain.carrier_hz),
            "checksum_sha256": _sha256(data),
        })
    if samples and samples[0].labels is not None:
        header.setdefault("num_classes", samples[0].labels.num_classes)
        header.setdefault("max_users", samples[0].labels.M)
    manifest = {"profile": profile, **header, "samples": entries}
    jsonschema.validate(manifest, MANIFEST_SCHEMA)
    path = out_dir / name
    path.write_text(json.dumps(manifest, indent=1))
    return path


@dataclass
class LabeledArrays:
    """Stacked features and slot labels of a labeled split."""

    x: np.ndarray        # (N, 1, F, T) float32
    y: np.ndarray        # (N, M) int64, or (N,) for single-user
    num_classes: int

    def __len__(self):
        return len(self.x)

    def unlabeled(self) -> "UnlabeledView":
        return UnlabeledView(self.x)


class UnlabeledView:
    """Feature-only view handed to adaptation code.

    Any attempt to reach labels through the view trips ``label_access_count``
    and raises :class:`LabelAccessError`.
    """

    def __init__(self, x: np.ndarray):
        self._x = x
        self.label_access_count = 0

    @property
    def x(self) -> np.ndarray:
        return self._x

    @property
    def y(self):
        self.label_access_count += 1
        raise LabelAccessError("adaptation must not read target labels")

    labels = y

    def __len__(self):
        return len(self._x)

    def batches(self, batch_size: int, rng: Optional[np.random.Generator] = None) -> Iterator[np.ndarray]:
        idx = np.arange(len(self._x)) if rng is None else rng.permutation(len(self._x))
        for start in range(0, len(idx), batch_size):
            yield idx[start:start + batch_size]


def stack_samples(samples: Sequence[Sample], single_user: bool = False) -> LabeledArrays:
    if not samples:
        raise ValueError("no samples to stack")
    x = np.stack([s.features for s in samples]).astype(np.float32, copy=False)
    y = np.stack([s.labels.as_array() for s in samples])
    K = samples[0].labels.num_classes
    if single_user:
        if y.shape[1] != 1 or np.any(y == K):
            raise ValueError("single-user data needs exactly one occupied slot per sample")
        y = y[:, 0]
    return LabeledArrays(x, y, K)
