"""Core value types, the STPF binary feature store and the dataset manifest.

STPF layout (all little-endian)::

    offset  size  field
    0       4     magic  b"STPF"
    4       4     version (u32, = 1)
    8       8     T  frame count (u64)
    16      8     D  feature dim (u64)
    24      4*T*D float32 payload, row-major

The store holds only the feature matrix. Frame rate, timestamps and labels
live in the JSON manifest next to it.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import CorruptionError, DataError, FormatError

STPF_MAGIC = b"STPF"
STPF_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
HEADER_SIZE = _HEADER.size  # 24

MANIFEST_FORMAT = "stepkit-manifest"
MANIFEST_VERSION = 1


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """One modality's raw per-frame features for one video."""

    modality_name: str
    data: np.ndarray
    fps: float = 1.0
    timestamps: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim == 1:
            data = data[:, None]
        object.__setattr__(self, "data", _frozen(data))
        if self.timestamps is None:
            ts = np.arange(data.shape[0], dtype=np.float64) / float(self.fps)
        else:
            ts = np.array(self.timestamps, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "fps", float(self.fps))

    @property
    def frame_count(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def violations(self) -> list[str]:
        out = []
        name = self.modality_name
        if self.data.ndim != 2 or self.frame_count < 1 or self.dim < 1:
            out.append(f"shape: modality {name!r} has data shape {self.data.shape}")
        if not np.isfinite(self.data).all():
            bad = int(np.flatnonzero(~np.isfinite(self.data).all(axis=1))[0])
            out.append(f"non-finite: modality {name!r} frame {bad}")
        if not (self.fps > 0 and np.isfinite(self.fps)):
            out.append(f"fps: modality {name!r} has fps {self.fps}")
        ts = self.timestamps
        if ts.shape[0] != self.frame_count:
            out.append(
                f"timestamp length: modality {name!r} has {ts.shape[0]} timestamps "
                f"for {self.frame_count} frames"
            )
        elif ts.size and (ts[0] < 0 or np.any(np.diff(ts) <= 0) or not np.isfinite(ts).all()):
            out.append(f"timestamps: modality {name!r} timestamps not strictly increasing from >= 0")
        return out

    def __eq__(self, other):
        if not isinstance(other, FeatureSequence):
            return NotImplemented
        return (
            self.modality_name == other.modality_name
            and self.fps == other.fps
            and np.array_equal(self.data, other.data)
            and np.array_equal(self.timestamps, other.timestamps)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class VideoRecord:
    video_id: str
    modalities: dict[str, FeatureSequence]
    step_labels: Optional[np.ndarray] = None
    phase_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("step_labels", "phase_labels"):
            v = getattr(self, name)
            if v is not None:
                object.__setattr__(self, name, _frozen(np.array(v, dtype=np.int64).reshape(-1)))

    @property
    def modality_names(self) -> list[str]:
        return list(self.modalities)

    def _first(self) -> FeatureSequence:
        return next(iter(self.modalities.values()))

    @property
    def frame_count(self) -> int:
        return self._first().frame_count

    @property
    def timestamps(self) -> np.ndarray:
        return self._first().timestamps

    @property
    def fps(self) -> float:
        return self._first().fps

    def features(self, names: list[str]) -> np.ndarray:
        """Frame-wise concatenation of the named modalities (float32)."""
        return np.concatenate([self.modalities[n].data for n in names], axis=1)


@dataclass
class Manifest:
    records: list[VideoRecord]
    modality_names: list[str]
    root: Optional[Path] = field(default=None, compare=False)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def violations(self) -> list[str]:
        out = []
        for rec in self.records:
            missing = [m for m in self.modality_names if m not in rec.modalities]
            if missing:
                out.append(f"missing modality: video {rec.video_id!r} lacks {missing}")
            out.extend(f"{rec.video_id}: {v}" for v in validate_record(rec))
        return out

    @property
    def has_step_labels(self) -> bool:
        return bool(self.records) and all(r.step_labels is not None for r in self.records)

    @property
    def has_phase_labels(self) -> bool:
        return bool(self.records) and all(r.phase_labels is not None for r in self.records)


def validate_record(rec: VideoRecord) -> list[str]:
    """Return one message per broken invariant; empty list means the record is usable."""
    out: list[str] = []
    if not rec.modalities:
        return ["modalities: record has no modalities"]
    for seq in rec.modalities.values():
        out.extend(seq.violations())
    seqs = list(rec.modalities.values())
    ref = seqs[0]
    for seq in seqs[1:]:
        if seq.frame_count != ref.frame_count:
            out.append(
                f"frame-count mismatch: {ref.modality_name!r} has {ref.frame_count}, "
                f"{seq.modality_name!r} has {seq.frame_count}"
            )
        elif not np.array_equal(seq.timestamps, ref.timestamps):
            out.append(
                f"timestamp mismatch: {ref.modality_name!r} and {seq.modality_name!r} differ"
            )
    T = ref.frame_count
    for name in ("step_labels", "phase_labels"):
        v = getattr(rec, name)
        if v is not None and v.shape[0] != T:
            out.append(f"label length: {name} has {v.shape[0]} entries for {T} frames")
    if rec.step_labels is not None and np.any(rec.step_labels < -1):
        out.append("step labels: values below -1 (only -1 marks background)")
    return out


# -- STPF ------------------------------------------------------------------


def write_feature_store(seq: FeatureSequence, path) -> None:
    data = np.asarray(seq.data, dtype=np.float32)
    if data.ndim != 2:
        raise DataError(f"feature data must be 2-D, got shape {data.shape}")
    finite = np.isfinite(data).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise DataError(
            f"non-finite value in modality {seq.modality_name!r} at frame {bad}; refusing to write {path}"
        )
    T, D = data.shape
    header = _HEADER.pack(STPF_MAGIC, STPF_VERSION, T, D)
    payload = data.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_feature_store(path, modality_name: Optional[str] = None, fps: float = 1.0,
                       timestamps=None) -> FeatureSequence:
    """Read an STPF file. The file only carries features; fps/timestamps come from the caller."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, T, D = _HEADER.unpack_from(raw, 0)
    if magic != STPF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {STPF_MAGIC!r}")
    if version != STPF_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if T < 1 or D < 1:
        raise FormatError(f"{path}: invalid shape T={T} D={D}")
    expected = 4 * T * D
    have = len(raw) - HEADER_SIZE
    if have < expected:
        raise CorruptionError(f"{path}: payload truncated, header says {expected} bytes, found {have}")
    if have > expected:
        raise FormatError(f"{path}: shape mismatch, {have - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=T * D, offset=HEADER_SIZE).reshape(T, D)
    name = modality_name if modality_name is not None else Path(path).stem
    return FeatureSequence(name, data.astype(np.float32), fps=fps, timestamps=timestamps)


# -- manifest --------------------------------------------------------------


def _write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_dataset(manifest: Manifest, out_dir) -> Path:
    """Write STPF files, label JSON files and manifest.json under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in manifest.records:
        feats = {}
        for name in manifest.modality_names:
            fname = f"{rec.video_id}.{name}.stpf"
            write_feature_store(rec.modalities[name], out / fname)
            feats[name] = fname
        entry = {"video_id": rec.video_id, "fps": rec.fps, "features": feats}
        default_ts = np.arange(rec.frame_count) / rec.fps
        if not np.array_equal(rec.timestamps, default_ts):
            fname = f"{rec.video_id}.timestamps.json"
            _write_json([float(t) for t in rec.timestamps], out / fname)
            entry["timestamps"] = fname
        for key in ("step_labels", "phase_labels"):
            v = getattr(rec, key)
            if v is not None:
                fname = f"{rec.video_id}.{key}.json"
                _write_json([int(x) for x in v], out / fname)
                entry[key] = fname
        entries.append(entry)
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "modality_names": list(manifest.modality_names),
        "videos": entries,
    }
    path = out / "manifest.json"
    _write_json(doc, path)
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    if doc.get("format") != MANIFEST_FORMAT:
        raise FormatError(f"{path}: not a {MANIFEST_FORMAT} document")
    if doc.get("version") != MANIFEST_VERSION:
        raise FormatError(f"{path}: unsupported manifest version {doc.get('version')}")
    root = path.parent
    names = list(doc["modality_names"])
    records = []
    for entry in doc["videos"]:
        vid = entry["video_id"]
        fps = float(entry.get("fps", 1.0))
        ts = None
        if "timestamps" in entry:
            ts = _read_json(root / entry["timestamps"])
        feats = {}
        for name in names:
            rel = entry["features"].get(name)
            if rel is None:
                raise DataError(f"{path}: video {vid!r} has no file for modality {name!r}")
            fpath = root / rel
            if not fpath.exists():
                raise DataError(f"{path}: missing feature file {fpath}")
            feats[name] = read_feature_store(fpath, modality_name=name, fps=fps, timestamps=ts)
        labels = {k: _read_json(root / entry[k]) for k in ("step_labels", "phase_labels") if k in entry}
        records.append(VideoRecord(vid, feats, labels.get("step_labels"), labels.get("phase_labels")))
    return Manifest(records, names, root=root)


def _read_json(path):
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    with open(path) as fh:
        return json.load(fh)
