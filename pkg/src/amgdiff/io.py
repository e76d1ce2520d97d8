"""Dataset container, run configuration and IMS raw-file ingestion.

A container is a directory holding ``manifest.json`` and ``data.f32`` (raw
little-endian float32, row-major ``total_segments x sample_length``). Each
manifest record is one measured sample owning ``segment_count`` contiguous
rows starting at row ``offset``.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .bearing import BearingGeometry, SimConfig
from .denoiser import DenoiserConfig
from .diffusion import GuidanceConfig, TrainConfig
from .errors import ConfigError, DataFormatError, MissingInputError, UnsupportedVersionError
from .signal import Label, SampleSet, window_crop

CONTAINER_VERSION = 1
MANIFEST_NAME = "manifest.json"
DATA_NAME = "data.f32"

# per-segment info keys promoted to record level in the manifest
_RECORD_KEYS = ("damage_level", "depth_um3", "snr_db", "counterpart_of", "file_name")


def _records(samples: SampleSet) -> list[dict[str, Any]]:
    records: list[dict[str, Any]] = []
    start = 0
    n = len(samples)
    while start < n:
        sid = samples.source_ids[start]
        end = start + 1
        while end < n and samples.source_ids[end] == sid:
            end += 1
        labels = set(samples.labels[start:end])
        if len(labels) != 1:
            raise DataFormatError(f"measured sample {sid!r} mixes labels {sorted(str(x) for x in labels)}")
        rec: dict[str, Any] = {"id": sid, "label": samples.labels[start].value, "segment_count": end - start,
                               "offset": start}
        segs = samples.segment_indices[start:end]
        if segs != list(range(end - start)):
            rec["segment_indices"] = list(segs)
        for key in _RECORD_KEYS:
            vals = [samples.info[i].get(key) for i in range(start, end)]
            if vals[0] is None:
                continue
            if key == "counterpart_of":
                vals = [v.rsplit("#", 1)[0] for v in vals]
            if any(v != vals[0] for v in vals):
                raise DataFormatError(f"measured sample {sid!r}: {key} differs between segments")
            v = vals[0]
            rec[key] = float(v) if isinstance(v, (float, np.floating)) else (int(v) if isinstance(v, (int, np.integer)) else v)
        records.append(rec)
        start = end
    return records


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, Label):
        return obj.value
    return obj


def write_container(samples: SampleSet, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format_version": CONTAINER_VERSION,
        "sample_length": samples.sample_length,
        "sample_rate_hz": float(samples.sample_rate_hz),
        "total_segments": len(samples),
        "data_file": DATA_NAME,
        "metadata": _jsonable(samples.metadata),
        "records": _records(samples),
    }
    (path / DATA_NAME).write_bytes(np.ascontiguousarray(samples.values, dtype="<f4").tobytes())
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return path


def _restore_float(v):
    return float(v) if isinstance(v, str) and v in ("inf", "-inf", "nan") else v


def read_container(path) -> SampleSet:
    path = Path(path)
    mpath = path / MANIFEST_NAME
    if not mpath.exists():
        raise MissingInputError(f"{path}: no {MANIFEST_NAME} (not a dataset container)")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{mpath}: invalid JSON ({exc})") from exc
    if manifest.get("format_version") != CONTAINER_VERSION:
        raise UnsupportedVersionError(f"{mpath}: container format_version {manifest.get('format_version')} unsupported")
    try:
        L = int(manifest["sample_length"])
        fs = float(manifest["sample_rate_hz"])
        total = int(manifest["total_segments"])
        records = manifest["records"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{mpath}: missing or malformed field {exc}") from exc
    dpath = path / manifest.get("data_file", DATA_NAME)
    if not dpath.exists():
        raise MissingInputError(f"{dpath}: data file missing")
    size = dpath.stat().st_size
    if size != total * L * 4:
        raise DataFormatError(f"{dpath}: expected {total * L * 4} bytes ({total} x {L} float32), found {size}")
    values = np.fromfile(dpath, dtype="<f4").astype(np.float32).reshape(total, L)

    labels, ids, segs, info = [], [], [], []
    cursor = 0
    for rec in records:
        if rec.get("offset") != cursor:
            raise DataFormatError(f"{mpath}: record {rec.get('id')!r} offset {rec.get('offset')} is not contiguous ({cursor})")
        count = int(rec["segment_count"])
        seg_idx = rec.get("segment_indices", list(range(count)))
        if len(seg_idx) != count:
            raise DataFormatError(f"{mpath}: record {rec['id']!r} segment_indices length mismatch")
        for s in seg_idx:
            labels.append(Label(rec["label"]))
            ids.append(rec["id"])
            segs.append(int(s))
            d = {k: _restore_float(rec[k]) for k in _RECORD_KEYS if k in rec}
            if "counterpart_of" in d:
                d["counterpart_of"] = f"{d['counterpart_of']}#{int(s)}"
            info.append(d)
        cursor += count
    if cursor != total:
        raise DataFormatError(f"{mpath}: records cover {cursor} segments, total_segments is {total}")
    meta = {k: _restore_float(v) for k, v in manifest.get("metadata", {}).items()}
    return SampleSet(values, fs, labels, ids, segs, info, meta)


# ---------------------------------------------------------------- run config

@dataclass(frozen=True)
class ScheduleSection:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    kind: str = "linear"


@dataclass(frozen=True)
class DetectSection:
    baseline_window: int | None = None
    k: float = 6.0
    consecutive_required: int = 3
    label_boundary: int | None = None


@dataclass(frozen=True)
class EvalSection:
    snr_list: tuple[float, ...] = (math.inf, 0.0, -5.0, -10.0, -20.0)
    seeds: tuple[int, ...] = (0, 1, 2)
    exclusion_floor_hz: float | None = None
    tolerance_bins: float = 1.5
    band_halfwidth: int = 0


_SECTIONS = {
    "sim": SimConfig,
    "schedule": ScheduleSection,
    "model": DenoiserConfig,
    "train": TrainConfig,
    "guidance": GuidanceConfig,
    "detect": DetectSection,
    "eval": EvalSection,
}


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = {}
    for k, v in data.items():
        if k == "geometry" and cls is SimConfig:
            v = _build(BearingGeometry, v, f"{where}.geometry")
        elif isinstance(v, list):
            v = tuple(float(x) if isinstance(x, str) else x for x in v)
        elif isinstance(v, str) and v in ("inf", "-inf"):
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    detect: DetectSection = field(default_factory=DetectSection)
    eval: EvalSection = field(default_factory=EvalSection)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        if not isinstance(data, dict):
            raise ConfigError("run config must be a JSON object")
        data = dict(data)
        version = data.pop("format_version", 1)
        if version != 1:
            raise UnsupportedVersionError(f"run config format_version {version} unsupported")
        unknown = sorted(set(data) - set(_SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config section(s) {unknown}; allowed: {sorted(_SECTIONS)}")
        return cls(**{name: _build(c, data[name], name) for name, c in _SECTIONS.items() if name in data})

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise MissingInputError(f"config file {p} not found")
        try:
            return cls.from_dict(json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from exc

    def to_dict(self) -> dict:
        out = {}
        for name in _SECTIONS:
            sec = getattr(self, name)
            out[name] = _jsonable({f.name: _dc_value(getattr(sec, f.name)) for f in fields(sec)})
        return out


def _dc_value(v):
    if is_dataclass(v):
        return {f.name: getattr(v, f.name) for f in fields(v)}
    return v


# ------------------------------------------------------------------ IMS raw

IMS_ROWS = 20480
IMS_SAMPLE_RATE_HZ = 20480.0
IMS_CHANNELS = {1: 8, 2: 4, 3: 4}


def ims_column(dataset_no: int, bearing_no: int) -> int:
    """Column holding ``bearing_no``. Datasets 2/3: bearing N is column N-1. Dataset 1 has
    two channels per bearing; the first (x) channel ``2(N-1)`` is used."""
    if dataset_no not in IMS_CHANNELS:
        raise ConfigError(f"IMS dataset number must be 1, 2 or 3, got {dataset_no}")
    if not 1 <= bearing_no <= 4:
        raise ConfigError(f"bearing number must be 1..4, got {bearing_no}")
    return 2 * (bearing_no - 1) if dataset_no == 1 else bearing_no - 1


def ims_files(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise MissingInputError(f"IMS directory {d} not found")
    files = sorted((p for p in d.iterdir() if p.is_file() and not p.name.startswith(".")), key=lambda p: p.name)
    if not files:
        raise MissingInputError(f"IMS directory {d} holds no files")
    return files


def read_ims_file(path, column: int) -> np.ndarray:
    path = Path(path)
    try:
        data = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataFormatError(f"{path.name}: non-numeric content ({exc})") from exc
    if data.shape[0] != IMS_ROWS:
        raise DataFormatError(f"{path.name}: expected {IMS_ROWS} rows, found {data.shape[0]}")
    if column >= data.shape[1]:
        raise DataFormatError(f"{path.name}: column {column} missing (file has {data.shape[1]} columns)")
    return data[:, column]


def ims_import(directory, dataset_no: int, bearing_no: int, segment_len: int = 1024,
               healthy_first: int = 0, anomaly_last: int = 0, limit: int | None = None) -> SampleSet:
    """Segment every raw file of one bearing, in lexicographic (timestamp) file order.

    The first ``healthy_first`` files are labelled Healthy and the last
    ``anomaly_last`` Anomaly; everything else is Unlabeled.
    """
    col = ims_column(dataset_no, bearing_no)
    files = ims_files(directory)
    if limit is not None:
        files = files[:limit]
    n = len(files)
    if healthy_first + anomaly_last > n:
        raise ConfigError(f"healthy_first + anomaly_last = {healthy_first + anomaly_last} exceeds {n} files")
    parts = []
    for i, f in enumerate(files):
        label = Label.HEALTHY if i < healthy_first else Label.ANOMALY if i >= n - anomaly_last else Label.UNLABELED
        seg = window_crop(read_ims_file(f, col), segment_len, segment_len, IMS_SAMPLE_RATE_HZ, f.name, label)
        for d in seg.info:
            d["file_name"] = f.name
        parts.append(seg)
    return SampleSet.concat(parts, source="ims", dataset_no=dataset_no, bearing_no=bearing_no,
                            segment_len=segment_len, directory=os.fspath(directory))
