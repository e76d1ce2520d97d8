"""Anomaly map from anomaly/counterpart pairs, fault-type matching and the HI series."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .bearing import BearingGeometry, characteristic_frequencies
from .errors import ConfigError, DegenerateError, EmptyInputError, ShapeError
from .signal import SampleSet, envelope_magnitudes


def envelope_differences(measured: SampleSet, counterparts: SampleSet) -> np.ndarray:
    """``|h_a - h_h|`` per aligned pair, shape ``(n, L/2 + 1)``."""
    if len(measured) != len(counterparts):
        raise ShapeError(f"{len(measured)} measured samples but {len(counterparts)} counterparts")
    if measured.sample_length != counterparts.sample_length:
        raise ShapeError(
            f"sample length {measured.sample_length} differs from counterpart length {counterparts.sample_length}"
        )
    return np.abs(envelope_magnitudes(measured.values) - envelope_magnitudes(counterparts.values))


@dataclass(frozen=True)
class AnomalyMap:
    pulse_index: int
    vector: np.ndarray
    bin_width_hz: float
    support_count: int
    band_halfwidth: int = 0

    @property
    def frequency_hz(self) -> float:
        return self.pulse_index * self.bin_width_hz

    def to_dict(self, match: "FaultMatch | None" = None) -> dict:
        return {
            "pulse_index": self.pulse_index,
            "frequency_hz": self.frequency_hz,
            "bin_width_hz": self.bin_width_hz,
            "support_count": self.support_count,
            "band_halfwidth": self.band_halfwidth,
            "num_bins": int(self.vector.shape[0]),
            "matched_type": match.matched_type if match else None,
            "candidates": match.candidate_freqs if match else {},
        }

    def save(self, path, match: "FaultMatch | None" = None) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(match), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "AnomalyMap":
        try:
            p, n, hw = int(d["pulse_index"]), int(d["num_bins"]), int(d.get("band_halfwidth", 0))
            return cls(p, one_hot(p, n, hw), float(d["bin_width_hz"]), int(d["support_count"]), hw)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"malformed anomaly map: {exc}") from exc

    @classmethod
    def load(cls, path) -> "AnomalyMap":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def one_hot(p: int, n: int, band_halfwidth: int = 0) -> np.ndarray:
    v = np.zeros(n)
    v[max(p - band_halfwidth, 0):p + band_halfwidth + 1] = 1.0
    return v


def build_anomaly_map(anomalies: SampleSet, counterparts: SampleSet, exclusion_floor_hz: float | None = None,
                      band_halfwidth: int = 0) -> AnomalyMap:
    """Argmax of the pair-averaged envelope difference over bins at or above the floor.

    The floor defaults to two bin widths.
    """
    if len(anomalies) == 0:
        raise EmptyInputError("no anomaly samples given")
    diffs = envelope_differences(anomalies, counterparts)
    bw = anomalies.sample_rate_hz / anomalies.sample_length
    floor = 2 * bw if exclusion_floor_hz is None else exclusion_floor_hz
    first = int(np.ceil(floor / bw - 1e-9))
    if first >= diffs.shape[1]:
        raise ConfigError(f"exclusion floor {floor} Hz leaves no searchable bins")
    mean = diffs.mean(axis=0)
    if not np.any(mean[first:] > 0):
        raise DegenerateError("anomaly samples and counterparts have identical envelope spectra; map is undefined")
    p = first + int(np.argmax(mean[first:]))
    votes = first + np.argmax(diffs[:, first:], axis=1)
    return AnomalyMap(p, one_hot(p, diffs.shape[1], band_halfwidth), bw, int(np.sum(votes == p)), band_halfwidth)


@dataclass(frozen=True)
class FaultMatch:
    candidate_freqs: dict[str, float]
    matched_type: str | None
    deviation_hz: float


def match_fault_type(amap: AnomalyMap, geometry: BearingGeometry, tolerance_bins: float = 1.5) -> FaultMatch:
    cands = characteristic_frequencies(geometry)
    # min over insertion order keeps the first (higher-priority) candidate on exact ties
    name = min(cands, key=lambda k: abs(cands[k] - amap.frequency_hz))
    dev = abs(cands[name] - amap.frequency_hz)
    matched = name if dev <= tolerance_bins * amap.bin_width_hz else None
    return FaultMatch(cands, matched, dev)


@dataclass
class HiSeries:
    values: np.ndarray
    measured_sample_ids: list[str]
    segment_counts: list[int]
    segment_values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != len(self.measured_sample_ids):
            raise ShapeError("HI values and ids differ in length")

    @property
    def per_sample_segments(self) -> int:
        return int(max(self.segment_counts)) if self.segment_counts else 0

    def __len__(self):
        return len(self.values)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["measured_sample_id", "hi"])
            for sid, v in zip(self.measured_sample_ids, self.values):
                w.writerow([sid, repr(float(v))])

    @classmethod
    def load_csv(cls, path) -> "HiSeries":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows and set(rows[0]) != {"measured_sample_id", "hi"}:
            raise ConfigError(f"{path}: expected columns measured_sample_id, hi")
        return cls(np.array([float(r["hi"]) for r in rows]), [r["measured_sample_id"] for r in rows],
                   [1] * len(rows))


def _align(run: SampleSet, counterparts: SampleSet) -> SampleSet:
    """Reorder counterparts to match the run using their ``counterpart_of`` keys, if present."""
    from .diffusion import sample_key

    if len(run) != len(counterparts):
        raise ShapeError(f"run has {len(run)} segments but {len(counterparts)} counterparts")
    keys = [d.get("counterpart_of") for d in counterparts.info]
    if any(k is None for k in keys):
        return counterparts
    pos = {k: i for i, k in enumerate(keys)}
    try:
        order = [pos[sample_key(s, g)] for s, g in zip(run.source_ids, run.segment_indices)]
    except KeyError as exc:
        raise ShapeError(f"no counterpart for segment {exc.args[0]}") from exc
    return counterparts.subset(order)


def hi_series(run: SampleSet, counterparts: SampleSet, amap: AnomalyMap) -> HiSeries:
    """``HI(n)``: mean over segments of measured sample ``n`` of ``<|h_a - h_h|, A>``."""
    counterparts = _align(run, counterparts)
    diffs = envelope_differences(run, counterparts)
    if diffs.shape[1] != amap.vector.shape[0]:
        raise ShapeError(f"map has {amap.vector.shape[0]} bins, spectra have {diffs.shape[1]}")
    seg = diffs @ amap.vector
    ids: list[str] = []
    groups: dict[str, list[int]] = {}
    for i, sid in enumerate(run.source_ids):
        if sid not in groups:
            groups[sid] = []
            ids.append(sid)
        groups[sid].append(i)
    values = np.array([seg[groups[s]].mean() for s in ids])
    return HiSeries(values, ids, [len(groups[s]) for s in ids], seg)
