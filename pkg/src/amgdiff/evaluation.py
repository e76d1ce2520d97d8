"""Threshold detection, similarity and ranking metrics, and the SNR sweep harness."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, DegenerateError, ShapeError


@dataclass(frozen=True)
class DetectionResult:
    threshold_upper: float
    threshold_lower: float
    baseline_mean: float
    baseline_std: float
    baseline_window: int
    first_detection_index: int | None
    consecutive_required: int
    k: float

    def to_dict(self) -> dict:
        return asdict(self)


def detect(hi, baseline_window: int, k: float = 6.0, consecutive_required: int = 3) -> DetectionResult:
    """First index ``n >= M`` that opens a run of ``consecutive_required`` values outside ``mu +- k sigma``."""
    values = np.asarray(getattr(hi, "values", hi), dtype=np.float64)
    M = int(baseline_window)
    if M < 2 or M >= len(values):
        raise ConfigError(f"baseline window M={M} must satisfy 2 <= M < N={len(values)}")
    if consecutive_required < 1 or k <= 0:
        raise ConfigError("consecutive_required >= 1 and k > 0 required")
    mu = float(values[:M].mean())
    sigma = float(values[:M].std())
    if sigma == 0:
        raise DegenerateError("baseline HI has zero spread; thresholds are undefined")
    upper, lower = mu + k * sigma, mu - k * sigma
    outside = (values > upper) | (values < lower)
    first, run = None, 0
    for n in range(M, len(values)):
        run = run + 1 if outside[n] else 0
        if run == consecutive_required:
            first = n - consecutive_required + 1
            break
    return DetectionResult(upper, lower, mu, sigma, M, first, consecutive_required, k)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"vectors differ in length: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ShapeError("empty vectors")
    return a, b


def cosine(a, b) -> float:
    a, b = _pair(a, b)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateError("cosine similarity of a zero-norm vector is undefined")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def pearson(a, b) -> float:
    a, b = _pair(a, b)
    if a.size < 2:
        raise ShapeError("pearson needs at least two points")
    ac, bc = a - a.mean(), b - b.mean()
    na, nb = np.linalg.norm(ac), np.linalg.norm(bc)
    if na == 0 or nb == 0:
        raise DegenerateError("pearson correlation of a constant vector is undefined")
    return float(np.clip(ac @ bc / (na * nb), -1.0, 1.0))


def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s, y = _pair(scores, labels)
    if not np.all((y == 0) | (y == 1)):
        raise ContractError("labels must be binary (0/1)")
    y = y.astype(bool)
    if y.all() or not y.any():
        raise DegenerateError("ranking metrics need both positive and negative labels")
    return s, y


def _midranks(s: np.ndarray) -> np.ndarray:
    order = np.argsort(s, kind="mergesort")
    sorted_s = s[order]
    ranks = np.empty(len(s))
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_s[j + 1] == sorted_s[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Mann-Whitney statistic with tied pairs counted as 1/2."""
    s, y = _binary(scores, labels)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    r = _midranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Step-interpolated area: sum over distinct thresholds of ``(R_k - R_{k-1}) P_k``."""
    s, y = _binary(scores, labels)
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    distinct = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # last index of each tie group
    tp = np.cumsum(y)[distinct]
    predicted = distinct + 1
    precision = tp / predicted
    recall = tp / y.sum()
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


@dataclass(frozen=True)
class MetricReport:
    auroc: float | None
    auprc: float | None
    cosine: float | None
    pearson: float | None
    labels_source: str

    def __post_init__(self):
        for name, lo in (("auroc", 0.0), ("auprc", 0.0), ("cosine", -1.0), ("pearson", -1.0)):
            v = getattr(self, name)
            if v is not None and (math.isnan(v) or not lo <= v <= 1.0):
                raise ContractError(f"{name}={v} outside its valid range")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SweepRow:
    snr_db: float
    seed: int
    cosine: float
    pearson: float
    level_means: tuple[float, ...] = ()


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "cosine", "pearson", "seed"])
        for r in rows:
            w.writerow([r.snr_db, repr(r.cosine), repr(r.pearson), r.seed])


def level_means(hi: np.ndarray, levels: np.ndarray) -> tuple[float, ...]:
    return tuple(float(hi[levels == lv].mean()) for lv in np.unique(levels))


def snr_sweep(model, schedule, samples, truth, amap, guidance, snr_list, seeds=(0,), noise_seed_base: int = 1000,
              progress=None) -> list[SweepRow]:
    """For each SNR and seed: inject noise, regenerate counterparts, rebuild HI, compare to depth.

    The anomaly map is held fixed (it is built once from the clean training anomalies).
    Noise seed is ``noise_seed_base + seed``; the generation seed is ``guidance.seed + seed``.
    """
    from dataclasses import replace

    from .anomaly import hi_series
    from .diffusion import generate_healthy_counterpart
    from .signal import inject_noise

    if len(truth) != len(samples):
        raise ShapeError(f"ground truth has {len(truth)} entries for {len(samples)} samples")
    rows = []
    for snr in snr_list:
        for seed in seeds:
            noisy = inject_noise(samples, snr, noise_seed_base + seed)
            cp = generate_healthy_counterpart(model, noisy, schedule, replace(guidance, seed=guidance.seed + seed))
            hi = hi_series(noisy, cp, amap).values
            row = SweepRow(float(snr), int(seed), cosine(hi, truth.per_sample_depth),
                           pearson(hi, truth.per_sample_depth), level_means(hi, truth.damage_level))
            rows.append(row)
            if progress:
                progress(row)
    return rows
