"""Fixed-length vibration samples, radix-2 FFT, Hilbert envelope and noise injection.

All transforms operate on the last axis and accept batched input
(``(..., L)`` arrays), so a whole sample set can be processed in one call.
"""
from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field, replace
from typing import Any, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DegenerateError, EmptyInputError, ShapeError


class Label(str, enum.Enum):
    HEALTHY = "healthy"
    ANOMALY = "anomaly"
    UNLABELED = "unlabeled"


@dataclass(frozen=True)
class VibrationSample:
    values: np.ndarray
    sample_rate_hz: float
    label: Label = Label.UNLABELED
    source_id: str = ""
    segment_index: int = 0
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("sample values must be finite")


@dataclass
class SampleSet:
    """An ordered collection of equal-length samples stored as one ``(n, L)`` float32 array.

    ``info`` holds per-sample extras (``damage_level``, ``depth_um3``,
    ``counterpart_of``, ``norm_mean``...). ``metadata`` is set-level.
    """

    values: np.ndarray
    sample_rate_hz: float
    labels: list[Label]
    source_ids: list[str]
    segment_indices: list[int]
    info: list[dict[str, Any]] = field(default_factory=list)
    metadata: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float32)
        if self.values.ndim != 2:
            raise ShapeError(f"SampleSet values must be 2-D (n, L), got shape {self.values.shape}")
        n = self.values.shape[0]
        if not self.info:
            self.info = [{} for _ in range(n)]
        self.labels = [Label(lb) for lb in self.labels]
        for name in ("labels", "source_ids", "segment_indices", "info"):
            if len(getattr(self, name)) != n:
                raise ShapeError(f"{name} has {len(getattr(self, name))} entries for {n} samples")
        if self.sample_rate_hz <= 0:
            raise ContractError(f"sample_rate_hz must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.values)):
            raise ContractError("sample values must be finite")

    @property
    def sample_length(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> VibrationSample:
        return VibrationSample(
            values=self.values[i],
            sample_rate_hz=self.sample_rate_hz,
            label=self.labels[i],
            source_id=self.source_ids[i],
            segment_index=self.segment_indices[i],
            info=dict(self.info[i]),
        )

    @property
    def samples(self) -> list[VibrationSample]:
        return [self[i] for i in range(len(self))]

    def subset(self, idx: Sequence[int] | np.ndarray) -> "SampleSet":
        idx = np.asarray(idx, dtype=int)
        return SampleSet(
            values=self.values[idx],
            sample_rate_hz=self.sample_rate_hz,
            labels=[self.labels[i] for i in idx],
            source_ids=[self.source_ids[i] for i in idx],
            segment_indices=[self.segment_indices[i] for i in idx],
            info=[dict(self.info[i]) for i in idx],
            metadata=dict(self.metadata),
        )

    def with_values(self, values: np.ndarray, **metadata) -> "SampleSet":
        """Copy with replaced values (same provenance); ``metadata`` entries are merged in."""
        if values.shape != self.values.shape:
            raise ShapeError(f"expected values of shape {self.values.shape}, got {values.shape}")
        return replace(
            self,
            values=values,
            labels=list(self.labels),
            source_ids=list(self.source_ids),
            segment_indices=list(self.segment_indices),
            info=[dict(d) for d in self.info],
            metadata={**self.metadata, **metadata},
        )

    def where(self, label: Label) -> np.ndarray:
        return np.array([i for i, lb in enumerate(self.labels) if lb == label], dtype=int)

    @classmethod
    def concat(cls, sets: Sequence["SampleSet"], **metadata) -> "SampleSet":
        if not sets:
            raise EmptyInputError("cannot concatenate zero sample sets")
        first = sets[0]
        for s in sets[1:]:
            if s.sample_length != first.sample_length or s.sample_rate_hz != first.sample_rate_hz:
                raise ShapeError(
                    f"incompatible sets: L={s.sample_length} fs={s.sample_rate_hz} vs "
                    f"L={first.sample_length} fs={first.sample_rate_hz}"
                )
        return cls(
            values=np.concatenate([s.values for s in sets]),
            sample_rate_hz=first.sample_rate_hz,
            labels=[lb for s in sets for lb in s.labels],
            source_ids=[x for s in sets for x in s.source_ids],
            segment_indices=[x for s in sets for x in s.segment_indices],
            info=[dict(d) for s in sets for d in s.info],
            metadata=metadata,
        )


@dataclass(frozen=True)
class Spectrum:
    magnitudes: np.ndarray
    bin_width_hz: float

    @property
    def frequencies_hz(self) -> np.ndarray:
        return np.arange(self.magnitudes.shape[-1]) * self.bin_width_hz


@dataclass(frozen=True)
class AnalyticSignal:
    real_part: np.ndarray
    imag_part: np.ndarray
    magnitude: np.ndarray


def is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def require_power_of_two(n: int, minimum: int = 2) -> None:
    if n < minimum or not is_power_of_two(n):
        raise ConfigError(f"sample length must be a power of two >= {minimum}, got {n}")


def window_crop(
    raw: np.ndarray,
    window_len: int,
    stride: int,
    sample_rate_hz: float = 1.0,
    source_id: str = "",
    label: Label = Label.UNLABELED,
) -> SampleSet:
    """Cut ``raw`` into windows ``[k*stride, k*stride + window_len)``."""
    raw = np.asarray(raw)
    if window_len < 2 or stride < 1:
        raise ContractError(f"need window_len >= 2 and stride >= 1, got {window_len}, {stride}")
    if raw.ndim != 1:
        raise ShapeError(f"raw signal must be 1-D, got shape {raw.shape}")
    if len(raw) < window_len:
        raise EmptyInputError(f"raw signal has {len(raw)} points, shorter than window_len={window_len}")
    count = (len(raw) - window_len) // stride + 1
    starts = np.arange(count) * stride
    values = raw[starts[:, None] + np.arange(window_len)]
    return SampleSet(
        values=values,
        sample_rate_hz=sample_rate_hz,
        labels=[label] * count,
        source_ids=[source_id] * count,
        segment_indices=list(range(count)),
    )


@functools.lru_cache(maxsize=None)
def _bit_reversal(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


@functools.lru_cache(maxsize=None)
def _twiddles(m: int) -> np.ndarray:
    k = np.arange(m)
    return np.cos(np.pi * k / m) - 1j * np.sin(np.pi * k / m)


def fft(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time DFT along the last axis."""
    a = np.asarray(x, dtype=np.complex128)
    n = a.shape[-1]
    require_power_of_two(n, minimum=1)
    lead = a.shape[:-1]
    a = a[..., _bit_reversal(n)]
    m = 1
    while m < n:
        blocks = a.reshape(*lead, n // (2 * m), 2, m)
        even = blocks[..., 0, :]
        odd = blocks[..., 1, :] * _twiddles(m)
        a = np.stack((even + odd, even - odd), axis=-2).reshape(*lead, n)
        m *= 2
    return a


def ifft(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.complex128)
    return np.conj(fft(np.conj(X))) / X.shape[-1]


def _as_values(sample) -> tuple[np.ndarray, float]:
    if isinstance(sample, VibrationSample):
        return np.asarray(sample.values, dtype=np.float64), sample.sample_rate_hz
    return np.asarray(sample, dtype=np.float64), 1.0


def magnitude_spectrum(x: np.ndarray) -> np.ndarray:
    """One-sided unnormalized ``|X[k]|`` for k = 0..L/2 (batched)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    require_power_of_two(n)
    return np.abs(fft(x)[..., : n // 2 + 1])


def fft_magnitude(sample, sample_rate_hz: float | None = None) -> Spectrum:
    x, fs = _as_values(sample)
    fs = sample_rate_hz if sample_rate_hz is not None else fs
    return Spectrum(magnitude_spectrum(x), fs / x.shape[-1])


def analytic(x: np.ndarray) -> np.ndarray:
    """Complex analytic signal via the one-sided spectrum (batched)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    require_power_of_two(n, minimum=4)
    gain = np.zeros(n)
    gain[0] = 1.0
    gain[n // 2] = 1.0
    gain[1 : n // 2] = 2.0
    return ifft(fft(x) * gain)


def hilbert_analytic(sample) -> AnalyticSignal:
    x, _ = _as_values(sample)
    z = analytic(x)
    return AnalyticSignal(real_part=z.real, imag_part=z.imag, magnitude=np.abs(z))


def envelope_magnitudes(x: np.ndarray) -> np.ndarray:
    """Envelope spectrum magnitudes with the DC bin zeroed (batched)."""
    spec = magnitude_spectrum(np.abs(analytic(x)))
    spec[..., 0] = 0.0
    return spec


def envelope_spectrum(sample, sample_rate_hz: float | None = None) -> Spectrum:
    x, fs = _as_values(sample)
    fs = sample_rate_hz if sample_rate_hz is not None else fs
    return Spectrum(envelope_magnitudes(x), fs / x.shape[-1])


def inject_noise(samples: SampleSet, snr_db: float, seed: int) -> SampleSet:
    """Add white Gaussian noise at ``snr_db`` relative to each sample's own mean power.

    ``snr_db = inf`` returns an unchanged copy. Noise is drawn from a PCG64
    stream seeded with ``seed``, one ``(n, L)`` block in sample order.
    """
    if len(samples) == 0:
        raise EmptyInputError("cannot inject noise into an empty sample set")
    x = samples.values.astype(np.float64)
    power = np.mean(x**2, axis=1)
    zero = np.flatnonzero(power == 0)
    if zero.size:
        raise DegenerateError(f"sample {samples.source_ids[zero[0]]!r} has zero power; SNR undefined")
    if np.isinf(snr_db) and snr_db > 0:
        return samples.with_values(samples.values.copy(), snr_db=float("inf"))
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(x.shape) * np.sqrt(power / 10 ** (snr_db / 10))[:, None]
    out = samples.with_values((x + noise).astype(np.float32), snr_db=float(snr_db), noise_seed=seed)
    for d in out.info:
        d["snr_db"] = float(snr_db)
    return out
