"""Synthetic outer-race defect vibration for a roller bearing.

Each sample is ``baseline + fault + noise``:

* baseline: shaft harmonics with random phases,
* fault: a train of decaying resonance bursts repeating at BPFO with a small
  per-period slip, amplitude ``impulse_gain * depth ** depth_exponent``,
* noise: white Gaussian floor.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .signal import Label, SampleSet


@dataclass(frozen=True)
class BearingGeometry:
    roller_diameter_mm: float = 8.4
    pitch_diameter_mm: float = 71.5
    num_rollers: int = 16
    contact_angle_deg: float = 15.17
    shaft_freq_hz: float = 33.33

    def __post_init__(self):
        if not 0 < self.roller_diameter_mm < self.pitch_diameter_mm:
            raise ConfigError("need 0 < roller_diameter_mm < pitch_diameter_mm")
        if self.num_rollers < 1:
            raise ConfigError("num_rollers must be >= 1")
        if not 0 <= self.contact_angle_deg < 90:
            raise ConfigError("contact_angle_deg must lie in [0, 90)")
        if self.shaft_freq_hz <= 0:
            raise ConfigError("shaft_freq_hz must be positive")

    @property
    def _ratio_cos(self) -> float:
        return self.roller_diameter_mm / self.pitch_diameter_mm * math.cos(math.radians(self.contact_angle_deg))


# Table 1 geometry; identical to the Rexnord ZA-2115 used on the IMS rig at 2000 rpm.
TABLE1_GEOMETRY = BearingGeometry()
REXNORD_ZA2115 = BearingGeometry()


def bpfo(g: BearingGeometry) -> float:
    """Ball pass frequency, outer race (Hz)."""
    return g.num_rollers / 2 * g.shaft_freq_hz * (1 - g._ratio_cos)


def bpfi(g: BearingGeometry) -> float:
    """Ball pass frequency, inner race (Hz)."""
    return g.num_rollers / 2 * g.shaft_freq_hz * (1 + g._ratio_cos)


def bsf(g: BearingGeometry) -> float:
    """Ball (roller) spin frequency (Hz)."""
    return g.pitch_diameter_mm / (2 * g.roller_diameter_mm) * g.shaft_freq_hz * (1 - g._ratio_cos**2)


def ftf(g: BearingGeometry) -> float:
    """Fundamental train (cage) frequency (Hz)."""
    return g.shaft_freq_hz / 2 * (1 - g._ratio_cos)


def characteristic_frequencies(g: BearingGeometry) -> dict[str, float]:
    # insertion order is the tie-break order used by fault matching
    return {"BPFO": bpfo(g), "BPFI": bpfi(g), "BSF": bsf(g), "FTF": ftf(g), "shaft": g.shaft_freq_hz}


@dataclass(frozen=True)
class SimConfig:
    """Simulation knobs. ``None`` fields are derived from the baseline in ``__post_init__``.

    Depths are in units of 1e-6 mm. ``impulse_gain`` defaults to the value at
    which depth 100 produces bursts of 10x the baseline RMS; the noise floor
    defaults to 5 % of the baseline RMS.
    """

    geometry: BearingGeometry = field(default_factory=BearingGeometry)
    sample_rate_hz: float = 20000.0
    sample_length: int = 512
    samples_per_setting: int = 400
    defect_depth_um3: float = 0.0
    resonance_freq_hz: float = 4000.0
    resonance_damping: float = 0.05
    impulse_gain: float | None = None
    depth_exponent: float = 1 / 3
    slip_jitter_frac: float = 0.01
    baseline_harmonic_amps: tuple[float, ...] = (1.0, 0.5)
    noise_floor_std: float | None = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "baseline_harmonic_amps", tuple(float(a) for a in self.baseline_harmonic_amps))
        if isinstance(self.geometry, dict):
            object.__setattr__(self, "geometry", BearingGeometry(**self.geometry))
        if self.sample_rate_hz <= 2 * self.resonance_freq_hz:
            raise ConfigError(
                f"sample_rate_hz={self.sample_rate_hz} violates Nyquist for resonance {self.resonance_freq_hz} Hz"
            )
        if self.defect_depth_um3 < 0:
            raise ConfigError("defect_depth_um3 must be nonnegative")
        if not 0 <= self.slip_jitter_frac < 0.1:
            raise ConfigError("slip_jitter_frac must lie in [0, 0.1)")
        if self.sample_length < 2 or self.samples_per_setting < 1:
            raise ConfigError("sample_length >= 2 and samples_per_setting >= 1 required")
        if self.depth_exponent <= 0:
            raise ConfigError("depth_exponent must be positive")
        rms = self.baseline_rms
        if self.impulse_gain is None:
            object.__setattr__(self, "impulse_gain", 10 * rms / 100**self.depth_exponent)
        if self.noise_floor_std is None:
            object.__setattr__(self, "noise_floor_std", 0.05 * rms)

    @property
    def baseline_rms(self) -> float:
        return math.sqrt(sum(a * a for a in self.baseline_harmonic_amps) / 2)

    def fault_amplitude(self, depth: float | None = None) -> float:
        depth = self.defect_depth_um3 if depth is None else depth
        return self.impulse_gain * depth**self.depth_exponent

    def to_dict(self) -> dict:
        d = asdict(self)
        d["baseline_harmonic_amps"] = list(self.baseline_harmonic_amps)
        return d


@dataclass
class GroundTruth:
    per_sample_depth: np.ndarray
    damage_level: np.ndarray

    def __post_init__(self):
        self.per_sample_depth = np.asarray(self.per_sample_depth, dtype=np.float64)
        self.damage_level = np.asarray(self.damage_level, dtype=np.int64)
        if self.per_sample_depth.shape != self.damage_level.shape:
            raise ConfigError("depth and damage_level vectors differ in length")
        if np.any(self.per_sample_depth < 0):
            raise ConfigError("depths must be nonnegative")

    def __len__(self):
        return len(self.per_sample_depth)

    @classmethod
    def from_samples(cls, samples: SampleSet) -> "GroundTruth":
        missing = [i for i, d in enumerate(samples.info) if "depth_um3" not in d]
        if missing:
            raise ConfigError(f"sample {samples.source_ids[missing[0]]!r} carries no ground-truth depth")
        return cls(
            [d["depth_um3"] for d in samples.info],
            [d.get("damage_level", -1) for d in samples.info],
        )


def _burst(t: np.ndarray, f_res: float, damping: float) -> np.ndarray:
    out = np.zeros_like(t)
    on = t >= 0
    tt = t[on]
    out[on] = np.exp(-damping * 2 * np.pi * f_res * tt) * np.sin(2 * np.pi * f_res * tt)
    return out


def synthesize_setting(
    cfg: SimConfig,
    label: Label = Label.UNLABELED,
    damage_level: int = -1,
    id_prefix: str = "sim",
    count: int | None = None,
) -> tuple[SampleSet, GroundTruth]:
    n = cfg.samples_per_setting if count is None else count
    L, fs = cfg.sample_length, cfg.sample_rate_hz
    t = np.arange(L) / fs
    f_r = cfg.geometry.shaft_freq_hz
    period = 1.0 / bpfo(cfg.geometry)
    n_periods = int(math.ceil(L / fs / period * (1 + cfg.slip_jitter_frac))) + 2
    amp = cfg.fault_amplitude()
    rng = np.random.default_rng(cfg.seed)

    values = np.empty((n, L))
    for i in range(n):
        phases = rng.uniform(0, 2 * np.pi, len(cfg.baseline_harmonic_amps))
        offset = rng.uniform(0, period)
        jitter = rng.uniform(1 - cfg.slip_jitter_frac, 1 + cfg.slip_jitter_frac, n_periods)
        noise = rng.standard_normal(L) * cfg.noise_floor_std

        x = np.zeros(L)
        for k, (a, phi) in enumerate(zip(cfg.baseline_harmonic_amps, phases)):
            x += a * np.sin(2 * np.pi * (k + 1) * f_r * t + phi)
        if amp > 0:
            starts = -offset + np.concatenate(([0.0], np.cumsum(period * jitter[:-1])))
            starts = starts[starts < t[-1]]
            fault = _burst(t[None, :] - starts[:, None], cfg.resonance_freq_hz, cfg.resonance_damping).sum(0)
            x += amp * fault
        values[i] = x + noise

    samples = SampleSet(
        values=values,
        sample_rate_hz=fs,
        labels=[label] * n,
        source_ids=[f"{id_prefix}-{i:04d}" for i in range(n)],
        segment_indices=[0] * n,
        info=[{"damage_level": damage_level, "depth_um3": cfg.defect_depth_um3} for _ in range(n)],
        metadata={"defect_depth_um3": cfg.defect_depth_um3, "damage_level": damage_level},
    )
    truth = GroundTruth(np.full(n, cfg.defect_depth_um3), np.full(n, damage_level))
    return samples, truth


# (table index, depth [1e-6 mm], label, damage level, count); count None -> samples_per_setting
TABLE2_SETTINGS = (
    (1, 0.001, Label.HEALTHY, 0, None),
    (2, 0.01, Label.UNLABELED, 1, None),
    (3, 0.1, Label.UNLABELED, 2, None),
    (4, 0.5, Label.UNLABELED, 3, None),
    (5, 1.0, Label.UNLABELED, 4, None),
    (6, 100.0, Label.ANOMALY, 5, 10),
)


def generate_table2_dataset(base_cfg: SimConfig | None = None) -> tuple[SampleSet, GroundTruth]:
    """All six defect-depth settings, concatenated in table order.

    Setting ``k`` is generated with seed ``base_cfg.seed + k``.
    """
    from dataclasses import replace

    base_cfg = base_cfg or SimConfig()
    sets, truths = [], []
    for index, depth, label, level, count in TABLE2_SETTINGS:
        cfg = replace(base_cfg, defect_depth_um3=depth, seed=base_cfg.seed + index)
        s, gt = synthesize_setting(cfg, label=label, damage_level=level, id_prefix=f"s{index}", count=count)
        sets.append(s)
        truths.append(gt)
    samples = SampleSet.concat(sets, source="bearing-sim", sim=base_cfg.to_dict())
    truth = GroundTruth(
        np.concatenate([g.per_sample_depth for g in truths]),
        np.concatenate([g.damage_level for g in truths]),
    )
    return samples, truth
