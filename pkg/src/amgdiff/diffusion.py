"""DDPM schedule, classifier-free joint training and guided counterpart generation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .denoiser import ANOMALY_LABEL, HEALTHY_LABEL, NULL_LABEL, DenoiserModel
from .errors import ConfigError, ContractError, DegenerateError, NumericFault, ShapeError
from .signal import Label, SampleSet

log = logging.getLogger(__name__)

LABEL_IDS = {Label.HEALTHY: HEALTHY_LABEL, Label.ANOMALY: ANOMALY_LABEL}


@dataclass(frozen=True)
class NoiseSchedule:
    """Arrays are indexed by ``t - 1`` for ``t = 1..T``."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    beta_start: float
    beta_end: float
    kind: str = "linear"

    def params(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end, "kind": self.kind}

    @classmethod
    def from_params(cls, p: dict) -> "NoiseSchedule":
        return make_schedule(int(p["T"]), float(p["beta_start"]), float(p["beta_end"]), p.get("kind", "linear"))

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ContractError(f"timestep out of range [1, {self.T}]")


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    return NoiseSchedule(
        T=T,
        beta=beta,
        alpha=alpha,
        alpha_bar=np.cumprod(alpha),
        sigma=np.sqrt(beta),
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        kind=kind,
    )


def forward_diffuse(x0, t, schedule: NoiseSchedule, noise) -> np.ndarray:
    """``sqrt(ab_t) x0 + sqrt(1 - ab_t) noise``; ``t`` is a scalar or one step per row."""
    x0 = np.asarray(x0)
    noise = np.asarray(noise)
    if x0.shape != noise.shape:
        raise ShapeError(f"forward_diffuse: x0 {x0.shape} and noise {noise.shape} differ")
    schedule.check_t(t)
    ab = schedule.alpha_bar[np.asarray(t) - 1]
    if np.ndim(ab):
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * noise
    return out.astype(np.result_type(x0.dtype, noise.dtype), copy=False)


def standardize(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row zero mean / unit variance. Returns ``(z, mean, std)`` with ``(n, 1)`` stats."""
    v = np.asarray(values, dtype=np.float64)
    mean = v.mean(axis=1, keepdims=True)
    std = v.std(axis=1, keepdims=True)
    if np.any(std == 0):
        raise DegenerateError(f"constant sample at row {int(np.argmax(std[:, 0] == 0))} cannot be standardized")
    return ((v - mean) / std).astype(np.float32), mean, std


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 300
    batch_size: int = 16
    lr: float = 1e-3
    uncon: float = 0.1
    seed: int = 0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size >= 1 and epochs >= 0 required")
        if not 0 <= self.uncon < 1:
            raise ConfigError(f"uncon must lie in [0, 1), got {self.uncon}")
        if self.lr <= 0 or self.grad_clip <= 0:
            raise ConfigError("lr and grad_clip must be positive")


@dataclass
class TrainResult:
    model: DenoiserModel
    steps: list[tuple[int, int, float]] = field(default_factory=list)  # (step, epoch, loss)
    null_tokens: int = 0
    total_tokens: int = 0

    @property
    def epoch_losses(self) -> list[float]:
        by: dict[int, list[float]] = {}
        for _, ep, loss in self.steps:
            by.setdefault(ep, []).append(loss)
        return [float(np.mean(v)) for _, v in sorted(by.items())]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss"])
            for step, ep, loss in self.steps:
                w.writerow([step, ep, repr(float(loss))])


def drop_labels(labels: np.ndarray, uncon: float, rng: np.random.Generator) -> np.ndarray:
    """Replace each label by the null token with probability ``uncon``."""
    return np.where(rng.random(len(labels)) < uncon, NULL_LABEL, labels)


def training_set(data: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Labelled rows only (Healthy and Anomaly); unlabelled rows are not used for training."""
    idx = [i for i, lb in enumerate(data.labels) if lb in LABEL_IDS]
    labels = np.array([LABEL_IDS[data.labels[i]] for i in idx], dtype=np.int64)
    if not np.any(labels == HEALTHY_LABEL) or not np.any(labels == ANOMALY_LABEL):
        raise ContractError("training needs at least one Healthy and one Anomaly sample")
    return np.asarray(idx, dtype=int), labels


def diffusion_loss(model: DenoiserModel, x0: np.ndarray, t: np.ndarray, u: np.ndarray, noise: np.ndarray,
                   schedule: NoiseSchedule, leaves: dict[str, Tensor]) -> Tensor:
    xt = forward_diffuse(x0, t, schedule, noise)
    return ad.mse(model.forward(xt, t, u, leaves), noise)


def train(model: DenoiserModel, data: SampleSet, schedule: NoiseSchedule, cfg: TrainConfig,
          progress_every: int = 0) -> TrainResult:
    if model.config.input_len != data.sample_length:
        raise ShapeError(f"model input_len {model.config.input_len} != sample length {data.sample_length}")
    if model.config.T_max < schedule.T:
        raise ConfigError(f"model T_max {model.config.T_max} < schedule T {schedule.T}")
    idx, labels = training_set(data)
    z, _, _ = standardize(data.values[idx])
    rng = np.random.default_rng(cfg.seed)
    state = ad.AdamState(lr=cfg.lr)
    result = TrainResult(model)
    n, step, t0 = len(idx), 0, time.perf_counter()
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for k in range(0, n, cfg.batch_size):
            b = perm[k:k + cfg.batch_size]
            t = rng.integers(1, schedule.T + 1, len(b))
            noise = rng.standard_normal((len(b), z.shape[1])).astype(np.float32)
            u = drop_labels(labels[b], cfg.uncon, rng)
            result.null_tokens += int(np.sum(u == NULL_LABEL))
            result.total_tokens += len(b)

            leaves = {name: Tensor(arr, requires_grad=True) for name, arr in model.params.items()}
            try:
                loss = diffusion_loss(model, z[b], t, u, noise, schedule, leaves)
                ad.backward(loss)
            except NumericFault as exc:
                raise NumericFault(f"training step {step} (epoch {epoch}): {exc}") from exc
            grads = {name: leaf.grad for name, leaf in leaves.items() if leaf.grad is not None}
            ad.clip_by_global_norm(grads, cfg.grad_clip)
            ad.adam_step(model.params, grads, state)
            result.steps.append((step, epoch, float(loss.data)))
            step += 1
        if progress_every and (epoch % progress_every == 0 or epoch == cfg.epochs - 1):
            log.info("epoch %d loss %.4f (%.1fs)", epoch, result.epoch_losses[-1], time.perf_counter() - t0)
    model.trained = model.trained or cfg.epochs > 0
    return result


def _posterior_mean_step(x_t: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule, noise) -> np.ndarray:
    a = float(schedule.alpha[t - 1])
    coef = float((1.0 - a) / math.sqrt(1.0 - schedule.alpha_bar[t - 1]))
    x = (x_t - coef * eps) / math.sqrt(a)
    if t > 1:
        x = x + float(schedule.sigma[t - 1]) * np.asarray(noise, dtype=x.dtype)
    return x


def ddpm_step(model: DenoiserModel, x_t, t: int, label: int, schedule: NoiseSchedule, noise) -> np.ndarray:
    """Plain conditional reverse step (no guidance)."""
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float32)
    return _posterior_mean_step(x_t, t, model.predict_noise(x_t, t, label), schedule, noise)


def guided_eps(model: DenoiserModel, x_t: np.ndarray, t: int, label: int, w: float) -> np.ndarray:
    """``(w + 1) eps(x, t, label) - w eps(x, t, null)``."""
    if w == 0:
        return model.predict_noise(x_t, t, label)
    single = x_t.ndim == 1
    xb = x_t[None] if single else x_t
    B = xb.shape[0]
    u = np.concatenate([np.full(B, label), np.full(B, NULL_LABEL)])
    e = model.predict_noise(np.concatenate([xb, xb]), t, u)
    out = float(w + 1) * e[:B] - float(w) * e[B:]
    return out[0] if single else out


def guided_denoise_step(model: DenoiserModel, x_t, t: int, healthy_label: int, w: float,
                        schedule: NoiseSchedule, noise) -> np.ndarray:
    if w < 0:
        raise ConfigError("guidance weight w must be >= 0")
    schedule.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float32)
    return _posterior_mean_step(x_t, t, guided_eps(model, x_t, t, healthy_label, w), schedule, noise)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 3.0
    t_star_frac: float = 0.2
    seed: int = 0
    chunk_size: int = 512

    def __post_init__(self):
        if self.w < 0:
            raise ConfigError("w must be >= 0")
        if not 0 < self.t_star_frac <= 1:
            raise ConfigError(f"t_star_frac must lie in (0, 1], got {self.t_star_frac}")
        if self.chunk_size < 1:
            raise ConfigError("chunk_size must be >= 1")

    def t_star(self, T: int) -> int:
        return min(T, max(1, int(math.floor(self.t_star_frac * T + 0.5))))

    def to_dict(self) -> dict:
        return asdict(self)


def generate_counterparts(model: DenoiserModel, z: np.ndarray, schedule: NoiseSchedule, g: GuidanceConfig,
                          label: int = HEALTHY_LABEL) -> np.ndarray:
    """Guided regeneration in standardized units. All noise comes from one PCG64 stream
    drawn in full ``(n, L)`` blocks, so the result does not depend on ``chunk_size``."""
    z = np.asarray(z, dtype=np.float32)
    if z.ndim != 2 or z.shape[1] != model.config.input_len:
        raise ShapeError(f"model expects samples of length {model.config.input_len}, got shape {z.shape}")
    rng = np.random.default_rng(g.seed)
    ts = g.t_star(schedule.T)
    x = forward_diffuse(z, ts, schedule, rng.standard_normal(z.shape).astype(np.float32))
    for t in range(ts, 0, -1):
        noise = rng.standard_normal(z.shape).astype(np.float32) if t > 1 else None
        eps = np.empty_like(x)
        for k in range(0, len(x), g.chunk_size):
            eps[k:k + g.chunk_size] = guided_eps(model, x[k:k + g.chunk_size], t, label, g.w)
        x = _posterior_mean_step(x, t, eps, schedule, noise)
    return x


def generate_healthy_counterpart(model: DenoiserModel, x_in: SampleSet, schedule: NoiseSchedule,
                                 g: GuidanceConfig) -> SampleSet:
    if x_in.sample_length != model.config.input_len:
        raise ShapeError(f"model expects length {model.config.input_len}, got {x_in.sample_length}")
    if not model.trained:
        log.warning("generating with an untrained model")
    z, mean, std = standardize(x_in.values)
    out = generate_counterparts(model, z, schedule, g) * std + mean
    result = x_in.with_values(
        out.astype(np.float32),
        generated=True,
        model_trained=model.trained,
        guidance=g.to_dict(),
        t_star=g.t_star(schedule.T),
    )
    result.labels = [Label.HEALTHY] * len(result)
    for i, d in enumerate(result.info):
        d["counterpart_of"] = sample_key(x_in.source_ids[i], x_in.segment_indices[i])
    return result


def sample_key(source_id: str, segment_index: int) -> str:
    return f"{source_id}#{segment_index}"
