"""Conditional noise-prediction network and its checkpoint format.

The 1-D input of length L is cut into ``L / patch_len`` patches, each patch is
projected to ``hidden_dim`` and treated as one token. A learned positional
table plus the summed timestep and label embeddings are added to every token,
followed by pre-norm self-attention blocks (attention + x4 GELU feedforward)
and a near-zero-initialised projection back to patch space.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DataFormatError, ShapeError, UnsupportedVersionError

LABEL_MAP = {"null": 0, "healthy": 1, "anomaly": 2}
NULL_LABEL = LABEL_MAP["null"]
HEALTHY_LABEL = LABEL_MAP["healthy"]
ANOMALY_LABEL = LABEL_MAP["anomaly"]

CHECKPOINT_MAGIC = b"AMGCFD01"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    input_len: int = 512
    patch_len: int = 16
    hidden_dim: int = 64
    num_attention_blocks: int = 2
    num_heads: int = 8
    label_vocab: int = 3
    timestep_embed_dim: int = 32
    T_max: int = 1000
    ffn_mult: int = 4

    def __post_init__(self):
        if self.input_len < 1 or self.patch_len < 1 or self.input_len % self.patch_len:
            raise ConfigError(f"input_len={self.input_len} must be a positive multiple of patch_len={self.patch_len}")
        if self.hidden_dim < 1 or self.num_heads < 1 or self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim={self.hidden_dim} must be divisible by num_heads={self.num_heads}")
        if self.label_vocab < 3:
            raise ConfigError("label_vocab must be >= 3 (null, healthy, anomaly)")
        if self.timestep_embed_dim < 2 or self.timestep_embed_dim % 2:
            raise ConfigError("timestep_embed_dim must be an even number >= 2")
        if self.num_attention_blocks < 0 or self.T_max < 1 or self.ffn_mult < 1:
            raise ConfigError("num_attention_blocks >= 0, T_max >= 1 and ffn_mult >= 1 required")

    @property
    def num_tokens(self) -> int:
        return self.input_len // self.patch_len

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Pre-MLP timestep features: ``[sin(t / 10000^(2i/dim)), cos(t / 10000^(2i/dim))]``."""
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0):
        raise ContractError("timestep must be nonnegative")
    i = np.arange(dim // 2)
    f = t[..., None] / 10000.0 ** (2 * i / dim)
    return np.concatenate([np.sin(f), np.cos(f)], axis=-1)


def parameter_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    d, te, P, F = cfg.hidden_dim, cfg.timestep_embed_dim, cfg.patch_len, cfg.ffn_mult * cfg.hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "in_proj.w": (P, d),
        "in_proj.b": (d,),
        "pos_embed": (cfg.num_tokens, d),
        "time_mlp.0.w": (te, d),
        "time_mlp.0.b": (d,),
        "time_mlp.1.w": (d, d),
        "time_mlp.1.b": (d,),
        "label_embed": (cfg.label_vocab, d),
    }
    for k in range(cfg.num_attention_blocks):
        p = f"block{k}."
        shapes.update({
            p + "norm1.g": (d,), p + "norm1.b": (d,),
            p + "attn.q.w": (d, d), p + "attn.q.b": (d,),
            p + "attn.k.w": (d, d), p + "attn.k.b": (d,),
            p + "attn.v.w": (d, d), p + "attn.v.b": (d,),
            p + "attn.o.w": (d, d), p + "attn.o.b": (d,),
            p + "norm2.g": (d,), p + "norm2.b": (d,),
            p + "ffn.0.w": (d, F), p + "ffn.0.b": (F,),
            p + "ffn.1.w": (F, d), p + "ffn.1.b": (d,),
        })
    shapes.update({"out_norm.g": (d,), "out_norm.b": (d,), "out_proj.w": (d, P), "out_proj.b": (P,)})
    return shapes


def init_parameters(cfg: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == "out_proj.w":
            # near-zero rather than exactly zero so a fresh model still has a live output
            bound = 1e-2 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        elif name == "pos_embed":
            arr = 0.02 * rng.standard_normal(shape)
        elif name == "label_embed":
            arr = rng.standard_normal(shape)
        else:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, shape)
        params[name] = arr.astype(np.float32)
    return params


def _linear(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.matmul(x, p[name + ".w"]), p[name + ".b"])


def _norm(x: Tensor, p: dict[str, Tensor], name: str) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), p[name + ".g"]), p[name + ".b"])


def _attention(y: Tensor, p: dict[str, Tensor], prefix: str, heads: int) -> Tensor:
    B, N, d = y.shape
    dh = d // heads

    def split(t):  # (B, N, d) -> (B, H, N, dh)
        return ad.transpose(ad.reshape(t, (B, N, heads, dh)), (0, 2, 1, 3))

    q = split(_linear(y, p, prefix + "q"))
    k = split(_linear(y, p, prefix + "k"))
    v = split(_linear(y, p, prefix + "v"))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ad.matmul(ad.softmax(scores), v)
    ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, N, d))
    return _linear(ctx, p, prefix + "o")


class DenoiserModel:
    """``eps_theta(x_t, t, u)``; parameters live in ``self.params`` as float32 arrays."""

    def __init__(self, config: DenoiserConfig, params: dict[str, np.ndarray] | None = None, seed: int = 0,
                 trained: bool = False):
        self.config = config
        self.params = init_parameters(config, seed) if params is None else params
        self.trained = trained
        expected = parameter_shapes(config)
        if list(self.params) != list(expected):
            raise ShapeError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"parameter {name}: expected {shape}, got {self.params[name].shape}")

    def num_parameters(self) -> int:
        return sum(a.size for a in self.params.values())

    def _check_inputs(self, x, t, u):
        cfg = self.config
        if x.ndim != 2 or x.shape[1] != cfg.input_len:
            raise ShapeError(f"model expects input shape (B, {cfg.input_len}), got {x.shape}")
        if t.shape != (x.shape[0],) or u.shape != (x.shape[0],):
            raise ShapeError(f"t and u must have shape ({x.shape[0]},), got {t.shape} and {u.shape}")
        if t.size and (t.min() < 1 or t.max() > cfg.T_max):
            raise ContractError(f"timestep out of range [1, {cfg.T_max}]")
        if u.size and (u.min() < 0 or u.max() >= cfg.label_vocab):
            raise ContractError(f"label id out of range [0, {cfg.label_vocab})")

    def forward(self, x, t, u, params: dict[str, Tensor] | None = None) -> Tensor:
        """Batched forward pass. ``params`` may hold grad-tracking leaves for training."""
        cfg = self.config
        x = np.asarray(x.data if isinstance(x, Tensor) else x)
        t = np.atleast_1d(np.asarray(t, dtype=np.int64))
        u = np.atleast_1d(np.asarray(u, dtype=np.int64))
        self._check_inputs(x, t, u)
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        dtype = params["in_proj.w"].dtype
        B = x.shape[0]

        temb = Tensor(sinusoidal_embedding(t, cfg.timestep_embed_dim), dtype=dtype)
        c = _linear(ad.gelu(_linear(temb, params, "time_mlp.0")), params, "time_mlp.1")
        c = ad.add(c, ad.embed_lookup(params["label_embed"], u))

        tokens = Tensor(x.reshape(B, cfg.num_tokens, cfg.patch_len), dtype=dtype)
        h = ad.add(_linear(tokens, params, "in_proj"), params["pos_embed"])
        h = ad.add(h, ad.reshape(c, (B, 1, cfg.hidden_dim)))
        for k in range(cfg.num_attention_blocks):
            pre = f"block{k}."
            h = ad.add(h, _attention(_norm(h, params, pre + "norm1"), params, pre + "attn.", cfg.num_heads))
            ff = _linear(ad.gelu(_linear(_norm(h, params, pre + "norm2"), params, pre + "ffn.0")), params, pre + "ffn.1")
            h = ad.add(h, ff)
        out = _linear(_norm(h, params, "out_norm"), params, "out_proj")
        return ad.reshape(out, (B, cfg.input_len))

    def predict_noise(self, x_t, t, u) -> np.ndarray:
        """Inference-only prediction; accepts a single vector or a batch."""
        x_t = np.asarray(x_t, dtype=np.float32)
        single = x_t.ndim == 1
        xb = x_t[None] if single else x_t
        tb = np.broadcast_to(np.asarray(t, dtype=np.int64), (xb.shape[0],))
        ub = np.broadcast_to(np.asarray(u, dtype=np.int64), (xb.shape[0],))
        with ad.no_grad():
            out = self.forward(xb, tb, ub).data
        ad.check_finite(out, "predict_noise")
        return out[0] if single else out


def embed_timestep(model: DenoiserModel, t) -> np.ndarray:
    """Timestep embedding after the learned two-layer MLP, shape ``(..., hidden_dim)``."""
    p = {k: Tensor(v) for k, v in model.params.items()}
    with ad.no_grad():
        temb = Tensor(sinusoidal_embedding(np.atleast_1d(t), model.config.timestep_embed_dim), dtype=np.float32)
        return _linear(ad.gelu(_linear(temb, p, "time_mlp.0")), p, "time_mlp.1").data


@dataclass
class Checkpoint:
    model: DenoiserModel
    schedule_params: dict
    label_map: dict = field(default_factory=lambda: dict(LABEL_MAP))
    metadata: dict = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def save_checkpoint(model: DenoiserModel, path, schedule_params: dict, metadata: dict | None = None) -> None:
    manifest, offset = [], 0
    for name, arr in model.params.items():
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "schedule": schedule_params,
        "label_map": LABEL_MAP,
        "trained": model.trained,
        "metadata": metadata or {},
        "manifest": manifest,
        "blob_bytes": offset,
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hdr)))
        fh.write(hdr)
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        if raw[:6] == CHECKPOINT_MAGIC[:6]:
            raise UnsupportedVersionError(f"{path}: unsupported checkpoint magic {raw[:8]!r}")
        raise DataFormatError(f"{path}: not a checkpoint (bad magic)")
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataFormatError(f"{path}: corrupt checkpoint header") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise UnsupportedVersionError(f"{path}: checkpoint format_version {header.get('format_version')} unsupported")
    blob = raw[16 + hlen:]
    expected = sum(4 * int(np.prod(m["shape"])) for m in header["manifest"])
    if len(blob) != expected or header.get("blob_bytes") != expected:
        raise DataFormatError(f"{path}: blob size mismatch, expected {expected} bytes, got {len(blob)}")
    cfg = DenoiserConfig(**header["config"])
    params, cursor = {}, 0
    for m in header["manifest"]:
        if m["offset"] != cursor:
            raise DataFormatError(f"{path}: manifest offsets are not contiguous at {m['name']}")
        n = int(np.prod(m["shape"]))
        params[m["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=cursor).astype(np.float32).reshape(m["shape"])
        cursor += 4 * n
    model = DenoiserModel(cfg, params, trained=bool(header.get("trained", False)))
    return Checkpoint(model, header["schedule"], header["label_map"], header.get("metadata", {}), header["format_version"])
