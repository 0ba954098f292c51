"""Spatial-Temporal Diffusion Transformer (STDiT) on latent token grids.

Token grids are laid out [B, T, S, D]: T latent frames, S spatial tokens per
frame. Spatial attention mixes the S axis inside each frame, temporal attention
mixes the T axis at each spatial index (with rotary positions), cross-attention
reads the text tokens. Timestep and fps conditioning enter through per-frame
adaptive layer-norm shift/scale/gate.
"""

import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import pandas as pd

from config import (
    CODEC_LATENT_CHANNELS,
    MODEL_DEPTH,
    MODEL_HEADS,
    MODEL_HIDDEN,
    MODEL_MAX_GRID,
    MODEL_TEXT_LEN,
    QK_NORM_EPS,
    ROPE_BASE,
)
from errors import ConfigError, DimensionError, DomainError, PreconditionError
from numerics import (
    MLP,
    Linear,
    Module,
    Parameter,
    Tensor,
    as_tensor,
    bmm,
    expand,
    l2_normalize,
    layer_norm,
    load_tensor_dir,
    make_rng,
    save_tensor_dir,
    silu,
    softmax,
)

logger = logging.getLogger(__name__)

NEG_INF = -1e9


@dataclass
class ModelConfig:
    in_channels: int = CODEC_LATENT_CHANNELS
    hidden: int = MODEL_HIDDEN
    depth: int = MODEL_DEPTH
    heads: int = MODEL_HEADS
    mlp_ratio: float = 4.0
    text_dim: int = MODEL_HIDDEN
    max_text_len: int = MODEL_TEXT_LEN
    max_grid: int = MODEL_MAX_GRID
    patch: int = 1
    qk_eps: float = QK_NORM_EPS
    rope_base: float = ROPE_BASE
    zero_init_temporal: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if (self.hidden // self.heads) % 2:
            raise ConfigError("head dimension must be even for rotary embeddings")
        if self.qk_eps <= 0:
            raise ConfigError("qk_eps must be positive")
        if min(self.depth, self.patch, self.max_grid, self.text_dim, self.in_channels) < 1:
            raise ConfigError("model sizes must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


def timestep_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal embedding of a scalar array, shape t.shape + (dim,)."""
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[..., None] * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros(emb.shape[:-1] + (1,))], axis=-1)
    return emb


# Rotary embedding


def rope_tables(positions, dim: int, base: float = ROPE_BASE) -> Tuple[np.ndarray, np.ndarray]:
    """cos/sin tables [N, dim] for the rotate-half convention."""
    positions = np.asarray(positions, dtype=np.float64)
    inv_freq = base ** (-np.arange(0, dim, 2) / dim)
    angles = positions[:, None] * inv_freq[None, :]
    angles = np.concatenate([angles, angles], axis=-1)
    return np.cos(angles), np.sin(angles)


def _rotate_half(x: np.ndarray) -> np.ndarray:
    half = x.shape[-1] // 2
    return np.concatenate([-x[..., half:], x[..., :half]], axis=-1)


def _rotate_half_transpose(g: np.ndarray) -> np.ndarray:
    half = g.shape[-1] // 2
    return np.concatenate([g[..., half:], -g[..., :half]], axis=-1)


def rope_rotate(x, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotate query/key vectors [..., N, dim] by their positions along the N axis."""
    x = as_tensor(x)
    if x.shape[-2] != len(positions):
        raise DimensionError(f"rope: {len(positions)} positions for sequence length {x.shape[-2]}")
    cos, sin = rope_tables(positions, x.shape[-1], base)
    data = x.data * cos + _rotate_half(x.data) * sin

    def backward(g):
        return (g * cos + _rotate_half_transpose(g * sin),)

    return Tensor._from_op(data, (x,), backward, "rope")


def qk_normalize(q, k, eps: float = QK_NORM_EPS):
    """Divide every head vector by (norm + eps)."""
    if not eps > 0:
        raise DomainError(f"qk_normalize eps must be positive, got {eps}")
    return l2_normalize(q, -1, eps), l2_normalize(k, -1, eps)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    x = x.reshape(*lead, n, heads, d // heads)
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes)


def _merge_heads(x: Tensor) -> Tensor:
    lead, heads, n, hd = x.shape[:-3], x.shape[-3], x.shape[-2], x.shape[-1]
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return x.transpose(axes).reshape(*lead, n, heads * hd)


def _attend(q: Tensor, k: Tensor, v: Tensor, scale: Parameter, eps: float, bias: Optional[np.ndarray] = None) -> Tensor:
    """QK-normalized attention over [..., H, N, hd] inputs with a learned per-head temperature."""
    q, k = qk_normalize(q, k, eps)
    nd = k.ndim
    logits = bmm(q, k.transpose(tuple(range(nd - 2)) + (nd - 1, nd - 2)))
    heads = scale.shape[0]
    logits = logits * expand(scale.reshape(heads, 1, 1), logits.shape)
    if bias is not None:
        logits = logits + Tensor(np.broadcast_to(bias, logits.shape))
    return bmm(softmax(logits, axis=-1), v)


class SelfAttention(Module):
    """Multi-head self-attention over the second-to-last axis."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.hidden
        self.heads = cfg.heads
        self.eps = cfg.qk_eps
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng)
        self.scale = Parameter(np.full(cfg.heads, 1.0 / np.sqrt(cfg.head_dim)))

    def forward(self, x: Tensor, positions=None, rope_base: float = ROPE_BASE) -> Tensor:
        d = x.shape[-1]
        qkv = self.qkv(x)
        q = _split_heads(qkv[..., :d], self.heads)
        k = _split_heads(qkv[..., d:2 * d], self.heads)
        v = _split_heads(qkv[..., 2 * d:], self.heads)
        if positions is not None:
            q = rope_rotate(q, positions, rope_base)
            k = rope_rotate(k, positions, rope_base)
        return self.proj(_merge_heads(_attend(q, k, v, self.scale, self.eps)))


class SpatialAttention(SelfAttention):
    """Attention among the S tokens of each frame; positionless."""

    def forward(self, x: Tensor) -> Tensor:
        return super().forward(as_tensor(x))


class TemporalAttention(SelfAttention):
    """Attention across frames at each spatial index, with rotary positions."""

    def forward(self, x: Tensor, rope_base: float = ROPE_BASE) -> Tensor:
        x = as_tensor(x)
        nd = x.ndim
        # [..., T, S, D] -> [..., S, T, D]
        swap = tuple(range(nd - 3)) + (nd - 2, nd - 3, nd - 1)
        out = super().forward(x.transpose(swap), positions=np.arange(x.shape[-3]), rope_base=rope_base)
        return out.transpose(swap)


class CrossAttention(Module):
    """Video tokens attend to text tokens."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.hidden
        self.heads = cfg.heads
        self.eps = cfg.qk_eps
        self.q = Linear(d, d, rng)
        self.kv = Linear(d, 2 * d, rng)
        self.proj = Linear(d, d, rng)
        self.scale = Parameter(np.full(cfg.heads, 1.0 / np.sqrt(cfg.head_dim)))

    def forward(self, x: Tensor, text: Tensor, text_mask: Optional[np.ndarray] = None) -> Tensor:
        """x: [B, T, S, D]; text: [B, L, D]; text_mask: [B, L] with True on real tokens."""
        x, text = as_tensor(x), as_tensor(text)
        b, t, s, d = x.shape
        if text.ndim != 3 or text.shape[0] != b or text.shape[-1] != d:
            raise DimensionError(f"cross attention: text {text.shape} does not match video tokens {x.shape}")
        if text.shape[1] < 1:
            raise PreconditionError("cross attention needs at least one text token")
        mask = np.ones(text.shape[:2], dtype=bool) if text_mask is None else np.asarray(text_mask, dtype=bool)
        if not np.all(mask.any(axis=1)):
            raise PreconditionError("cross attention needs at least one text token per sample")
        q = _split_heads(self.q(x.reshape(b, t * s, d)), self.heads)
        kv = self.kv(text)
        k = _split_heads(kv[..., :d], self.heads)
        v = _split_heads(kv[..., d:], self.heads)
        bias = np.where(mask, 0.0, NEG_INF)[:, None, None, :]
        out = _merge_heads(_attend(q, k, v, self.scale, self.eps, bias))
        return self.proj(out).reshape(b, t, s, d)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    return layer_norm(x) * (scale + 1.0) + shift


class STDiTBlock(Module):
    """Spatial attention -> temporal attention -> cross attention -> MLP, each residual."""

    def __init__(self, cfg: ModelConfig, rng):
        d = cfg.hidden
        self.hidden = d
        self.rope_base = cfg.rope_base
        self.spatial = SpatialAttention(cfg, rng)
        self.temporal = TemporalAttention(cfg, rng)
        self.cross = CrossAttention(cfg, rng)
        self.mlp = MLP([d, int(d * cfg.mlp_ratio), d], rng)
        self.ada = Linear(d, 9 * d, rng, scale=0.02)

    def forward(self, x: Tensor, c: Tensor, text: Tensor, text_mask: np.ndarray) -> Tensor:
        b, t, s, d = x.shape
        mod = expand(self.ada(silu(c)).reshape(b, t, 1, 9 * d), (b, t, s, 9 * d))
        chunk = [mod[..., i * d:(i + 1) * d] for i in range(9)]
        x = x + chunk[2] * self.spatial(_modulate(x, chunk[0], chunk[1]))
        x = x + chunk[5] * self.temporal(_modulate(x, chunk[3], chunk[4]), self.rope_base)
        x = x + self.cross(layer_norm(x), text, text_mask)
        x = x + chunk[8] * self.mlp(_modulate(x, chunk[6], chunk[7]))
        return x


class STDiT(Module):
    """Velocity network v(z_t, t, fps, text) on latent videos [B, T, h, w, C]."""

    def __init__(self, cfg: Optional[ModelConfig] = None):
        self.config = cfg or ModelConfig()
        cfg = self.config
        rng = make_rng(cfg.seed, "stdit.init")
        d = cfg.hidden
        patch_dim = cfg.in_channels * cfg.patch * cfg.patch
        self.x_embed = Linear(patch_dim, d, rng)
        self.pos_embed = Parameter(rng.normal(0.0, 0.02, size=(cfg.max_grid, cfg.max_grid, d)))
        self.t_embed = MLP([d, d, d], rng)
        self.fps_embed = MLP([d, d, d], rng)
        self.y_embed = Linear(cfg.text_dim, d, rng)
        self.blocks = [STDiTBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final_ada = Linear(d, 2 * d, rng, scale=0.02)
        self.final = Linear(d, patch_dim, rng)
        if cfg.zero_init_temporal:
            init_temporal_zero(self)

    def _patchify(self, z: Tensor) -> Tensor:
        b, t, h, w, c = z.shape
        p = self.config.patch
        z = z.reshape(b, t, h // p, p, w // p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
        return z.reshape(b, t, (h // p) * (w // p), p * p * c)

    def _unpatchify(self, x: Tensor, h: int, w: int) -> Tensor:
        b, t = x.shape[:2]
        p, c = self.config.patch, self.config.in_channels
        x = x.reshape(b, t, h // p, w // p, p, p, c).transpose(0, 1, 2, 4, 3, 5, 6)
        return x.reshape(b, t, h, w, c)

    def forward(self, z, t, fps, text, text_mask=None) -> Tensor:
        """Predict the velocity field.

        Args:
            z: Noised latents [B, T, h, w, C] (array or Tensor)
            t: Per-frame timesteps [B, T] in [0, 1]
            fps: Frames per second [B]
            text: Text embeddings [B, L, text_dim]
            text_mask: [B, L] booleans, True on real tokens

        Returns:
            Tensor [B, T, h, w, C]
        """
        cfg = self.config
        z = as_tensor(z)
        if z.ndim != 5 or z.shape[-1] != cfg.in_channels:
            raise DimensionError(f"latent input must be [B, T, h, w, {cfg.in_channels}], got {z.shape}")
        b, frames, h, w, _ = z.shape
        p = cfg.patch
        if h % p or w % p:
            raise DimensionError(f"latent grid {h}x{w} is not divisible by patch {p}")
        gh, gw = h // p, w // p
        if gh > cfg.max_grid or gw > cfg.max_grid:
            raise DimensionError(f"latent grid {gh}x{gw} exceeds the position table ({cfg.max_grid})")
        t = np.asarray(t, dtype=np.float64)
        fps = np.asarray(fps, dtype=np.float64).reshape(-1)
        if t.shape != (b, frames):
            raise DimensionError(f"timesteps must have shape {(b, frames)}, got {t.shape}")
        if np.any(t < 0) or np.any(t > 1):
            raise DomainError("per-frame timesteps must lie in [0, 1]")
        if fps.shape != (b,) or np.any(fps <= 0):
            raise DomainError("fps must be one positive value per sample")
        text = np.asarray(text.data if isinstance(text, Tensor) else text, dtype=np.float64)
        if text.ndim != 3 or text.shape[0] != b or text.shape[-1] != cfg.text_dim:
            raise DimensionError(f"text must be [{b}, L, {cfg.text_dim}], got {text.shape}")

        d = cfg.hidden
        x = self.x_embed(self._patchify(z))
        s = gh * gw
        pos = self.pos_embed[:gh, :gw].reshape(1, 1, s, d)
        x = x + expand(pos, (b, frames, s, d))

        c = self.t_embed(Tensor(timestep_embedding(t * 1000.0, d)))
        fps_emb = self.fps_embed(Tensor(timestep_embedding(fps, d))).reshape(b, 1, d)
        c = c + expand(fps_emb, (b, frames, d))
        y = self.y_embed(Tensor(text))

        for block in self.blocks:
            x = block(x, c, y, text_mask)

        mod = expand(self.final_ada(silu(c)).reshape(b, frames, 1, 2 * d), (b, frames, s, 2 * d))
        x = self.final(_modulate(x, mod[..., :d], mod[..., d:]))
        return self._unpatchify(x, h, w)

    # Persistence

    def save(self, directory) -> Path:
        directory = Path(directory)
        save_tensor_dir(directory, self.state_dict())
        (directory / "model.json").write_text(json.dumps(asdict(self.config), indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "STDiT":
        directory = Path(directory)
        cfg = ModelConfig(**json.loads((directory / "model.json").read_text()))
        model = cls(cfg)
        model.load_state_dict(load_tensor_dir(directory))
        return model


def forward(model: STDiT, z, cond) -> Tensor:
    """Single-clip forward: ``z`` is [T, h, w, C] (or a LatentVideo), ``cond`` a ConditioningSpec."""
    data = getattr(z, "data", z)
    data = data if isinstance(data, Tensor) else np.asarray(data)
    if cond.timesteps is None:
        raise PreconditionError("per-frame timesteps must be assigned before the forward pass")
    text = cond.text
    out = model(
        data.reshape(1, *data.shape),
        np.asarray(cond.timesteps)[None],
        np.array([cond.fps]),
        text.data[None],
        text.mask[None],
    )
    return out.reshape(*out.shape[1:])


def init_temporal_zero(model: STDiT) -> STDiT:
    """Zero the output projection of every temporal attention layer."""
    for block in model.blocks:
        block.temporal.proj.zero_()
    return model


def freeze_non_temporal(model: STDiT) -> STDiT:
    """Leave only the temporal attention layers trainable."""
    model.set_trainable(False)
    for block in model.blocks:
        block.temporal.set_trainable(True)
    return model


def describe(model: STDiT) -> pd.DataFrame:
    """Parameter census grouped by top-level component."""
    counts = {}
    for name, p in model.named_parameters():
        parts = name.split(".")
        group = ".".join(parts[:3]) if parts[0] == "blocks" else parts[0]
        counts[group] = counts.get(group, 0) + p.size
    frame = pd.DataFrame(sorted(counts.items()), columns=["component", "parameters"])
    total = pd.DataFrame([{"component": "total", "parameters": int(frame["parameters"].sum())}])
    return pd.concat([frame, total], ignore_index=True)
