"""Stacked video codec: per-frame 8x8 spatial autoencoder plus a causal 4x temporal one.

Temporal layout: the per-frame latents are front-padded with three zero frames
and cut into groups of four, so latent frame 0 sees input frame 0 alone and
latent frame i >= 1 sees input frames 4i-3 .. 4i.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import gaussian_filter
from tqdm import tqdm

from config import (
    CODEC_CLIP_FRAMES,
    CODEC_HIDDEN_WIDTH,
    CODEC_LATENT_CHANNELS,
    CODEC_LEARNING_RATE,
    CODEC_MAX_MIXED_FRAMES,
    CODEC_SPATIAL_FACTOR,
    CODEC_TEMPORAL_STRIDE,
    CODEC_VIDEO_FRACTION,
    PSNR_CAP_DB,
)
from errors import ConfigError, DegenerateStatsError, DimensionError, GeometryError, PreconditionError
from numerics import (
    MLP,
    Adam,
    Module,
    Tensor,
    as_tensor,
    concat,
    expand,
    load_tensor_dir,
    load_vten,
    make_rng,
    mse,
    save_tensor_dir,
    save_vten,
)

logger = logging.getLogger(__name__)

VideoArray = np.ndarray  # [T, H, W, C] float32 in [0, 1]


def latent_length(frames: int) -> int:
    """Number of latent frames produced for ``frames`` input frames."""
    if frames < 1:
        raise GeometryError(f"a clip needs at least one frame, got {frames}")
    return 1 + math.ceil((frames - 1) / CODEC_TEMPORAL_STRIDE)


def decoded_length(latent_frames: int) -> int:
    """Frames produced by the temporal decoder for ``latent_frames`` latents."""
    return 1 + CODEC_TEMPORAL_STRIDE * (latent_frames - 1)


@dataclass
class CodecConfig:
    in_channels: int = 3
    latent_channels: int = CODEC_LATENT_CHANNELS
    spatial_widths: Tuple[int, ...] = (CODEC_HIDDEN_WIDTH,)
    temporal_widths: Tuple[int, ...] = (CODEC_HIDDEN_WIDTH,)
    identity_weight: float = 1.0
    stage: int = 1
    freeze_spatial: Optional[bool] = None
    learning_rate: float = CODEC_LEARNING_RATE
    seed: int = 0

    def __post_init__(self):
        self.spatial_widths = tuple(int(w) for w in self.spatial_widths)
        self.temporal_widths = tuple(int(w) for w in self.temporal_widths)
        if self.stage not in (1, 2, 3):
            raise ConfigError(f"codec stage must be 1, 2 or 3, got {self.stage}")
        if min(self.spatial_widths + self.temporal_widths + (self.latent_channels, self.in_channels)) <= 0:
            raise ConfigError("codec widths and channel counts must be positive")
        if self.identity_weight < 0:
            raise ConfigError("identity_weight must be non-negative")

    @property
    def spatial_frozen(self) -> bool:
        # Stages 1 and 2 train the temporal stack on top of a fixed 2D path
        return self.stage in (1, 2) if self.freeze_spatial is None else bool(self.freeze_spatial)


@dataclass
class LatentVideo:
    """Latent clip [T', H/8, W/8, Cz] with the channel statistics used to normalize it."""

    data: np.ndarray
    mean: np.ndarray = None
    std: np.ndarray = None
    frames: int = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        channels = self.data.shape[-1]
        self.mean = np.zeros(channels) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(channels) if self.std is None else np.asarray(self.std, dtype=np.float64)
        if self.frames is None:
            self.frames = decoded_length(self.data.shape[0])
        if not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.std))):
            raise DegenerateStatsError("latent channel statistics must be finite")
        if np.any(self.std <= 0):
            raise DegenerateStatsError("latent channel std must be positive")

    @property
    def shape(self):
        return self.data.shape


def _check_video(v: np.ndarray, channels: int) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 4:
        raise GeometryError(f"video must be [T, H, W, C], got shape {v.shape}")
    frames, height, width, c = v.shape
    if frames < 1:
        raise GeometryError("video has no frames")
    if c != channels:
        raise GeometryError(f"video has {c} channels, codec expects {channels}")
    if height % CODEC_SPATIAL_FACTOR or width % CODEC_SPATIAL_FACTOR:
        raise GeometryError(f"height and width must be divisible by {CODEC_SPATIAL_FACTOR}, got {height}x{width}")
    return v


def _patchify(x: Tensor) -> Tensor:
    t, h, w, c = x.shape
    p = CODEC_SPATIAL_FACTOR
    x = x.reshape(t, h // p, p, w // p, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, h // p, w // p, p * p * c)


def _unpatchify(x: Tensor, channels: int) -> Tensor:
    t, h, w, _ = x.shape
    p = CODEC_SPATIAL_FACTOR
    x = x.reshape(t, h, w, p, p, channels).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(t, h * p, w * p, channels)


class SpatialEncoder(Module):
    """Frame-wise 8x8 patch encoder (a stride-8 convolution written as a patch MLP)."""

    def __init__(self, cfg: CodecConfig, rng):
        patch = CODEC_SPATIAL_FACTOR ** 2 * cfg.in_channels
        self.net = MLP([patch, *cfg.spatial_widths, cfg.latent_channels], rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(_patchify(x))


class SpatialDecoder(Module):
    def __init__(self, cfg: CodecConfig, rng):
        patch = CODEC_SPATIAL_FACTOR ** 2 * cfg.in_channels
        self.channels = cfg.in_channels
        self.net = MLP([cfg.latent_channels, *reversed(cfg.spatial_widths), patch], rng)

    def forward(self, z: Tensor) -> Tensor:
        return _unpatchify(self.net(z), self.channels)


class TemporalEncoder(Module):
    """Causal stride-4 compression of per-frame latents."""

    def __init__(self, cfg: CodecConfig, rng):
        cz = cfg.latent_channels
        self.net = MLP([CODEC_TEMPORAL_STRIDE * cz, *cfg.temporal_widths, cz], rng)

    def forward(self, z2d: Tensor) -> Tensor:
        frames, h, w, cz = z2d.shape
        stride = CODEC_TEMPORAL_STRIDE
        groups = latent_length(frames)
        tail = stride * groups - (stride - 1) - frames
        parts = [Tensor(np.zeros((stride - 1, h, w, cz))), z2d]
        if tail:
            parts.append(Tensor(np.zeros((tail, h, w, cz))))
        padded = concat(parts, axis=0).reshape(groups, stride, h, w, cz)
        window = padded.transpose(0, 2, 3, 1, 4).reshape(groups, h, w, stride * cz)
        # Skip path: the newest frame of each group
        return self.net(window) + padded[:, stride - 1]


class TemporalDecoder(Module):
    """Expands each latent frame back to four per-frame latents; latent 0 yields frame 0 only."""

    def __init__(self, cfg: CodecConfig, rng):
        cz = cfg.latent_channels
        self.net = MLP([cz, *reversed(cfg.temporal_widths), CODEC_TEMPORAL_STRIDE * cz], rng)

    def forward(self, z3d: Tensor) -> Tensor:
        groups, h, w, cz = z3d.shape
        stride = CODEC_TEMPORAL_STRIDE
        delta = self.net(z3d).reshape(groups, h, w, stride, cz)
        skip = expand(z3d.reshape(groups, h, w, 1, cz), (groups, h, w, stride, cz))
        frames = (delta + skip).transpose(0, 3, 1, 2, 4).reshape(groups * stride, h, w, cz)
        return frames[stride - 1:]


def identity_loss(z3d, z2d) -> Tensor:
    """MSE between latent frames broadcast over the input frames they cover and the 2D latents."""
    z3d, z2d = as_tensor(z3d), as_tensor(z2d)
    if z3d.shape[1:] != z2d.shape[1:] or latent_length(z2d.shape[0]) != z3d.shape[0]:
        raise DimensionError(f"identity_loss: {z3d.shape} cannot be aligned with {z2d.shape}")
    cover = [math.ceil(j / CODEC_TEMPORAL_STRIDE) for j in range(z2d.shape[0])]
    return mse(z3d[cover], z2d)


class VideoCodec(Module):
    """Spatial 8x8 + causal temporal 4x video autoencoder."""

    def __init__(self, cfg: Optional[CodecConfig] = None):
        self.config = cfg or CodecConfig()
        rng = make_rng(self.config.seed, "codec.init")
        self.spatial_encoder = SpatialEncoder(self.config, rng)
        self.spatial_decoder = SpatialDecoder(self.config, rng)
        self.temporal_encoder = TemporalEncoder(self.config, rng)
        self.temporal_decoder = TemporalDecoder(self.config, rng)
        self.latent_mean = np.zeros(self.config.latent_channels)
        self.latent_std = np.ones(self.config.latent_channels)

    def set_stage(self, stage: int):
        self.config = CodecConfig(**{**asdict(self.config), "stage": stage})
        self.spatial_encoder.set_trainable(not self.config.spatial_frozen)
        self.spatial_decoder.set_trainable(not self.config.spatial_frozen)
        self.temporal_encoder.set_trainable(True)
        self.temporal_decoder.set_trainable(True)
        return self

    # Inference API (numpy in, numpy out)

    def encode_spatial(self, v: VideoArray) -> np.ndarray:
        v = _check_video(v, self.config.in_channels)
        return self.spatial_encoder(Tensor(v)).numpy()

    def encode_temporal(self, z2d: np.ndarray) -> LatentVideo:
        z2d = np.asarray(z2d, dtype=np.float32)
        if z2d.ndim != 4 or z2d.shape[0] < 1:
            raise GeometryError(f"per-frame latents must be [T, h, w, Cz] with T >= 1, got {z2d.shape}")
        z = self.temporal_encoder(Tensor(z2d)).numpy()
        return LatentVideo(z, self.latent_mean, self.latent_std, frames=z2d.shape[0])

    def encode(self, v: VideoArray) -> LatentVideo:
        return self.encode_temporal(self.encode_spatial(v))

    def decode(self, z: Union[LatentVideo, np.ndarray], target_frames: Optional[int] = None) -> VideoArray:
        data = z.data if isinstance(z, LatentVideo) else np.asarray(z, dtype=np.float32)
        if target_frames is None:
            target_frames = z.frames if isinstance(z, LatentVideo) else decoded_length(data.shape[0])
        groups = data.shape[0]
        produced = decoded_length(groups)
        lowest = 1 if groups == 1 else decoded_length(groups - 1) + 1
        if not lowest <= target_frames <= produced + CODEC_TEMPORAL_STRIDE - 1:
            raise GeometryError(f"{target_frames} frames are inconsistent with {groups} latent frames")
        z2d = self.temporal_decoder(Tensor(data))
        video = self.spatial_decoder(z2d).numpy()
        if target_frames > produced:
            # Hold the last decoded frame for the slack the causal layout allows
            video = np.concatenate([video, np.repeat(video[-1:], target_frames - produced, axis=0)])
        return np.clip(video[:target_frames], 0.0, 1.0)

    def roundtrip(self, v: VideoArray) -> VideoArray:
        return self.decode(self.encode(v), v.shape[0])

    # Training

    def loss_terms(self, v: VideoArray) -> Dict[str, Tensor]:
        """Stage-dependent reconstruction objective for one clip."""
        v = _check_video(v, self.config.in_channels)
        frames = v.shape[0]
        x = Tensor(v)
        z2d = self.spatial_encoder(x)
        z3d = self.temporal_encoder(z2d)
        rec2d = self.temporal_decoder(z3d)[:frames]
        terms = {}
        if self.config.stage in (1, 2):
            terms["feature"] = mse(rec2d, z2d)
            total = terms["feature"]
            if self.config.stage == 1:
                terms["identity"] = identity_loss(z3d, z2d)
                total = total + self.config.identity_weight * terms["identity"]
        else:
            terms["pixel"] = mse(self.spatial_decoder(rec2d), x)
            total = terms["pixel"]
        terms["total"] = total
        return terms

    def image_loss(self, frames: np.ndarray) -> Tensor:
        """Per-frame reconstruction through the 2D path only."""
        x = Tensor(_check_video(frames, self.config.in_channels))
        return mse(self.spatial_decoder(self.spatial_encoder(x)), x)

    def fit_latent_stats(self, videos: Sequence[VideoArray]):
        """Record per-channel mean/std of the latents of ``videos``."""
        if not videos:
            raise PreconditionError("cannot fit latent statistics on an empty set")
        stacked = np.concatenate([self.encode(v).data.reshape(-1, self.config.latent_channels) for v in videos])
        mean = stacked.mean(axis=0, dtype=np.float64)
        std = stacked.std(axis=0, dtype=np.float64)
        if np.any(std <= 0):
            raise DegenerateStatsError("a latent channel is constant over the fitting set")
        self.latent_mean, self.latent_std = mean, std
        logger.info(f"Latent channel stats: mean={np.round(mean, 4).tolist()} std={np.round(std, 4).tolist()}")
        return mean, std

    # Persistence

    def save(self, directory) -> Path:
        directory = Path(directory)
        tensors = {f"param.{k}": v for k, v in self.state_dict().items()}
        tensors["stats.mean"] = self.latent_mean
        tensors["stats.std"] = self.latent_std
        save_tensor_dir(directory, tensors)
        (directory / "codec.json").write_text(json.dumps(asdict(self.config), indent=2))
        return directory

    @classmethod
    def load(cls, directory) -> "VideoCodec":
        directory = Path(directory)
        cfg = CodecConfig(**json.loads((directory / "codec.json").read_text()))
        codec = cls(cfg)
        tensors = load_tensor_dir(directory)
        codec.load_state_dict({k[len("param."):]: v for k, v in tensors.items() if k.startswith("param.")})
        codec.latent_mean = tensors["stats.mean"].astype(np.float64)
        codec.latent_std = tensors["stats.std"].astype(np.float64)
        return codec


def _sample_training_clip(videos: Sequence[VideoArray], rng, stage: int) -> np.ndarray:
    v = videos[int(rng.integers(len(videos)))]
    if rng.random() >= CODEC_VIDEO_FRACTION or v.shape[0] == 1:
        return v[int(rng.integers(v.shape[0]))][None]
    limit = CODEC_MAX_MIXED_FRAMES if stage == 3 else CODEC_CLIP_FRAMES
    length = min(v.shape[0], limit)
    if stage == 3:
        # Mixed-length training: random lengths, zero padded by the causal stack
        length = int(rng.integers(1, length + 1))
    start = int(rng.integers(v.shape[0] - length + 1))
    return v[start:start + length]


def train_spatial(codec: VideoCodec, videos: Sequence[VideoArray], steps: int, seed: int = 0, batch_frames: int = 4, lr: Optional[float] = None) -> List[float]:
    """Warm up the 2D path on single frames (stands in for a pretrained image autoencoder)."""
    rng = make_rng(seed, "codec.spatial")
    codec.set_trainable(False)
    codec.spatial_encoder.set_trainable(True)
    codec.spatial_decoder.set_trainable(True)
    optimizer = Adam(codec.trainable_parameters(), lr=lr or codec.config.learning_rate, eps=1e-8)
    history = []
    for _ in tqdm(range(steps), desc="codec 2d", disable=steps < 50):
        v = videos[int(rng.integers(len(videos)))]
        frames = v[rng.integers(v.shape[0], size=batch_frames)]
        loss = codec.image_loss(frames)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(loss.item())
    return history


def train_codec(codec: VideoCodec, videos: Sequence[VideoArray], steps: int, stage: int, seed: int = 0, batch_size: int = 2, lr: Optional[float] = None) -> List[float]:
    """Run ``steps`` optimizer steps of codec ``stage`` on a mix of clips and single frames.

    Returns:
        Per-step total loss
    """
    if not videos:
        raise PreconditionError("codec training needs at least one video")
    codec.set_stage(stage)
    rng = make_rng(seed, f"codec.stage{stage}")
    optimizer = Adam(codec.trainable_parameters(), lr=lr or codec.config.learning_rate, eps=1e-8)
    history = []
    for _ in tqdm(range(steps), desc=f"codec stage {stage}", disable=steps < 50):
        total = None
        for _ in range(batch_size):
            term = codec.loss_terms(_sample_training_clip(videos, rng, stage))["total"]
            total = term if total is None else total + term
        loss = total / float(batch_size)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        history.append(loss.item())
    logger.info(f"Codec stage {stage}: loss {history[0]:.5f} -> {history[-1]:.5f}" if history else f"Codec stage {stage}: no steps")
    return history


def segment_clips(v: VideoArray, length: int = CODEC_CLIP_FRAMES) -> List[VideoArray]:
    """Split a video into consecutive ``length``-frame clips; the last clip may be shorter."""
    v = np.asarray(v)
    if v.ndim != 4 or v.shape[0] < 1:
        raise PreconditionError(f"segment_clips needs a [T, H, W, C] video with T >= 1, got {v.shape}")
    return [v[i:i + length] for i in range(0, v.shape[0], length)]


def _ssim_frames(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    sigma = (0, 1.5, 1.5, 0)
    mu_a = gaussian_filter(a, sigma)
    mu_b = gaussian_filter(b, sigma)
    aa = gaussian_filter(a * a, sigma) - mu_a * mu_a
    bb = gaussian_filter(b * b, sigma) - mu_b * mu_b
    ab = gaussian_filter(a * b, sigma) - mu_a * mu_b
    ssim_map = ((2 * mu_a * mu_b + c1) * (2 * ab + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (aa + bb + c2))
    return ssim_map.mean(axis=(1, 2, 3))


def metrics(a: VideoArray, b: VideoArray) -> Tuple[float, float]:
    """SSIM (Gaussian window, per frame, averaged) and PSNR in dB for [0, 1] videos."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"metrics: shapes {a.shape} and {b.shape} differ")
    if a.ndim == 3:
        a, b = a[None], b[None]
    ssim = float(np.mean(_ssim_frames(a, b)))
    err = float(np.mean((a - b) ** 2))
    psnr = PSNR_CAP_DB if err == 0 else min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / err))
    return ssim, psnr


def roundtrip_report(codec: VideoCodec, clips: Dict[str, VideoArray]) -> pd.DataFrame:
    """Per-clip SSIM/PSNR of decode(encode(clip))."""
    rows = []
    for clip_id, clip in clips.items():
        ssim, psnr = metrics(clip, codec.roundtrip(clip))
        rows.append({"clip_id": clip_id, "frames": clip.shape[0], "ssim": ssim, "psnr": psnr})
    return pd.DataFrame(rows, columns=["clip_id", "frames", "ssim", "psnr"])


def save_latent(path, latent: LatentVideo) -> Path:
    """Write the latent as VTEN with a ``.txt`` sidecar holding frames and channel stats."""
    path = save_vten(path, latent.data)
    sidecar = Path(f"{path}.txt")
    sidecar.write_text(
        f"frames {latent.frames}\n"
        f"mean {' '.join(repr(float(m)) for m in latent.mean)}\n"
        f"std {' '.join(repr(float(s)) for s in latent.std)}\n"
    )
    return path


def load_latent(path) -> LatentVideo:
    data = load_vten(path)
    fields = {}
    for line in Path(f"{path}.txt").read_text().splitlines():
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    return LatentVideo(
        data,
        np.array([float(x) for x in fields["mean"]]),
        np.array([float(x) for x in fields["std"]]),
        frames=int(fields["frames"][0]),
    )
