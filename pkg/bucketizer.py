"""Bucketed batch planning for clips of mixed size and length.

A bucket is a (resolution, frames, aspect) triplet with a keep probability and
its own batch size. Every batch is homogeneous in its bucket.
"""

import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import zoom

from config import CODEC_SPATIAL_FACTOR, RESOLUTION_LADDER, SUPPORTED_ASPECTS, TOY_FPS, resolution_label
from errors import ConfigError, GeometryError, PreconditionError

logger = logging.getLogger(__name__)

BUCKET_COLUMNS = ["resolution", "frames", "aspect", "keep_prob", "batch_size"]


def aspect_value(aspect: str) -> float:
    """Width over height for an "w:h" label."""
    try:
        w, h = (float(part) for part in aspect.split(":"))
    except ValueError as e:
        raise ConfigError(f"aspect must look like 'w:h', got {aspect!r}") from e
    if w <= 0 or h <= 0:
        raise ConfigError(f"aspect sides must be positive, got {aspect!r}")
    return w / h


def _round_to_factor(value: float) -> int:
    return max(CODEC_SPATIAL_FACTOR, int(round(value / CODEC_SPATIAL_FACTOR)) * CODEC_SPATIAL_FACTOR)


def bucket_geometry(resolution: int, aspect: str) -> Tuple[int, int]:
    """Pixel (height, width): the short side is ``resolution``, the long side a multiple of 8."""
    ratio = aspect_value(aspect)
    if ratio >= 1:
        return resolution, _round_to_factor(resolution * ratio)
    return _round_to_factor(resolution / ratio), resolution


@dataclass(frozen=True)
class Bucket:
    resolution: int
    frames: int
    aspect: str = "1:1"
    keep_prob: float = 1.0
    batch_size: int = 1

    def __post_init__(self):
        if self.resolution < 1 or self.frames < 1:
            raise ConfigError(f"bucket resolution and frames must be positive: {self}")
        if self.resolution % CODEC_SPATIAL_FACTOR:
            raise ConfigError(f"bucket resolution must be a multiple of {CODEC_SPATIAL_FACTOR}, got {self.resolution}")
        if self.aspect not in SUPPORTED_ASPECTS:
            raise ConfigError(f"unsupported aspect {self.aspect!r}; choose from {SUPPORTED_ASPECTS}")
        if not 0.0 <= self.keep_prob <= 1.0:
            raise ConfigError(f"keep_prob must lie in [0, 1], got {self.keep_prob}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")

    @property
    def key(self) -> Tuple[int, int, str]:
        return self.resolution, self.frames, self.aspect

    @property
    def name(self) -> str:
        return f"{resolution_label(self.resolution)}/{self.frames}f/{self.aspect}"

    @property
    def geometry(self) -> Tuple[int, int]:
        return bucket_geometry(self.resolution, self.aspect)

    @property
    def token_proxy(self) -> int:
        """frames x latent cells x batch size."""
        h, w = self.geometry
        return self.frames * (h // CODEC_SPATIAL_FACTOR) * (w // CODEC_SPATIAL_FACTOR) * self.batch_size


@dataclass(frozen=True)
class SampleMeta:
    clip_id: str
    width: int
    height: int
    frames: int
    fps: float = TOY_FPS

    def __post_init__(self):
        if min(self.width, self.height, self.frames) < 1 or not self.fps > 0:
            raise GeometryError(f"sample geometry must be positive: {self}")

    @property
    def short_side(self) -> int:
        return min(self.width, self.height)

    @property
    def aspect(self) -> float:
        return self.width / self.height


@dataclass(frozen=True)
class Rejected:
    clip_id: str
    reason: str = "no bucket accepted the sample"


@dataclass
class Batch:
    bucket: Bucket
    clip_ids: Tuple[str, ...]


@dataclass
class EpochPlan:
    batches: List[Batch] = field(default_factory=list)
    rejected: List[str] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)

    @property
    def samples(self) -> List[str]:
        return [cid for batch in self.batches for cid in batch.clip_ids]

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {"batch": i, "bucket": b.bucket.name, "clip_id": cid}
            for i, b in enumerate(self.batches)
            for cid in b.clip_ids
        ]
        return pd.DataFrame(rows, columns=["batch", "bucket", "clip_id"])


# Desk-scale table sized so a corpus of a few dozen clips fills whole batches in every bucket.
DEFAULT_BUCKETS = [
    Bucket(16, 1, "1:1", 1.0, 8),
    Bucket(8, 16, "1:1", 1.0, 4),
    Bucket(16, 16, "1:1", 1.0, 2),
    Bucket(16, 16, "16:9", 1.0, 2),
    Bucket(16, 16, "9:16", 1.0, 2),
    Bucket(16, 32, "1:1", 0.8, 1),
    Bucket(24, 16, "1:1", 0.7, 1),
    Bucket(32, 16, "1:1", 0.5, 1),
]


def assign(sample: SampleMeta, buckets: Sequence[Bucket], rng: np.random.Generator) -> Union[Bucket, Rejected]:
    """Largest fitting bucket by (resolution, frames), closest aspect within a level.

    A keep-probability draw happens at every level tried; a failed draw moves the
    sample to the next strictly smaller level.
    """
    if not buckets:
        raise PreconditionError("bucket list is empty")
    fitting = [b for b in buckets if b.resolution <= sample.short_side and b.frames <= sample.frames]
    levels = sorted({(b.resolution, b.frames) for b in fitting}, reverse=True)
    target = math.log(sample.aspect)
    for level in levels:
        group = [b for b in fitting if (b.resolution, b.frames) == level]
        bucket = min(group, key=lambda b: (abs(math.log(aspect_value(b.aspect)) - target), b.aspect))
        if rng.random() < bucket.keep_prob:
            return bucket
    return Rejected(sample.clip_id)


def plan_epoch(samples: Sequence[SampleMeta], buckets: Sequence[Bucket], rng: np.random.Generator) -> EpochPlan:
    """Shuffle, assign, cut full batches per bucket and interleave them."""
    plan = EpochPlan()
    groups: Dict[Tuple[int, int, str], List[str]] = {}
    by_key = {}
    for idx in rng.permutation(len(samples)):
        sample = samples[idx]
        result = assign(sample, buckets, rng)
        if isinstance(result, Rejected):
            plan.rejected.append(result.clip_id)
            continue
        groups.setdefault(result.key, []).append(sample.clip_id)
        by_key[result.key] = result
    batches = []
    for key, ids in groups.items():
        size = by_key[key].batch_size
        full = len(ids) // size * size
        batches.extend(Batch(by_key[key], tuple(ids[i:i + size])) for i in range(0, full, size))
        plan.dropped.extend(ids[full:])
    plan.batches = [batches[i] for i in rng.permutation(len(batches))]
    logger.info(
        f"Planned {len(plan.batches)} batches: {len(plan.samples)} samples, "
        f"{len(plan.rejected)} rejected, {len(plan.dropped)} in partial batches"
    )
    return plan


def load_report(plan: EpochPlan) -> pd.DataFrame:
    """Per-bucket batch counts and token proxies, with a final "all" row over every batch."""
    if not plan.batches:
        raise PreconditionError("cannot report on an empty plan")
    proxies = pd.DataFrame(
        [{"bucket": b.bucket.name, "batch_size": b.bucket.batch_size, "proxy": b.bucket.token_proxy} for b in plan.batches]
    )
    report = (
        proxies.groupby(["bucket", "batch_size"], sort=True)["proxy"]
        .agg(batches="count", max="max", min="min", mean="mean")
        .reset_index()
    )
    overall = pd.DataFrame([{
        "bucket": "all",
        "batch_size": np.nan,
        "batches": len(proxies),
        "max": proxies["proxy"].max(),
        "min": proxies["proxy"].min(),
        "mean": proxies["proxy"].mean(),
    }])
    return pd.concat([report, overall], ignore_index=True)


def _parse_resolution(value) -> int:
    text = str(value).strip()
    if text in RESOLUTION_LADDER:
        return RESOLUTION_LADDER[text]
    try:
        return int(float(text))
    except ValueError as e:
        raise ConfigError(f"unknown resolution {value!r}") from e


def _cell(row: dict, key: str, default):
    """Row value, or the default when the column is absent or empty in this row."""
    value = row.get(key)
    return default if value is None or pd.isna(value) else value


def parse_bucket_table(source: Union[str, Path, Iterable[dict]]) -> List[Bucket]:
    """Buckets from TOML rows (dicts) or CSV text/path with columns resolution, frames, aspect, keep_prob, batch_size."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and source.endswith(".csv")):
        frame = pd.read_csv(source)
    elif isinstance(source, str):
        frame = pd.read_csv(io.StringIO(source), skipinitialspace=True)
    else:
        frame = pd.DataFrame(list(source))
    missing = [c for c in ("resolution", "frames") if c not in frame.columns]
    if missing:
        raise ConfigError(f"bucket table is missing columns {missing}")
    unknown = set(frame.columns) - set(BUCKET_COLUMNS)
    if unknown:
        raise ConfigError(f"bucket table has unknown columns {sorted(unknown)}")
    buckets = []
    for row in frame.to_dict("records"):
        buckets.append(Bucket(
            resolution=_parse_resolution(row["resolution"]),
            frames=int(row["frames"]),
            aspect=str(_cell(row, "aspect", "1:1")).strip(),
            keep_prob=float(_cell(row, "keep_prob", 1.0)),
            batch_size=int(_cell(row, "batch_size", 1)),
        ))
    if not buckets:
        raise ConfigError("bucket table is empty")
    return buckets


def fit_to_bucket(video: np.ndarray, bucket: Bucket) -> np.ndarray:
    """Resize to cover the bucket frame, center-crop, keep the first ``bucket.frames`` frames."""
    video = np.asarray(video, dtype=np.float32)
    if video.ndim != 4:
        raise GeometryError(f"video must be [T, H, W, C], got {video.shape}")
    t, height, width, _ = video.shape
    if t < bucket.frames:
        raise GeometryError(f"clip has {t} frames, bucket {bucket.name} needs {bucket.frames}")
    h, w = bucket.geometry
    scale = max(h / height, w / width)
    clip = video[: bucket.frames]
    if not math.isclose(scale, 1.0):
        clip = zoom(clip, (1.0, scale, scale, 1.0), order=1, mode="nearest", grid_mode=True)
    top = (clip.shape[1] - h) // 2
    left = (clip.shape[2] - w) // 2
    if top < 0 or left < 0:
        raise GeometryError(f"resized clip {clip.shape[1:3]} does not cover bucket geometry {(h, w)}")
    return np.clip(clip[:, top:top + h, left:left + w], 0.0, 1.0)


def sample_meta(clip_id: str, video: np.ndarray, fps: float = TOY_FPS) -> SampleMeta:
    t, h, w = np.shape(video)[:3]
    return SampleMeta(clip_id, width=w, height=h, frames=t, fps=fps)
