"""Run orchestration: configuration, synthetic data, staged training, validation grid, generation."""

import collections
import concurrent.futures
import json
import logging
import math
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from tqdm import tqdm

from bucketizer import DEFAULT_BUCKETS, Bucket, bucket_geometry, fit_to_bucket, parse_bucket_table, plan_epoch, sample_meta
from conditioning import FrameMask, ScoredCaption, embed_text, format_caption, parse_mask_spec, sample_pattern
from config import (
    ADAM_EPS,
    DEFAULT_SEED,
    LEARNING_RATE,
    LOSS_SMOOTHING_WINDOW,
    MAX_WORKERS,
    RESOLUTION_LADDER,
    SUPPORTED_ASPECTS,
    TOY_FPS,
    VALIDATION_LENGTHS,
    validate_mask_prob,
)
from dataprep import load_video
from errors import (
    ArgumentError,
    ConfigError,
    GeometryError,
    KitError,
    NonFiniteError,
    PreconditionError,
    TrainingDivergedError,
)
from flow_match import FlowConfig, channel_denormalize, channel_normalize, euler_sample, training_loss, validation_loss
from latent_codec import CodecConfig, LatentVideo, VideoCodec, latent_length, train_codec, train_spatial
from numerics import Adam, load_tensor_dir, make_rng, save_tensor_dir, save_vten
from stdit_model import STDiT, ModelConfig, freeze_non_temporal
from utils import ensure_dir, resolve_seed, smooth

logger = logging.getLogger(__name__)

PREFETCH = 2
NULL_PROMPT = "<null>"


# Configuration


@dataclass
class SynthConfig:
    count: int = 24
    resolutions: Tuple[int, ...] = (16, 24, 32)
    aspects: Tuple[str, ...] = ("1:1", "16:9", "9:16")
    frames: Tuple[int, ...] = (17, 33)
    fps: float = TOY_FPS
    speed: float = 2.0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.aspects = tuple(self.aspects)
        self.frames = tuple(int(f) for f in self.frames)
        if not (self.resolutions and self.aspects and self.frames):
            raise ConfigError("synthetic resolutions, aspects and frames must be non-empty")
        bad = [a for a in self.aspects if a not in SUPPORTED_ASPECTS]
        if bad:
            raise ConfigError(f"unsupported synthetic aspects {bad}")
        if min(self.frames) < 1 or not self.fps > 0:
            raise ConfigError("synthetic frames and fps must be positive")


@dataclass
class CodecRunConfig:
    codec: CodecConfig = field(default_factory=CodecConfig)
    spatial_steps: int = 300
    stage_steps: Tuple[int, int, int] = (200, 200, 200)
    batch_size: int = 2

    def __post_init__(self):
        self.stage_steps = tuple(int(s) for s in self.stage_steps)
        if len(self.stage_steps) != 3 or min(self.stage_steps + (self.spatial_steps,)) < 0:
            raise ConfigError("codec stage_steps must be three non-negative counts")
        if self.batch_size < 1:
            raise ConfigError("codec batch_size must be >= 1")


@dataclass
class StageConfig:
    stage: int
    steps: int
    mask_prob: float = 0.0
    resolutions: Tuple[int, ...] = ()
    frames: Tuple[int, ...] = ()
    learning_rate: float = LEARNING_RATE
    buckets: Optional[List[Bucket]] = None
    temporal_only: bool = False

    def __post_init__(self):
        self.resolutions = tuple(RESOLUTION_LADDER.get(r, r) if isinstance(r, str) else int(r) for r in self.resolutions)
        self.frames = tuple(int(f) for f in self.frames)
        if self.steps <= 0:
            raise ConfigError(f"stage {self.stage}: steps must be positive, got {self.steps}")
        if not validate_mask_prob(self.mask_prob):
            raise ConfigError(f"stage {self.stage}: mask_prob must lie in [0, 1], got {self.mask_prob}")
        if not self.learning_rate > 0:
            raise ConfigError(f"stage {self.stage}: learning rate must be positive")

    def resolve_buckets(self, table: Sequence[Bucket]) -> List[Bucket]:
        """The stage's own table, or the shared table restricted to its resolutions and lengths."""
        chosen = list(self.buckets) if self.buckets else [
            b for b in table
            if (not self.resolutions or b.resolution in self.resolutions)
            and (not self.frames or b.frames in self.frames)
        ]
        if not chosen:
            raise ConfigError(f"stage {self.stage} has no buckets")
        return chosen


DEFAULT_STAGES = [
    StageConfig(1, 300, 0.0, resolutions=(8, 16), frames=(1, 16)),
    StageConfig(2, 300, 0.25, resolutions=(16, 24), frames=(16, 32)),
    StageConfig(3, 300, 0.5, resolutions=(16, 24, 32), frames=(16, 32)),
]


@dataclass
class ValidationConfig:
    lengths: Dict[str, int] = field(default_factory=lambda: dict(VALIDATION_LENGTHS))
    resolutions: Dict[str, int] = field(default_factory=lambda: dict(RESOLUTION_LADDER))
    clips: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.clips < 1:
            raise ConfigError("validation needs at least one clip per cell")
        if not self.lengths or not self.resolutions:
            raise ConfigError("validation lengths and resolutions must be non-empty")


@dataclass
class KitConfig:
    seed: int = DEFAULT_SEED
    model: ModelConfig = field(default_factory=ModelConfig)
    flow: FlowConfig = field(default_factory=FlowConfig)
    codec: CodecRunConfig = field(default_factory=CodecRunConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    stages: List[StageConfig] = field(default_factory=lambda: list(DEFAULT_STAGES))
    buckets: List[Bucket] = field(default_factory=lambda: list(DEFAULT_BUCKETS))
    validation: ValidationConfig = field(default_factory=ValidationConfig)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"[{section}] must be a table")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as e:
        raise ConfigError(f"[{section}]: {e}") from e


def _buckets_from(raw) -> List[Bucket]:
    if isinstance(raw, dict):
        if "rows" in raw:
            return parse_bucket_table(raw["rows"])
        if "csv" in raw:
            return parse_bucket_table(Path(raw["csv"]))
        raise ConfigError("[buckets] needs 'rows' or 'csv'")
    return parse_bucket_table(raw)


def load_config(path=None) -> KitConfig:
    """Read a TOML run configuration; missing keys keep their defaults.

    The OPEN_SORA_KIT_SEED environment variable overrides ``seed``.
    """
    raw = {}
    if path is not None:
        try:
            with open(path, "rb") as f:
                raw = tomllib.load(f)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    sections = {"seed", "model", "flow", "codec", "synth", "stages", "buckets", "validation"}
    unknown = set(raw) - sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    seed = resolve_seed(int(raw.get("seed", DEFAULT_SEED)))
    model = _build(ModelConfig, {"seed": seed, **raw.get("model", {})}, "model")
    flow = _build(FlowConfig, raw.get("flow", {}), "flow")

    codec_raw = dict(raw.get("codec", {}))
    run_keys = {f.name for f in fields(CodecRunConfig)} - {"codec"}
    run_values = {k: codec_raw.pop(k) for k in list(codec_raw) if k in run_keys}
    codec = CodecRunConfig(codec=_build(CodecConfig, {"seed": seed, **codec_raw}, "codec"), **run_values)

    synth = _build(SynthConfig, raw.get("synth", {}), "synth")
    buckets = _buckets_from(raw["buckets"]) if "buckets" in raw else list(DEFAULT_BUCKETS)

    stages = list(DEFAULT_STAGES)
    if "stages" in raw:
        stages = []
        for key in sorted(raw["stages"], key=int):
            values = dict(raw["stages"][key])
            if "buckets" in values:
                values["buckets"] = _buckets_from(values["buckets"])
            stages.append(_build(StageConfig, {"stage": int(key), **values}, f"stages.{key}"))

    validation_raw = dict(raw.get("validation", {}))
    if "resolutions" in validation_raw and isinstance(validation_raw["resolutions"], list):
        validation_raw["resolutions"] = {label: RESOLUTION_LADDER[label] for label in validation_raw["resolutions"]}
    validation = _build(ValidationConfig, {"seed": seed, **validation_raw}, "validation")
    return KitConfig(seed, model, flow, codec, synth, stages, buckets, validation)


# Synthetic data


PALETTE = {
    "red": (0.9, 0.15, 0.15),
    "green": (0.15, 0.8, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.85, 0.2),
    "white": (0.95, 0.95, 0.95),
}
SHAPES = ["square", "rectangle", "disk"]
MOTIONS = {
    # label: (vx, vy, spin, camera label implied by the content motion)
    "moving right": (1.0, 0.0, 0.0, "pan left"),
    "moving left": (-1.0, 0.0, 0.0, "pan right"),
    "moving up": (0.0, -1.0, 0.0, "tilt down"),
    "moving down": (0.0, 1.0, 0.0, "tilt up"),
    "rotating": (0.0, 0.0, 0.3, "static"),
    "static": (0.0, 0.0, 0.0, "static"),
}


@dataclass
class ClipDataset:
    videos: Dict[str, np.ndarray]
    manifest: pd.DataFrame

    def __len__(self):
        return len(self.videos)

    @property
    def clip_ids(self) -> List[str]:
        return list(self.manifest["clip_id"])

    def caption(self, clip_id: str) -> str:
        return str(self.manifest.set_index("clip_id").at[clip_id, "caption"])

    def fps(self, clip_id: str) -> float:
        return float(self.manifest.set_index("clip_id").at[clip_id, "fps"])

    def metas(self):
        return [sample_meta(cid, self.videos[cid], self.fps(cid)) for cid in self.clip_ids]


def render_shape_clip(rng: np.random.Generator, height: int, width: int, frames: int,
                      shape: str, color, motion: str, speed: float) -> np.ndarray:
    """A textured shape on a plain background, moving on a torus so it never leaves the frame."""
    vx, vy, spin, _ = MOTIONS[motion]
    radius = 0.3 * min(height, width)
    reach = int(math.ceil(radius * 1.5)) + 1
    texture = 0.7 + 0.3 * rng.random((2 * reach + 1, 2 * reach + 1))
    background = 0.1 + 0.25 * rng.random(3)
    cx0, cy0 = rng.uniform(0, width), rng.uniform(0, height)
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    video = np.empty((frames, height, width, 3), dtype=np.float32)
    for t in range(frames):
        cx, cy = cx0 + vx * speed * t, cy0 + vy * speed * t
        dx = (xs - cx + width / 2) % width - width / 2
        dy = (ys - cy + height / 2) % height - height / 2
        c, s = math.cos(spin * t), math.sin(spin * t)
        lx, ly = c * dx + s * dy, -s * dx + c * dy
        if shape == "disk":
            inside = lx ** 2 + ly ** 2 <= radius ** 2
        elif shape == "rectangle":
            inside = (np.abs(lx) <= radius) & (np.abs(ly) <= 0.6 * radius)
        else:
            inside = (np.abs(lx) <= radius) & (np.abs(ly) <= radius)
        ty = np.clip(np.rint(ly).astype(int) + reach, 0, 2 * reach)
        tx = np.clip(np.rint(lx).astype(int) + reach, 0, 2 * reach)
        shade = texture[ty, tx][..., None] * np.asarray(color)
        video[t] = np.where(inside[..., None], shade, background)
    return np.clip(video, 0.0, 1.0)


def make_synthetic(n: int, spec: Optional[SynthConfig] = None, seed: int = DEFAULT_SEED, stream: str = "synth") -> ClipDataset:
    """Moving-shape clips with programmatic captions such as "red square moving right"."""
    if n < 1:
        raise PreconditionError(f"synthetic dataset needs n >= 1, got {n}")
    spec = spec or SynthConfig()
    rng = make_rng(seed, stream)
    videos, rows = {}, []
    for i in range(n):
        resolution = spec.resolutions[int(rng.integers(len(spec.resolutions)))]
        aspect = spec.aspects[int(rng.integers(len(spec.aspects)))]
        frames = spec.frames[int(rng.integers(len(spec.frames)))]
        color = list(PALETTE)[int(rng.integers(len(PALETTE)))]
        shape = SHAPES[int(rng.integers(len(SHAPES)))]
        motion = list(MOTIONS)[int(rng.integers(len(MOTIONS)))]
        height, width = bucket_geometry(resolution, aspect)
        clip_id = f"{stream}-{i:04d}"
        videos[clip_id] = render_shape_clip(rng, height, width, frames, shape, PALETTE[color], motion, spec.speed)
        rows.append({
            "clip_id": clip_id,
            "path": f"clips/{clip_id}.vten",
            "caption": f"{color} {shape} {motion}",
            "motion": motion,
            "camera_motion": MOTIONS[motion][3],
            "frames": frames,
            "width": width,
            "height": height,
            "fps": spec.fps,
        })
    logger.info(f"Generated {n} synthetic clips (seed {seed}, stream {stream})")
    return ClipDataset(videos, pd.DataFrame(rows))


def save_dataset(dataset: ClipDataset, out_dir) -> Path:
    out = ensure_dir(out_dir)
    ensure_dir(out / "clips")
    manifest = dataset.manifest.copy()
    for cid in dataset.clip_ids:
        save_vten(out / "clips" / f"{cid}.vten", dataset.videos[cid])
    manifest["path"] = [f"clips/{cid}.vten" for cid in dataset.clip_ids]
    manifest.to_csv(out / "manifest.csv", index=False)
    return out


def load_dataset(directory) -> ClipDataset:
    """Read a synthetic dataset or a prep output (only rows with keep=True are used)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.csv"
    if not manifest_path.exists():
        raise ArgumentError(f"no manifest.csv in {directory}")
    manifest = pd.read_csv(manifest_path, keep_default_na=False)
    if "keep" in manifest.columns:
        manifest = manifest[manifest["keep"].astype(str).str.lower() == "true"].reset_index(drop=True)
    videos = {}
    sources = {}
    for row in manifest.to_dict("records"):
        path = Path(row["path"])
        path = path if path.is_absolute() else directory / path
        if str(path) not in sources:
            sources[str(path)] = load_video(path)
        video = sources[str(path)]
        if "start" in row and "end" in row:
            video = video[int(row["start"]):int(row["end"])]
        videos[row["clip_id"]] = video
    if "fps" not in manifest.columns:
        manifest["fps"] = TOY_FPS
    logger.info(f"Loaded {len(videos)} clips from {directory}")
    return ClipDataset(videos, manifest)


# Codec


def train_codec_stack(run: CodecRunConfig, videos: Sequence[np.ndarray], seed: int = DEFAULT_SEED) -> Tuple[VideoCodec, pd.DataFrame]:
    """Spatial warm-up, the three codec stages, then latent channel statistics."""
    if not videos:
        raise PreconditionError("codec training needs at least one video")
    codec = VideoCodec(replace(run.codec, seed=seed))
    rows = [{"phase": "spatial", "step": i, "loss": v} for i, v in enumerate(train_spatial(codec, videos, run.spatial_steps, seed))]
    for stage, steps in zip((1, 2, 3), run.stage_steps):
        history = train_codec(codec, videos, steps, stage, seed, run.batch_size)
        rows += [{"phase": f"stage{stage}", "step": i, "loss": v} for i, v in enumerate(history)]
    codec.fit_latent_stats(videos)
    return codec, pd.DataFrame(rows, columns=["phase", "step", "loss"])


class LatentCache:
    """Normalized latents per (clip, bucket); encoding is deterministic so entries never go stale."""

    def __init__(self, codec: VideoCodec, dataset: ClipDataset):
        self.codec = codec
        self.dataset = dataset
        self._store: Dict[tuple, np.ndarray] = {}

    def get(self, clip_id: str, bucket: Bucket) -> np.ndarray:
        key = (clip_id, bucket.key)
        if key not in self._store:
            clip = fit_to_bucket(self.dataset.videos[clip_id], bucket)
            self._store[key] = channel_normalize(self.codec.encode(clip))
        return self._store[key]


def _text_batch(captions: Sequence[str], cfg: ModelConfig):
    embeddings = [embed_text(c, cfg.max_text_len, cfg.text_dim) for c in captions]
    return np.stack([e.data for e in embeddings]), np.stack([e.mask for e in embeddings])


def velocity_model(model: STDiT, fps, text, text_mask):
    """Bind conditioning so the flow functions see ``fn(x_t, t)``."""

    def fn(x_t, t):
        return model(x_t, t, fps, text, text_mask)

    return fn


# Checkpoints


def save_checkpoint(directory, model: STDiT, optimizer: Adam, state: dict) -> Path:
    directory = ensure_dir(directory)
    model.save(directory / "model")
    save_tensor_dir(directory / "optimizer", optimizer.state_dict())
    (directory / "trainer.json").write_text(json.dumps(state, indent=2, sort_keys=True))
    logger.info(f"Saved checkpoint to {directory}")
    return directory


def load_model(directory) -> STDiT:
    """Model from a training checkpoint or from a bare model directory."""
    directory = Path(directory)
    return STDiT.load(directory / "model" if (directory / "model").is_dir() else directory)


def load_checkpoint(directory) -> Tuple[STDiT, dict, dict]:
    directory = Path(directory)
    if not (directory / "trainer.json").exists():
        raise ArgumentError(f"{directory} is not a training checkpoint")
    model = load_model(directory)
    optimizer_state = load_tensor_dir(directory / "optimizer")
    state = json.loads((directory / "trainer.json").read_text())
    return model, optimizer_state, state


# Training


@dataclass
class TrainResult:
    model: STDiT
    log: pd.DataFrame
    checkpoints: List[Path] = field(default_factory=list)


LOG_COLUMNS = ["stage", "step", "global_step", "bucket", "batch_size", "latent_frames", "loss", "masked_samples", "video_samples"]


def train(cfg: KitConfig, codec: VideoCodec, dataset: ClipDataset, out_dir=None,
          stages: Optional[Sequence[StageConfig]] = None, resume=None, max_workers: int = MAX_WORKERS) -> TrainResult:
    """Staged flow-matching training with a checkpoint at every stage boundary.

    ``resume`` points at a stage checkpoint; stages up to and including the one
    it records are skipped and the model and optimizer continue from it.
    """
    if len(dataset) == 0:
        raise PreconditionError("training needs a non-empty dataset")
    stages = list(stages if stages is not None else cfg.stages)
    if not stages:
        raise ConfigError("training needs at least one stage")
    if [s.stage for s in stages] != sorted(s.stage for s in stages):
        raise ConfigError("stages must be listed in increasing order")
    seed = cfg.seed
    global_step = 0
    if resume is not None:
        model, optimizer_state, state = load_checkpoint(resume)
        optimizer = Adam(model.parameters(), lr=stages[0].learning_rate, eps=ADAM_EPS)
        optimizer.load_state_dict(optimizer_state)
        seed = int(state["seed"])
        global_step = int(state["global_step"])
        stages = [s for s in stages if s.stage > int(state["stage"])]
        logger.info(f"Resuming after stage {state['stage']} at step {global_step}")
    else:
        model = STDiT(replace(cfg.model, seed=seed))
        optimizer = Adam(model.parameters(), lr=stages[0].learning_rate if stages else LEARNING_RATE, eps=ADAM_EPS)

    out = ensure_dir(out_dir) if out_dir is not None else None
    cache = LatentCache(codec, dataset)
    metas = dataset.metas()
    rows, checkpoints = [], []

    for stage in stages:
        rng = make_rng(seed, f"train.stage{stage.stage}")
        optimizer.lr = stage.learning_rate
        model.set_trainable(True)
        if stage.temporal_only:
            freeze_non_temporal(model)
        buckets = stage.resolve_buckets(cfg.buckets)
        step = 0
        progress = tqdm(total=stage.steps, desc=f"Stage {stage.stage}", disable=stage.steps < 50)
        while step < stage.steps:
            plan = plan_epoch(metas, buckets, rng)
            if not plan.batches:
                raise PreconditionError(f"stage {stage.stage}: the dataset fills no batch of its buckets")
            batches = plan.batches[: stage.steps - step]

            def load(batch):
                x0 = np.stack([cache.get(cid, batch.bucket) for cid in batch.clip_ids])
                text, text_mask = _text_batch([dataset.caption(cid) for cid in batch.clip_ids], model.config)
                fps = np.array([dataset.fps(cid) for cid in batch.clip_ids])
                return x0, text, text_mask, fps

            with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, min(max_workers, PREFETCH))) as executor:
                pending = collections.deque()
                queue = iter(batches)
                for batch in queue:
                    pending.append((batch, executor.submit(load, batch)))
                    if len(pending) >= PREFETCH:
                        break
                while pending:
                    batch, future = pending.popleft()
                    nxt = next(queue, None)
                    if nxt is not None:
                        pending.append((nxt, executor.submit(load, nxt)))
                    x0, text, text_mask, fps = future.result()
                    frames = x0.shape[1]
                    masks = np.stack([sample_pattern(rng, frames, stage.mask_prob).conditioning for _ in range(x0.shape[0])])
                    try:
                        loss = training_loss(velocity_model(model, fps, text, text_mask), x0, rng, cfg.flow, mask=masks)
                        optimizer.zero_grad()
                        loss.backward()
                        optimizer.step()
                    except NonFiniteError as e:
                        raise TrainingDivergedError(f"stage {stage.stage} step {step} ({batch.bucket.name}): {e}") from e
                    value = loss.item()
                    if not math.isfinite(value):
                        raise TrainingDivergedError(f"stage {stage.stage} step {step}: loss is {value}")
                    rows.append({
                        "stage": stage.stage,
                        "step": step,
                        "global_step": global_step,
                        "bucket": batch.bucket.name,
                        "batch_size": x0.shape[0],
                        "latent_frames": frames,
                        "loss": value,
                        "masked_samples": int(masks.any(axis=1).sum()),
                        "video_samples": int(x0.shape[0]) if frames > 1 else 0,
                    })
                    step += 1
                    global_step += 1
                    progress.update(1)
        progress.close()
        logger.info(f"Stage {stage.stage} done: last loss {rows[-1]['loss']:.5f}")
        if out is not None:
            state = {"stage": stage.stage, "global_step": global_step, "seed": seed}
            checkpoints.append(save_checkpoint(out / f"stage{stage.stage}", model, optimizer, state))

    log = pd.DataFrame(rows, columns=LOG_COLUMNS)
    if len(log):
        log["smoothed"] = smooth(log["loss"], LOSS_SMOOTHING_WINDOW)
    if out is not None:
        log.to_csv(out / "loss_log.csv", index=False)
    return TrainResult(model, log, checkpoints)


def masked_fraction(log: pd.DataFrame, stage: Optional[int] = None) -> float:
    """Share of multi-frame samples that were drawn with a conditioning mask."""
    rows = log if stage is None else log[log["stage"] == stage]
    videos = rows["video_samples"].sum()
    return float(rows["masked_samples"].sum() / videos) if videos else 0.0


# Validation


@dataclass
class ValidationGrid:
    """Loss per (length, resolution) cell; absent cells hold NaN."""

    cells: pd.DataFrame

    def table(self) -> pd.DataFrame:
        return self.cells.pivot(index="length", columns="resolution", values="loss")

    @property
    def total(self) -> float:
        return float(self.cells["loss"].dropna().sum())

    def to_csv(self, path) -> Path:
        path = Path(path)
        ensure_dir(path.parent)
        self.cells.to_csv(path, index=False)
        return path


def heldout_set(cfg: KitConfig, count: Optional[int] = None) -> ClipDataset:
    """Synthetic clips long and large enough to fill every validation cell."""
    spec = replace(
        cfg.synth,
        resolutions=(max(cfg.validation.resolutions.values()),),
        aspects=("1:1",),
        frames=(max(cfg.validation.lengths.values()),),
    )
    return make_synthetic(count or cfg.validation.clips, spec, cfg.seed, stream="validation")


def validate(model: STDiT, codec: VideoCodec, dataset: ClipDataset, grid: Optional[ValidationConfig] = None,
             flow: Optional[FlowConfig] = None, max_workers: int = MAX_WORKERS) -> ValidationGrid:
    """Average flow loss over the fixed validation timesteps for every length x resolution cell.

    Clips too short for a length leave that cell absent; the run continues.
    """
    grid = grid or ValidationConfig()
    flow = flow or FlowConfig()
    cells = [(ln, lf, rn, rp) for ln, lf in grid.lengths.items() for rn, rp in grid.resolutions.items()]

    def evaluate(length_frames: int, pixels: int):
        bucket = Bucket(pixels, length_frames, "1:1")
        ids = [cid for cid in dataset.clip_ids if dataset.videos[cid].shape[0] >= length_frames][: grid.clips]
        if not ids:
            return math.nan, 0
        x0 = np.stack([channel_normalize(codec.encode(fit_to_bucket(dataset.videos[cid], bucket))) for cid in ids])
        text, text_mask = _text_batch([dataset.caption(cid) for cid in ids], model.config)
        fps = np.array([dataset.fps(cid) for cid in ids])
        loss = validation_loss(velocity_model(model, fps, text, text_mask), x0, grid.seed, flow)
        return loss, len(ids)

    results = {}
    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, max_workers)) as executor:
        future_to_cell = {executor.submit(evaluate, lf, rp): (ln, rn) for ln, lf, rn, rp in cells}
        for future in tqdm(concurrent.futures.as_completed(future_to_cell), total=len(cells), desc="Validation", leave=False):
            key = future_to_cell[future]
            try:
                results[key] = future.result()
            except KitError as e:
                logger.error(f"Error evaluating validation cell {key}: {str(e)}")
                results[key] = (math.nan, 0)
    rows = [
        {"length": ln, "frames": lf, "resolution": rn, "pixels": rp, "clips": results[(ln, rn)][1], "loss": results[(ln, rn)][0]}
        for ln, lf, rn, rp in cells
    ]
    return ValidationGrid(pd.DataFrame(rows, columns=["length", "frames", "resolution", "pixels", "clips", "loss"]))


# Generation


@dataclass
class GenerationResult:
    video: np.ndarray
    latent: LatentVideo
    caption: str
    mask: FrameMask


def generate(model: STDiT, codec: VideoCodec, prompt: str, frames: int, height: int, width: int,
             steps: Optional[int] = None, seed: int = DEFAULT_SEED, condition_video: Optional[np.ndarray] = None,
             condition: str = "none", fps: float = TOY_FPS, guidance_scale: float = 1.0,
             aesthetic: Optional[float] = None, motion: Optional[float] = None, camera: Optional[str] = None,
             flow: Optional[FlowConfig] = None) -> GenerationResult:
    """Sample a latent clip with the Euler sampler and decode it.

    ``condition`` is a mask spec over latent frames; the conditioned latent
    frames are taken in order from the encoded ``condition_video`` and appear
    unchanged in the output latent.

    The first encoded latent comes from a single causal frame, so a
    conditioning image always enters as an image latent. With ``last:1`` that
    image latent is written into the final latent slot, which decodes to a
    group of four frames rather than one.
    """
    flow = flow or FlowConfig()
    steps = steps or flow.steps
    if height % 8 or width % 8:
        raise GeometryError(f"output size {height}x{width} must be a multiple of 8")
    caption = prompt
    if aesthetic is not None or motion is not None:
        caption = format_caption(ScoredCaption(prompt, aesthetic or 0.0, motion or 0.0, camera))
    t_latent = latent_length(frames)
    mask = parse_mask_spec(condition, t_latent)
    shape = (1, t_latent, height // 8, width // 8, codec.config.latent_channels)

    cond_raw = None
    cond_norm = None
    if mask.any():
        if condition_video is None:
            raise ArgumentError(f"condition {condition!r} needs a conditioning image or video")
        condition_video = np.asarray(condition_video, dtype=np.float32)
        if condition_video.ndim == 3:
            condition_video = condition_video[None]
        if condition_video.shape[1:3] != (height, width):
            raise GeometryError(f"conditioning frames are {condition_video.shape[1:3]}, output is {(height, width)}")
        encoded = codec.encode(condition_video)
        idx = np.flatnonzero(mask.conditioning)
        if encoded.data.shape[0] < len(idx):
            raise ArgumentError(f"condition needs {len(idx)} latent frames, the input provides {encoded.data.shape[0]}")
        cond_raw = np.zeros(shape[1:], dtype=np.float32)
        cond_raw[idx] = encoded.data[: len(idx)]
        cond_norm = channel_normalize(cond_raw, codec.latent_mean, codec.latent_std)[None]

    text, text_mask = _text_batch([caption], model.config)
    fps_arr = np.array([float(fps)])
    uncond = None
    if guidance_scale != 1.0:
        null_text, null_mask = _text_batch([NULL_PROMPT], model.config)
        uncond = velocity_model(model, fps_arr, null_text, null_mask)
    rng = make_rng(seed, "sample")
    z = euler_sample(
        velocity_model(model, fps_arr, text, text_mask), shape, rng, steps=steps,
        mask=mask.conditioning[None], cond_latent=cond_norm, guidance_scale=guidance_scale, uncond_fn=uncond,
    )[0]
    latent = channel_denormalize(z, codec.latent_mean, codec.latent_std)
    if cond_raw is not None:
        # Denormalizing is not bit-exact, so the raw conditioning latents are put back
        latent[mask.conditioning] = cond_raw[mask.conditioning]
    latent_video = LatentVideo(latent, codec.latent_mean, codec.latent_std, frames=frames)
    video = codec.decode(latent_video, frames)
    return GenerationResult(video, latent_video, caption, mask)


# Ablation


def conditioning_ablation(cfg: KitConfig, codec: VideoCodec, dataset: ClipDataset, heldout: ClipDataset,
                          mask_probs: Sequence[float] = (0.3, 0.5), steps: int = 300, bucket: Optional[Bucket] = None) -> pd.DataFrame:
    """Train one short stage per masking probability and measure the loss on frames generated from a clean first frame."""
    bucket = bucket or Bucket(16, 16, "1:1", 1.0, 2)
    rows = []
    for prob in mask_probs:
        stage = StageConfig(1, steps, prob, buckets=[bucket])
        model = train(cfg, codec, dataset, stages=[stage]).model
        ids = [cid for cid in heldout.clip_ids if heldout.videos[cid].shape[0] >= bucket.frames]
        x0 = np.stack([channel_normalize(codec.encode(fit_to_bucket(heldout.videos[cid], bucket))) for cid in ids])
        text, text_mask = _text_batch([heldout.caption(cid) for cid in ids], model.config)
        fps = np.array([heldout.fps(cid) for cid in ids])
        first = np.zeros(x0.shape[1], dtype=bool)
        first[0] = True
        loss = validation_loss(velocity_model(model, fps, text, text_mask), x0, cfg.validation.seed, cfg.flow, mask=first)
        rows.append({"mask_prob": prob, "conditioned_loss": loss})
        logger.info(f"mask_prob={prob}: conditioned validation loss {loss:.5f}")
    return pd.DataFrame(rows, columns=["mask_prob", "conditioned_loss"])
