"""Clip preparation: scene cuts, filter scores, camera motion, manifest and stats.

Scorers and the text detector are plain callables so heavier models can be
swapped in; the defaults are deterministic image heuristics.
"""

import concurrent.futures
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.ndimage import laplace

from conditioning import ScoredCaption, format_caption, parse_caption
from config import (
    CAMERA_TRANSLATION_THRESHOLD,
    CAMERA_ZOOM_THRESHOLD,
    FLOW_BLOCK,
    FLOW_SEARCH_RADIUS,
    MAX_OCR_RATIO,
    MAX_WORKERS,
    MIN_AESTHETIC,
    MIN_FLOW,
    SCENE_MIN_DIFF,
    SCENE_THRESHOLD,
    SCENE_WINDOW,
    TOY_FPS,
    resolution_label,
)
from errors import ArgumentError, DomainError, FormatError, GeometryError, KitError, PreconditionError
from numerics import load_vten
from utils import ensure_dir

logger = logging.getLogger(__name__)

FrameScorer = Callable[[np.ndarray], float]
TextDetector = Callable[[np.ndarray], np.ndarray]

MANIFEST_COLUMNS = [
    "clip_id", "path", "width", "height", "frames", "fps", "caption",
    "aes", "flow", "ocr_ratio", "camera_motion", "keep", "source_id", "start", "end",
]

CAPTION_STOPWORDS = {"a", "an", "the", "of", "in", "on", "and", "with", "to", "is", "at", "by", "video", "clip"}


def _check_video(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float32)
    if v.ndim != 4 or min(v.shape) < 1:
        raise GeometryError(f"video must be a non-empty [T, H, W, C] array, got {np.shape(v)}")
    return v


def luma(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] == 3:
        return frame @ np.array([0.299, 0.587, 0.114])
    return frame.mean(axis=-1)


def sample_indices(frames: int) -> List[int]:
    """First, middle and last frame."""
    return [0, frames // 2, frames - 1]


# Scene detection


def frame_differences(v) -> np.ndarray:
    v = _check_video(v)
    return np.abs(np.diff(v.astype(np.float64), axis=0)).mean(axis=(1, 2, 3))


def detect_scenes(v, threshold: float = SCENE_THRESHOLD, window: int = SCENE_WINDOW,
                  min_diff: float = SCENE_MIN_DIFF) -> List[int]:
    """Indices of frames that start a new scene.

    Frame i starts a scene when its difference to frame i-1 exceeds both
    ``threshold`` times the median of the previous ``window`` differences and
    ``min_diff``. The first difference has no history and never cuts.
    """
    v = _check_video(v)
    if v.shape[0] < 2:
        raise PreconditionError("scene detection needs at least two frames")
    if not math.isfinite(threshold):
        return []
    diffs = frame_differences(v)
    cuts = []
    for i in range(1, len(diffs)):
        baseline = float(np.median(diffs[max(0, i - window):i]))
        if diffs[i] > max(threshold * baseline, min_diff):
            cuts.append(i + 1)
    return cuts


def scene_ranges(frames: int, cuts: Sequence[int]) -> List[Tuple[int, int]]:
    """Half-open [start, end) frame ranges between cuts."""
    bounds = [0] + sorted(c for c in cuts if 0 < c < frames) + [frames]
    return [(a, b) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


# Aesthetic score


def reference_aesthetic(frame: np.ndarray) -> float:
    """Contrast and sharpness heuristic in [0, 10]; flat frames score 0."""
    y = luma(frame)
    contrast = float(y.std())
    sharpness = float(np.abs(laplace(y, mode="nearest")).mean())
    return float(10.0 * (1.0 - math.exp(-(4.0 * contrast + 2.0 * sharpness))))


def aesthetic_score(v, frame_scorer: FrameScorer = reference_aesthetic) -> float:
    """Average frame score over the first, middle and last frame."""
    v = _check_video(v)
    scores = [float(frame_scorer(v[i])) for i in sample_indices(v.shape[0])]
    if not all(math.isfinite(s) for s in scores):
        raise DomainError("frame scorer returned a non-finite score")
    return float(np.mean(scores))


# Optical flow by block matching


@dataclass
class FlowField:
    """Per-block displacement (u to the right, v downward) in px/frame."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.u.shape != self.v.shape or self.u.size == 0:
            raise GeometryError("flow field components must share a non-empty grid")
        if not (np.all(np.isfinite(self.u)) and np.all(np.isfinite(self.v))):
            raise DomainError("flow field contains non-finite values")

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)


def _search_offsets(radius: int) -> List[Tuple[int, int]]:
    offsets = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    # argmin keeps the first minimum, so equal costs resolve to the shortest displacement
    return sorted(offsets, key=lambda o: (o[0] ** 2 + o[1] ** 2, o))


def block_match(prev: np.ndarray, nxt: np.ndarray, block: int = FLOW_BLOCK, radius: int = FLOW_SEARCH_RADIUS) -> FlowField:
    """Displacement of each ``block`` x ``block`` tile of ``prev`` found in ``nxt``."""
    a, b = luma(prev), luma(nxt)
    gy, gx = a.shape[0] // block, a.shape[1] // block
    if gy == 0 or gx == 0:
        raise GeometryError(f"frame {a.shape} is smaller than one {block}x{block} block")
    h, w = gy * block, gx * block
    a = a[:h, :w]
    padded = np.pad(b, radius, mode="edge")
    offsets = _search_offsets(radius)
    costs = np.empty((len(offsets), gy, gx))
    for n, (dy, dx) in enumerate(offsets):
        cand = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
        costs[n] = np.abs(a - cand).reshape(gy, block, gx, block).mean(axis=(1, 3))
    best = np.asarray(offsets)[np.argmin(costs, axis=0)]
    return FlowField(u=best[..., 1], v=best[..., 0])


def optical_flow(v, block: int = FLOW_BLOCK, radius: int = FLOW_SEARCH_RADIUS) -> List[FlowField]:
    v = _check_video(v)
    if v.shape[0] < 2:
        raise PreconditionError("optical flow needs at least two frames")
    return [block_match(v[i], v[i + 1], block, radius) for i in range(v.shape[0] - 1)]


def flow_score(v, flows: Optional[List[FlowField]] = None) -> float:
    """Mean displacement magnitude over all frame pairs and blocks."""
    flows = optical_flow(v) if flows is None else flows
    return float(np.mean([f.magnitude.mean() for f in flows]))


# Text area


def reference_text_detector(frame: np.ndarray, block: int = FLOW_BLOCK, min_energy: float = 0.1, dominance: float = 2.0) -> np.ndarray:
    """Block map flagging tiles dense in horizontal edges, the signature of rendered text lines."""
    y = luma(frame)
    gy, gx = y.shape[0] // block, y.shape[1] // block
    if gy == 0 or gx == 0:
        return np.zeros((1, 1), dtype=bool)
    h, w = gy * block, gx * block
    y = y[:h, :w]
    horizontal = np.zeros_like(y)
    vertical = np.zeros_like(y)
    horizontal[1:] = np.abs(np.diff(y, axis=0))
    vertical[:, 1:] = np.abs(np.diff(y, axis=1))
    h_energy = horizontal.reshape(gy, block, gx, block).mean(axis=(1, 3))
    v_energy = vertical.reshape(gy, block, gx, block).mean(axis=(1, 3))
    return (h_energy > min_energy) & (h_energy > dominance * v_energy)


def ocr_area_ratio(v, text_detector: TextDetector = reference_text_detector) -> float:
    """Flagged fraction of the frame, averaged over the three sampled frames."""
    v = _check_video(v)
    ratios = [float(np.mean(np.asarray(text_detector(v[i]), dtype=bool))) for i in sample_indices(v.shape[0])]
    return float(np.clip(np.mean(ratios), 0.0, 1.0))


def keep_for_text(ratio: float, max_ratio: float = MAX_OCR_RATIO) -> bool:
    return ratio <= max_ratio


# Camera motion


def divergence(flow: FlowField, block: int = FLOW_BLOCK) -> float:
    """Divergence of the best-fitting zoom field u = a + k x, v = b + k y (equals 2k).

    Block centers are measured in pixels from the grid center, so a radial
    field of 5% scale change per frame gives 0.1.
    """
    gy, gx = flow.u.shape
    y, x = np.meshgrid((np.arange(gy) - (gy - 1) / 2) * block, (np.arange(gx) - (gx - 1) / 2) * block, indexing="ij")
    spread = float(np.sum(x * x + y * y))
    if spread == 0:
        return 0.0
    k = np.sum((flow.u - flow.u.mean()) * x + (flow.v - flow.v.mean()) * y) / spread
    return float(2.0 * k)


def camera_motion(flows: Sequence[FlowField], translation_threshold: float = CAMERA_TRANSLATION_THRESHOLD,
                  zoom_threshold: float = CAMERA_ZOOM_THRESHOLD) -> str:
    """Label the camera move from mean content flow and its divergence.

    The camera turns against the content: content moving right means a pan
    left, content moving down means a tilt up, outward flow means a zoom in.
    """
    if not flows:
        raise PreconditionError("camera motion needs at least one flow field")
    if not (translation_threshold > 0 and zoom_threshold > 0):
        raise DomainError("camera motion thresholds must be positive")
    u = float(np.mean([f.u.mean() for f in flows]))
    v = float(np.mean([f.v.mean() for f in flows]))
    d = float(np.mean([divergence(f) for f in flows]))
    scores = {
        "pan": abs(u) / translation_threshold,
        "tilt": abs(v) / translation_threshold,
        "zoom": abs(d) / zoom_threshold,
    }
    axis = max(scores, key=scores.get)
    if scores[axis] < 1.0:
        return "static"
    if axis == "pan":
        return "pan left" if u > 0 else "pan right"
    if axis == "tilt":
        return "tilt up" if v > 0 else "tilt down"
    return "zoom in" if d > 0 else "zoom out"


# Pipeline


@dataclass
class ClipRecord:
    clip_id: str
    source_id: str
    start: int
    end: int
    width: int
    height: int
    fps: float
    caption: str
    aes: float
    flow: float
    ocr_ratio: float
    camera_motion: str
    keep: bool
    path: str = ""

    def __post_init__(self):
        if self.end <= self.start:
            raise GeometryError(f"clip {self.clip_id} has an empty frame range")
        if not 0.0 <= self.ocr_ratio <= 1.0:
            raise DomainError(f"clip {self.clip_id}: ocr ratio {self.ocr_ratio} outside [0, 1]")

    @property
    def frames(self) -> int:
        return self.end - self.start


@dataclass
class PrepConfig:
    scene_threshold: float = SCENE_THRESHOLD
    min_aesthetic: float = MIN_AESTHETIC
    min_flow: float = MIN_FLOW
    max_ocr_ratio: float = MAX_OCR_RATIO
    translation_threshold: float = CAMERA_TRANSLATION_THRESHOLD
    zoom_threshold: float = CAMERA_ZOOM_THRESHOLD
    min_clip_frames: int = 2
    fps: float = TOY_FPS
    default_caption: str = "A video clip."
    max_workers: int = MAX_WORKERS
    frame_scorer: FrameScorer = reference_aesthetic
    text_detector: TextDetector = reference_text_detector

    def __post_init__(self):
        if self.min_clip_frames < 2:
            raise ArgumentError("clips need at least two frames for flow scoring")
        if not 0.0 <= self.max_ocr_ratio <= 1.0:
            raise ArgumentError(f"max_ocr_ratio must lie in [0, 1], got {self.max_ocr_ratio}")


@dataclass
class PrepResult:
    manifest: pd.DataFrame
    stats: pd.DataFrame
    errors: List[dict] = field(default_factory=list)


VideoSource = Union[np.ndarray, str, Path]


def load_video(path) -> np.ndarray:
    """A VTEN file holding [T, H, W, C], or a folder of per-frame ``.npy`` arrays."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.npy"))
        if not files:
            raise FormatError(f"no .npy frames in {path}")
        return _check_video(np.stack([np.load(f) for f in files]))
    return _check_video(load_vten(path))


def discover_videos(directory) -> Dict[str, Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise ArgumentError(f"input directory not found: {directory}")
    found = {}
    for entry in sorted(directory.iterdir()):
        if entry.suffix == ".vten" or (entry.is_dir() and any(entry.glob("*.npy"))):
            found[entry.stem] = entry
    logger.info(f"Found {len(found)} videos in {directory}")
    return found


def score_clip(clip: np.ndarray, clip_id: str, source_id: str, start: int, cfg: PrepConfig,
               caption: str, path: str = "") -> ClipRecord:
    """Score one clip; the result depends on nothing but the clip and config."""
    flows = optical_flow(clip)
    aes = aesthetic_score(clip, cfg.frame_scorer)
    flow = flow_score(clip, flows)
    ocr = ocr_area_ratio(clip, cfg.text_detector)
    camera = camera_motion(flows, cfg.translation_threshold, cfg.zoom_threshold)
    keep = aes >= cfg.min_aesthetic and flow >= cfg.min_flow and keep_for_text(ocr, cfg.max_ocr_ratio)
    text = format_caption(ScoredCaption(caption, round(aes, 1), round(flow, 1), camera))
    return ClipRecord(
        clip_id=clip_id, source_id=source_id, start=start, end=start + clip.shape[0],
        width=clip.shape[2], height=clip.shape[1], fps=cfg.fps, caption=text,
        aes=aes, flow=flow, ocr_ratio=ocr, camera_motion=camera, keep=bool(keep), path=path,
    )


def process_source(source_id: str, source: VideoSource, cfg: PrepConfig, caption: str) -> List[ClipRecord]:
    video = load_video(source) if isinstance(source, (str, Path)) else _check_video(source)
    path = str(source) if isinstance(source, (str, Path)) else ""
    cuts = detect_scenes(video, cfg.scene_threshold) if video.shape[0] >= 2 else []
    records = []
    for start, end in scene_ranges(video.shape[0], cuts):
        if end - start < cfg.min_clip_frames:
            logger.info(f"Skipping {source_id}[{start}:{end}]: shorter than {cfg.min_clip_frames} frames")
            continue
        records.append(score_clip(video[start:end], f"{source_id}-{start:05d}", source_id, start, cfg, caption, path))
    return records


def manifest_frame(records: Sequence[ClipRecord]) -> pd.DataFrame:
    rows = []
    for r in sorted(records, key=lambda r: r.clip_id):
        row = asdict(r)
        row["frames"] = r.frames
        rows.append(row)
    return pd.DataFrame(rows, columns=MANIFEST_COLUMNS)


def _histogram(name: str, values, bins: int, value_range: Tuple[float, float]) -> List[dict]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins, range=value_range)
    return [
        {"stat": name, "bin": f"[{edges[i]:.3g}, {edges[i + 1]:.3g})", "count": int(c)}
        for i, c in enumerate(counts)
    ]


def stats_table(manifest: pd.DataFrame) -> pd.DataFrame:
    """Score histograms plus duration, resolution and camera-motion distributions."""
    rows = []
    rows += _histogram("aes", manifest["aes"], 10, (0.0, 10.0))
    rows += _histogram("flow", manifest["flow"], 8, (0.0, 2.0 * FLOW_SEARCH_RADIUS))
    rows += _histogram("ocr_ratio", manifest["ocr_ratio"], 10, (0.0, 1.0))
    durations = manifest["frames"].astype(float) / manifest["fps"].astype(float) if len(manifest) else []
    rows += _histogram("duration_s", durations, 8, (0.0, 16.0))
    resolutions = manifest.apply(lambda r: resolution_label(min(r["width"], r["height"])), axis=1) if len(manifest) else pd.Series(dtype=str)
    for label, count in resolutions.value_counts().sort_index().items():
        rows.append({"stat": "resolution", "bin": label, "count": int(count)})
    for label, count in manifest["camera_motion"].value_counts().sort_index().items():
        rows.append({"stat": "camera_motion", "bin": label, "count": int(count)})
    rows.append({"stat": "kept", "bin": "true", "count": int(manifest["keep"].astype(bool).sum()) if len(manifest) else 0})
    return pd.DataFrame(rows, columns=["stat", "bin", "count"])


def caption_tags(captions: Sequence[str], top: int = 20) -> pd.DataFrame:
    """Most frequent content words of the base captions (score suffixes removed)."""
    words = []
    for text in captions:
        try:
            text = parse_caption(text).caption
        except ArgumentError:
            pass
        words += [w.strip(".,;:!?\"'").lower() for w in text.split()]
    series = pd.Series([w for w in words if w and w not in CAPTION_STOPWORDS], dtype=str)
    counts = series.value_counts().head(top)
    return pd.DataFrame({"tag": counts.index, "count": counts.values.astype(int)})


def run_pipeline(videos: Mapping[str, VideoSource], cfg: Optional[PrepConfig] = None,
                 captions: Optional[Mapping[str, str]] = None, out_dir=None) -> PrepResult:
    """Cut, score, filter and caption every source; write manifest.csv and stats.csv when ``out_dir`` is set.

    A source that fails to load or score is recorded in ``errors`` and skipped.
    """
    cfg = cfg or PrepConfig()
    captions = captions or {}
    records: List[ClipRecord] = []
    errors = []
    workers = max(1, min(cfg.max_workers, len(videos) or 1))
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
        future_to_source = {
            executor.submit(process_source, sid, src, cfg, captions.get(sid, cfg.default_caption)): sid
            for sid, src in videos.items()
        }
        for future in concurrent.futures.as_completed(future_to_source):
            sid = future_to_source[future]
            try:
                records.extend(future.result())
            except (KitError, OSError, ValueError) as e:
                logger.error(f"Error processing video {sid}: {str(e)}")
                errors.append({"source_id": sid, "error": str(e)})
    manifest = manifest_frame(records)
    stats = stats_table(manifest)
    logger.info(f"Prepared {len(manifest)} clips from {len(videos)} videos, {int(manifest['keep'].sum()) if len(manifest) else 0} kept")
    if out_dir is not None:
        out = ensure_dir(out_dir)
        manifest.to_csv(out / "manifest.csv", index=False)
        stats.to_csv(out / "stats.csv", index=False)
        if errors:
            pd.DataFrame(errors).sort_values("source_id").to_csv(out / "errors.csv", index=False)
    return PrepResult(manifest, stats, sorted(errors, key=lambda e: e["source_id"]))
