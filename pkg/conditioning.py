"""Frame masks, per-frame timesteps, scored captions and the text-embedding stub."""

import hashlib
import logging
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from config import CAMERA_MOTIONS, MASK_PROB, MODEL_HIDDEN, MODEL_TEXT_LEN, TOY_FPS, validate_mask_prob
from errors import ArgumentError, DomainError, PreconditionError
from utils import format_number

logger = logging.getLogger(__name__)


class MaskPattern(Enum):
    FIRST1 = "first1"
    FIRST_K = "first_k"
    LAST1 = "last1"
    LAST_K = "last_k"
    FIRST_LAST_K = "first_last_k"
    RANDOM = "random"
    NO_MASK = "no_mask"


TRAINING_PATTERNS = [
    MaskPattern.FIRST1,
    MaskPattern.FIRST_K,
    MaskPattern.LAST1,
    MaskPattern.LAST_K,
    MaskPattern.FIRST_LAST_K,
    MaskPattern.RANDOM,
]


@dataclass
class FrameMask:
    """``conditioning[i]`` is True when frame i is a clean conditioning frame."""

    conditioning: np.ndarray
    pattern: MaskPattern = MaskPattern.NO_MASK
    k: int = 0

    def __post_init__(self):
        self.conditioning = np.asarray(self.conditioning, dtype=bool).reshape(-1)

    @property
    def frames(self) -> int:
        return self.conditioning.shape[0]

    @property
    def masked(self) -> np.ndarray:
        return ~self.conditioning

    def any(self) -> bool:
        return bool(self.conditioning.any())


def _mask_for(pattern: MaskPattern, frames: int, k: int, rng=None) -> np.ndarray:
    cond = np.zeros(frames, dtype=bool)
    if pattern == MaskPattern.FIRST1:
        cond[0] = True
    elif pattern == MaskPattern.FIRST_K:
        cond[:k] = True
    elif pattern == MaskPattern.LAST1:
        cond[-1] = True
    elif pattern == MaskPattern.LAST_K:
        cond[frames - k:] = True
    elif pattern == MaskPattern.FIRST_LAST_K:
        cond[:k] = True
        cond[frames - k:] = True
    elif pattern == MaskPattern.RANDOM:
        count = int(rng.integers(1, frames))
        cond[rng.choice(frames, size=count, replace=False)] = True
    return cond


def sample_pattern(rng: np.random.Generator, frames: int, mask_prob: float = MASK_PROB) -> FrameMask:
    """Draw a training mask: NoMask with probability 1 - mask_prob, else one of six patterns.

    Single-frame clips are never masked; every masked draw leaves at least one
    frame to generate.
    """
    if not validate_mask_prob(mask_prob):
        raise DomainError(f"mask probability must lie in [0, 1], got {mask_prob}")
    if frames < 1:
        raise PreconditionError(f"a clip needs at least one frame, got {frames}")
    if frames < 2 or rng.random() >= mask_prob:
        return FrameMask(np.zeros(frames, dtype=bool))
    pattern = TRAINING_PATTERNS[int(rng.integers(len(TRAINING_PATTERNS)))]
    k = int(rng.integers(1, math.ceil(frames / 4) + 1))
    if pattern in (MaskPattern.FIRST1, MaskPattern.LAST1):
        k = 1
    elif pattern == MaskPattern.FIRST_LAST_K and 2 * k >= frames:
        k = (frames - 1) // 2
        if k == 0:
            pattern, k = MaskPattern.FIRST1, 1
    elif pattern == MaskPattern.RANDOM:
        k = 0
    return FrameMask(_mask_for(pattern, frames, k, rng), pattern, k)


def assign_timesteps(mask, t: float) -> np.ndarray:
    """Conditioning frames get timestep 0, the others keep ``t``."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"timestep must lie in [0, 1], got {t}")
    cond = mask.conditioning if isinstance(mask, FrameMask) else np.asarray(mask, dtype=bool)
    return np.where(cond, 0.0, float(t))


def parse_mask_spec(spec: str, frames: int) -> FrameMask:
    """Parse ``first:k``, ``last:k``, ``firstlast:k``, ``frames:i,j,..`` or ``none``."""
    text = (spec or "none").strip().lower()
    if text == "none":
        return FrameMask(np.zeros(frames, dtype=bool))
    kind, sep, arg = text.partition(":")
    if not sep or not arg:
        raise ArgumentError(f"malformed condition spec {spec!r}")
    if kind == "frames":
        try:
            indices = [int(part) for part in arg.split(",") if part.strip()]
        except ValueError as e:
            raise ArgumentError(f"frame indices must be integers: {spec!r}") from e
        bad = [i for i in indices if i < 0 or i >= frames]
        if bad or not indices:
            raise ArgumentError(f"frame indices {bad or indices} are outside 0..{frames - 1}")
        cond = np.zeros(frames, dtype=bool)
        cond[indices] = True
        mask = FrameMask(cond, MaskPattern.RANDOM, 0)
    else:
        patterns = {"first": MaskPattern.FIRST_K, "last": MaskPattern.LAST_K, "firstlast": MaskPattern.FIRST_LAST_K}
        if kind not in patterns:
            raise ArgumentError(f"unknown condition kind {kind!r}")
        try:
            k = int(arg)
        except ValueError as e:
            raise ArgumentError(f"condition frame count must be an integer: {spec!r}") from e
        if k < 1:
            raise ArgumentError(f"condition frame count must be >= 1, got {k}")
        mask = FrameMask(_mask_for(patterns[kind], frames, min(k, frames)), patterns[kind], k)
    if mask.conditioning.all():
        raise ArgumentError(f"condition {spec!r} leaves no frame to generate out of {frames}")
    return mask


# Captions


@dataclass
class ScoredCaption:
    caption: str
    aesthetic: float
    motion: float
    camera: Optional[str] = None

    def __post_init__(self):
        if not (math.isfinite(self.aesthetic) and math.isfinite(self.motion)):
            raise DomainError("caption scores must be finite")
        if self.camera is not None and self.camera not in CAMERA_MOTIONS:
            raise DomainError(f"unknown camera motion {self.camera!r}")


_SCORE_TAIL = re.compile(r"^(?P<a>\S+), motion score: (?P<m>\S+?)(?:, camera motion: (?P<cam>.+))?$")


def format_caption(c: ScoredCaption) -> str:
    text = f"{c.caption} aesthetic score: {format_number(c.aesthetic)}, motion score: {format_number(c.motion)}"
    if c.camera is not None:
        text += f", camera motion: {c.camera}"
    return text


def parse_caption(text: str) -> ScoredCaption:
    """Inverse of :func:`format_caption`."""
    base, sep, tail = text.rpartition(" aesthetic score: ")
    match = _SCORE_TAIL.match(tail) if sep else None
    if match is None:
        raise ArgumentError(f"caption has no score suffix: {text!r}")
    try:
        aesthetic, motion = float(match["a"]), float(match["m"])
    except ValueError as e:
        raise ArgumentError(f"unreadable scores in caption: {text!r}") from e
    return ScoredCaption(base, aesthetic, motion, match["cam"])


# Text embedding stub


@dataclass
class TextEmbedding:
    data: np.ndarray  # [L_max, D]
    mask: np.ndarray  # [L_max], True on real tokens
    tokens: List[str] = field(default_factory=list)

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def _token_row(token: str, dim: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return rng.standard_normal(dim) / math.sqrt(dim)


def embed_text(text: str, max_len: int = MODEL_TEXT_LEN, dim: int = MODEL_HIDDEN) -> TextEmbedding:
    """Whitespace tokens, one hash-seeded row per token, truncated or padded to ``max_len``."""
    if max_len < 1 or dim < 1:
        raise PreconditionError("text embedding needs max_len >= 1 and dim >= 1")
    tokens = (text or "").split()[:max_len]
    data = np.zeros((max_len, dim), dtype=np.float32)
    mask = np.zeros(max_len, dtype=bool)
    for i, token in enumerate(tokens):
        data[i] = _token_row(token, dim)
        mask[i] = True
    return TextEmbedding(data, mask, tokens)


@dataclass
class ConditioningSpec:
    """Everything the velocity model needs besides the noised latent."""

    mask: FrameMask
    text: TextEmbedding
    caption: str = ""
    fps: float = TOY_FPS
    timesteps: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.fps > 0:
            raise DomainError(f"fps must be positive, got {self.fps}")

    def at(self, t: float) -> "ConditioningSpec":
        """Copy with per-frame timesteps assigned for diffusion time ``t``."""
        return ConditioningSpec(self.mask, self.text, self.caption, self.fps, assign_timesteps(self.mask, t))


def build_conditioning(caption: str, frames: int, mask: Optional[FrameMask] = None, fps: float = TOY_FPS,
                       max_len: int = MODEL_TEXT_LEN, dim: int = MODEL_HIDDEN) -> ConditioningSpec:
    mask = mask or FrameMask(np.zeros(frames, dtype=bool))
    if mask.frames != frames:
        raise PreconditionError(f"mask covers {mask.frames} frames, clip has {frames}")
    return ConditioningSpec(mask, embed_text(caption, max_len, dim), caption, fps)
