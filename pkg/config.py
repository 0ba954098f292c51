"""Configuration settings for open_sora_kit."""

import os
from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

# Environment overrides
SEED_ENV_VAR = "OPEN_SORA_KIT_SEED"
LOG_LEVEL = os.getenv("OPEN_SORA_KIT_LOG_LEVEL", "INFO")
LOG_FILE = os.getenv("OPEN_SORA_KIT_LOG_FILE", "")
MAX_WORKERS = int(os.getenv("OPEN_SORA_KIT_WORKERS", "4"))
DEFAULT_SEED = 0

# Latent codec
CODEC_SPATIAL_FACTOR = 8
CODEC_TEMPORAL_STRIDE = 4
CODEC_LATENT_CHANNELS = 4
CODEC_HIDDEN_WIDTH = 32
CODEC_CLIP_FRAMES = 17
CODEC_MAX_MIXED_FRAMES = 34
CODEC_VIDEO_FRACTION = 0.8  # remaining 20% are single-frame images
CODEC_LEARNING_RATE = 1e-3
PSNR_CAP_DB = 100.0

# STDiT
QK_NORM_EPS = 1e-15
ROPE_BASE = 10000.0
MODEL_HIDDEN = 32
MODEL_DEPTH = 2
MODEL_HEADS = 2
MODEL_TEXT_LEN = 16
MODEL_MAX_GRID = 16  # spatial position table covers MODEL_MAX_GRID x MODEL_MAX_GRID latent cells

# Rectified flow
LEARNING_RATE = 5e-5
ADAM_EPS = 1e-15
SAMPLING_STEPS = 30
VALIDATION_TIMESTEPS = 10
LOGIT_NORMAL_LOC = 0.0
LOGIT_NORMAL_SCALE = 1.0
# Token count of the 240p / 16-frame bucket at desk scale: 5 latent frames x 2 x 4 cells
REFERENCE_TOKEN_COUNT = 40

# Conditioning
MASK_PROB = 0.5
CAMERA_MOTIONS = [
    "static",
    "pan left",
    "pan right",
    "tilt up",
    "tilt down",
    "zoom in",
    "zoom out",
]

# Resolution ladder: nominal resolution label -> short side in pixels at desk scale
RESOLUTION_LADDER = {
    "144p": 8,
    "240p": 16,
    "360p": 24,
    "480p": 32,
    "720p": 48,
}
SUPPORTED_ASPECTS = ["1:1", "4:3", "3:4", "16:9", "9:16"]

# Toy videos run at 4 fps, so "2s" is 8 frames
TOY_FPS = 4
VALIDATION_LENGTHS = {
    "image": 1,
    "2s": 2 * TOY_FPS,
    "4s": 4 * TOY_FPS,
    "8s": 8 * TOY_FPS,
    "16s": 16 * TOY_FPS,
}
LOSS_SMOOTHING_WINDOW = 50

# Data pipeline defaults (configuration, not measured thresholds)
SCENE_THRESHOLD = 3.0
SCENE_MIN_DIFF = 0.05
SCENE_WINDOW = 8
FLOW_BLOCK = 8
FLOW_SEARCH_RADIUS = 4
MIN_AESTHETIC = 0.0
MIN_FLOW = 0.3
MAX_OCR_RATIO = 0.3
CAMERA_TRANSLATION_THRESHOLD = 0.5
CAMERA_ZOOM_THRESHOLD = 0.2  # divergence of the fitted zoom field (2x relative scale change per frame)


def validate_seed(seed) -> bool:
    """Validate a seed value.

    Args:
        seed: The candidate seed

    Returns:
        True if the seed is a non-negative integer, False otherwise
    """
    return isinstance(seed, int) and not isinstance(seed, bool) and seed >= 0


def validate_mask_prob(mask_prob) -> bool:
    """Validate a masking probability.

    Args:
        mask_prob: The candidate probability

    Returns:
        True if the value lies in [0, 1], False otherwise
    """
    try:
        return 0.0 <= float(mask_prob) <= 1.0
    except (TypeError, ValueError):
        return False


def resolution_label(pixels: int) -> str:
    """Get the ladder label for a desk-scale short side.

    Args:
        pixels: Short side in pixels

    Returns:
        Label such as "240p", or "<n>px" when the size is off the ladder
    """
    for label, size in RESOLUTION_LADDER.items():
        if size == pixels:
            return label
    return f"{pixels}px"
