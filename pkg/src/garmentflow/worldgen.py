"""Procedural garment-transfer micro-world.

Every sample is a pure function of an integer seed: a product shot of one
garment, a garment-agnostic structured prompt, and the target scene with the
garment pasted into a pose-dependent placement rectangle.

Token id table (vocabulary of 16)::

    0-4   BG:studio BG:beach BG:street BG:lawn BG:bedroom
    5-7   POSE:standing POSE:sitting POSE:walking
    8-10  BUCKET:1:1 BUCKET:3:4 BUCKET:2:3
    11-14 reserved
    15    EOS
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

SHAPES = ("tee", "pants", "skirt", "hat", "bag")
PATTERNS = ("solid", "stripes", "checker", "dots")
BACKGROUNDS = ("studio", "beach", "street", "lawn", "bedroom")
POSES = ("standing", "sitting", "walking")

# RGB cube corners: pairwise L1 distance >= 255
PALETTE = (
    (0, 0, 0),
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 255, 255),
)
COLOR_NAMES = ("black", "red", "green", "blue", "yellow", "magenta", "cyan", "white")

PRODUCT_GRAY = (200, 200, 200)
GARMENT_SIZE = 16


@dataclass(frozen=True)
class AspectBucket:
    ratio: str
    height: int
    width: int


BUCKETS = (
    AspectBucket("1:1", 16, 16),
    AspectBucket("3:4", 16, 12),
    AspectBucket("2:3", 24, 16),
)
BUCKET_BY_RATIO = {b.ratio: b for b in BUCKETS}

# (top, left, height, width) per pose, per bucket
PLACEMENTS = {
    "1:1": {"standing": (2, 4, 12, 8), "sitting": (5, 2, 9, 12), "walking": (1, 5, 14, 8)},
    "3:4": {"standing": (2, 2, 12, 8), "sitting": (5, 1, 9, 10), "walking": (1, 3, 14, 8)},
    "2:3": {"standing": (3, 3, 18, 10), "sitting": (8, 2, 12, 12), "walking": (2, 4, 20, 9)},
}

VOCAB_SIZE = 16
PROMPT_LEN = 4
EOS = 15
BG_TOKEN0, POSE_TOKEN0, BUCKET_TOKEN0 = 0, 5, 8

# seeds at or above this value are never put into training manifests
EVAL_SEED_BASE = 1 << 40


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    color: int
    pattern: str
    background: str
    pose: str
    bucket: str
    seed: int = 0

    @property
    def aspect(self) -> AspectBucket:
        return BUCKET_BY_RATIO[self.bucket]

    @property
    def placement(self) -> tuple[int, int, int, int]:
        return PLACEMENTS[self.bucket][self.pose]

    def to_dict(self) -> dict:
        return asdict(self)


def spec_from_seed(seed: int) -> SceneSpec:
    """Bucket and shape are stratified on ``seed``; the rest is drawn from it.

    Any run of 15 consecutive seeds covers every (bucket, shape) pair once.
    """
    rng = np.random.default_rng(seed)
    return SceneSpec(
        shape=SHAPES[(seed // 3) % len(SHAPES)],
        color=int(rng.integers(len(PALETTE))),
        pattern=PATTERNS[int(rng.integers(len(PATTERNS)))],
        background=BACKGROUNDS[int(rng.integers(len(BACKGROUNDS)))],
        pose=POSES[int(rng.integers(len(POSES)))],
        bucket=BUCKETS[seed % 3].ratio,
        seed=seed,
    )


# ---------------------------------------------------------------- garment


def shape_mask(shape: str) -> np.ndarray:
    """16x16 boolean silhouette."""
    m = np.zeros((GARMENT_SIZE, GARMENT_SIZE), dtype=bool)
    if shape == "tee":
        m[2:6, 1:15] = True  # sleeves
        m[2:15, 4:12] = True  # body
        m[2:4, 6:10] = False  # neckline
    elif shape == "pants":
        m[1:4, 3:13] = True
        m[4:15, 3:7] = True
        m[4:15, 9:13] = True
    elif shape == "skirt":
        for r in range(2, 15):
            half = 3 + (r - 2) // 2
            m[r, 8 - half : 8 + half] = True
    elif shape == "hat":
        m[4:10, 4:12] = True
        m[10:12, 1:15] = True
    elif shape == "bag":
        m[6:15, 2:14] = True
        m[2:6, 5:7] = True
        m[2:6, 9:11] = True
        m[2:4, 5:11] = True
    else:
        raise ValueError(f"unknown shape {shape!r}")
    return m


def complement(rgb) -> tuple[int, int, int]:
    return tuple(255 - c for c in rgb)


def pattern_mask(pattern: str, h: int = GARMENT_SIZE, w: int = GARMENT_SIZE) -> np.ndarray:
    """True where the pattern shows the complement of the base color."""
    r, c = np.mgrid[0:h, 0:w]
    if pattern == "solid":
        return np.zeros((h, w), dtype=bool)
    if pattern == "stripes":
        return r % 2 == 1
    if pattern == "checker":
        return (r // 2 + c // 2) % 2 == 1
    if pattern == "dots":
        return (r % 4 == 1) & (c % 4 == 1)
    raise ValueError(f"unknown pattern {pattern!r}")


def render_garment_u8(spec: SceneSpec) -> np.ndarray:
    base = np.array(PALETTE[spec.color], dtype=np.uint8)
    alt = np.array(complement(PALETTE[spec.color]), dtype=np.uint8)
    img = np.empty((GARMENT_SIZE, GARMENT_SIZE, 3), dtype=np.uint8)
    img[:] = PRODUCT_GRAY
    mask = shape_mask(spec.shape)
    pat = pattern_mask(spec.pattern)
    img[mask & ~pat] = base
    img[mask & pat] = alt
    return img


def render_garment(spec: SceneSpec) -> np.ndarray:
    """16x16x3 float32 product image in [0, 1]."""
    return to_float(render_garment_u8(spec))


# ---------------------------------------------------------------- scene

BACKGROUND_FILL = {
    "studio": (232, 228, 220),
    "beach": (222, 196, 140),
    "street": (110, 110, 118),
    "lawn": (70, 140, 60),
    "bedroom": (170, 130, 150),
}
BACKGROUND_ALT = {
    "studio": (232, 228, 220),
    "beach": (130, 190, 235),
    "street": (80, 80, 88),
    "lawn": (95, 165, 80),
    "bedroom": (140, 100, 120),
}


def background_u8(background: str, h: int, w: int) -> np.ndarray:
    """Fill plus a fixed texture rule that depends only on pixel position."""
    r, c = np.mgrid[0:h, 0:w]
    if background == "studio":
        alt = np.zeros((h, w), dtype=bool)
    elif background == "beach":
        alt = r < h // 3  # sky band
    elif background == "street":
        alt = c % 4 == 0  # lamp posts
    elif background == "lawn":
        alt = (r + c) % 2 == 0
    elif background == "bedroom":
        alt = r % 3 == 0
    else:
        raise ValueError(f"unknown background {background!r}")
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = BACKGROUND_FILL[background]
    img[alt] = BACKGROUND_ALT[background]
    return img


def placement_index(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-neighbour source rows/cols for resampling the garment to h x w."""
    return (np.arange(h) * GARMENT_SIZE) // h, (np.arange(w) * GARMENT_SIZE) // w


def garment_region(spec: SceneSpec) -> np.ndarray:
    """Boolean H x W mask of scene pixels that show the garment."""
    b = spec.aspect
    top, left, ph, pw = spec.placement
    rows, cols = placement_index(ph, pw)
    region = np.zeros((b.height, b.width), dtype=bool)
    region[top : top + ph, left : left + pw] = shape_mask(spec.shape)[np.ix_(rows, cols)]
    return region


def placement_rect_mask(spec: SceneSpec) -> np.ndarray:
    b = spec.aspect
    top, left, ph, pw = spec.placement
    m = np.zeros((b.height, b.width), dtype=bool)
    m[top : top + ph, left : left + pw] = True
    return m


def render_scene_u8(spec: SceneSpec) -> np.ndarray:
    b = spec.aspect
    img = background_u8(spec.background, b.height, b.width)
    top, left, ph, pw = spec.placement
    rows, cols = placement_index(ph, pw)
    patch = render_garment_u8(spec)[np.ix_(rows, cols)]
    inside = shape_mask(spec.shape)[np.ix_(rows, cols)]
    view = img[top : top + ph, left : left + pw]
    view[inside] = patch[inside]
    return img


def render_scene(spec: SceneSpec) -> np.ndarray:
    """H x W x 3 float32 scene in [0, 1] for the spec's bucket."""
    return to_float(render_scene_u8(spec))


def to_float(img_u8: np.ndarray) -> np.ndarray:
    return img_u8.astype(np.float32) / np.float32(255.0)


# ---------------------------------------------------------------- prompt


def make_prompt(spec: SceneSpec) -> tuple[int, int, int, int]:
    return prompt_tokens(spec.background, spec.pose, spec.bucket)


def prompt_tokens(background: str, pose: str, bucket: str) -> tuple[int, int, int, int]:
    ratios = [b.ratio for b in BUCKETS]
    return (
        BG_TOKEN0 + BACKGROUNDS.index(background),
        POSE_TOKEN0 + POSES.index(pose),
        BUCKET_TOKEN0 + ratios.index(bucket),
        EOS,
    )


def generate_sample(seed: int):
    """``(garment, prompt, scene, spec)`` for ``seed``; garment and scene are float32."""
    spec = spec_from_seed(seed)
    return render_garment(spec), make_prompt(spec), render_scene(spec), spec
