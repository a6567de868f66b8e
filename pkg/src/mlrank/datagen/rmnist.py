"""Ranked MNIST: unique digits composited on a canvas, ranked by a visual factor.

Each image holds ``m`` distinct digit classes, one exemplar each. Every
digit gets a scale and a brightness; the labelling factor (scale or
brightness) orders the positives, larger/brighter meaning higher rank.
Digits are placed by rejection sampling so their bounding boxes never
overlap, and composited with a per-pixel maximum.

Instance ``i`` is drawn from ``SeedSequence([seed, i])``, so any instance
can be regenerated on its own and generation order does not matter.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np
from scipy import ndimage

from ..data import Dataset
from .tabular import ranks_from_significance

FACTORS = ("scale", "brightness", "mixed-scale", "mixed-brightness")
N_CLASSES = 10
# side of the inked part of an MNIST digit at native resolution
GLYPH_SIDE = 20


class LayoutError(RuntimeError):
    pass


@dataclass(frozen=True)
class RankedMnistConfig:
    canvas: int = 224
    factor: str = "scale"
    scale_min: float = 1.0
    scale_max: float = 3.0
    brightness_min: float = 0.5
    brightness_max: float = 1.0
    digits_min: int = 1
    digits_max: int = 10
    N: int = 1000
    # glyph side in pixels at scale 1.0; None scales MNIST's 20 px with the canvas
    base_size: int | None = None
    max_attempts: int = 100
    max_layouts: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.factor not in FACTORS:
            raise ValueError(f"factor must be one of {FACTORS}, got {self.factor!r}")
        if self.scale_min > self.scale_max or self.brightness_min > self.brightness_max:
            raise ValueError("factor ranges must be nonempty")
        if self.scale_min <= 0 or not 0 < self.brightness_max <= 1 or self.brightness_min < 0:
            raise ValueError("scale must be positive and brightness within [0, 1]")
        if not 1 <= self.digits_min <= self.digits_max <= N_CLASSES:
            raise ValueError(f"need 1 <= digits_min <= digits_max <= {N_CLASSES}")
        if self.canvas <= 0 or self.N < 0:
            raise ValueError("canvas must be positive and N nonnegative")

    @classmethod
    def mini(cls, **overrides) -> "RankedMnistConfig":
        return replace(cls(canvas=64, digits_max=5, N=5000), **overrides)

    @property
    def glyph_size(self) -> int:
        return self.base_size or max(4, round(GLYPH_SIDE * self.canvas / 224))

    @property
    def label_factor(self) -> str:
        return "brightness" if self.factor.endswith("brightness") else "scale"

    @property
    def varies_scale(self) -> bool:
        return self.factor != "brightness"

    @property
    def varies_brightness(self) -> bool:
        return self.factor != "scale"

    def to_dict(self) -> dict:
        return asdict(self)


def crop(img: np.ndarray) -> np.ndarray:
    rows = np.flatnonzero(img.max(axis=1) > 0)
    cols = np.flatnonzero(img.max(axis=0) > 0)
    if rows.size == 0:
        return img[:1, :1]
    return img[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]


def render_digit(img: np.ndarray, scale: float, brightness: float, glyph_size: int) -> np.ndarray:
    """Crop, bilinearly rescale and dim one digit; returns float pixels in [0, 255]."""
    g = crop(img).astype(float)
    f = scale * glyph_size / GLYPH_SIDE
    th, tw = max(1, round(g.shape[0] * f)), max(1, round(g.shape[1] * f))
    out = ndimage.zoom(g, (th / g.shape[0], tw / g.shape[1]), order=1)
    return np.clip(out * brightness, 0.0, 255.0)


def _overlaps(box, placed) -> bool:
    r, c, h, w = box
    for pr, pc, ph, pw in placed:
        if r < pr + ph and pr < r + h and c < pc + pw and pc < c + w:
            return True
    return False


def place(sizes, canvas: int, rng: np.random.Generator, max_attempts=100, max_layouts=50):
    """Non-overlapping top-left corners for boxes of the given (h, w) sizes.

    Boxes are placed largest first; a box that fails ``max_attempts`` random
    positions discards the whole layout. Raises ``LayoutError`` after
    ``max_layouts`` failed layouts.
    """
    for h, w in sizes:
        if h > canvas or w > canvas:
            raise LayoutError(f"digit of size {h}x{w} does not fit on a {canvas}px canvas")
    order = sorted(range(len(sizes)), key=lambda k: -sizes[k][0] * sizes[k][1])
    for _ in range(max_layouts):
        boxes = [None] * len(sizes)
        placed = []
        for k in order:
            h, w = sizes[k]
            for _ in range(max_attempts):
                box = (int(rng.integers(0, canvas - h + 1)), int(rng.integers(0, canvas - w + 1)), h, w)
                if not _overlaps(box, placed):
                    break
            else:
                break
            boxes[k] = box
            placed.append(box)
        else:
            return boxes
    area = sum(h * w for h, w in sizes)
    raise LayoutError(
        f"could not place {len(sizes)} digits (sizes {sizes}, {area / canvas**2:.0%} of the canvas) "
        f"without overlap after {max_layouts} layouts of {max_attempts} attempts"
    )


def compose(glyphs, scales, brightness, canvas: int, glyph_size: int, rng, max_attempts=100, max_layouts=50):
    """Composite prepared digits; returns ``(image u8, boxes)``."""
    rendered = [render_digit(g, s, b, glyph_size) for g, s, b in zip(glyphs, scales, brightness)]
    boxes = place([r.shape for r in rendered], canvas, rng, max_attempts, max_layouts)
    img = np.zeros((canvas, canvas))
    for r, (y, x, h, w) in zip(rendered, boxes):
        np.maximum(img[y : y + h, x : x + w], r, out=img[y : y + h, x : x + w])
    return np.round(img).astype(np.uint8), boxes


class GlyphBank:
    def __init__(self, images: np.ndarray, labels: np.ndarray):
        self.images = images
        self.by_class = [np.flatnonzero(labels == c) for c in range(N_CLASSES)]
        missing = [c for c, idx in enumerate(self.by_class) if idx.size == 0]
        if missing:
            raise ValueError(f"MNIST source has no exemplars of digits {missing}")

    def draw(self, cls: int, rng) -> np.ndarray:
        idx = self.by_class[cls]
        return self.images[idx[rng.integers(idx.size)]]


def instance_rng(seed: int, i: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, i]))


def sample_instance(config: RankedMnistConfig, bank: GlyphBank, rng):
    m = int(rng.integers(config.digits_min, config.digits_max + 1))
    classes = np.sort(rng.choice(N_CLASSES, size=m, replace=False))
    scales = rng.uniform(config.scale_min, config.scale_max, m) if config.varies_scale else np.ones(m)
    bright = (
        rng.uniform(config.brightness_min, config.brightness_max, m) if config.varies_brightness else np.ones(m)
    )
    glyphs = [bank.draw(c, rng) for c in classes]
    img, boxes = compose(
        glyphs, scales, bright, config.canvas, config.glyph_size, rng, config.max_attempts, config.max_layouts
    )
    return classes, scales, bright, img, boxes


def compose_ranked_mnist(config: RankedMnistConfig, images: np.ndarray, labels: np.ndarray) -> Dataset:
    bank = GlyphBank(images, labels)
    n = config.N
    feats = np.zeros((n, config.canvas, config.canvas), dtype=np.uint8)
    scale = np.full((n, N_CLASSES), np.nan)
    bright = np.full((n, N_CLASSES), np.nan)
    boxes = np.full((n, N_CLASSES, 4), -1, dtype=np.int64)
    for i in range(n):
        classes, s, b, img, bx = sample_instance(config, bank, instance_rng(config.seed, i))
        feats[i] = img
        scale[i, classes] = s
        bright[i, classes] = b
        boxes[i, classes] = bx
    sig = scale if config.label_factor == "scale" else bright
    return Dataset(
        features=feats,
        ranks=ranks_from_significance(sig),
        significance=sig.copy(),
        factors={"scale": scale, "brightness": bright},
        meta={"generator": "rmnist", "config": config.to_dict()},
        boxes=boxes,
    )


def image_features(images: np.ndarray, pool: int = 1) -> np.ndarray:
    """Average-pool square images by ``pool`` and flatten to [0, 1] vectors."""
    images = np.asarray(images, dtype=float) / 255.0
    n, h, w = images.shape
    if pool > 1:
        h2, w2 = h // pool, w // pool
        images = images[:, : h2 * pool, : w2 * pool].reshape(n, h2, pool, w2, pool).mean(axis=(2, 4))
    return images.reshape(n, -1)
