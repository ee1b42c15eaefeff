"""Seeded synthetic image world used in place of a real image dataset.

Each image holds one large object painted in its class colour plus a smaller
distractor of a different class on a noisy background, so labels depend on
where a crop lands. Pixel values are float32.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .teacher import class_palette


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    num_images: int = 64
    image_size: int = 32
    channels: int = 3
    num_classes: int = 10
    noise: float = 0.15

    def __post_init__(self):
        if self.num_images < 0 or self.image_size < 1 or self.channels < 1:
            raise ValueError("world dimensions must be positive")
        if self.num_classes < 2:
            raise ValueError("world needs at least 2 classes")

    def to_dict(self):
        return asdict(self)


def _ellipse(size, cx, cy, rx, ry):
    c = (np.arange(size) + 0.5) / size
    return ((c[None, :] - cx) / rx) ** 2 + ((c[:, None] - cy) / ry) ** 2 <= 1.0


def make_image(spec, index):
    """Return ``(image, object_class)`` for image ``index`` of the world."""
    rng = np.random.default_rng([spec.seed, index])
    palette = class_palette(spec.num_classes, spec.channels)
    s = spec.image_size
    img = spec.noise * rng.standard_normal((s, s, spec.channels))

    y = int(rng.integers(spec.num_classes))
    cx, cy = rng.uniform(0.3, 0.7, size=2)
    rx, ry = rng.uniform(0.2, 0.4, size=2)
    img[_ellipse(s, cx, cy, rx, ry)] += palette[y]

    other = int((y + 1 + rng.integers(spec.num_classes - 1)) % spec.num_classes)
    dx, dy = rng.uniform(0.1, 0.9, size=2)
    r = rng.uniform(0.08, 0.2)
    img[_ellipse(s, dx, dy, r, r)] += palette[other]
    return img.astype(np.float32), y


def make_images(spec):
    return [make_image(spec, i)[0] for i in range(spec.num_images)]


def image_id(index):
    return f"img{index:06d}"
