"""Deterministic teachers mapping a crop-resized region to class logits.

Two kinds exist:

``synthetic_mlp``
    a fixed two-layer tanh network whose weights are drawn from the seed.
``tabular``
    a linear template matcher: class ``c`` scores ``gain * <field_c, region>``
    where ``field_c`` is a per-class spatial window times the class colour.

Teachers emit float32-valued outputs (held in float64 arrays). That is the
width of the label store, so a Full-mode store keeps every teacher output
without loss. Rows are evaluated one at a time so the result for a region
never depends on which batch it was evaluated in.
"""

import enum
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from .core import softmax

PALETTE_SEED = 0x5EED_C0


class TeacherKind(str, enum.Enum):
    SYNTHETIC_MLP = "synthetic_mlp"
    TABULAR = "tabular"


class LabelMode(str, enum.Enum):
    SUPERVISED = "supervised"
    SSL = "ssl"


@dataclass(frozen=True)
class TeacherSpec:
    kind: TeacherKind = TeacherKind.TABULAR
    seed: int = 0
    num_classes: int = 10
    mode: LabelMode = LabelMode.SUPERVISED
    resolution: int = 16
    channels: int = 3
    hidden: int = 32
    gain: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "kind", TeacherKind(self.kind))
        object.__setattr__(self, "mode", LabelMode(self.mode))
        if self.num_classes < 2:
            raise ValueError("teacher needs at least 2 classes")
        if self.resolution < 1 or self.channels < 1 or self.hidden < 1:
            raise ValueError("resolution, channels and hidden must be positive")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in 64 bits")

    @property
    def region_shape(self):
        return (self.resolution, self.resolution, self.channels)

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        d["mode"] = self.mode.value
        return d


def class_palette(num_classes, channels):
    """Unit-norm colour per class, shared by the tabular teacher and the world."""
    rng = np.random.default_rng([PALETTE_SEED, num_classes, channels])
    p = rng.standard_normal((num_classes, channels))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


def gaussian_window(resolution, cx, cy, sigma):
    """Normalized Gaussian weights over an r x r grid of pixel centers."""
    c = (np.arange(resolution) + 0.5) / resolution
    g = np.exp(-((c[None, :] - cx) ** 2 + (c[:, None] - cy) ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def tabular_fields(spec):
    """Seeded ``(C, r, r, ch)`` weight table for the tabular teacher."""
    rng = np.random.default_rng([spec.seed, 1])
    palette = class_palette(spec.num_classes, spec.channels)
    fields = np.empty((spec.num_classes,) + spec.region_shape)
    for c in range(spec.num_classes):
        cx, cy = 0.5 + rng.uniform(-0.1, 0.1, size=2)
        sigma = rng.uniform(0.25, 0.4)
        window = gaussian_window(spec.resolution, cx, cy, sigma)
        fields[c] = window[:, :, None] * palette[c][None, None, :]
    return fields


class Teacher:
    """A built, immutable teacher. Use :func:`build_teacher` to get one."""

    def __init__(self, spec, fields=None):
        self.spec = spec
        n_in = int(np.prod(spec.region_shape))
        if spec.kind == TeacherKind.TABULAR:
            if fields is None:
                fields = tabular_fields(spec)
            fields = np.asarray(fields, dtype=np.float64)
            if fields.shape != (spec.num_classes,) + spec.region_shape:
                raise ValueError(f"fields shape {fields.shape} does not match spec")
            self.weight = np.ascontiguousarray(spec.gain * fields.reshape(spec.num_classes, n_in).T)
            self.fields = fields
        else:
            if fields is not None:
                raise ValueError("explicit fields only apply to the tabular teacher")
            rng = np.random.default_rng([spec.seed, 2])
            self.w1 = rng.standard_normal((n_in, spec.hidden)) / np.sqrt(n_in)
            self.b1 = 0.1 * rng.standard_normal(spec.hidden)
            self.w2 = spec.gain * rng.standard_normal((spec.hidden, spec.num_classes)) / np.sqrt(spec.hidden)
            self.b2 = 0.1 * rng.standard_normal(spec.num_classes)
        for arr in vars(self).values():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)

    def _row(self, x):
        if self.spec.kind == TeacherKind.TABULAR:
            return x @ self.weight
        h = np.tanh(x @ self.w1 + self.b1)
        return h @ self.w2 + self.b2

    def logits(self, region):
        """Logits for one region ``(r, r, ch)`` or a stack ``(n, r, r, ch)``."""
        region = np.asarray(region, dtype=np.float64)
        shape = self.spec.region_shape
        if region.shape[-3:] != shape or region.ndim not in (3, 4):
            raise ValueError(f"region shape {region.shape} does not match teacher {shape}")
        if not np.all(np.isfinite(region)):
            raise ValueError("region contains non-finite pixels")
        flat = region.reshape(-1, int(np.prod(shape)))
        out = np.empty((flat.shape[0], self.spec.num_classes))
        for i in range(flat.shape[0]):
            out[i] = self._row(np.ascontiguousarray(flat[i]))
        out = out.astype(np.float32).astype(np.float64)
        return out[0] if region.ndim == 3 else out

    def soft_label(self, region, tau=1.0):
        """Supervised: f32-rounded ``softmax(logits / tau)``. SSL: the raw logits.

        Temperature in SSL mode is applied later, at training time.
        """
        z = self.logits(region)
        if self.spec.mode == LabelMode.SSL:
            return z
        return softmax(z, tau).astype(np.float32).astype(np.float64)


@lru_cache(maxsize=32)
def _cached(spec):
    return Teacher(spec)


def build_teacher(spec):
    return _cached(spec)


def teacher_logits(spec, region):
    return build_teacher(spec).logits(region)


def teacher_soft_label(spec, region, tau=1.0):
    return build_teacher(spec).soft_label(region, tau)
