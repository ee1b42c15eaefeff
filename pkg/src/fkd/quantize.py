"""Soft-label compression schemes and their recovery to full distributions.

Five payload kinds are supported:

* ``FULL``            all C probabilities
* ``HARD``            the argmax class index
* ``SMOOTH``          (argmax index, its probability); the rest is spread
                      uniformly over the other C-1 classes on recovery
* ``MARGINAL_SMOOTH`` top-K (index, prob) pairs; leftover mass is spread
                      uniformly over the other C-K classes
* ``MARGINAL_RENORM`` top-K (index, prob) pairs; renormalized on recovery,
                      every other class is exactly zero

``SSL_LOGITS`` carries raw teacher logits and only exists as a storage mode.

Top-K selection is deterministic: ties go to the lower class index and the
payload is ordered by (prob descending, index ascending).
"""

import enum
from dataclasses import dataclass

import numpy as np

from .core import as_logits, check_distribution


class Kind(enum.IntEnum):
    FULL = 0
    HARD = 1
    SMOOTH = 2
    MARGINAL_SMOOTH = 3
    MARGINAL_RENORM = 4
    SSL_LOGITS = 5

    @property
    def uses_k(self):
        return self in (Kind.MARGINAL_SMOOTH, Kind.MARGINAL_RENORM)


@dataclass(frozen=True)
class QuantizationMode:
    kind: Kind
    k: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.kind.uses_k:
            if self.k < 1:
                raise ValueError(f"{self.kind.name} needs K >= 1, got {self.k}")
        elif self.k != 0:
            raise ValueError(f"{self.kind.name} takes no K (got {self.k})")

    def validate_for(self, num_classes):
        if self.kind.uses_k and not self.k < num_classes:
            raise ValueError(f"K={self.k} must be < C={num_classes}")
        if self.kind == Kind.SMOOTH and num_classes < 2:
            raise ValueError("smoothing needs C >= 2")

    def payload_values(self, num_classes):
        """Number of stored scalars per crop."""
        if self.kind in (Kind.FULL, Kind.SSL_LOGITS):
            return num_classes
        if self.kind == Kind.HARD:
            return 1
        if self.kind == Kind.SMOOTH:
            return 2
        return 2 * self.k

    @property
    def name(self):
        if self.kind.uses_k:
            return f"{self.kind.name.lower()}@{self.k}"
        return self.kind.name.lower()

    @classmethod
    def parse(cls, text):
        """Inverse of :attr:`name`, e.g. ``"marginal_smooth@5"`` or ``"hard"``."""
        text = text.strip().lower()
        kind, _, k = text.partition("@")
        try:
            kind = Kind[kind.upper()]
        except KeyError:
            raise ValueError(f"unknown quantization mode {text!r}") from None
        return cls(kind, int(k) if k else 0)


FULL = QuantizationMode(Kind.FULL)
HARD = QuantizationMode(Kind.HARD)
SMOOTH = QuantizationMode(Kind.SMOOTH)
SSL_LOGITS = QuantizationMode(Kind.SSL_LOGITS)


def marginal_smooth_mode(k):
    return QuantizationMode(Kind.MARGINAL_SMOOTH, k)


def marginal_renorm_mode(k):
    return QuantizationMode(Kind.MARGINAL_RENORM, k)


@dataclass(frozen=True, eq=False)
class CompressedLabel:
    """A compressed per-crop label.

    ``indices`` and ``values`` are 1-D arrays whose meaning depends on the
    mode: FULL/SSL_LOGITS keep ``values`` of length C and no indices, HARD
    keeps one index, SMOOTH one index and one value, the marginal modes K of
    each.
    """

    mode: QuantizationMode
    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64).reshape(-1))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64).reshape(-1))

    def __eq__(self, other):
        if not isinstance(other, CompressedLabel):
            return NotImplemented
        return (self.mode == other.mode
                and np.array_equal(self.indices, other.indices)
                and self.values.tobytes() == other.values.tobytes())

    def validate(self, num_classes):
        kind = self.mode.kind
        self.mode.validate_for(num_classes)
        n_idx, n_val = _payload_shape(self.mode, num_classes)
        if self.indices.size != n_idx or self.values.size != n_val:
            raise ValueError(
                f"{kind.name} payload expects {n_idx} indices and {n_val} values, "
                f"got {self.indices.size} and {self.values.size}")
        if np.any(self.indices < 0) or np.any(self.indices >= num_classes):
            raise ValueError(f"class index out of range for C={num_classes}")
        if np.unique(self.indices).size != self.indices.size:
            raise ValueError("payload indices must be distinct")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("payload values must be finite")
        if kind in (Kind.SSL_LOGITS, Kind.HARD):
            return
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("payload probabilities must lie in [0, 1]")
        if kind == Kind.FULL:
            check_distribution(self.values)
        if kind.uses_k:
            order = _topk_order(self.values, self.indices)
            if not np.array_equal(order, np.arange(self.values.size)):
                raise ValueError("marginal payload must be sorted by (prob desc, index asc)")
            if self.values.sum() > 1 + 1e-6:
                raise ValueError("top-K mass exceeds 1")
            if kind == Kind.MARGINAL_RENORM and not self.values.sum() > 0:
                raise ValueError("top-K mass is zero; cannot renormalize")


def _payload_shape(mode, num_classes):
    kind = mode.kind
    if kind in (Kind.FULL, Kind.SSL_LOGITS):
        return 0, num_classes
    if kind == Kind.HARD:
        return 1, 0
    if kind == Kind.SMOOTH:
        return 1, 1
    return mode.k, mode.k


def _topk_order(values, indices):
    # lexsort: last key is primary
    return np.lexsort((indices, -values))


def argmax_lowest(x):
    """Index of the maximum; ties resolved to the lowest index."""
    x = np.asarray(x)
    return int(np.argmax(x))  # numpy returns the first occurrence


def top_k(p, k):
    """Top-``k`` (indices, probs) ordered by (prob desc, index asc)."""
    p = np.asarray(p, dtype=np.float64)
    order = np.lexsort((np.arange(p.size), -p))[:k]
    return order.astype(np.int64), p[order]


def full(p):
    p = check_distribution(p)
    return CompressedLabel(FULL, np.empty(0, np.int64), p.copy())


def ssl_logits(z):
    z = as_logits(z)
    return CompressedLabel(SSL_LOGITS, np.empty(0, np.int64), z.copy())


def harden(z):
    """Keep only the argmax class of logits (or probabilities)."""
    z = as_logits(z)
    if z.ndim != 1:
        raise ValueError("harden expects a single vector")
    return CompressedLabel(HARD, [argmax_lowest(z)], np.empty(0))


def smooth(p):
    p = check_distribution(p)
    if p.size < 2:
        raise ValueError("smoothing needs C >= 2")
    c = argmax_lowest(p)
    return CompressedLabel(SMOOTH, [c], [p[c]])


def marginal_smooth(p, k):
    p = check_distribution(p)
    if not 1 <= k < p.size:
        raise ValueError(f"K must satisfy 1 <= K < C={p.size}, got {k}")
    idx, vals = top_k(p, k)
    return CompressedLabel(marginal_smooth_mode(k), idx, vals)


def marginal_renorm(p, k):
    p = check_distribution(p)
    if not 1 <= k < p.size:
        raise ValueError(f"K must satisfy 1 <= K < C={p.size}, got {k}")
    idx, vals = top_k(p, k)
    if not vals.sum() > 0:
        raise ValueError("top-K mass is zero; cannot renormalize")
    return CompressedLabel(marginal_renorm_mode(k), idx, vals)


def compress(label, mode):
    """Compress ``label`` (probabilities, or logits for SSL) with ``mode``."""
    kind = mode.kind
    if kind == Kind.FULL:
        return full(label)
    if kind == Kind.SSL_LOGITS:
        return ssl_logits(label)
    if kind == Kind.HARD:
        return harden(label)
    if kind == Kind.SMOOTH:
        return smooth(label)
    if kind == Kind.MARGINAL_SMOOTH:
        return marginal_smooth(label, mode.k)
    return marginal_renorm(label, mode.k)


def recover(label, num_classes):
    """Expand a compressed label back to a C-way vector.

    SSL_LOGITS payloads come back as raw logits; every other mode yields a
    probability vector.
    """
    label.validate(num_classes)
    kind = label.mode.kind
    if kind in (Kind.FULL, Kind.SSL_LOGITS):
        return label.values.copy()
    out = np.zeros(num_classes, dtype=np.float64)
    if kind == Kind.HARD:
        out[label.indices[0]] = 1.0
        return out
    if kind == Kind.SMOOTH:
        pc = label.values[0]
        out[:] = (1.0 - pc) / (num_classes - 1)
        out[label.indices[0]] = pc
        return out
    mass = label.values.sum()
    if kind == Kind.MARGINAL_SMOOTH:
        k = label.values.size
        # mass may exceed 1 by float32 rounding only; validate() bounds it
        out[:] = max(1.0 - mass, 0.0) / (num_classes - k)
        out[label.indices] = label.values
        return out
    out[label.indices] = label.values / mass
    return out
