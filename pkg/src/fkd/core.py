"""Numeric kernels shared by the rest of the package.

Everything here is a pure function on numpy arrays. Accumulation happens in
float64 regardless of the dtype of the inputs.

Interpolation uses the half-pixel-center convention throughout: on a grid of
shape ``(H, W)`` the value ``grid[i, j]`` lives at continuous coordinate
``(x, y) = (j + 0.5, i + 0.5)`` and the valid query domain is
``[0, W] x [0, H]``. Queries in the outer half-cell border are clamped to the
nearest row/column of centers.
"""

import numpy as np

LOG_EPS = 1e-12
SUM_TOL = 1e-6


def as_logits(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 1 or z.shape[-1] < 2:
        raise ValueError(f"logits need at least 2 classes, got shape {z.shape}")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    return z


def check_distribution(p, tol=SUM_TOL):
    """Validate that ``p`` (or every row of ``p``) is a probability vector.

    Returns ``p`` as a float64 array.
    """
    p = np.asarray(p, dtype=np.float64)
    if p.ndim < 1 or p.shape[-1] < 1:
        raise ValueError(f"distribution needs at least one entry, got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise ValueError("distribution contains non-finite values")
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("distribution entries must lie in [0, 1]")
    s = p.sum(axis=-1)
    if np.any(np.abs(s - 1.0) > tol):
        worst = float(np.max(np.abs(s - 1.0)))
        raise ValueError(f"distribution does not sum to 1 (off by {worst:.3g})")
    return p


def softmax(z, tau=1.0):
    """Temperature softmax over the last axis.

    The max is subtracted before exponentiation so large logits are safe.
    Works on a single vector or on a batch of rows.
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = as_logits(z)
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, tau=1.0):
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = as_logits(z)
    shifted = (z - z.max(axis=-1, keepdims=True)) / tau
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(p, q, eps=LOG_EPS):
    """``-sum_c p_c log q_c`` with ``q`` clamped to ``eps`` before the log.

    ``p`` supplies the weights, ``q`` is the distribution being scored.
    Row-wise when given 2-D input.
    """
    p = check_distribution(p)
    q = check_distribution(q)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    return -np.sum(p * np.log(np.maximum(q, eps)), axis=-1)


def entropy(p, eps=LOG_EPS):
    return cross_entropy(p, p, eps)


def kl_divergence(p, q, eps=LOG_EPS):
    return cross_entropy(p, q, eps) - entropy(p, eps)


def bilinear_sample(grid, x, y):
    """Bilinearly interpolate ``grid`` at continuous coordinates ``(x, y)``.

    ``grid`` has shape ``(H, W)`` or ``(H, W, ...)``; trailing axes are
    carried through, so a ``(H, W, C)`` label map yields ``C`` values per
    query. ``x`` and ``y`` may be scalars or broadcastable arrays. Raises
    ``ValueError`` for any query outside ``[0, W] x [0, H]``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim < 2:
        raise ValueError("grid must be at least 2-D")
    h, w = grid.shape[:2]
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    tol = 1e-9
    if (np.any(~np.isfinite(x)) or np.any(~np.isfinite(y))
            or np.any(x < -tol) or np.any(x > w + tol)
            or np.any(y < -tol) or np.any(y > h + tol)):
        raise ValueError(f"query outside grid bounds [0, {w}] x [0, {h}]")

    # shift to center-index space and clamp to the hull of the centers
    gx = np.clip(x - 0.5, 0.0, w - 1.0)
    gy = np.clip(y - 0.5, 0.0, h - 1.0)
    x0 = np.floor(gx).astype(np.intp)
    y0 = np.floor(gy).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = gx - x0
    fy = gy - y0

    extra = (np.newaxis,) * (grid.ndim - 2)
    fx = fx[(...,) + extra]
    fy = fy[(...,) + extra]
    top = grid[y0, x0] * (1.0 - fx) + grid[y0, x1] * fx
    bottom = grid[y1, x0] * (1.0 - fx) + grid[y1, x1] * fx
    out = top * (1.0 - fy) + bottom * fy
    if out.ndim == 0:
        return float(out)
    return out
