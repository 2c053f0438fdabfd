"""Squared-exponential kernel, its mixed partial derivatives, and multi-index
bookkeeping.

Every mixed partial of the SE kernel factorizes over input dimensions into
products of 1-D Gaussian derivatives, which are Hermite polynomials times the
kernel itself:

    d^n/du^n exp(-u^2 / (2 delta^2))
        = (-1)^n delta^-n He_n(u / delta) exp(-u^2 / (2 delta^2)),

with He_n the probabilists' Hermite polynomial.  Differentiating in the second
argument flips the sign once per order.  All evaluators below are closed-form;
the finite-difference oracle exists only so tests can check them against an
independent construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np

# Per-argument derivative orders are capped; the covariance blocks needed for
# order-d training data involve up to order d in each argument.
MAX_ORDER = 4

MultiIndex = tuple[int, ...]


@dataclass(frozen=True)
class KernelParams:
    """SE kernel hyperparameters: length scale delta and output variance."""

    length_scale: float
    amplitude: float = 1.0

    def __post_init__(self):
        if not (0.001 <= self.length_scale <= 1000.0):
            raise ValueError(
                f"length_scale {self.length_scale} outside [0.001, 1000]")
        if self.amplitude <= 0:
            raise ValueError("amplitude must be positive")


def enumerate_multi_indices(p, d):
    """All exponent vectors alpha with |alpha| <= d in p dimensions.

    Grouped by ascending total order; within an order, sorted so that earlier
    dimensions carry the higher exponents ((2,0) before (1,1) before (0,2)).
    The count per order k is binom(p+k-1, k) (stars and bars).
    """
    if p < 1:
        raise ValueError(f"dimension must be >= 1, got {p}")
    if not 0 <= d <= MAX_ORDER:
        raise ValueError(f"derivative order must be in [0, {MAX_ORDER}], got {d}")
    out = []
    for k in range(d + 1):
        out.extend(_compositions(k, p))
    return out


def _compositions(k, p):
    if p == 1:
        return [(k,)]
    result = []
    for first in range(k, -1, -1):
        for rest in _compositions(k - first, p - 1):
            result.append((first,) + rest)
    return result


def layout_size(p, d):
    """Measurement slots per point: z = sum_k binom(p+k-1, k)."""
    return sum(comb(p + k - 1, k) for k in range(d + 1))


@dataclass
class DerivativeSpec:
    """Dimension, maximum derivative order, and the canonical slot layout."""

    dim: int
    max_order: int
    layout: list = field(default=None)

    def __post_init__(self):
        if self.layout is None:
            self.layout = enumerate_multi_indices(self.dim, self.max_order)
        if len(self.layout) != layout_size(self.dim, self.max_order):
            raise ValueError("layout length inconsistent with dim/max_order")

    @property
    def n_slots(self):
        return len(self.layout)

    def orders(self):
        """Total order |alpha| of each slot, as an int array."""
        return np.array([sum(a) for a in self.layout])

    def alpha_array(self):
        """Slot multi-indices stacked into an (n_slots, dim) int array."""
        return np.array(self.layout, dtype=int).reshape(self.n_slots, self.dim)


def _hermite_stack(t, n_max):
    """He_0..He_n_max evaluated at t, stacked along a new leading axis."""
    out = np.empty((n_max + 1,) + np.shape(t))
    out[0] = 1.0
    if n_max >= 1:
        out[1] = t
    for n in range(1, n_max):
        out[n + 1] = t * out[n] - n * out[n - 1]
    return out


def se_kernel(x, y, params):
    """amplitude * exp(-||x-y||^2 / (2 delta^2)); symmetric in (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"dimension mismatch: {x.shape} vs {y.shape}")
    r2 = np.sum((x - y) ** 2)
    return params.amplitude * np.exp(-0.5 * r2 / params.length_scale**2)


def se_kernel_block_matrix(x_pts, x_alphas, y_pts, y_alphas, params):
    """Matrix of mixed kernel partials for row slots against column slots.

    x_pts : (m, p) row points;   x_alphas : (m, p) derivative orders in x
    y_pts : (n, p) column points; y_alphas : (n, p) derivative orders in y

    Entry (i, j) is  d_x^{x_alphas[i]} d_y^{y_alphas[j]} k(x_pts[i], y_pts[j]).
    """
    x_pts = np.atleast_2d(np.asarray(x_pts, dtype=float))
    y_pts = np.atleast_2d(np.asarray(y_pts, dtype=float))
    x_alphas = np.atleast_2d(np.asarray(x_alphas, dtype=int))
    y_alphas = np.atleast_2d(np.asarray(y_alphas, dtype=int))
    if x_pts.shape[1] != y_pts.shape[1]:
        raise ValueError("dimension mismatch between row and column points")
    delta = params.length_scale

    u = (x_pts[:, None, :] - y_pts[None, :, :]) / delta
    orders = x_alphas[:, None, :] + y_alphas[None, :, :]
    herm = _hermite_stack(u, int(orders.max()))
    herm = np.take_along_axis(herm, orders[None, ...], axis=0)[0]
    poly = herm.prod(axis=-1)

    total = x_alphas.sum(axis=1)[:, None] + y_alphas.sum(axis=1)[None, :]
    sign = np.where(x_alphas.sum(axis=1) % 2 == 1, -1.0, 1.0)
    gauss = np.exp(-0.5 * np.sum(u * u, axis=-1))
    return params.amplitude * sign[:, None] * delta ** (-total.astype(float)) * poly * gauss


def se_kernel_block(x, y, params, alpha, beta):
    """Single mixed partial d_x^alpha d_y^beta k(x, y).

    Equal to p_{alpha,beta}(x - y) * k(x, y) for a polynomial p whose degree
    is |alpha| + |beta|; in particular it inherits the Gaussian decay of the
    kernel itself.
    """
    alpha = tuple(alpha)
    beta = tuple(beta)
    if sum(alpha) > MAX_ORDER or sum(beta) > MAX_ORDER:
        raise ValueError(
            f"derivative order overflow: |alpha|={sum(alpha)}, |beta|={sum(beta)}"
            f" exceed the supported maximum {MAX_ORDER}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if x.shape != y.shape or len(alpha) != x.size or len(beta) != x.size:
        raise ValueError("dimension mismatch between points and multi-indices")
    return float(se_kernel_block_matrix(
        x[None, :], np.array([alpha]), y[None, :], np.array([beta]), params)[0, 0])


def envelope_constant(alpha, beta, params, half_width=10.0, grid_points=41):
    """Bound constant for the Gaussian-decay envelope of a derivative block.

    Maximum of |p_{alpha,beta}| * amplitude over a dense grid of offsets
    u in [-half_width, half_width]^p (offsets in input units).  Within that
    offset range,  |block(x, y)| <= C * exp(-||x-y||^2 / (2 delta^2)).
    """
    p = len(alpha)
    axes = [np.linspace(-half_width, half_width, grid_points)] * p
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, p)
    t = mesh / params.length_scale
    total = np.array(alpha) + np.array(beta)
    herm = _hermite_stack(t, int(total.max(initial=0)))
    vals = np.ones(len(mesh))
    for dim_idx, n in enumerate(total):
        vals = vals * herm[n][:, dim_idx]
    scale = params.length_scale ** (-float(sum(alpha) + sum(beta)))
    return params.amplitude * scale * np.max(np.abs(vals))


# Central-difference stencils (offsets, coefficients) per derivative order.
_STENCILS = {
    1: ((-1, 1), (-0.5, 0.5)),
    2: ((-1, 0, 1), (1.0, -2.0, 1.0)),
    3: ((-2, -1, 1, 2), (-0.5, 1.0, -1.0, 0.5)),
    4: ((-2, -1, 0, 1, 2), (1.0, -4.0, 6.0, -4.0, 1.0)),
}


def _fd_once(x, y, params, alpha, beta, step):
    """One nested central-difference pass at a fixed step."""
    terms = [("x", dim, n) for dim, n in enumerate(alpha) if n > 0]
    terms += [("y", dim, n) for dim, n in enumerate(beta) if n > 0]
    if not terms:
        return se_kernel(x, y, params)
    var, dim, n = terms[0]
    offsets, coeffs = _STENCILS[n]
    rest_alpha = list(alpha)
    rest_beta = list(beta)
    (rest_alpha if var == "x" else rest_beta)[dim] = 0
    acc = 0.0
    for off, c in zip(offsets, coeffs):
        xs = np.array(x, dtype=float)
        ys = np.array(y, dtype=float)
        if var == "x":
            xs[dim] += off * step
        else:
            ys[dim] += off * step
        acc += c * _fd_once(xs, ys, params, rest_alpha, rest_beta, step)
    return acc / step**n


def finite_difference_oracle(x, y, params, alpha, beta, step=None,
                             richardson=None):
    """Nested central differences for d_x^alpha d_y^beta k(x, y).

    Test instrument only: independent of the Hermite closed form.  For total
    order <= 2 a small step suffices; higher orders default to a coarser step
    plus two Richardson extrapolation levels so truncation and round-off stay
    balanced (worst case ~1e-4 relative over orders 3..8).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    alpha = list(alpha)
    beta = list(beta)
    total = sum(alpha) + sum(beta)
    if richardson is None:
        richardson = total > 2
    if step is None:
        step = params.length_scale * (1e-4 if total <= 2 else 0.15)
    if step <= 0:
        raise ValueError("step must be positive")
    d1 = _fd_once(x, y, params, alpha, beta, step)
    if not richardson:
        return d1
    d2 = _fd_once(x, y, params, alpha, beta, step / 2.0)
    d4 = _fd_once(x, y, params, alpha, beta, step / 4.0)
    r1 = (4.0 * d2 - d1) / 3.0
    r2 = (4.0 * d4 - d2) / 3.0
    return (16.0 * r2 - r1) / 15.0
