"""Dense derivative-augmented covariance assembly, noise diagonals, jitter,
and conditioning diagnostics.

Everything here is dense and exact; sparsity lives in :mod:`dsgp.sparse`.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .kernels import DerivativeSpec, se_kernel_block_matrix
from .ordering import Layout, natural_layout

NOISE_FREE = "noise-free"
HETEROSCEDASTIC = "heteroscedastic-diagonal"


@dataclass
class MeasurementSet:
    """Training points with a full table of derivative observations.

    values[i, k] holds the observation of multi-index ``spec.layout[k]`` at
    ``points[i]``; every point carries every slot.
    """

    points: np.ndarray
    values: np.ndarray
    spec: DerivativeSpec

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=float))
        self.values = np.asarray(self.values, dtype=float)
        n, p = self.points.shape
        if n < 1:
            raise ValueError("need at least one training point")
        if p != self.spec.dim:
            raise ValueError(f"points are {p}-dimensional, spec expects {self.spec.dim}")
        if self.values.shape != (n, self.spec.n_slots):
            raise ValueError(
                f"values must be (N, z) = ({n}, {self.spec.n_slots}), "
                f"got {self.values.shape}")

    @property
    def n(self):
        return self.points.shape[0]

    @property
    def n_total(self):
        return self.n * self.spec.n_slots

    def merged_with(self, other):
        """Concatenate two sets sharing the same spec."""
        if other.spec.dim != self.spec.dim or other.spec.max_order != self.spec.max_order:
            raise ValueError("cannot merge measurement sets with different specs")
        return MeasurementSet(points=np.vstack([self.points, other.points]),
                              values=np.vstack([self.values, other.values]),
                              spec=self.spec)


@dataclass
class NoiseModel:
    """Observation-noise description: either exactly zero or a per-order
    (or fully general) diagonal of standard deviations."""

    mode: str = NOISE_FREE
    per_order_std: np.ndarray = field(default=None)
    diagonal_std: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.per_order_std is not None:
            self.per_order_std = np.asarray(self.per_order_std, dtype=float)
            if np.any(self.per_order_std < 0):
                raise ValueError("noise standard deviations must be >= 0")
        if self.diagonal_std is not None:
            self.diagonal_std = np.asarray(self.diagonal_std, dtype=float)
            if np.any(self.diagonal_std < 0):
                raise ValueError("noise standard deviations must be >= 0")
        if self.mode == NOISE_FREE:
            for arr in (self.per_order_std, self.diagonal_std):
                if arr is not None and np.any(arr != 0):
                    raise ValueError("noise-free mode requires all-zero sigmas")

    @classmethod
    def noise_free(cls):
        return cls(mode=NOISE_FREE)

    @classmethod
    def from_order_std(cls, stds):
        return cls(mode=HETEROSCEDASTIC, per_order_std=np.asarray(stds, dtype=float))

    @classmethod
    def from_percent_schedule(cls, train, percents):
        """Percent noise per derivative order, scaled by the sample standard
        deviation of that order's observation block."""
        orders = train.spec.orders()
        percents = np.asarray(percents, dtype=float)
        if len(percents) != train.spec.max_order + 1:
            raise ValueError("need one percentage per derivative order")
        stds = np.empty_like(percents)
        for k in range(train.spec.max_order + 1):
            block = train.values[:, orders == k]
            stds[k] = (percents[k] / 100.0) * float(np.std(block))
        return cls.from_order_std(stds)

    def is_zero(self):
        return self.mode == NOISE_FREE


def perturb_values(train, noise, seed):
    """Seeded draw of additive observation noise; returns a new set."""
    if noise.is_zero():
        return train
    rng = np.random.default_rng(seed)
    layout = natural_layout(train.spec, train.n)
    sigma = assemble_noise_diagonal(train, noise, layout) ** 0.5
    noisy = train.values.copy()
    draw = rng.normal(size=train.n_total) * sigma
    noisy[layout.point_index, layout.mindex] += draw
    return MeasurementSet(points=train.points.copy(), values=noisy, spec=train.spec)


def assemble_covariance(train, params, layout=None):
    """Dense covariance over all measurement slots in layout order.

    Entry (i, j) is the mixed kernel partial for the (point, multi-index)
    pairs the layout assigns to slots i and j.  The strict upper triangle is
    computed once and mirrored, so K == K.T holds exactly.
    """
    if layout is None:
        layout = natural_layout(train.spec, train.n)
    if layout.spec.dim != train.spec.dim or layout.spec.n_slots != train.spec.n_slots:
        raise ValueError("layout spec does not match the measurement set")
    pts = layout.slot_points(train.points)
    alphas = layout.slot_alphas()
    k = se_kernel_block_matrix(pts, alphas, pts, alphas, params)
    upper = np.triu(k)
    return upper + np.triu(k, 1).T


def cross_covariance(x_star, train_points, layout, params):
    """Covariance rows between plain function values at test points and all
    training slots (layout order)."""
    x_star = np.atleast_2d(np.asarray(x_star, dtype=float))
    if x_star.shape[1] != layout.spec.dim:
        raise ValueError(f"test points are {x_star.shape[1]}-dimensional, "
                         f"expected {layout.spec.dim}")
    zero = np.zeros((x_star.shape[0], layout.spec.dim), dtype=int)
    return se_kernel_block_matrix(x_star, zero,
                                  layout.slot_points(train_points),
                                  layout.slot_alphas(), params)


def assemble_noise_diagonal(train, noise, layout=None):
    """Diagonal of noise variances, one entry per layout slot."""
    if layout is None:
        layout = natural_layout(train.spec, train.n)
    if noise.is_zero():
        return np.zeros(layout.n_slots)
    if noise.diagonal_std is not None:
        if len(noise.diagonal_std) != layout.n_slots:
            raise ValueError("full noise diagonal has the wrong length")
        return noise.diagonal_std**2
    orders = train.spec.orders()
    if len(noise.per_order_std) < train.spec.max_order + 1:
        raise ValueError("noise model does not cover all derivative orders present")
    slot_orders = orders[layout.mindex]
    return noise.per_order_std[slot_orders] ** 2


def add_jitter(k, rel_jitter):
    """K + rel_jitter * trace(K)/n * I; the identity matrix scale keeps the
    perturbation relative to the problem's own magnitude."""
    if rel_jitter < 0:
        raise ValueError("rel_jitter must be >= 0")
    if rel_jitter == 0:
        return k
    n = k.shape[0]
    return k + (rel_jitter * np.trace(k) / n) * np.eye(n)


def condition_number(k):
    """lambda_max / lambda_min via a full symmetric eigendecomposition.

    A non-positive smallest eigenvalue is a diagnostic, not an exception:
    the function warns and returns +inf.
    """
    vals = np.linalg.eigvalsh(np.asarray(k))
    lo, hi = float(vals[0]), float(vals[-1])
    if lo <= 0:
        warnings.warn(f"matrix is not positive definite (lambda_min={lo:.3e})",
                      RuntimeWarning, stacklevel=2)
        return np.inf
    return hi / lo
