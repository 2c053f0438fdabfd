"""Dense (exact) GP fit and prediction with derivative observations.

This is the ground-truth baseline every sparse path is checked against: one
Cholesky of the full covariance, solved coefficients, and closed-form
posterior mean/variance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .covariance import (MeasurementSet, NoiseModel, add_jitter,
                         assemble_covariance, assemble_noise_diagonal,
                         cross_covariance)
from .kernels import KernelParams
from .ordering import natural_layout

DEFAULT_REL_JITTER = 1e-10


class FitError(RuntimeError):
    """Cholesky breakdown, annotated with the offending pivot index."""

    def __init__(self, pivot, message=""):
        self.pivot = pivot
        super().__init__(message or f"factorization failed at pivot {pivot}")


@dataclass
class ExactGP:
    train: MeasurementSet
    params: KernelParams
    noise: NoiseModel
    layout: object
    rel_jitter: float
    chol: object
    weights: np.ndarray
    y: np.ndarray


def fit_exact(train, params, noise=None, layout=None, rel_jitter=DEFAULT_REL_JITTER,
              strict_interpolation=True):
    """Factor K_der (+ noise diagonal, + jitter) and solve for the weights.

    The jitter inflates each diagonal entry relative to its own magnitude.
    Derivative blocks carry diagonals of wildly different scale (delta^-2k),
    so a uniform trace-scaled shift would act as a huge nugget on the
    function-value block whenever delta < 1 and wreck small-magnitude
    targets; the per-entry form regularizes every block at its own scale.

    ``strict_interpolation`` enables an eigendecomposition fallback when the
    refined Cholesky solve cannot reproduce the training data (numerically
    singular covariance); hyperparameter search turns it off for speed.
    """
    if noise is None:
        noise = NoiseModel.noise_free()
    if layout is None:
        layout = natural_layout(train.spec, train.n)
    k0 = assemble_covariance(train, params, layout)
    k0 = k0 + np.diag(assemble_noise_diagonal(train, noise, layout))
    k = k0.copy()
    if rel_jitter:
        idx = np.arange(k.shape[0])
        k[idx, idx] *= (1.0 + rel_jitter)
    try:
        chol = cho_factor(k, lower=True)
    except np.linalg.LinAlgError as err:
        pivot = _failing_pivot(k)
        raise FitError(pivot, f"covariance factorization failed at pivot {pivot}: {err}")
    y = layout.values_vector(train.values)
    weights = cho_solve(chol, y)
    # Refine against the unjittered system with the jittered factor as the
    # preconditioner; this strips the jitter bias out of the weights.  Steps
    # are kept only while the residual actually shrinks, since the iteration
    # can diverge once the matrix is numerically singular.
    resid = y - k0 @ weights
    best = (float(np.linalg.norm(resid)), weights)
    for _ in range(3):
        weights = weights + cho_solve(chol, resid)
        resid = y - k0 @ weights
        norm = float(np.linalg.norm(resid))
        if norm >= best[0]:
            break
        best = (norm, weights)
    weights = best[1]
    if strict_interpolation:
        rel = np.max(np.abs(y - k0 @ weights) / (1.0 + np.abs(y)))
        if rel > 3e-9:
            vals, vecs = np.linalg.eigh(k0)
            keep = vals > max(vals[-1], 0.0) * 1e-15
            pseudo = vecs[:, keep] @ ((vecs[:, keep].T @ y) / vals[keep])
            if np.max(np.abs(y - k0 @ pseudo) / (1.0 + np.abs(y))) < rel:
                weights = pseudo
    return ExactGP(train=train, params=params, noise=noise, layout=layout,
                   rel_jitter=rel_jitter, chol=chol, weights=weights, y=y)


def _failing_pivot(k):
    # Re-run pivot by pivot to report where positive definiteness is lost.
    for m in range(1, k.shape[0] + 1):
        try:
            np.linalg.cholesky(k[:m, :m])
        except np.linalg.LinAlgError:
            return m - 1
    return k.shape[0] - 1


def predict_mean(model, x_star):
    """Posterior mean at one point or a batch of points."""
    x_star = np.asarray(x_star, dtype=float)
    single = x_star.ndim == 1
    rows = cross_covariance(x_star, model.train.points, model.layout, model.params)
    mean = rows @ model.weights
    return float(mean[0]) if single else mean


def predict_variance(model, x_star, return_clip=False):
    """Posterior variance, clipped at zero from below.

    The clip magnitude (how far below zero round-off pushed the raw value)
    is available via ``return_clip``.
    """
    x_star = np.asarray(x_star, dtype=float)
    single = x_star.ndim == 1
    rows = cross_covariance(x_star, model.train.points, model.layout, model.params)
    raw = model.params.amplitude - np.sum(rows * cho_solve(model.chol, rows.T).T, axis=1)
    clip = np.maximum(-raw, 0.0)
    var = np.maximum(raw, 0.0)
    if single:
        var, clip = float(var[0]), float(clip[0])
    return (var, clip) if return_clip else var


def default_grid(num=60, lo=0.001, hi=1000.0):
    """Logarithmic length-scale grid; deterministic and reproducible."""
    return np.logspace(np.log10(lo), np.log10(hi), num)


def optimize_length_scale(train, validation, grid=None, amplitude=1.0,
                          noise=None, rel_jitter=DEFAULT_REL_JITTER):
    """Grid-search the length scale against held-out function values.

    validation: (points, values) pair; only plain function values are used.
    Ties break toward the larger candidate.  Raises if every candidate fails
    to factorize, listing what was attempted.
    """
    x_val, f_val = validation
    x_val = np.atleast_2d(np.asarray(x_val, dtype=float))
    f_val = np.asarray(f_val, dtype=float)
    if len(f_val) == 0:
        raise ValueError("validation set must be non-empty")
    if grid is None:
        grid = default_grid()
    best = None
    attempted = []
    for delta in grid:
        params = KernelParams(length_scale=float(delta), amplitude=amplitude)
        try:
            model = fit_exact(train, params, noise=noise, rel_jitter=rel_jitter,
                              strict_interpolation=False)
        except (FitError, np.linalg.LinAlgError):
            attempted.append(float(delta))
            continue
        mse = float(np.mean((predict_mean(model, x_val) - f_val) ** 2))
        if best is None or mse <= best[0]:
            best = (mse, params)
    if best is None:
        raise FitError(-1, "no positive-definite candidate on the grid; "
                           f"attempted length scales: {attempted}")
    return best[1]
