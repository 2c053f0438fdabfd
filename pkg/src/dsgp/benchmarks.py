"""Analytic benchmark functions with closed-form derivatives, dataset
generation, and the MSE harness."""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np

from .covariance import MeasurementSet
from .kernels import DerivativeSpec


def griewank(x):
    """1 + sum_i x_i^2/4000 - prod_i cos(x_i / sqrt(i)), i counted from 1."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    freq = 1.0 / np.sqrt(np.arange(1, x.shape[1] + 1))
    vals = 1.0 + np.sum(x * x, axis=1) / 4000.0 - np.prod(np.cos(x * freq), axis=1)
    return vals if vals.size > 1 else float(vals[0])


def griewank_derivative(x, alpha):
    """Mixed partial of the Griewank function at x.

    The function is a quadratic plus a separable cosine product, so the
    partial splits into an explicit quadratic term and a product of shifted
    cosines: d^n/dx^n cos(a x) = a^n cos(a x + n pi/2).
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=int)
    p = x.shape[1]
    order = int(alpha.sum())
    if order == 0:
        out = griewank(x)
        return out if np.size(out) > 1 else float(out)
    freq = 1.0 / np.sqrt(np.arange(1, p + 1))
    quad = np.zeros(x.shape[0])
    nz = np.nonzero(alpha)[0]
    if len(nz) == 1:
        d = nz[0]
        if alpha[d] == 1:
            quad = x[:, d] / 2000.0
        elif alpha[d] == 2:
            quad = np.full(x.shape[0], 1.0 / 2000.0)
    prod = np.ones(x.shape[0])
    for d in range(p):
        prod *= freq[d] ** alpha[d] * np.cos(x[:, d] * freq[d] + alpha[d] * np.pi / 2.0)
    out = quad - prod
    return out if out.size > 1 else float(out[0])


# 3-D Rosenbrock sum_{i=1,2} [100 (x_{i+1} - x_i^2)^2 + (1 - x_i)^2],
# expanded into monomials (coefficient, exponent triple).
_ROSENBROCK_TERMS = (
    (100.0, (0, 2, 0)), (-200.0, (2, 1, 0)), (100.0, (4, 0, 0)),
    (1.0, (0, 0, 0)), (-2.0, (1, 0, 0)), (1.0, (2, 0, 0)),
    (100.0, (0, 0, 2)), (-200.0, (0, 2, 1)), (100.0, (0, 4, 0)),
    (1.0, (0, 0, 0)), (-2.0, (0, 1, 0)), (1.0, (0, 2, 0)),
)


def rosenbrock(x):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != 3:
        raise ValueError("this Rosenbrock variant is 3-dimensional")
    out = np.zeros(x.shape[0])
    for coeff, expo in _ROSENBROCK_TERMS:
        out += coeff * np.prod(x ** np.array(expo), axis=1)
    return out if out.size > 1 else float(out[0])


def rosenbrock_derivative(x, alpha):
    """Exact monomial-by-monomial differentiation; every partial of order
    five or more vanishes (the polynomial is quartic)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    alpha = np.asarray(alpha, dtype=int)
    out = np.zeros(x.shape[0])
    for coeff, expo in _ROSENBROCK_TERMS:
        expo = np.array(expo)
        if np.any(alpha > expo):
            continue
        fac = np.prod([factorial(e) // factorial(e - a) for e, a in zip(expo, alpha)])
        out += coeff * fac * np.prod(x ** (expo - alpha), axis=1)
    return out if out.size > 1 else float(out[0])


@dataclass
class BenchmarkFunction:
    name: str
    dim: int
    lo: float
    hi: float
    f: callable
    deriv: callable


BENCHMARKS = {
    "griewank-1d": BenchmarkFunction("griewank-1d", 1, -np.pi, np.pi,
                                     griewank, griewank_derivative),
    "griewank-2d": BenchmarkFunction("griewank-2d", 2, -np.pi, np.pi,
                                     griewank, griewank_derivative),
    "griewank-3d": BenchmarkFunction("griewank-3d", 3, -np.pi, np.pi,
                                     griewank, griewank_derivative),
    "rosenbrock-3d": BenchmarkFunction("rosenbrock-3d", 3, -5.0, 10.0,
                                       rosenbrock, rosenbrock_derivative),
}


def _grid_points(fn, n):
    if fn.dim == 1:
        return np.linspace(fn.lo, fn.hi, n)[:, None]
    per_axis = round(n ** (1.0 / fn.dim))
    if per_axis**fn.dim != n:
        kind = "square" if fn.dim == 2 else "cube"
        raise ValueError(f"n={n} is not a perfect {kind} for a {fn.dim}-D grid")
    axes = [np.linspace(fn.lo, fn.hi, per_axis)] * fn.dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def attach_derivatives(fn, points, d):
    """Tabulate f and all its partials up to order d at the given points."""
    spec = DerivativeSpec(dim=fn.dim, max_order=d)
    values = np.empty((len(points), spec.n_slots))
    for k, alpha in enumerate(spec.layout):
        values[:, k] = fn.deriv(points, alpha)
    return MeasurementSet(points=points, values=values, spec=spec)


def make_dataset(fn, sampling, n, d, seed=0):
    """Training sets are equi-spaced grids; test sets are seeded uniform
    draws inside the same box."""
    if isinstance(fn, str):
        fn = BENCHMARKS[fn]
    if sampling == "equispaced":
        points = _grid_points(fn, n)
    elif sampling == "uniform-random":
        rng = np.random.default_rng(seed)
        points = rng.uniform(fn.lo, fn.hi, size=(n, fn.dim))
    else:
        raise ValueError(f"unknown sampling mode: {sampling}")
    return attach_derivatives(fn, points, d)


def test_points(fn, m=1000, seed=1234):
    """Evaluation set: function values only (no derivatives)."""
    if isinstance(fn, str):
        fn = BENCHMARKS[fn]
    rng = np.random.default_rng(seed)
    x = rng.uniform(fn.lo, fn.hi, size=(m, fn.dim))
    return x, np.atleast_1d(fn.f(x))


def mse(predictions, truths):
    predictions = np.asarray(predictions, dtype=float)
    truths = np.asarray(truths, dtype=float)
    if predictions.shape != truths.shape or predictions.size == 0:
        raise ValueError("predictions and truths must be equal-length and non-empty")
    return float(np.mean((predictions - truths) ** 2))
