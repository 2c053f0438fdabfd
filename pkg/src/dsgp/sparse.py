"""Column-sparse factors of the precision matrix by KL minimization, the two
noisy-data decompositions, and the solve/predict paths built on them.

The factor U is upper triangular in ordered slot coordinates with
UU^T ~= K^-1.  Per column j with permitted rows s_j, the KL-optimal values
are (K[s_j, s_j])^-1 e_j normalized by the square root of its j-th entry;
within a supernode one dense Cholesky of the shared row block serves every
member column via a triangular solve on a leading sub-block.

Covariance entries are produced lazily per supernode; the full K_der is
never materialized on this path.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cholesky, solve_triangular

from .covariance import (MeasurementSet, NoiseModel, assemble_noise_diagonal,
                         cross_covariance)
from .kernels import KernelParams, se_kernel_block_matrix
from .ordering import (Layout, aggregate_supernodes, build_sparsity_set,
                       expand_supernodes_with_derivatives, extend_pointwise_1,
                       mmd_order)


class FactorizationError(RuntimeError):
    """Singular supernode block; carries the supernode id for diagnostics."""

    def __init__(self, supernode, message=""):
        self.supernode = supernode
        super().__init__(message or f"singular block in supernode {supernode}")


# (2a-1)!! for a = 0..4: the 1-D diagonal factors of the derivative blocks.
_ODD_DOUBLE_FACTORIAL = np.array([1.0, 1.0, 3.0, 15.0, 105.0])


class CovarianceAccessor:
    """On-demand covariance entries for an ordered slot layout.

    ``jitter_rel`` inflates each diagonal entry in proportion to its own
    closed-form magnitude; derivative blocks carry diagonals of scale
    delta^-2k, so a shared absolute shift would over-regularize the
    function-value block (see fit_exact for the same convention).
    """

    def __init__(self, slot_points, slot_alphas, params, jitter_rel=0.0):
        self.slot_points = np.atleast_2d(np.asarray(slot_points, dtype=float))
        self.slot_alphas = np.atleast_2d(np.asarray(slot_alphas, dtype=int))
        self.params = params
        self.jitter_rel = float(jitter_rel)
        self.n = self.slot_points.shape[0]
        self._diag_raw = self._closed_form_diagonal()

    @classmethod
    def from_layout(cls, points, layout, params, jitter_rel=0.0):
        return cls(layout.slot_points(points), layout.slot_alphas(), params,
                   jitter_rel=jitter_rel)

    def _closed_form_diagonal(self):
        """prod_d delta^(-2 a_d) (2 a_d - 1)!! per slot."""
        delta = self.params.length_scale
        vals = np.full(self.n, self.params.amplitude)
        for dim in range(self.slot_alphas.shape[1]):
            a = self.slot_alphas[:, dim]
            vals = vals * delta ** (-2.0 * a) * _ODD_DOUBLE_FACTORIAL[a]
        return vals

    def diagonal(self):
        return self._diag_raw * (1.0 + self.jitter_rel)

    def submatrix(self, rows, cols):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        block = se_kernel_block_matrix(self.slot_points[rows], self.slot_alphas[rows],
                                       self.slot_points[cols], self.slot_alphas[cols],
                                       self.params)
        if self.jitter_rel:
            block = block + (rows[:, None] == cols[None, :]) \
                * (self.jitter_rel * self._diag_raw[rows])[:, None]
        return block

    def matrix(self):
        return self.submatrix(np.arange(self.n), np.arange(self.n))


class WhitenedAccessor:
    """R^-1/2 K R^-1/2 + I for a diagonal (or block-diagonal) noise matrix."""

    def __init__(self, base, noise):
        self.base = base
        self.noise = noise
        self.n = base.n

    def submatrix(self, rows, cols):
        rows = np.asarray(rows, dtype=int)
        cols = np.asarray(cols, dtype=int)
        block = self.noise.whiten_submatrix(self.base, rows, cols)
        return block + 1.0 * (rows[:, None] == cols[None, :])

    def matrix(self):
        return self.submatrix(np.arange(self.n), np.arange(self.n))


class DiagonalNoise:
    """Strictly positive noise variances on the diagonal."""

    def __init__(self, variances):
        self.var = np.asarray(variances, dtype=float)
        if np.any(self.var <= 0):
            raise ValueError("noise variances must be strictly positive here; "
                             "use the noise-free path for exact data")
        self.inv_sqrt = 1.0 / np.sqrt(self.var)

    @property
    def n(self):
        return len(self.var)

    def whiten_submatrix(self, accessor, rows, cols):
        return self.inv_sqrt[rows, None] * accessor.submatrix(rows, cols) \
            * self.inv_sqrt[None, cols]

    def apply_inv_sqrt(self, vec):
        return self.inv_sqrt * vec

    def dense(self):
        return np.diag(self.var)


class BlockDiagonalNoise:
    """Noise with per-point coupling: square PD blocks on the diagonal.

    blocks: list of (index_array, matrix) covering 0..n-1 exactly once.
    """

    def __init__(self, blocks, n):
        self.blocks = [(np.asarray(idx, dtype=int), np.asarray(mat, dtype=float))
                       for idx, mat in blocks]
        covered = np.sort(np.concatenate([idx for idx, _ in self.blocks]))
        if not np.array_equal(covered, np.arange(n)):
            raise ValueError("noise blocks must partition the slot indices")
        self._n = n
        self._inv_sqrt = np.zeros((n, n))
        for idx, mat in self.blocks:
            vals, vecs = np.linalg.eigh(mat)
            if np.any(vals <= 0):
                raise ValueError("noise block is not positive definite")
            inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
            self._inv_sqrt[np.ix_(idx, idx)] = inv_sqrt

    @property
    def n(self):
        return self._n

    def whiten_submatrix(self, accessor, rows, cols):
        # Whitening mixes slots within a block, so pull the touched blocks in.
        need = np.unique(np.concatenate([rows, cols]))
        full = np.unique(np.concatenate(
            [idx for idx, _ in self.blocks if np.intersect1d(idx, need).size]))
        k = accessor.submatrix(full, full)
        w = self._inv_sqrt[np.ix_(full, full)]
        wkw = w @ k @ w
        pos = {int(s): i for i, s in enumerate(full)}
        ri = np.array([pos[int(r)] for r in rows])
        ci = np.array([pos[int(c)] for c in cols])
        return wkw[np.ix_(ri, ci)]

    def apply_inv_sqrt(self, vec):
        return self._inv_sqrt @ vec

    def dense(self):
        out = np.zeros((self._n, self._n))
        for idx, mat in self.blocks:
            out[np.ix_(idx, idx)] = mat
        return out


@dataclass
class SparseFactor:
    """Upper-triangular factor stored column-compressed, with the sparsity
    parameters that produced it."""

    matrix: sp.csc_matrix
    scheme: str = ""
    rho: float = float("nan")
    refactored_columns: int = 0

    @property
    def n(self):
        return self.matrix.shape[0]

    @property
    def nnz(self):
        return self.matrix.nnz

    def column(self, j):
        m = self.matrix
        lo, hi = m.indptr[j], m.indptr[j + 1]
        return m.indices[lo:hi], m.data[lo:hi]


def _factor_columns(accessor, supernodes):
    """Per-column (rows, values) of the KL-optimal factor."""
    n = accessor.n
    cols = [None] * n
    for sn_id, node in enumerate(supernodes.nodes):
        rows = np.asarray(node.rows, dtype=int)
        block = accessor.submatrix(rows, rows)
        try:
            low = cholesky(block, lower=True)
        except np.linalg.LinAlgError as err:
            raise FactorizationError(sn_id, f"supernode {sn_id}: {err}")
        for j in node.columns:
            m = int(np.searchsorted(rows, j)) + 1
            if rows[m - 1] != j:
                raise ValueError(f"column {j} missing from its supernode rows")
            e = np.zeros(m)
            e[-1] = 1.0
            vals = solve_triangular(low[:m, :m], e, trans="T", lower=True)
            cols[int(j)] = (rows[:m], vals)
    missing = [j for j, c in enumerate(cols) if c is None]
    if missing:
        raise ValueError(f"columns without a supernode owner: {missing[:5]}")
    return cols


def _columns_to_csc(cols, n):
    indptr = np.zeros(n + 1, dtype=int)
    for j, (rows, _) in enumerate(cols):
        indptr[j + 1] = indptr[j] + len(rows)
    indices = np.concatenate([rows for rows, _ in cols])
    data = np.concatenate([vals for _, vals in cols])
    return sp.csc_matrix((data, indices, indptr), shape=(n, n))


def kl_minimize_factor(accessor, supernodes, scheme="", rho=float("nan")):
    """Sparse factor U with UU^T approximating the inverse of the accessor's
    matrix, KL-optimal on the supernode-permitted pattern."""
    cols = _factor_columns(accessor, supernodes)
    factor = SparseFactor(matrix=_columns_to_csc(cols, accessor.n),
                          scheme=scheme, rho=rho,
                          refactored_columns=accessor.n)
    if np.any(factor.matrix.diagonal() <= 0):
        raise FactorizationError(-1, "non-positive diagonal in factor")
    return factor


def kl_divergence_audit(k, factor):
    """Twice the Gaussian KL divergence between N(0, K) and N(0, (UU^T)^-1):
    trace(U^T K U) - logdet(U^T K U) - n."""
    u = factor.matrix.toarray()
    m = u.T @ np.asarray(k) @ u
    sign, logdet = np.linalg.slogdet(m)
    if sign <= 0:
        raise ValueError("U^T K U lost positive definiteness")
    return float(np.trace(m) - logdet - u.shape[0])


def solve_noise_free(factor, y):
    """weights = U (U^T y); the sparse stand-in for K^-1 y."""
    u = factor.matrix
    return u @ (u.T @ np.asarray(y, dtype=float))


def sparsity_ratio(factor):
    """nnz over the full upper-triangle count."""
    n = factor.n
    return factor.nnz / (n * (n + 1) / 2.0)


def _zero_fill_reverse_cholesky(m, columns):
    """Incomplete upper factorization with zero fill-in: G G^T ~= M with G
    upper triangular restricted to the given column pattern.

    Works from the last column toward the first, mirroring the usual
    incomplete Cholesky; updates touch pattern entries only.
    """
    m = np.array(m, dtype=float)
    n = m.shape[0]
    cols = [None] * n
    for j in range(n - 1, -1, -1):
        rows = np.asarray(columns[j], dtype=int)   # pattern rows <= j, j last
        pivot = m[j, j]
        if pivot <= 0:
            raise FactorizationError(j, f"incomplete factorization pivot {j} <= 0")
        vals = m[rows, j] / np.sqrt(pivot)
        cols[j] = (rows, vals)
        # Schur update of the leading block; entries outside the touched
        # pattern rows keep their values (zero fill-in).
        above = rows[:-1]
        if len(above):
            m[np.ix_(above, above)] -= np.outer(vals[:-1], vals[:-1])
    return _columns_to_csc(cols, n)


@dataclass
class CommutedNoiseFactor:
    """Noisy solve via the commuting-noise decomposition: a factor of the
    noise-free precision plus a zero-fill-in factor of K^-1 + R^-1.

    Valid for derivative-free data or a scalar noise diagonal, where K and R
    commute (exactly in the homoscedastic case)."""

    precision_factor: SparseFactor
    regularized_factor: sp.csc_matrix
    noise: DiagonalNoise

    def solve(self, b):
        t = self.precision_factor.matrix @ (self.precision_factor.matrix.T @ b)
        g = self.regularized_factor
        z = sp.linalg.spsolve_triangular(g.tocsr(), t, lower=False)
        s = sp.linalg.spsolve_triangular(g.T.tocsr(), z, lower=True)
        return s / self.noise.var


def factor_noisy_commuted(accessor, noise_diag, supernodes, scheme="",
                          rho=float("nan")):
    """Factor K + R through K^-1 ~= UU^T and an incomplete factor of
    K^-1 + R^-1 on the same pattern."""
    noise_diag = np.asarray(noise_diag, dtype=float)
    if np.any(noise_diag == 0):
        raise ValueError("zero noise entry: use the noise-free solve instead")
    orders = np.abs(accessor.slot_alphas).sum(axis=1)
    if orders.max() > 0 and not np.allclose(noise_diag, noise_diag[0]):
        raise ValueError(
            "commuting-noise decomposition supports derivative-free data or a "
            "scalar noise diagonal; use the whitened decomposition for "
            "per-order noise on derivative observations")
    noise = DiagonalNoise(noise_diag)
    u_k = kl_minimize_factor(accessor, supernodes, scheme=scheme, rho=rho)
    pattern_cols = [u_k.column(j)[0] for j in range(u_k.n)]
    dense_u = u_k.matrix.toarray()
    m = dense_u @ dense_u.T
    m[np.arange(u_k.n), np.arange(u_k.n)] += 1.0 / noise.var
    reg = _zero_fill_reverse_cholesky(m, pattern_cols)
    return CommutedNoiseFactor(precision_factor=u_k, regularized_factor=reg,
                               noise=noise)


@dataclass
class WhitenedNoiseFactor:
    """Noisy solve via whitening: factor (R^-1/2 K R^-1/2 + I) on the pattern
    and fold the noise scaling into the factor afterwards."""

    whitened_factor: SparseFactor
    noise: object

    def solve(self, b):
        u = self.whitened_factor.matrix
        tb = self.noise.apply_inv_sqrt(np.asarray(b, dtype=float))
        return self.noise.apply_inv_sqrt(u @ (u.T @ tb))

    def precision_dense(self):
        u = self.whitened_factor.matrix.toarray()
        w = u @ u.T
        n = len(u)
        eye = np.eye(n)
        cols = np.stack([self.noise.apply_inv_sqrt(eye[:, j]) for j in range(n)], axis=1)
        return cols @ w @ cols.T


def factor_noisy_whitened(accessor, noise, supernodes, scheme="",
                          rho=float("nan")):
    """Whiten, factor, unwhiten: handles any positive definite diagonal or
    block-diagonal noise, including per-order schedules on derivatives."""
    if isinstance(noise, (np.ndarray, list, tuple)):
        noise = DiagonalNoise(np.asarray(noise, dtype=float))
    whitened = WhitenedAccessor(accessor, noise)
    factor = kl_minimize_factor(whitened, supernodes, scheme=scheme, rho=rho)
    return WhitenedNoiseFactor(whitened_factor=factor, noise=noise)


@dataclass
class SparseGP:
    """A fitted sparse model: ordering, pattern, supernodes, factor, weights."""

    train: MeasurementSet
    params: KernelParams
    rho: float
    lam: float
    scheme: str
    ordering: object
    layout: Layout
    point_pattern: object
    point_supernodes: object
    supernodes: object
    factor: object          # SparseFactor or a noisy-factor wrapper
    weights: np.ndarray
    noise: NoiseModel = field(default=None)

    @classmethod
    def build(cls, train, params, rho, lam=1.5, scheme="pointwise-1",
              noise=None, jitter_rel=1e-10, split_at=None):
        if scheme != "pointwise-1":
            raise ValueError("model building currently targets the pointwise-1 "
                             "scheme; other layouts are exercised at the "
                             "factorization level")
        ordering = mmd_order(train.points)
        pattern = build_sparsity_set(ordering, train.points, rho)
        point_sn = aggregate_supernodes(pattern, ordering, train.points, lam,
                                        break_at=split_at)
        layout = extend_pointwise_1(ordering, train.spec)
        supernodes = expand_supernodes_with_derivatives(point_sn, train.spec, scheme)
        accessor = CovarianceAccessor.from_layout(train.points, layout, params,
                                                  jitter_rel=jitter_rel)
        y = layout.values_vector(train.values)
        if noise is None or noise.is_zero():
            factor = kl_minimize_factor(accessor, supernodes, scheme=scheme, rho=rho)
            weights = solve_noise_free(factor, y)
        else:
            diag = assemble_noise_diagonal(train, noise, layout)
            factor = factor_noisy_whitened(accessor, diag, supernodes,
                                           scheme=scheme, rho=rho)
            weights = factor.solve(y)
        return cls(train=train, params=params, rho=rho, lam=lam, scheme=scheme,
                   ordering=ordering, layout=layout, point_pattern=pattern,
                   point_supernodes=point_sn, supernodes=supernodes,
                   factor=factor, weights=weights, noise=noise)

    def predict(self, x_star):
        x_star = np.asarray(x_star, dtype=float)
        single = x_star.ndim == 1
        rows = cross_covariance(x_star, self.train.points, self.layout, self.params)
        mean = rows @ self.weights
        return float(mean[0]) if single else mean

    def sparsity_ratio(self):
        inner = self.factor if isinstance(self.factor, SparseFactor) \
            else self.factor.whitened_factor
        return sparsity_ratio(inner)
