"""Streaming model maintenance: fixed/dynamic supernode partitions, two
point-insertion approaches, distance-percentile outlier detection, and the
fast-update / retrain control loop.

A deployed model keeps the head of the ordering (and every factor column it
owns) frozen between retrains; stream points enter through the dynamic tail,
so an update refactors only the touched supernode's columns.  The control
loop accepts an update only when it improves the held-out error, counts
rejected and diverging candidates, and escalates to a full retrain (with a
widening sparsity radius) when any retraining criterion fires.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy.spatial.distance import cdist

from .covariance import MeasurementSet, cross_covariance
from .exact import default_grid
from .kernels import KernelParams
from .ordering import (Ordering, Supernode, SupernodeSet, SparsityPattern,
                       aggregate_supernodes, build_sparsity_set,
                       expand_supernodes_with_derivatives, extend_pointwise_1,
                       mmd_order)
from scipy.linalg import cholesky, solve_triangular
from .sparse import (CovarianceAccessor, FactorizationError, SparseFactor,
                     _columns_to_csc, _factor_columns, sparsity_ratio)

APPROACH_MERGED = "su1"
APPROACH_GEOMETRIC = "su2"


@dataclass
class RetrainConfig:
    eta_out: float = 95.0          # percentile for the k-NN outlier threshold
    knn_k: int = 3
    eta_budget: int = 10           # tolerated rejected updates before retrain
    eta_div_th: int = 3            # tolerated consecutive divergences
    sparsity_lower_bound: float = 0.8   # density ratio that stops rho escalation
    rho_step: float = 1.0

    def __post_init__(self):
        if not 0 < self.eta_out < 100:
            raise ValueError("eta_out is a percentile in (0, 100)")
        if self.knn_k < 1 or self.eta_budget < 0 or self.eta_div_th < 0:
            raise ValueError("counters and k must be non-negative (k >= 1)")
        if not 0 < self.sparsity_lower_bound <= 1 or self.rho_step <= 0:
            raise ValueError("bad escalation parameters")


@dataclass
class DecisionRecord:
    step: int
    branch: str
    l_cand: float
    l_best: float
    eta_unused: int
    eta_div: int
    rho: float
    sparsity_ratio: float
    wall_ms: float
    refactored_columns: int = 0

    def as_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def split_fixed_dynamic(ordering, fraction=0.2):
    """Tail split of the ordering: the last ceil(fraction*N) points (the
    smallest length scales) form the dynamic set."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n = ordering.n
    m = math.ceil(fraction * n)
    return ordering.perm[: n - m].copy(), ordering.perm[n - m:].copy()


def is_outlier(x_new, existing_points, config):
    """k-NN distance of the candidate against the percentile of the k-NN
    distances within the existing set."""
    pts = np.atleast_2d(np.asarray(existing_points, dtype=float))
    if len(pts) <= config.knn_k:
        raise ValueError(f"need more than k={config.knn_k} existing points")
    dists = cdist(pts, pts)
    np.fill_diagonal(dists, np.inf)
    d_k = np.sort(dists, axis=1)[:, config.knn_k - 1]
    tau = np.percentile(d_k, config.eta_out)
    d_new = np.sort(np.linalg.norm(pts - np.asarray(x_new, dtype=float), axis=1))
    return bool(d_new[config.knn_k - 1] > tau)


@dataclass
class DynamicModel:
    """Deployed sparse GP plus everything the streaming loop mutates."""

    points: np.ndarray
    values: np.ndarray
    spec: object
    params: KernelParams
    rho: float
    lam: float
    approach: str
    config: RetrainConfig
    test_x: np.ndarray
    test_f: np.ndarray
    grid: np.ndarray
    fraction: float
    n_fix: int
    ordering: Ordering
    pattern: SparsityPattern
    supernodes: SupernodeSet       # point-level; dynamic ones after n_fix
    factor_cols: list              # slot-level (rows, values) per column
    weights: np.ndarray
    l_best: float
    eta_unused: int = 0
    eta_div: int = 0
    pending_points: list = field(default_factory=list)
    pending_values: list = field(default_factory=list)
    history: list = field(default_factory=list)
    step: int = 0
    degraded: bool = False

    # -- assembled views -------------------------------------------------
    @property
    def n(self):
        return len(self.points)

    @property
    def n_total(self):
        return self.n * self.spec.n_slots

    def train_set(self):
        return MeasurementSet(points=self.points, values=self.values, spec=self.spec)

    def layout(self):
        return extend_pointwise_1(self.ordering, self.spec)

    def factor(self):
        return SparseFactor(matrix=_columns_to_csc(self.factor_cols, self.n_total),
                            scheme="pointwise-1", rho=self.rho)

    def sparsity_ratio(self):
        return sparsity_ratio(self.factor())

    def predict(self, x_star):
        x_star = np.asarray(x_star, dtype=float)
        single = x_star.ndim == 1
        rows = cross_covariance(x_star, self.points, self.layout(), self.params)
        mean = rows @ self.weights
        return float(mean[0]) if single else mean

    def test_mse(self):
        return float(np.mean((self.predict(self.test_x) - self.test_f) ** 2))

    def dynamic_node_ids(self):
        return [k for k, node in enumerate(self.supernodes.nodes)
                if node.columns[0] >= self.n_fix]


JITTER_REL = 1e-10


def _accessor(points, ordering, spec, params):
    layout = extend_pointwise_1(ordering, spec)
    return CovarianceAccessor.from_layout(points, layout, params,
                                          jitter_rel=JITTER_REL)


def _solve_weights(factor_cols, layout, values):
    n_total = len(factor_cols)
    u = _columns_to_csc(factor_cols, n_total)
    y = layout.values_vector(values)
    return u @ (u.T @ y)


def deploy(train, test_xy, rho, params=None, lam=1.5, approach=APPROACH_MERGED,
           config=None, fraction=0.2, grid=None):
    """Fit and deploy a streaming model.

    When ``params`` is omitted the length scale is grid-optimized against the
    held-out test set using the sparse model itself.
    """
    config = config or RetrainConfig()
    grid = default_grid() if grid is None else np.asarray(grid, dtype=float)
    test_x = np.atleast_2d(np.asarray(test_xy[0], dtype=float))
    test_f = np.asarray(test_xy[1], dtype=float)
    if params is None:
        params, _ = _optimize_delta(train, (test_x, test_f), rho, lam, grid)
    model = _build(train.points, train.values, train.spec, params, rho, lam,
                   approach, config, (test_x, test_f), grid, fraction)
    return model


def _build(points, values, spec, params, rho, lam, approach, config, test_xy,
           grid, fraction):
    ordering = mmd_order(points)
    n = len(points)
    n_fix = n - math.ceil(fraction * n)
    pattern = build_sparsity_set(ordering, points, rho)
    supernodes = aggregate_supernodes(pattern, ordering, points, lam, break_at=n_fix)
    if approach == APPROACH_MERGED:
        supernodes = _merge_dynamic(supernodes, pattern, n_fix)
    elif approach != APPROACH_GEOMETRIC:
        raise ValueError(f"unknown update approach: {approach}")
    accessor = _accessor(points, ordering, spec, params)
    slot_sn = expand_supernodes_with_derivatives(supernodes, spec, "pointwise-1")
    factor_cols = _factor_columns(accessor, slot_sn)
    layout = extend_pointwise_1(ordering, spec)
    weights = _solve_weights(factor_cols, layout, values)
    model = DynamicModel(points=np.array(points, dtype=float),
                         values=np.array(values, dtype=float), spec=spec,
                         params=params, rho=rho, lam=lam, approach=approach,
                         config=config, test_x=test_xy[0], test_f=test_xy[1],
                         grid=grid, fraction=fraction, n_fix=n_fix,
                         ordering=ordering, pattern=pattern,
                         supernodes=supernodes, factor_cols=factor_cols,
                         weights=weights, l_best=np.nan)
    model.l_best = model.test_mse()
    return model


def _merge_dynamic(supernodes, pattern, n_fix):
    """All-dynamic supernodes collapse into a single one; the fixed ones are
    untouched."""
    fixed = [node for node in supernodes.nodes if node.columns[0] < n_fix]
    dyn = [node for node in supernodes.nodes if node.columns[0] >= n_fix]
    if not dyn:
        return supernodes
    cols = np.sort(np.concatenate([node.columns for node in dyn]))
    rows = np.unique(np.concatenate([node.rows for node in dyn]))
    merged = Supernode(columns=cols, rows=rows)
    return SupernodeSet(nodes=fixed + [merged], lam=supernodes.lam,
                        rho=supernodes.rho)


def su1_build(model):
    """Merge every dynamic supernode of a deployed model into one and
    refactor just those columns."""
    merged = _merge_dynamic(model.supernodes, model.pattern, model.n_fix)
    if merged is model.supernodes:
        return model
    out = replace(model, supernodes=merged, approach=APPROACH_MERGED,
                  factor_cols=list(model.factor_cols), history=list(model.history))
    _refactor_nodes(out, [len(merged.nodes) - 1])
    out.weights = _solve_weights(out.factor_cols, out.layout(), out.values)
    return out


def _refactor_nodes(model, node_ids):
    """Recompute the slot-level factor columns owned by the given point-level
    supernodes; every other column is reused untouched."""
    accessor = _accessor(model.points, model.ordering, model.spec, model.params)
    subset = SupernodeSet(nodes=[model.supernodes.nodes[k] for k in node_ids],
                          lam=model.supernodes.lam, rho=model.supernodes.rho)
    slot_sn = expand_supernodes_with_derivatives(subset, model.spec, "pointwise-1")
    z = model.spec.n_slots
    touched = 0
    for node in slot_sn.nodes:
        rows = node.rows
        block = accessor.submatrix(rows, rows)
        try:
            low = cholesky(block, lower=True)
        except np.linalg.LinAlgError as err:
            raise FactorizationError(node_ids, str(err))
        for j in node.columns:
            m = int(np.searchsorted(rows, j)) + 1
            e = np.zeros(m)
            e[-1] = 1.0
            vals = solve_triangular(low[:m, :m], e, trans="T", lower=True)
            model.factor_cols[int(j)] = (rows[:m], vals)
            touched += 1
    return touched // z


def _append_measurement(model, point, values_row):
    point = np.asarray(point, dtype=float).reshape(1, -1)
    if np.any(np.all(model.points == point, axis=1)):
        raise ValueError("duplicate of an existing training point")
    points = np.vstack([model.points, point])
    values = np.vstack([model.values, np.asarray(values_row, dtype=float)])
    return points, values


def su1_add_point(model, point, values_row):
    """Insert a point through the merged dynamic supernode.

    The dynamic tail is reordered by max-min distance (continuing the global
    greedy against the frozen fixed head), its pattern columns are rebuilt,
    and only the merged supernode's columns are refactored.
    """
    points, values = _append_measurement(model, point, values_row)
    n_new = len(points)
    n_fix = model.n_fix
    # Reorder the dynamic tail greedily, conditioning on everything placed.
    dyn_raw = list(model.ordering.perm[n_fix:]) + [n_new - 1]
    perm = list(model.ordering.perm[:n_fix])
    scales = list(model.ordering.scales[:n_fix])
    remaining = list(dyn_raw)
    while remaining:
        placed = points[perm]
        dists = [np.min(np.linalg.norm(placed - points[r], axis=1)) for r in remaining]
        k = int(np.argmax(dists))
        perm.append(remaining.pop(k))
        scales.append(float(dists[k]))
    ordering = Ordering(perm=np.array(perm, dtype=int),
                        scales=np.array(scales))
    # Fixed pattern columns only involve positions < n_fix, so they carry over.
    coords = points[ordering.perm]
    dist = cdist(coords, coords)
    columns = [model.pattern.columns[j] for j in range(n_fix)]
    for j in range(n_fix, n_new):
        rows = np.nonzero(dist[: j + 1, j] <= model.rho * scales[j])[0]
        if len(rows) == 0 or rows[-1] != j:
            rows = np.unique(np.append(rows, j))
        columns.append(rows.astype(int))
    pattern = SparsityPattern(columns=columns, rho=model.rho)
    dyn_cols = np.arange(n_fix, n_new)
    rows = np.unique(np.concatenate([columns[c] for c in dyn_cols]))
    fixed_nodes = [node for node in model.supernodes.nodes
                   if node.columns[0] < n_fix]
    supernodes = SupernodeSet(nodes=fixed_nodes + [Supernode(columns=dyn_cols,
                                                             rows=rows)],
                              lam=model.lam, rho=model.rho)
    z = model.spec.n_slots
    cand = replace(model, points=points, values=values, ordering=ordering,
                   pattern=pattern, supernodes=supernodes,
                   factor_cols=list(model.factor_cols[: n_fix * z])
                   + [None] * ((n_new - n_fix) * z),
                   history=list(model.history))
    refactored = _refactor_nodes(cand, [len(supernodes.nodes) - 1])
    cand.weights = _solve_weights(cand.factor_cols, cand.layout(), cand.values)
    return cand, refactored


def su2_add_point(model, point, values_row):
    """Insert a point into the geometrically nearest dynamic supernode whose
    radius (rho times the member point's scale) covers it; create a fresh
    single-column supernode when none does."""
    points, values = _append_measurement(model, point, values_row)
    n_new = len(points)
    pos_new = n_new - 1
    coords_old = model.points[model.ordering.perm]
    x = np.asarray(point, dtype=float)
    dyn_pos = np.arange(model.n_fix, model.n)
    d = np.linalg.norm(coords_old[dyn_pos] - x, axis=1)
    radii = model.rho * model.ordering.scales[dyn_pos]
    inside = np.nonzero(d <= radii)[0]
    ordering = Ordering(perm=np.append(model.ordering.perm, pos_new),
                        scales=np.append(model.ordering.scales,
                                         float(np.min(np.linalg.norm(model.points - x, axis=1)))))
    coords = points[ordering.perm]
    new_rows = np.nonzero(np.linalg.norm(coords - x, axis=1)
                          <= model.rho * ordering.scales[pos_new])[0]
    new_rows = np.unique(np.append(new_rows[new_rows <= pos_new], pos_new))
    pattern = SparsityPattern(columns=list(model.pattern.columns) + [new_rows.astype(int)],
                              rho=model.rho)
    nodes = [Supernode(columns=node.columns.copy(), rows=node.rows.copy())
             for node in model.supernodes.nodes]
    if len(inside):
        owner_pos = dyn_pos[inside[np.argmin(d[inside])]]
        target = next(k for k, node in enumerate(nodes) if owner_pos in node.columns)
        nodes[target] = Supernode(
            columns=np.sort(np.append(nodes[target].columns, pos_new)),
            rows=np.unique(np.concatenate([nodes[target].rows, new_rows])))
        created = False
    else:
        nodes.append(Supernode(columns=np.array([pos_new]), rows=new_rows))
        target = len(nodes) - 1
        created = True
    supernodes = SupernodeSet(nodes=nodes, lam=model.lam, rho=model.rho)
    z = model.spec.n_slots
    cand = replace(model, points=points, values=values, ordering=ordering,
                   pattern=pattern, supernodes=supernodes,
                   factor_cols=list(model.factor_cols) + [None] * z,
                   history=list(model.history))
    refactored = _refactor_nodes(cand, [target])
    cand.weights = _solve_weights(cand.factor_cols, cand.layout(), cand.values)
    return cand, refactored, created


def _optimize_delta(train, test_xy, rho, lam, grid, amplitude=1.0):
    """Grid-search the length scale by sparse-model held-out error; the
    pattern and supernodes are delta-independent and built once."""
    from .sparse import kl_minimize_factor
    ordering = mmd_order(train.points)
    pattern = build_sparsity_set(ordering, train.points, rho)
    supernodes = aggregate_supernodes(pattern, ordering, train.points, lam)
    layout = extend_pointwise_1(ordering, train.spec)
    slot_sn = expand_supernodes_with_derivatives(supernodes, train.spec, "pointwise-1")
    y = layout.values_vector(train.values)
    test_x, test_f = test_xy
    best = None
    attempted = []
    for delta in grid:
        params = KernelParams(length_scale=float(delta), amplitude=amplitude)
        accessor = CovarianceAccessor.from_layout(train.points, layout, params,
                                                  jitter_rel=JITTER_REL)
        try:
            factor = kl_minimize_factor(accessor, slot_sn)
        except (FactorizationError, np.linalg.LinAlgError):
            attempted.append(float(delta))
            continue
        weights = factor.matrix @ (factor.matrix.T @ y)
        pred = cross_covariance(test_x, train.points, layout, params) @ weights
        err = float(np.mean((pred - test_f) ** 2))
        if best is None or err <= best[0]:
            best = (err, params)
    if best is None:
        raise FactorizationError(-1, "no length scale on the grid factorized; "
                                     f"attempted: {attempted}")
    return best[1], best[0]


def full_retrain(points, values, spec, test_xy, rho, lam, approach, config,
                 l_best, grid, fraction):
    """Rebuild from scratch (ordering, pattern, supernodes, factor, length
    scale); escalate rho until the result beats l_best or the factor density
    crosses the escalation bound.  Returns (model, degraded)."""
    train = MeasurementSet(points=points, values=values, spec=spec)
    cur_rho = rho
    best_model = None
    while True:
        params, _ = _optimize_delta(train, test_xy, cur_rho, lam, grid)
        model = _build(points, values, spec, params, cur_rho, lam, approach,
                       config, test_xy, grid, fraction)
        if best_model is None or model.l_best < best_model.l_best:
            best_model = model
        if model.l_best < l_best:
            return model, False
        if model.sparsity_ratio() > config.sparsity_lower_bound:
            best_model.degraded = True
            return best_model, True
        cur_rho += config.rho_step


def fast_update_step(model, point, values_row):
    """One step of the update policy.

    Retrain when the point is an outlier, the unused budget is exhausted, or
    the divergence streak is too long; otherwise build a dynamic-update
    candidate and deploy it only if it improves the held-out error.
    """
    config = model.config
    step = model.step + 1
    t0 = time.perf_counter()

    def finish(m, branch, l_cand, refactored=0):
        wall = (time.perf_counter() - t0) * 1000.0
        rec = DecisionRecord(step=step, branch=branch, l_cand=l_cand,
                             l_best=m.l_best, eta_unused=m.eta_unused,
                             eta_div=m.eta_div, rho=m.rho,
                             sparsity_ratio=m.sparsity_ratio(),
                             wall_ms=wall, refactored_columns=refactored)
        m.history.append(rec)
        m.step = step
        return m, rec

    retrain_reason = None
    if is_outlier(point, model.points, config):
        retrain_reason = "outlier"
    elif model.eta_unused > config.eta_budget:
        retrain_reason = "budget"
    elif model.eta_div > config.eta_div_th:
        retrain_reason = "divergence"

    candidate = None
    if retrain_reason is None:
        try:
            if model.approach == APPROACH_MERGED:
                candidate, refactored = su1_add_point(model, point, values_row)
            else:
                candidate, refactored, _ = su2_add_point(model, point, values_row)
        except FactorizationError:
            retrain_reason = "factorization-failure"

    if retrain_reason is not None:
        pts = np.vstack([model.points]
                        + [np.atleast_2d(p) for p in model.pending_points]
                        + [np.atleast_2d(point)])
        vals = np.vstack([model.values]
                         + [np.atleast_2d(v) for v in model.pending_values]
                         + [np.atleast_2d(values_row)])
        new_model, degraded = full_retrain(pts, vals, model.spec,
                                           (model.test_x, model.test_f),
                                           model.rho, model.lam, model.approach,
                                           config, model.l_best, model.grid,
                                           model.fraction)
        new_model.history = list(model.history)
        branch = f"retrain-{retrain_reason}" + ("-degraded" if degraded else "")
        return finish(new_model, branch, new_model.l_best)

    l_cand = candidate.test_mse()
    if l_cand < model.l_best:
        candidate.l_best = l_cand
        candidate.eta_unused = model.eta_unused
        candidate.eta_div = model.eta_div
        candidate.pending_points = list(model.pending_points)
        candidate.pending_values = list(model.pending_values)
        return finish(candidate, "accepted", l_cand, refactored)

    updated = replace(model, eta_unused=model.eta_unused + 1,
                      eta_div=(model.eta_div + 1 if l_cand / model.l_best > 1.0
                               else 0),
                      pending_points=model.pending_points + [np.asarray(point, dtype=float)],
                      pending_values=model.pending_values + [np.asarray(values_row, dtype=float)],
                      history=list(model.history))
    return finish(updated, "rejected", l_cand, refactored)


def run_stream(model, stream):
    """Feed a whole measurement set through the update policy."""
    records = []
    for i in range(stream.n):
        model, rec = fast_update_step(model, stream.points[i], stream.values[i])
        records.append(rec)
    return model, records
