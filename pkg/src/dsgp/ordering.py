"""Farthest-point (max-min distance) ordering, sparsity sets, supernode
aggregation, and the four schemes for slotting derivative measurements into
the ordered sequence.

All index sets below live in *ordered* coordinates: position q refers to the
q-th point (or measurement slot) of the permuted sequence, not to the raw
input row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import cdist

from .kernels import DerivativeSpec

SCHEMES = ("pointwise-1", "measurementwise-1", "pointwise-2", "measurementwise-2")


@dataclass
class Ordering:
    """Permutation of raw indices plus each point's selection distance.

    scales[0] is +inf by convention (the first point conditions on nothing);
    scales[1:] are non-increasing.
    """

    perm: np.ndarray
    scales: np.ndarray

    @property
    def n(self):
        return len(self.perm)


def mmd_order(points, first=None):
    """Greedy max-min distance ordering.

    Starts from the point nearest the centroid unless ``first`` overrides the
    seed index.  Each subsequent point maximizes its minimum distance to the
    already-ordered set; ties break toward the lowest raw index (argmax /
    argmin take the first occurrence, which is deterministic).
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    n = points.shape[0]
    if n < 1:
        raise ValueError("need at least one point")
    if len(np.unique(points, axis=0)) != n:
        raise ValueError("duplicate points are not allowed in the ordering")
    if first is None:
        centroid = points.mean(axis=0)
        first = int(np.argmin(np.sum((points - centroid) ** 2, axis=1)))
    perm = np.empty(n, dtype=int)
    scales = np.empty(n)
    perm[0] = first
    scales[0] = np.inf
    mindist = np.linalg.norm(points - points[first], axis=1)
    mindist[first] = -np.inf
    for q in range(1, n):
        nxt = int(np.argmax(mindist))
        perm[q] = nxt
        scales[q] = mindist[nxt]
        mindist = np.minimum(mindist, np.linalg.norm(points - points[nxt], axis=1))
        mindist[nxt] = -np.inf
    return Ordering(perm=perm, scales=scales)


@dataclass
class SparsityPattern:
    """Upper-triangular entry set: column j holds rows i <= j with
    dist(x_(i), x_(j)) <= rho * scale(j), always including the diagonal."""

    columns: list
    rho: float

    @property
    def n(self):
        return len(self.columns)

    @property
    def nnz(self):
        return sum(len(c) for c in self.columns)

    def contains(self, i, j):
        return i in self.columns[j]


def build_sparsity_set(ordering, points, rho):
    """Evaluate the distance predicate for all ordered pairs i <= j."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    coords = np.asarray(points, dtype=float)[ordering.perm]
    return _pattern_from_scales(coords, ordering.scales, rho)


def _pattern_from_scales(coords, scales, rho):
    dist = cdist(coords, coords)
    n = len(coords)
    columns = []
    for j in range(n):
        radius = rho * scales[j]
        rows = np.nonzero(dist[: j + 1, j] <= radius)[0]
        if len(rows) == 0 or rows[-1] != j:
            rows = np.unique(np.append(rows, j))
        columns.append(rows.astype(int))
    return SparsityPattern(columns=columns, rho=float(rho))


@dataclass
class Supernode:
    columns: np.ndarray      # member (parent) columns, ascending
    rows: np.ndarray         # permitted nonzero rows (children), ascending


@dataclass
class SupernodeSet:
    nodes: list
    lam: float
    rho: float

    def __len__(self):
        return len(self.nodes)

    def column_owner(self):
        """Map column -> supernode index; every column has exactly one owner."""
        owner = {}
        for k, node in enumerate(self.nodes):
            for c in node.columns:
                if int(c) in owner:
                    raise ValueError(f"column {c} assigned to two supernodes")
                owner[int(c)] = k
        return owner


def aggregate_supernodes(pattern, ordering, points, lam, break_at=None):
    """Greedy length-scale-band grouping of ordered columns.

    The first unassigned column seeds a supernode; a later unassigned column j
    joins while scale(j) >= scale(seed)/lam and it lies within rho*scale(seed)
    of the seed point.  The seed column's infinite scale (position 0) borrows
    the first finite scale so it can absorb geometric neighbors at all.
    ``break_at`` forbids groups from straddling the given boundary position,
    which keeps a fixed/dynamic split aligned with whole supernodes.
    """
    if lam < 1:
        raise ValueError("aggregation factor must be >= 1")
    coords = np.asarray(points, dtype=float)[ordering.perm]
    return _aggregate(pattern, coords, ordering.scales, lam, break_at)


def _aggregate(pattern, coords, scales, lam, break_at=None):
    n = pattern.n
    finite = scales[np.isfinite(scales)]
    fallback = float(finite[0]) if len(finite) else 1.0
    assigned = np.zeros(n, dtype=bool)
    nodes = []
    for seed in range(n):
        if assigned[seed]:
            continue
        seed_scale = scales[seed] if np.isfinite(scales[seed]) else fallback
        members = [seed]
        assigned[seed] = True
        for j in range(seed + 1, n):
            if assigned[j]:
                continue
            if break_at is not None and (seed < break_at) != (j < break_at):
                continue
            if scales[j] >= seed_scale / lam and \
                    np.linalg.norm(coords[j] - coords[seed]) <= pattern.rho * seed_scale:
                members.append(j)
                assigned[j] = True
        cols = np.array(members, dtype=int)
        rows = np.unique(np.concatenate([pattern.columns[c] for c in members]))
        nodes.append(Supernode(columns=cols, rows=rows.astype(int)))
    return SupernodeSet(nodes=nodes, lam=float(lam), rho=pattern.rho)


@dataclass
class Layout:
    """Ordered sequence of measurement slots.

    Slot s carries the observation of multi-index ``spec.layout[mindex[s]]``
    at raw point ``point_index[s]``.
    """

    scheme: str
    point_index: np.ndarray
    mindex: np.ndarray
    spec: DerivativeSpec
    slot_scales: np.ndarray = field(default=None)

    @property
    def n_slots(self):
        return len(self.point_index)

    def slot_alphas(self):
        return self.spec.alpha_array()[self.mindex]

    def slot_points(self, points):
        return np.asarray(points, dtype=float)[self.point_index]

    def values_vector(self, values):
        """Gather an (N, z) value table into layout order."""
        values = np.asarray(values, dtype=float)
        return values[self.point_index, self.mindex]


def natural_layout(spec, n_points):
    """Point-major slots in raw point order; used where ordering is moot."""
    z = spec.n_slots
    return Layout(scheme="natural",
                  point_index=np.repeat(np.arange(n_points), z),
                  mindex=np.tile(np.arange(z), n_points),
                  spec=spec)


def extend_pointwise_1(ordering, spec):
    """All z slots of each point kept contiguous, points in MMD order."""
    z = spec.n_slots
    return Layout(scheme="pointwise-1",
                  point_index=np.repeat(ordering.perm, z),
                  mindex=np.tile(np.arange(z), ordering.n),
                  spec=spec)


def extend_measurementwise_1(ordering, spec):
    """One block per measurement slot, each block in MMD point order."""
    z = spec.n_slots
    n = ordering.n
    return Layout(scheme="measurementwise-1",
                  point_index=np.tile(ordering.perm, z),
                  mindex=np.repeat(np.arange(z), n),
                  spec=spec)


def extend_pointwise_2(points, spec, first=None):
    """MMD over the expanded slot set, slots co-located with their points.

    Zero-distance ties resolve by ascending derivative order, so a point's
    slots are emitted consecutively the moment the point is selected; the
    point sequence itself is the plain MMD order.
    """
    ordering = mmd_order(points, first=first)
    z = spec.n_slots
    return Layout(scheme="pointwise-2",
                  point_index=np.repeat(ordering.perm, z),
                  mindex=np.tile(np.arange(z), ordering.n),
                  spec=spec)


def extend_measurementwise_2(ordering, spec):
    """Function-value block in MMD order, then all derivative slots appended
    grouped by measurement type (each type in MMD order)."""
    z = spec.n_slots
    n = ordering.n
    return Layout(scheme="measurementwise-2",
                  point_index=np.tile(ordering.perm, z),
                  mindex=np.repeat(np.arange(z), n),
                  spec=spec)


def layout_slot_scales(layout, points):
    """Selection distances of layout slots, recomputed over the expanded set.

    Slot i's scale is its point's distance to the points of all earlier slots
    (zero when an earlier slot shares its location, +inf for the first slot).
    """
    coords = layout.slot_points(points)
    n = len(coords)
    scales = np.empty(n)
    scales[0] = np.inf
    for i in range(1, n):
        scales[i] = np.min(np.linalg.norm(coords[:i] - coords[i], axis=1))
    return scales


def build_slot_pattern(layout, points, rho):
    """Sparsity set directly on expanded slot coordinates (schemes whose
    supernodes are rebuilt from the expanded layout)."""
    coords = layout.slot_points(points)
    scales = layout_slot_scales(layout, points)
    layout.slot_scales = scales
    return _pattern_from_scales(coords, scales, rho)


def aggregate_slot_supernodes(pattern, layout, points, lam, break_at=None):
    coords = layout.slot_points(points)
    if layout.slot_scales is None:
        layout.slot_scales = layout_slot_scales(layout, points)
    return _aggregate(pattern, coords, layout.slot_scales, lam, break_at)


def expand_sparsity(pattern, spec, scheme):
    """Derivative expansion of a point-level sparsity set to slot pairs."""
    z = spec.n_slots
    n = pattern.n
    columns = []
    if scheme == "pointwise-1":
        for j in range(n):
            base = np.concatenate([np.arange(z) + q * z for q in pattern.columns[j]])
            for k in range(z):
                col = j * z + k
                columns.append(base[base <= col])
    elif scheme == "measurementwise-1":
        for b in range(z):
            for j in range(n):
                base = np.concatenate([pattern.columns[j] + bb * n for bb in range(z)])
                base = np.unique(base)
                columns.append(base[base <= b * n + j])
    else:
        raise ValueError(f"unsupported scheme for expansion: {scheme}")
    return SparsityPattern(columns=columns, rho=pattern.rho)


def expand_supernodes_with_derivatives(sn_set, spec, scheme):
    """Turn point-level supernodes into slot-level ones.

    pointwise-1: each ordered position q becomes its z consecutive slots.
    measurementwise-1: the whole list is replicated once per measurement
    block with offset indices, so the slot-level count is z times the
    point-level count.
    """
    z = spec.n_slots
    if scheme == "pointwise-1":
        nodes = []
        for node in sn_set.nodes:
            cols = (node.columns[:, None] * z + np.arange(z)[None, :]).ravel()
            rows = (node.rows[:, None] * z + np.arange(z)[None, :]).ravel()
            nodes.append(Supernode(columns=np.sort(cols), rows=np.sort(rows)))
        return SupernodeSet(nodes=nodes, lam=sn_set.lam, rho=sn_set.rho)
    if scheme == "measurementwise-1":
        n = max(int(node.rows.max()) for node in sn_set.nodes) + 1
        nodes = []
        for b in range(z):
            for node in sn_set.nodes:
                nodes.append(Supernode(columns=np.sort(node.columns + b * n),
                                       rows=np.sort(node.rows + b * n)))
        return SupernodeSet(nodes=nodes, lam=sn_set.lam, rho=sn_set.rho)
    raise ValueError(f"unsupported scheme for expansion: {scheme}")
