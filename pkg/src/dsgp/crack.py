"""Fatigue-crack digital-twin case study.

A semi-elliptical surface crack in a finite plate grows under constant-
amplitude cyclic load.  The crack-driving force comes from the Newman-Raju
stress-intensity solution (pluggable), growth follows a power law in the
stress-intensity range, and the simulated component ("physical twin") is
inspected periodically.  A GP surrogate over the crack state (a, c) predicts
the surface growth rate dc/dN; it can stay frozen, be refit from scratch at
every inspection, or stream inspection data through the dynamic sparse
update policy.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .benchmarks import mse
from .covariance import MeasurementSet
from .dynamic import RetrainConfig, deploy, fast_update_step
from .exact import fit_exact, optimize_length_scale, predict_mean
from .kernels import DerivativeSpec, enumerate_multi_indices


@dataclass
class CrackState:
    a: float     # depth, inch
    c: float     # surface half-length, inch


@dataclass
class PlateGeometry:
    t: float     # thickness, inch
    b: float     # half-width, inch

    def __post_init__(self):
        if self.t <= 0 or self.b <= 0:
            raise ValueError("plate dimensions must be positive")


@dataclass
class MaterialParams:
    paris_c: float
    paris_m: float

    def __post_init__(self):
        if self.paris_c <= 0 or self.paris_m <= 0:
            raise ValueError("power-law constants must be positive")


@dataclass
class LoadSpec:
    sigma_max: float          # psi
    load_ratio: float = 0.0   # R = sigma_min / sigma_max


class ValidityError(ValueError):
    """Crack state outside the stress-intensity solution's valid box."""


class NewmanRajuSIF:
    """Standard semi-elliptical surface-crack solution, split into the
    factors axis distance, elliptic-integral square Q, finite-width
    correction, aspect factor, and free-surface/angular factor.

    Both aspect-ratio regimes are covered: the a/c > 1 forms use the
    reciprocal argument c/a.
    """

    ratio_lo = 0.2
    ratio_hi = 2.0

    def validity(self, state, geom, rtol=1e-9):
        ratio = state.a / state.c
        if state.a <= 0 or state.c <= 0:
            return "non-positive crack dimensions"
        if state.a >= geom.t:
            return f"depth a={state.a:.4g} reached thickness t={geom.t}"
        if state.c >= geom.b:
            return f"half-length c={state.c:.4g} reached half-width b={geom.b}"
        if ratio < self.ratio_lo * (1 - rtol) or ratio > self.ratio_hi * (1 + rtol):
            return f"aspect ratio a/c={ratio:.3g} outside [{self.ratio_lo}, {self.ratio_hi}]"
        if (np.pi * state.c / (2 * geom.b)) * np.sqrt(state.a / geom.t) >= np.pi / 2:
            return "finite-width correction argument out of range"
        return None

    def check(self, state, geom):
        reason = self.validity(state, geom)
        if reason:
            raise ValidityError(reason)

    def elliptic_q(self, a, c):
        r = a / c
        return 1.0 + 1.464 * np.where(r <= 1.0, r, 1.0 / r) ** 1.65

    def axis_distance(self, a, c):
        # Perpendicular distance from the deepest point to the surface axis.
        return a

    def width_correction(self, a, c, geom):
        arg = (np.pi * c / (2.0 * geom.b)) * np.sqrt(a / geom.t)
        return np.sqrt(1.0 / np.cos(arg))

    def aspect_factor(self, a, c, geom):
        at = a / geom.t
        r = a / c
        le = r <= 1.0
        rr = np.where(le, r, 1.0 / np.maximum(r, 1e-300))
        m1 = np.where(le, 1.13 - 0.09 * rr, np.sqrt(rr) * (1.0 + 0.04 * rr))
        m2 = np.where(le, -0.54 + 0.89 / (0.2 + rr), 0.2 * rr**4)
        m3 = np.where(le, 0.5 - 1.0 / (0.65 + rr) + 14.0 * (1.0 - rr) ** 24,
                      -0.11 * rr**4)
        return m1 + m2 * at**2 + m3 * at**4

    def surface_factor(self, a, c, geom, phi_rad):
        at = a / geom.t
        r = a / c
        le = r <= 1.0
        rr = np.where(le, r, 1.0 / np.maximum(r, 1e-300))
        g = np.where(le,
                     1.0 + (0.1 + 0.35 * at**2) * (1.0 - np.sin(phi_rad)) ** 2,
                     1.0 + (0.1 + 0.35 * rr * at**2) * (1.0 - np.sin(phi_rad)) ** 2)
        f_phi = np.where(le,
                         (rr**2 * np.cos(phi_rad) ** 2 + np.sin(phi_rad) ** 2) ** 0.25,
                         (rr**2 * np.sin(phi_rad) ** 2 + np.cos(phi_rad) ** 2) ** 0.25)
        return g * f_phi


DEFAULT_SIF = NewmanRajuSIF()


def stress_intensity(state, geom, load, phi_deg, provider=DEFAULT_SIF):
    """K in psi*sqrt(in): sigma * sqrt(pi l / Q) * f_w * M * g."""
    provider.check(state, geom)
    phi = math.radians(phi_deg)
    a, c = state.a, state.c
    return (load.sigma_max
            * np.sqrt(np.pi * provider.axis_distance(a, c) / provider.elliptic_q(a, c))
            * provider.width_correction(a, c, geom)
            * provider.aspect_factor(a, c, geom)
            * provider.surface_factor(a, c, geom, phi))


def paris_rate(k_range, material):
    """Power-law growth rate C * K^m (inch/cycle); at load ratio zero the
    stress-intensity range equals its maximum."""
    if np.any(np.asarray(k_range) <= 0):
        raise ValueError("stress-intensity range must be positive")
    return material.paris_c * np.asarray(k_range) ** material.paris_m


PHI_SURFACE = 5.0
PHI_DEPTH = 90.0


def growth_rates(state, geom, load, material, provider=DEFAULT_SIF):
    """(da/dN, dc/dN) at the depth and near-surface points."""
    ka = stress_intensity(state, geom, load, PHI_DEPTH, provider)
    kc = stress_intensity(state, geom, load, PHI_SURFACE, provider)
    return float(paris_rate(ka, material)), float(paris_rate(kc, material))


# --------------------------------------------------------------------------
# Closed-form rate derivatives (symbolic, cached per branch and multi-index)
# --------------------------------------------------------------------------

_DERIV_CACHE = {}


def _rate_lambdas(i, j):
    """Lambdified d^(i+j)(dc/dN)/da^i dc^j for both aspect-ratio branches.

    The rate is differentiated in log-of-factors form, C exp(m log K) with
    log K a sum of factor logs, which keeps the expression trees an order of
    magnitude smaller than differentiating the raw product."""
    key = (i, j)
    if key in _DERIV_CACHE:
        return _DERIV_CACHE[key]
    import sympy as sp

    a, c, t, b, sig, cc, mm = sp.symbols("a c t b sigma C m", positive=True)
    phi = sp.rad(PHI_SURFACE)
    branches = []
    for le in (True, False):
        r = a / c if le else c / a
        q = 1 + sp.Rational(1464, 1000) * r ** sp.Rational(165, 100)
        at = a / t
        if le:
            m1 = sp.Rational(113, 100) - sp.Rational(9, 100) * r
            m2 = sp.Rational(-54, 100) + sp.Rational(89, 100) / (sp.Rational(2, 10) + r)
            m3 = sp.Rational(1, 2) - 1 / (sp.Rational(65, 100) + r) + 14 * (1 - r) ** 24
            g = 1 + (sp.Rational(1, 10) + sp.Rational(35, 100) * at**2) * (1 - sp.sin(phi)) ** 2
            f_phi = (r**2 * sp.cos(phi) ** 2 + sp.sin(phi) ** 2) ** sp.Rational(1, 4)
        else:
            m1 = sp.sqrt(r) * (1 + sp.Rational(4, 100) * r)
            m2 = sp.Rational(2, 10) * r**4
            m3 = sp.Rational(-11, 100) * r**4
            g = 1 + (sp.Rational(1, 10) + sp.Rational(35, 100) * r * at**2) * (1 - sp.sin(phi)) ** 2
            f_phi = (r**2 * sp.sin(phi) ** 2 + sp.cos(phi) ** 2) ** sp.Rational(1, 4)
        fw = sp.sqrt(1 / sp.cos(sp.pi * c / (2 * b) * sp.sqrt(at)))
        log_k = (sp.log(sig) + sp.Rational(1, 2) * (sp.log(sp.pi) + sp.log(a) - sp.log(q))
                 + sp.log(fw) + sp.log(m1 + m2 * at**2 + m3 * at**4)
                 + sp.log(g) + sp.log(f_phi))
        rate = cc * sp.exp(mm * log_k)
        expr = sp.diff(rate, a, i, c, j)
        branches.append(sp.lambdify((a, c, t, b, sig, cc, mm), expr, "numpy"))
    _DERIV_CACHE[key] = tuple(branches)
    return _DERIV_CACHE[key]


def analytic_rate_derivatives(points, geom, load, material, order):
    """Table of all mixed partials of dc/dN with respect to (a, c) up to the
    given order, one row per (a, c) pair.  The load is held fixed; only the
    crack state varies."""
    if order > 3:
        raise ValueError("rate derivatives are supported up to order 3")
    points = np.atleast_2d(np.asarray(points, dtype=float))
    for a, c in points:
        DEFAULT_SIF.check(CrackState(a, c), geom)
    layout = enumerate_multi_indices(2, order)
    out = np.empty((len(points), len(layout)))
    a, c = points[:, 0], points[:, 1]
    le = a / c <= 1.0
    for k, (i, j) in enumerate(layout):
        f_le, f_gt = _rate_lambdas(i, j)
        args = (geom.t, geom.b, load.sigma_max, material.paris_c, material.paris_m)
        out[:, k] = np.where(le, f_le(a, c, *args), f_gt(a, c, *args))
    return out


def rate_measurement_set(points, geom, load, material, order):
    values = analytic_rate_derivatives(points, geom, load, material, order)
    return MeasurementSet(points=np.atleast_2d(points), values=values,
                          spec=DerivativeSpec(dim=2, max_order=order))


# --------------------------------------------------------------------------
# Physical-twin simulation and the inspection/update/prognosis workflow
# --------------------------------------------------------------------------

@dataclass
class DTScenario:
    a_lo: float = 0.001
    a_hi: float = 0.08
    ratio_lo: float = 0.2
    ratio_hi: float = 2.0
    n_train: int = 10
    n_test: int = 500
    nominal: MaterialParams = field(default_factory=lambda: MaterialParams(5.52e-21, 4.0))
    pt_material: MaterialParams = field(default_factory=lambda: MaterialParams(5.25e-21, 3.97))
    geometry: PlateGeometry = field(default_factory=lambda: PlateGeometry(t=0.1, b=0.72))
    load: LoadSpec = field(default_factory=lambda: LoadSpec(sigma_max=8500.0))
    a0: float = 0.024
    c0: float = 0.012
    order: int = 3
    rho0: float = 20.0
    lam: float = 1.5
    interval: float = 5e4
    life: float = 7.5e5
    substep: float = 100.0
    seed: int = 20240
    retrain: RetrainConfig = field(default_factory=RetrainConfig)

    def as_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        raw["nominal"] = MaterialParams(**raw["nominal"])
        raw["pt_material"] = MaterialParams(**raw["pt_material"])
        raw["geometry"] = PlateGeometry(**raw["geometry"])
        raw["load"] = LoadSpec(**raw["load"])
        raw["retrain"] = RetrainConfig(**raw["retrain"])
        return cls(**raw)


@dataclass
class PTTrajectory:
    cycles: np.ndarray
    a: np.ndarray
    c: np.ndarray
    rate_a: np.ndarray
    rate_c: np.ndarray
    inspections: list       # indices into the arrays, one per interval
    truncated_reason: str = None

    def state_at(self, cycle):
        k = int(np.searchsorted(self.cycles, cycle))
        k = min(k, len(self.cycles) - 1)
        return k


def simulate_physical_twin(scenario, provider=DEFAULT_SIF):
    """Forward-Euler crack evolution with inspection snapshots.

    Truncates (with the reason recorded) if the state leaves the
    stress-intensity validity box before the service life ends.
    """
    geom, load, mat = scenario.geometry, scenario.load, scenario.pt_material
    n_steps = int(round(scenario.life / scenario.substep))
    cycles = np.empty(n_steps + 1)
    a = np.empty(n_steps + 1)
    c = np.empty(n_steps + 1)
    ra = np.empty(n_steps + 1)
    rc = np.empty(n_steps + 1)
    a[0], c[0] = scenario.a0, scenario.c0
    cycles[0] = 0.0
    truncated = None
    k = 0
    for k in range(n_steps + 1):
        state = CrackState(a[k], c[k])
        reason = provider.validity(state, geom)
        if reason:
            truncated = reason
            k -= 1
            break
        if load.sigma_max == 0:
            ra[k], rc[k] = 0.0, 0.0
        else:
            ra[k], rc[k] = growth_rates(state, geom, load, mat, provider)
        if k == n_steps:
            break
        a[k + 1] = a[k] + scenario.substep * ra[k]
        c[k + 1] = c[k] + scenario.substep * rc[k]
        cycles[k + 1] = cycles[k] + scenario.substep
    last = k
    inspections = []
    n_insp = int(scenario.life // scenario.interval)
    for i in range(1, n_insp + 1):
        idx = int(round(i * scenario.interval / scenario.substep))
        if idx <= last:
            inspections.append(idx)
    return PTTrajectory(cycles=cycles[: last + 1], a=a[: last + 1],
                        c=c[: last + 1], rate_a=ra[: last + 1],
                        rate_c=rc[: last + 1], inspections=inspections,
                        truncated_reason=truncated)


def eta(rate_pt, rate_dt):
    """Relative percent difference between observed and predicted rates."""
    if rate_pt == 0:
        raise ValueError("true rate is zero; the relative difference is undefined")
    return abs((rate_pt - rate_dt) / rate_pt) * 100.0


def nominal_datasets(scenario):
    """Seeded uniform draws of (a, c): training with derivatives, plain-value
    test set, both labeled by the nominal material."""
    rng = np.random.default_rng(scenario.seed)
    def draw(n):
        a = rng.uniform(scenario.a_lo, scenario.a_hi, n)
        ratio = rng.uniform(scenario.ratio_lo, scenario.ratio_hi, n)
        return np.column_stack([a, a / ratio])
    train_pts = draw(scenario.n_train)
    test_pts = draw(scenario.n_test)
    train = rate_measurement_set(train_pts, scenario.geometry, scenario.load,
                                 scenario.nominal, scenario.order)
    test_vals = analytic_rate_derivatives(test_pts, scenario.geometry,
                                          scenario.load, scenario.nominal, 0)[:, 0]
    return train, (test_pts, test_vals)


MODES = ("frozen", "exact-retrain", "dynamic-sparse")


@dataclass
class InspectionRecord:
    mode: str
    order: int
    index: int
    cycle: float
    a: float
    c: float
    rate_pt: float
    rate_dt: float
    eta_pct: float
    retrained: bool
    rho: float
    sparsity: float


@dataclass
class PrognosisRecord:
    mode: str
    order: int
    index: int
    cycle: float
    a: float
    c: float
    delta_c: float
    rate_pt: float
    rate_dt: float
    eta_pct: float


def _predict_rate(mode, model, a, c):
    if mode == "dynamic-sparse":
        return float(model.predict(np.array([a, c])))
    return float(predict_mean(model, np.array([a, c])))


def _prognose(mode, model, a_i, c_i, interval, substep):
    """Integrate the surrogate's rate over one interval with the aspect
    ratio frozen at the last inspected value (self-similar growth)."""
    ratio = a_i / c_i
    c_hat = c_i
    steps = int(round(interval / substep))
    for _ in range(steps):
        rate = _predict_rate(mode, model, ratio * c_hat, c_hat)
        c_hat = c_hat + substep * max(rate, 0.0)
    return c_hat - c_i


def run_dt_workflow(scenario, mode):
    """Initialize the nominal surrogate, then walk the inspection schedule.

    At each inspection the surrogate is scored against the observed rate
    *before* ingesting the measurement; prognosis rows integrate predicted
    growth across the interval just ended.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    train, (test_x, test_f) = nominal_datasets(scenario)
    pt = simulate_physical_twin(scenario)
    if pt.truncated_reason:
        raise ValidityError(
            f"physical twin left the valid domain before end of life: "
            f"{pt.truncated_reason}")

    if mode == "dynamic-sparse":
        model = deploy(train, (test_x, test_f), rho=scenario.rho0,
                       lam=scenario.lam, approach="su1", config=scenario.retrain)
    else:
        params = optimize_length_scale(train, (test_x, test_f))
        model = fit_exact(train, params)

    inspections = []
    prognoses = []
    prev_idx = 0
    accumulated = train
    for i, idx in enumerate(pt.inspections, start=1):
        cycle = pt.cycles[idx]
        a_i, c_i, rate_i = pt.a[idx], pt.c[idx], pt.rate_c[idx]
        a_prev, c_prev = pt.a[prev_idx], pt.c[prev_idx]

        delta_c = _prognose(mode, model, a_prev, c_prev, scenario.interval,
                            scenario.substep)
        c_hat = c_prev + delta_c
        a_hat = (a_prev / c_prev) * c_hat
        rate_hat = _predict_rate(mode, model, a_hat, c_hat)
        prognoses.append(PrognosisRecord(
            mode=mode, order=scenario.order, index=i, cycle=cycle,
            a=a_hat, c=c_hat, delta_c=delta_c, rate_pt=rate_i,
            rate_dt=rate_hat, eta_pct=eta(rate_i, rate_hat)))

        rate_dt = _predict_rate(mode, model, a_i, c_i)
        retrained = False
        rho = scenario.rho0
        sparsity = 1.0
        if mode == "exact-retrain":
            # Refit from scratch on the enlarged dataset; the length scale
            # stays at its initialization optimum.  Re-optimizing it against
            # the nominal test set would punish the (intentionally)
            # individualized training data and collapse the fit.
            new_row = rate_measurement_set([[a_i, c_i]], scenario.geometry,
                                           scenario.load, scenario.pt_material,
                                           scenario.order)
            accumulated = accumulated.merged_with(new_row)
            model = fit_exact(accumulated, model.params)
            retrained = True
        elif mode == "dynamic-sparse":
            new_row = rate_measurement_set([[a_i, c_i]], scenario.geometry,
                                           scenario.load, scenario.pt_material,
                                           scenario.order)
            model, rec = fast_update_step(model, new_row.points[0],
                                          new_row.values[0])
            retrained = rec.branch.startswith("retrain")
            rho = model.rho
            sparsity = rec.sparsity_ratio
        inspections.append(InspectionRecord(
            mode=mode, order=scenario.order, index=i, cycle=cycle, a=a_i,
            c=c_i, rate_pt=rate_i, rate_dt=rate_dt,
            eta_pct=eta(rate_i, rate_dt), retrained=retrained, rho=rho,
            sparsity=sparsity))
        prev_idx = idx
    return inspections, prognoses


def initial_model_error(scenario, order):
    """Held-out error of the nominal surrogate at a given derivative order,
    for order-sweep diagnostics."""
    scen = replace(scenario, order=order)
    train, (test_x, test_f) = nominal_datasets(scen)
    params = optimize_length_scale(train, (test_x, test_f))
    model = fit_exact(train, params)
    return mse(predict_mean(model, test_x), test_f)
