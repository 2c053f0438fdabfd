"""Command-line harness: benchmark sweeps, streaming-update replays, and the
crack digital-twin scenarios, all emitting deterministic CSV (plus optional
rendered figures).

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import figures
from .benchmarks import BENCHMARKS, make_dataset, mse, test_points
from .covariance import (NoiseModel, add_jitter, assemble_covariance,
                         assemble_noise_diagonal, condition_number,
                         perturb_values)
from .crack import DTScenario, run_dt_workflow
from .dynamic import deploy, run_stream
from .exact import FitError, fit_exact, optimize_length_scale, predict_mean
from .kernels import KernelParams
from .ordering import natural_layout
from .sparse import FactorizationError, SparseGP

TEST_SEED = 1234
INCREASING_NOISE = (1.0, 2.0, 3.0, 4.0, 5.0)
DECREASING_NOISE = (5.0, 4.0, 3.0, 2.0, 1.0)

BENCH_COLUMNS = ["function", "n", "d", "rho", "scheme", "mse",
                 "condition_number", "sparsity_ratio", "delta_opt", "wall_ms"]
DYNAMIC_COLUMNS = ["approach", "d", "step", "branch", "mse", "rho",
                   "sparsity_ratio"]
DT_COLUMNS = ["mode", "d", "interval", "kind", "i_or_j", "cycle", "a", "c",
              "rate_pt", "rate_dt", "eta_pct", "retrained_flag", "rho",
              "sparsity_ratio"]

BENCH_PRESETS = {
    "fig2a": dict(function=["griewank-1d"], n=list(range(3, 11)),
                  d=[0, 1, 2, 3, 4], sparse=False),
    "fig2c": dict(function=["griewank-3d"], n=[8, 27], d=[0, 1, 2, 3, 4],
                  sparse=False),
    "fig6": dict(function=["griewank-1d", "griewank-2d", "griewank-3d"],
                 n={"griewank-1d": [3, 6, 10], "griewank-2d": [16, 36],
                    "griewank-3d": [8, 27]},
                 d=[0, 1, 2, 3, 4], sparse=True, rho=10.0),
    "fig9": dict(function=["griewank-1d"], n=list(range(3, 11)),
                 d=[0, 1, 2, 3, 4], sparse=True, rho=10.0,
                 noise=list(INCREASING_NOISE)),
}

DYNAMIC_PRESET = dict(function="griewank-2d", n_train=25, n_stream=10,
                      d=[0, 1, 2, 3, 4], rho=10.0,
                      approaches=["su1", "su2"], seed=128)

DT_PRESETS = {
    "fig15": dict(modes=["frozen", "exact-retrain", "dynamic-sparse"],
                  d=[1, 2, 3], intervals=[5e4]),
    "fig16": dict(modes=["dynamic-sparse"], d=[3], intervals=[1e4, 5e4]),
}

DT_PINNED_SEED = 20240


def _write_csv(path, columns, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _fmt(value):
    if isinstance(value, float):
        return repr(value)
    return value


# --------------------------------------------------------------------------
# bench
# --------------------------------------------------------------------------

def _bench_cell(cell):
    """One grid cell: fit at the optimal length scale and report accuracy
    plus conditioning.  Standalone so a worker pool can run cells."""
    fn_name, n, d, sparse, rho, scheme, noise_pct, seed, timing = cell
    t0 = time.perf_counter()
    fn = BENCHMARKS[fn_name]
    train = make_dataset(fn, "equispaced", n, d, seed=seed)
    x_test, f_test = test_points(fn, 1000, seed=TEST_SEED)
    noise = None
    if noise_pct:
        noise = NoiseModel.from_percent_schedule(train, list(noise_pct)[: d + 1])
        train = perturb_values(train, noise, seed=seed + 7)
    if not sparse:
        params = optimize_length_scale(train, (x_test, f_test), noise=noise)
        model = fit_exact(train, params, noise=noise)
        err = mse(predict_mean(model, x_test), f_test)
        ratio = ""
    else:
        best = None
        from .exact import default_grid
        for delta in default_grid():
            try:
                m = SparseGP.build(train, KernelParams(float(delta)), rho,
                                   scheme=scheme, noise=noise)
            except (FactorizationError, np.linalg.LinAlgError):
                continue
            e = mse(m.predict(x_test), f_test)
            if best is None or e <= best[0]:
                best = (e, m)
        if best is None:
            raise FactorizationError(-1, "no factorizable length scale on the grid")
        err, model = best
        params = model.params
        ratio = repr(model.sparsity_ratio())
    layout = natural_layout(train.spec, train.n)
    k = assemble_covariance(train, params, layout)
    if noise is not None:
        k = k + np.diag(assemble_noise_diagonal(train, noise, layout))
    kappa = condition_number(add_jitter(k, 1e-14))
    wall = int((time.perf_counter() - t0) * 1000) if timing else 0
    return {"function": fn_name, "n": n, "d": d,
            "rho": repr(float(rho)) if sparse else "",
            "scheme": scheme if sparse else "exact",
            "mse": repr(err), "condition_number": repr(kappa),
            "sparsity_ratio": ratio,
            "delta_opt": repr(params.length_scale), "wall_ms": wall}


def cmd_bench(args):
    if args.preset:
        preset = BENCH_PRESETS[args.preset]
        functions = preset["function"]
        d_list = preset["d"]
        sparse = preset["sparse"]
        rho = preset.get("rho", 0.0)
        noise = preset.get("noise")
        n_of = preset["n"]
        n_map = n_of if isinstance(n_of, dict) else {f: n_of for f in functions}
    else:
        if not args.function:
            raise ValueError("either --preset or --function is required")
        functions = [args.function]
        n_map = {args.function: args.n}
        d_list = args.orders
        sparse = args.sparse
        rho = args.rho
        noise = {"increasing": INCREASING_NOISE, "decreasing": DECREASING_NOISE,
                 "none": None}[args.noise]
    cells = [(f, n, d, sparse, rho, args.scheme, tuple(noise) if noise else None,
              args.seed, args.timing)
             for f in functions for n in n_map[f] for d in d_list]
    cells.sort(key=lambda c: (c[0], c[1], c[2]))
    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(_bench_cell, cells))
    else:
        rows = [_bench_cell(c) for c in cells]
    rows.sort(key=lambda r: (r["function"], int(r["n"]), int(r["d"]), r["scheme"]))
    _write_csv(args.out, BENCH_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    if args.plot:
        for f in figures.render_bench(rows, args.out):
            print(f"wrote {f}")


# --------------------------------------------------------------------------
# dynamic
# --------------------------------------------------------------------------

def cmd_dynamic(args):
    cfg = dict(DYNAMIC_PRESET)
    if args.orders:
        cfg["d"] = args.orders
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.rho is not None:
        cfg["rho"] = args.rho
    if args.approach:
        cfg["approaches"] = args.approach
    fn = BENCHMARKS[cfg["function"]]
    x_test, f_test = test_points(fn, 1000, seed=TEST_SEED)
    rows = []
    log_lines = []
    for d in cfg["d"]:
        train = make_dataset(fn, "uniform-random", cfg["n_train"], d,
                             seed=cfg["seed"])
        stream = make_dataset(fn, "uniform-random", cfg["n_stream"], d,
                              seed=cfg["seed"] + 1000)
        params = None
        for approach in cfg["approaches"]:
            model = deploy(train, (x_test, f_test), rho=cfg["rho"],
                           approach=approach, params=params)
            params = model.params   # share the optimum across approaches
            rows.append({"approach": approach, "d": d, "step": 0,
                         "branch": "deploy", "mse": repr(model.l_best),
                         "rho": repr(model.rho),
                         "sparsity_ratio": repr(model.sparsity_ratio())})
            model, records = run_stream(model, stream)
            for rec in records:
                rows.append({"approach": approach, "d": d, "step": rec.step,
                             "branch": rec.branch, "mse": repr(rec.l_best),
                             "rho": repr(rec.rho),
                             "sparsity_ratio": repr(rec.sparsity_ratio)})
                log_lines.append(json.dumps(
                    {"approach": approach, "d": d,
                     **json.loads(rec.as_json())}, sort_keys=True))
    rows.sort(key=lambda r: (r["approach"], int(r["d"]), int(r["step"])))
    _write_csv(args.out, DYNAMIC_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    log_path = Path(args.out).with_suffix(".decisions.jsonl")
    log_path.write_text("".join(line + "\n" for line in log_lines))
    print(f"wrote decision log to {log_path}")
    if args.plot:
        for f in figures.render_dynamic(rows, args.out):
            print(f"wrote {f}")


# --------------------------------------------------------------------------
# dt
# --------------------------------------------------------------------------

def cmd_dt(args):
    if args.scenario:
        base = DTScenario.from_json(Path(args.scenario).read_text())
    else:
        base = DTScenario(seed=DT_PINNED_SEED)
    preset = DT_PRESETS[args.preset] if args.preset else None
    modes = args.modes or (preset["modes"] if preset else ["frozen"])
    orders = args.orders or (preset["d"] if preset else [base.order])
    intervals = args.intervals or (preset["intervals"] if preset else [base.interval])
    if args.seed is not None:
        base = replace(base, seed=args.seed)
    rows = []
    for mode in modes:
        for d in orders:
            for interval in intervals:
                scen = replace(base, order=d, interval=interval)
                insp, prog = run_dt_workflow(scen, mode)
                for r in insp:
                    rows.append({"mode": mode, "d": d, "interval": repr(float(interval)),
                                 "kind": "i", "i_or_j": r.index,
                                 "cycle": repr(r.cycle), "a": repr(r.a),
                                 "c": repr(r.c), "rate_pt": repr(r.rate_pt),
                                 "rate_dt": repr(r.rate_dt),
                                 "eta_pct": repr(r.eta_pct),
                                 "retrained_flag": int(r.retrained),
                                 "rho": repr(r.rho),
                                 "sparsity_ratio": repr(r.sparsity)})
                for r in prog:
                    rows.append({"mode": mode, "d": d, "interval": repr(float(interval)),
                                 "kind": "j", "i_or_j": r.index,
                                 "cycle": repr(r.cycle), "a": repr(r.a),
                                 "c": repr(r.c), "rate_pt": repr(r.rate_pt),
                                 "rate_dt": repr(r.rate_dt),
                                 "eta_pct": repr(r.eta_pct),
                                 "retrained_flag": 0, "rho": "",
                                 "sparsity_ratio": ""})
    rows.sort(key=lambda r: (r["mode"], int(r["d"]), float(r["interval"]),
                             r["kind"], int(r["i_or_j"])))
    _write_csv(args.out, DT_COLUMNS, rows)
    print(f"wrote {len(rows)} rows to {args.out}")
    if args.plot:
        for f in figures.render_dt(rows, args.out):
            print(f"wrote {f}")


# --------------------------------------------------------------------------
# verify
# --------------------------------------------------------------------------

def cmd_verify(args):
    """Fast oracle suite: independent constructions checked against the
    library's closed forms."""
    from math import comb
    from .kernels import (enumerate_multi_indices, finite_difference_oracle,
                          se_kernel_block)
    from .ordering import (aggregate_supernodes, build_sparsity_set,
                           expand_supernodes_with_derivatives,
                           extend_pointwise_1, mmd_order)
    from .sparse import (CovarianceAccessor, factor_noisy_whitened,
                         kl_minimize_factor)

    checks = []

    def check(name, fn):
        try:
            fn()
            checks.append((name, True, ""))
        except AssertionError as err:
            checks.append((name, False, str(err)))

    def chk_multi_indices():
        for p in range(1, 5):
            for d in range(0, 5):
                got = enumerate_multi_indices(p, d)
                want = sum(comb(p + k - 1, k) for k in range(d + 1))
                assert len(got) == want and len(set(got)) == want

    def chk_kernel_blocks():
        rng = np.random.default_rng(3)
        params = KernelParams(1.3)
        for _ in range(30):
            p = int(rng.integers(1, 4))
            x, y = rng.uniform(-2, 2, p), rng.uniform(-2, 2, p)
            alpha = tuple(rng.multinomial(int(rng.integers(0, 5)), np.ones(p) / p))
            beta = tuple(rng.multinomial(int(rng.integers(0, 5)), np.ones(p) / p))
            got = se_kernel_block(x, y, params, alpha, beta)
            ref = finite_difference_oracle(x, y, params, alpha, beta)
            tol = 1e-5 if sum(alpha) + sum(beta) <= 2 else 1e-3
            scale = params.length_scale ** (-float(sum(alpha) + sum(beta)))
            assert abs(got - ref) <= tol * max(abs(got), scale), (alpha, beta)

    def chk_full_pattern():
        train = make_dataset("griewank-2d", "equispaced", 16, 1)
        ordering = mmd_order(train.points)
        pattern = build_sparsity_set(ordering, train.points, 1e9)
        sn = aggregate_supernodes(pattern, ordering, train.points, 1.5)
        layout = extend_pointwise_1(ordering, train.spec)
        esn = expand_supernodes_with_derivatives(sn, train.spec, "pointwise-1")
        acc = CovarianceAccessor.from_layout(train.points, layout, KernelParams(1.5))
        u = kl_minimize_factor(acc, esn).matrix.toarray()
        k = acc.matrix()
        rec = np.linalg.inv(u @ u.T)
        assert np.linalg.norm(rec - k) / np.linalg.norm(k) < 1e-8

    def chk_noisy_factor():
        train = make_dataset("griewank-1d", "equispaced", 12, 1)
        ordering = mmd_order(train.points)
        pattern = build_sparsity_set(ordering, train.points, 1e9)
        sn = aggregate_supernodes(pattern, ordering, train.points, 1.5)
        layout = extend_pointwise_1(ordering, train.spec)
        esn = expand_supernodes_with_derivatives(sn, train.spec, "pointwise-1")
        acc = CovarianceAccessor.from_layout(train.points, layout, KernelParams(2.0))
        diag = np.full(acc.n, 0.01)
        fac = factor_noisy_whitened(acc, diag, esn)
        rec = np.linalg.inv(fac.precision_dense())
        target = acc.matrix() + np.diag(diag)
        assert np.linalg.norm(rec - target) / np.linalg.norm(target) < 1e-6

    def chk_mmd():
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 1, (50, 2))
        ordering = mmd_order(pts)
        coords = pts[ordering.perm]
        for i in range(1, 50):
            ref = np.min(np.linalg.norm(coords[:i] - coords[i], axis=1))
            assert abs(ordering.scales[i] - ref) < 1e-12

    def chk_interpolation():
        train = make_dataset("griewank-1d", "equispaced", 6, 2)
        params = KernelParams(2.5)
        model = fit_exact(train, params)
        pred = predict_mean(model, train.points)
        resid = np.abs(pred - train.values[:, 0])
        assert np.max(resid / (1 + np.abs(train.values[:, 0]))) < 1e-8

    def chk_jitter_pd():
        rng = np.random.default_rng(11)
        for _ in range(20):
            p = int(rng.integers(1, 4))
            d = int(rng.integers(0, 4))
            n = int(rng.integers(2, 10))
            pts = rng.uniform(-1, 1, (n, p))
            from .kernels import DerivativeSpec
            from .covariance import MeasurementSet
            spec = DerivativeSpec(dim=p, max_order=d)
            ms = MeasurementSet(points=pts, values=np.zeros((n, spec.n_slots)),
                                spec=spec)
            k = assemble_covariance(ms, KernelParams(float(rng.uniform(0.5, 3))))
            assert np.linalg.eigvalsh(add_jitter(k, 1e-10))[0] > 0

    check("multi-index enumeration vs counting law", chk_multi_indices)
    check("kernel derivative blocks vs finite differences", chk_kernel_blocks)
    check("full-pattern factor reconstructs the inverse", chk_full_pattern)
    check("whitened noisy factor reconstructs K + R", chk_noisy_factor)
    check("max-min ordering scales vs brute force", chk_mmd)
    check("noise-free interpolation at training points", chk_interpolation)
    check("positive definiteness after jitter", chk_jitter_pd)

    failed = 0
    for name, ok, msg in checks:
        print(f"{'PASS' if ok else 'FAIL'}: {name}" + (f" ({msg})" if msg else ""))
        failed += not ok
    if failed:
        print(f"{failed} of {len(checks)} checks failed")
        return 3
    print(f"all {len(checks)} checks passed")
    return 0


# --------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="dsgp",
                                     description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("bench", help="accuracy/conditioning sweeps")
    b.add_argument("--preset", choices=sorted(BENCH_PRESETS))
    b.add_argument("--function", choices=sorted(BENCHMARKS))
    b.add_argument("--n", type=int, nargs="+", default=[3, 6, 10])
    b.add_argument("--orders", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    b.add_argument("--sparse", action="store_true")
    b.add_argument("--rho", type=float, default=10.0)
    b.add_argument("--scheme", default="pointwise-1",
                   choices=["pointwise-1", "measurementwise-1"])
    b.add_argument("--noise", choices=["none", "increasing", "decreasing"],
                   default="none")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--timing", action="store_true",
                   help="record real wall times (forfeits byte-identical reruns)")
    b.add_argument("--out", default="bench.csv")
    b.add_argument("--plot", action="store_true")
    b.set_defaults(func=cmd_bench)

    dyn = sub.add_parser("dynamic", help="streaming-update replay")
    dyn.add_argument("--preset", choices=["fig12"], default="fig12")
    dyn.add_argument("--orders", type=int, nargs="+")
    dyn.add_argument("--approach", nargs="+", choices=["su1", "su2"])
    dyn.add_argument("--rho", type=float)
    dyn.add_argument("--seed", type=int)
    dyn.add_argument("--out", default="dynamic.csv")
    dyn.add_argument("--plot", action="store_true")
    dyn.set_defaults(func=cmd_dynamic)

    dt = sub.add_parser("dt", help="crack digital-twin scenarios")
    dt.add_argument("--preset", choices=sorted(DT_PRESETS))
    dt.add_argument("--scenario", help="JSON scenario file")
    dt.add_argument("--modes", nargs="+",
                    choices=["frozen", "exact-retrain", "dynamic-sparse"])
    dt.add_argument("--orders", type=int, nargs="+")
    dt.add_argument("--intervals", type=float, nargs="+")
    dt.add_argument("--seed", type=int)
    dt.add_argument("--out", default="dt.csv")
    dt.add_argument("--plot", action="store_true")
    dt.set_defaults(func=cmd_dt)

    v = sub.add_parser("verify", help="fast independent-oracle checks")
    v.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        result = args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except (FactorizationError, FitError, np.linalg.LinAlgError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3
    return int(result or 0)


if __name__ == "__main__":
    sys.exit(main())
