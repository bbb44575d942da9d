"""Acceptance criteria, each at its stated tolerance.

Every test records one PASS/FAIL line, shown in the pytest terminal summary.
Criterion 1 runs the full-size benchmark table and takes several minutes.
"""
import csv
import time

import numpy as np
import pytest

from riskstop.cli import main
from riskstop.oracle import random_tree, run_battery, snell_dual_check
from riskstop.primal import FiniteLevels, TransformedPayoff, evaluate_policy, fit_policy
from riskstop.dual import build_martingale, upper_bound
from riskstop.risk import (
    AvarLevel,
    DensityMeasure,
    EmpiricalDist,
    Expectile,
    ExpectileGamma,
    Identity,
    MinMaxVar,
    PiecewiseLinear,
    Semidev,
    SemidevKappa,
    avar,
    avar_minimization,
    choquet,
    mixture_eval,
    mu_from_distortion,
)

# published bounds: c -> (lower, lower sd, upper, upper sd)
REFERENCE = {
    0.0: (7.94, 0.116, 8.12, 0.208),
    0.5: (10.31, 0.129, 10.63, 0.250),
    1.0: (13.27, 0.174, 13.81, 0.271),
    1.5: (15.43, 0.193, 16.01, 0.302),
}


def _random_samples(n, seed):
    gen = np.random.default_rng(seed)
    out = []
    for k in range(n):
        size = int(gen.integers(1, 60))
        kind = k % 4
        if kind == 0:
            x = gen.normal(0, 10, size)
        elif kind == 1:
            x = gen.exponential(5, size)
        elif kind == 2:
            x = gen.integers(-3, 4, size).astype(float)  # many ties
        else:
            x = np.maximum(gen.normal(2, 3, size), 0.0)
        w = None if k % 3 else gen.dirichlet(np.ones(size))
        out.append(EmpiricalDist.from_sample(x, w))
    return out


def _random_concave(gen):
    k = int(gen.integers(1, 5))
    knots = np.sort(gen.uniform(0.02, 0.98, k))
    slopes = np.sort(gen.exponential(1.0, k + 1))[::-1] + 1e-3
    vals = np.concatenate([[0.0], np.cumsum(slopes * np.diff(np.concatenate([[0.0], knots, [1.0]])))])
    vals /= vals[-1]
    return PiecewiseLinear(tuple(np.concatenate([[0.0], knots, [1.0]])), tuple(vals))


def test_criterion_2_kernel_exactness(record):
    gen = np.random.default_rng(2)
    samples = _random_samples(1000, 20)
    worst_discrete, worst_density = 0.0, 0.0
    for dist in samples:
        family = [
            Identity(),
            AvarLevel(float(gen.uniform(0.01, 1.0))),
            SemidevKappa(float(gen.uniform(0, 1)), float(gen.uniform(0.01, 0.99))),
            ExpectileGamma(0.8, float(gen.uniform(0.25, 1.0))),
            _random_concave(gen),
        ]
        for g in family:
            worst_discrete = max(worst_discrete, abs(choquet(dist, g) - mixture_eval(dist, mu_from_distortion(g))))
        g = MinMaxVar(float(gen.choice([0.25, 0.5, 1.0, 2.0, 5.0])))
        worst_density = max(worst_density, abs(choquet(dist, g) - mixture_eval(dist, mu_from_distortion(g))))
    ok = record(2, "choquet equals AV@R mixture", worst_discrete <= 1e-10 and worst_density <= 1e-6,
                f"max gap discrete {worst_discrete:.2e} (tol 1e-10), density {worst_density:.2e} (tol 1e-6)")
    assert ok


def test_criterion_3_measure_mass(record):
    worst = 0.0
    measures = [mu_from_distortion(AvarLevel(a)) for a in np.linspace(0.05, 1.0, 20)]
    for c in np.linspace(0, 1, 11):
        measures += [mu_from_distortion(SemidevKappa(c, k)) for k in np.linspace(0.05, 0.95, 19)]
    for c in (0.0, 0.5, 1.0, 1.5):
        fam = Semidev(c)
        measures += [fam.measure(k) for k in fam.default_grid()]
    for alpha in np.linspace(0.55, 0.95, 9):
        fam = Expectile(alpha)
        measures += [fam.measure(g) for g in fam.default_grid()]
        measures += [mu_from_distortion(fam.distortion(g)) for g in fam.default_grid()]
    measures += [mu_from_distortion(MinMaxVar(p)) for p in (0.0, 1e-6, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0)]
    for m in measures:
        worst = max(worst, abs(m.total_mass() - 1.0))
    n_density = sum(isinstance(m, DensityMeasure) for m in measures)
    ok = record(3, "representing measures have unit mass", worst <= 1e-10,
                f"{len(measures)} measures ({n_density} with density), max |mass - 1| = {worst:.2e}")
    assert ok


def test_criterion_4_avar_two_formulas(record):
    alphas = np.round(np.arange(1, 21) * 0.05, 10)
    worst = 0.0
    for dist in _random_samples(1000, 40):
        scale = 1.0 + float(np.max(np.abs(dist.sample)))
        for a in alphas:
            worst = max(worst, abs(avar(dist, a) - avar_minimization(dist, a)) / scale)
    # both formulas are exact; only floating-point rounding separates them
    ok = record(4, "AV@R tail average equals minimisation formula", worst <= 1e-13,
                f"max relative gap {worst:.2e} over 1000 samples x 20 levels")
    assert ok


def test_criterion_5_oracle_identities(record):
    t0 = time.perf_counter()
    report = run_battery(n_trees=50, families=("avar", "semidev", "expectile"), max_depth=4, seed=0)
    elapsed = time.perf_counter() - t0
    gaps = {}
    for case in report["cases"]:
        for chk in case["checks"]:
            gaps.setdefault(chk["name"], []).append(chk["gap"])
    exact = ["lemma_per_rule", "sup_inf_equals_exact", "pathwise_dual_equality", "snell_equals_enumeration"]
    worst = {k: max(abs(g) for g in gaps[k]) for k in exact}
    min_gap = min(gaps["weak_duality_gap"])
    ok = report["n_failed"] == 0 and all(v <= 1e-12 for v in worst.values()) and min_gap >= -1e-12 and elapsed <= 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(5, "oracle exact identities on 50 trees x 3 families", ok,
           f"{report['n_cases']} cases, {detail}, min weak-duality gap {min_gap:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_6_bias_directions(record):
    gen = np.random.default_rng(6)
    rows = []
    families = [
        ("semidev", Semidev(0.8).measure(0.35)),
        ("expectile", Expectile(0.75).measure(0.6)),
        ("avar", AvarLevel(0.3).measure()),
    ]
    for t in range(4):
        tree = random_tree(gen, 4, p=0.5 if t % 2 == 0 else None)
        tree.payoffs[0][:] = 0.0
        for name, mu in families:
            x = float(np.quantile(tree.payoffs[-1], 0.6))
            z = FiniteLevels((x,))
            V0 = snell_dual_check(tree, mu, z)[0].detail["V0"]
            pol = fit_policy(tree.simulate(4000, 10 + t), mu, z)
            lo = evaluate_policy(tree.simulate(10_000, 20 + t), pol)
            outer = tree.simulate(1000, 30 + t)
            up = upper_bound(outer, build_martingale(outer, pol, 200, 40 + t), TransformedPayoff(mu, z))
            rows.append((lo.value - V0 - 3 * lo.stderr, V0 - up.value - 3 * up.stderr))
    lo_ok = all(r[0] <= 0 for r in rows)
    up_ok = all(r[1] <= 0 for r in rows)
    ok = record(6, "regression lower <= exact + 3se, nested upper >= exact - 3se", lo_ok and up_ok,
                f"{len(rows)} tree cases, max (lower - exact - 3se) {max(r[0] for r in rows):.3f}, "
                f"max (exact - upper - 3se) {max(r[1] for r in rows):.3f}")
    assert ok


def _write_config(path, out_dir, **sampling):
    import json

    cfg = {"output": {"dir": str(out_dir)}}
    if sampling:
        cfg["sampling"] = sampling
    path.write_text(json.dumps(cfg))
    return path


def test_criterion_7_determinism(record, tmp_path, monkeypatch):
    sizes = dict(n_train=1500, n_test=1500, n_outer=100, n_inner=50)
    digests = []
    for threads, sub in (("1", "a"), ("4", "b")):
        cfg = _write_config(tmp_path / f"{sub}.json", tmp_path / sub, **sizes)
        monkeypatch.setenv("RISKSTOP_THREADS", threads)
        assert main(["table1", "--config", str(cfg)]) == 0
        digests.append((tmp_path / sub / "table1.csv").read_bytes())
    ok = record(7, "table1 CSV byte-identical across thread counts", digests[0] == digests[1],
                f"{len(digests[0])} bytes, RISKSTOP_THREADS=1 vs 4")
    assert ok


@pytest.mark.slow
def test_criterion_1_table_reproduction(record, tmp_path):
    cfg = _write_config(tmp_path / "cfg.json", tmp_path / "out")
    t0 = time.perf_counter()
    assert main(["table1", "--config", str(cfg)]) == 0
    minutes = (time.perf_counter() - t0) / 60
    with open(tmp_path / "out" / "table1.csv") as fh:
        rows = [{k: float(v) for k, v in r.items()} for r in csv.DictReader(fh)]
    verdicts = []
    for r in rows:
        lo_ref, lo_sd, up_ref, up_sd = REFERENCE[r["c"]]
        z_lo = (r["lower"] - lo_ref) / np.hypot(r["lower_se"], lo_sd)
        z_up = (r["upper"] - up_ref) / np.hypot(r["upper_se"], up_sd)
        verdicts.append((r["c"], z_lo, z_up))
        print(f"c={r['c']}: lower {r['lower']:.3f} ({r['lower_se']:.3f}) z={z_lo:+.2f}; "
              f"upper {r['upper']:.3f} ({r['upper_se']:.3f}) z={z_up:+.2f}")
    within = all(abs(zl) <= 3 and abs(zu) <= 3 for _, zl, zu in verdicts)
    ordered = all(r["lower"] <= r["upper"] + 3 * np.hypot(r["lower_se"], r["upper_se"]) for r in rows)
    lows = [r["lower"] for r in rows]
    monotone = all(b >= a - 3 * np.hypot(ra["lower_se"], rb["lower_se"])
                   for a, b, ra, rb in zip(lows, lows[1:], rows, rows[1:]))
    detail = "; ".join(f"c={c}: z_low {zl:+.2f}, z_up {zu:+.2f}" for c, zl, zu in verdicts)
    ok = record(1, "benchmark table within 3 combined se", within and ordered and monotone and minutes <= 45,
                f"{detail}; lower<=upper {ordered}, monotone {monotone}, {minutes:.1f} min")
    assert ok
