import numpy as np
import pytest
from scipy import integrate

from riskstop.market import ExerciseGrid, GbmModel, GbmParams
from riskstop.oracle import TreeModel, random_tree, snell_envelope
from riskstop.primal import (
    Bernstein,
    BoundEstimate,
    FiniteLevels,
    RegressionPolicy,
    SearchConfig,
    TransformedPayoff,
    bernstein_lower_bound,
    evaluate_policy,
    fit_policy,
    golden_min,
    lower_bound_search,
    regression_basis,
    transformed_payoff,
    zspec_eval,
)
from riskstop.risk import (
    DiscreteMeasure,
    EmpiricalDist,
    Expectile,
    MinMaxVar,
    Semidev,
    choquet,
    semideviation,
)

IDENTITY = DiscreteMeasure([1.0], [1.0])


# -- transformed payoff and level functions -----------------------------------
def test_transformed_payoff_examples():
    c, k, x = 1.0, 0.4, 3.0
    mu = Semidev(c).measure(k)
    for y in [0.0, 2.0, 7.5]:
        expected = c * max(y - x, 0.0) + c * k * x + (1 - c * k) * y
        assert transformed_payoff(y, mu, FiniteLevels((x,))) == pytest.approx(expected, abs=1e-12)
    assert transformed_payoff(4.2, IDENTITY) == 4.2
    assert transformed_payoff(10.0, DiscreteMeasure([0.5], [1.0]), FiniteLevels((4.0,))) == pytest.approx(16.0)


def test_transformed_payoff_incompatible():
    with pytest.raises(ValueError):
        TransformedPayoff(Semidev(1.0).measure(0.5), FiniteLevels((1.0, 2.0)))
    with pytest.raises(ValueError):
        TransformedPayoff(MinMaxVar(1.0).measure(), FiniteLevels((1.0,)))
    with pytest.raises(ValueError):
        FiniteLevels((-1.0,))


def test_transformed_payoff_dominates_payoff():
    y = np.linspace(0, 30, 61)
    for mu in [Semidev(0.7).measure(0.3), Expectile(0.8).measure(0.6)]:
        for x in [0.0, 5.0, 50.0]:
            assert np.all(TransformedPayoff(mu, FiniteLevels((x,)))(y) >= y - 1e-12)


def test_zspec_examples():
    assert zspec_eval(Bernstein((2.0,)), 0.3) == pytest.approx(2 * 0.7)
    assert zspec_eval(Bernstein((2.0,)), 1.0) == 0.0
    assert zspec_eval(Bernstein((1.0, 1.0)), 0.6) == pytest.approx(1 - 0.36)
    z = Bernstein((1.0, 1.0), anchor=(5.0, 0.1))
    assert zspec_eval(z, 0.05) == pytest.approx(1 - 0.0025 + 5.0)
    assert zspec_eval(z, 0.2) == pytest.approx(1 - 0.04)
    with pytest.raises(ValueError):
        zspec_eval(z, 0.0)
    with pytest.raises(ValueError):
        Bernstein((1.0, -1.0))


def _reference_reward(y, g, z, kinks):
    # a = u^2 removes the endpoint singularity of the p = 1 density
    def h(u):
        a = u * u
        lv = zspec_eval(z, a)
        return (max(y - lv, 0.0) / a + lv) * g.density(a) * 2 * u

    edges = np.unique(np.concatenate([[0.0, 1.0], np.sqrt(kinks)]))
    return sum(integrate.quad(h, lo, hi, epsabs=1e-13, limit=200)[0] for lo, hi in zip(edges[:-1], edges[1:]))


@pytest.mark.parametrize(
    "y, z, kinks",
    [
        (0.0, Bernstein((3.0, 1.0)), []),
        (1.0, Bernstein((3.0, 1.0)), [2 - np.sqrt(2)]),
        (2.5, Bernstein((3.0, 1.0)), [0.5 - np.sqrt(0.25 - 0.5 * (3 - 2.5))]),
        (4.0, Bernstein((3.0, 1.0), anchor=(5.0, 0.1)), [0.1]),
    ],
)
def test_bernstein_reward_matches_direct_integral(y, z, kinks):
    g = MinMaxVar(1.0)
    direct = _reference_reward(y, g, z, [k for k in kinks if 0 < k < 1])
    # the fixed rule does not resolve the kink of (y - Z(a))^+ in a
    assert TransformedPayoff(g.measure(), z)(y) == pytest.approx(direct, rel=5e-4)


def test_regression_basis_alias():
    assert np.array_equal(regression_basis([100.0, 100.0], 0.0), [1] * 10 + [0, 0])


# -- fitting and evaluation ------------------------------------------------------
def test_constant_payoff():
    tree = TreeModel([[1.0], [1.0, 1.0], [1.0] * 4, [1.0] * 8])
    train, test = tree.simulate(200, 1), tree.simulate(200, 2)
    pol = fit_policy(train, IDENTITY)
    for j in (1, 2):
        cont = pol.continuation(tree, test.values[:, j], j)
        assert np.allclose(cont, 1.0, atol=1e-8)
    est = evaluate_policy(test, pol)
    assert est.value == 1.0 and est.stderr == 0.0 and est.bias_tag == "low"


def test_single_exercise_date():
    m = GbmModel(GbmParams(T=1.0, J=1))
    pol = fit_policy(m.simulate(500, 1), IDENTITY)
    assert all(c is None for c in pol.coef_)
    test = m.simulate(300, 2)
    # s0 = 90 < K, so the only sensible action is to wait for t_1
    assert np.all(pol.predict(test) == 1)


def test_two_date_decision_matches_oracle():
    for a, b, expected in [(4.0, 10.0, 1), (6.0, 10.0, 0)]:
        tree = TreeModel([[a], [0.0, b]])
        pol = fit_policy(tree.simulate(400, 1), IDENTITY, itm_only=False)
        V, EV = snell_envelope(tree, tree.payoffs)
        exact_stop = tree.payoffs[0][0] >= EV[0][0]
        tau = pol.predict(tree.simulate(50, 2))
        assert np.all(tau == (0 if exact_stop else 1))
        assert tau[0] == expected


def test_always_stop_at_start():
    tree = TreeModel([[50.0], [0.0, 10.0]])
    pol = fit_policy(tree.simulate(100, 1), IDENTITY)
    test = tree.simulate(100, 2)
    assert np.all(pol.predict(test) == 0)
    assert evaluate_policy(test, pol).value == 50.0


def test_seed_collision_and_sizes():
    m = GbmModel()
    train = m.simulate(200, 1)
    pol = fit_policy(train, IDENTITY)
    with pytest.raises(ValueError):
        evaluate_policy(m.simulate(50, 1), pol)
    with pytest.raises(ValueError):
        fit_policy(m.simulate(100, 3), IDENTITY)
    est = evaluate_policy(m.simulate(1, 4), pol)
    assert est.n == 1 and est.stderr == 0.0 and not est.stderr_defined


def test_singular_design_reports_date():
    tree = random_tree(np.random.default_rng(0), 3)
    with pytest.raises(ValueError, match="date"):
        RegressionPolicy(None, ridge=0.0, itm_only=False).fit(tree.simulate(200, 1))


def test_estimator_api():
    pol = RegressionPolicy(ridge=1e-6)
    assert pol.get_params() == {"reward": None, "ridge": 1e-6, "itm_only": True}
    assert pol.set_params(itm_only=False).itm_only is False
    with pytest.raises(Exception):
        pol.predict(GbmModel().simulate(10, 1))


def test_plain_lsm_value():
    m = GbmModel()
    pol = fit_policy(m.simulate(5000, 11), IDENTITY)
    est = evaluate_policy(m.simulate(5000, 22), pol)
    assert est.value == pytest.approx(7.94, abs=3 * np.hypot(est.stderr, 0.12))


def test_stopping_invariant_to_constant_shift():
    m = GbmModel()
    train, test = m.simulate(3000, 5), m.simulate(3000, 6)
    c, k, x = 1.0, 0.35, 12.0
    mu = Semidev(c).measure(k)
    shifted = fit_policy(train, mu, FiniteLevels((x,)))

    class Unshifted:
        # the same reward without the path-independent constant c*k*x
        def __call__(self, y):
            return shifted.reward(y) - c * k * x

    plain = RegressionPolicy(Unshifted()).fit(train)
    assert np.array_equal(shifted.predict(test), plain.predict(test))


def test_golden_min_quadratic():
    seen = golden_min(lambda v: (v - 0.3) ** 2, 0.0, 1.0, 1e-6, key=lambda v: v)
    best = min(seen, key=seen.get)
    assert best == pytest.approx(0.3, abs=1e-5)


# -- searches ---------------------------------------------------------------------
@pytest.fixture(scope="module")
def small_paths():
    m = GbmModel()
    return m.simulate(2000, 1), m.simulate(2000, 2)


def test_search_degenerate_family(small_paths):
    train, test = small_paths
    est = lower_bound_search(train, test, Semidev(0.0))
    plain = evaluate_policy(test, fit_policy(train, IDENTITY))
    assert est.value == plain.value and est.stderr == plain.stderr
    assert len(est.table) == 1


def test_search_table_consistent(small_paths):
    train, test = small_paths
    cfg = SearchConfig(grid=(0.2, 0.5), n_coarse=7, rel_tol=1e-2)
    est = lower_bound_search(train, test, Semidev(1.0), cfg)
    assert est.value == max(r["value"] for r in est.table)
    assert est.argmax["param"] in (0.2, 0.5)
    assert 0 <= est.argmax["x"] <= est.argmax["x_max"]
    # every x tried at kappa* is at least the reported min
    mu = Semidev(1.0).measure(est.argmax["param"])
    for x in np.linspace(0, est.argmax["x_max"], 5):
        v = evaluate_policy(test, fit_policy(train, mu, FiniteLevels((x,)))).value
        assert v >= est.value - 1e-12
    with pytest.raises(ValueError):
        lower_bound_search(train, train, Semidev(1.0), cfg)
    with pytest.raises(ValueError):
        lower_bound_search(train, test, Semidev(1.0), SearchConfig(grid=()))


def test_search_expectile_runs(small_paths):
    train, test = small_paths
    fam = Expectile(0.7)
    est = lower_bound_search(train, test, fam, SearchConfig(grid=tuple(fam.default_grid()[::6]), n_coarse=5, rel_tol=5e-2))
    plain = evaluate_policy(test, fit_policy(train, IDENTITY))
    assert est.value >= plain.value - 3 * plain.stderr


def test_one_date_problem_matches_static_semideviation():
    # payoff at t_0 is zero, so the rule always waits for t_1: a static problem
    m = GbmModel(GbmParams(T=1.0, J=1))
    train, test = m.simulate(2000, 1), m.simulate(4000, 2)
    c = 1.0
    y = test.payoffs()[:, 1]
    dist = EmpiricalDist.from_sample(y)
    k_star = float(np.mean(y > y.mean()))
    grid = (round(k_star, 6),)
    est = lower_bound_search(train, test, Semidev(c), SearchConfig(grid=grid, rel_tol=1e-4, x_max=float(y.max())))
    brute = choquet(dist, Semidev(c).distortion(grid[0]))
    assert est.value == pytest.approx(brute, abs=1e-3)
    assert est.value == pytest.approx(semideviation(dist, c), abs=2e-3)
    assert est.value >= semideviation(dist, c) - 2e-3


def test_bernstein_lower_bound_small():
    m = GbmModel()
    train, test = m.simulate(1500, 1), m.simulate(1500, 2)
    mu = MinMaxVar(1.0).measure()
    est = bernstein_lower_bound(train, test, mu, degree=2, coeff_max=40.0, sweeps=1, n_coarse=5, rel_tol=5e-2)
    plain = evaluate_policy(test, fit_policy(train, IDENTITY))
    assert isinstance(est, BoundEstimate) and est.bias_tag == "low"
    assert np.isfinite(est.value) and est.value >= plain.value - 3 * plain.stderr
    assert len(est.argmax["coeffs"]) == 2


def test_low_bias_on_tree():
    gen = np.random.default_rng(3)
    tree = random_tree(gen, 4)
    tree.payoffs[0][:] = 0.0
    mu = Semidev(0.5).measure(0.4)
    z = FiniteLevels((float(np.median(tree.payoffs[-1])),))
    reward = TransformedPayoff(mu, z)
    V, _ = snell_envelope(tree, [reward(p) for p in tree.payoffs])
    for seed in range(3):
        est = evaluate_policy(tree.simulate(5000, 100 + seed), fit_policy(tree.simulate(2000, seed), mu, z))
        assert est.value - 3 * est.stderr <= V[0][0]
