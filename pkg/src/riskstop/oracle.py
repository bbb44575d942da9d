"""Exact optimal stopping on small binary trees.

Stopping rules are enumerated exhaustively, distorted expectations of the
stopped payoff are computed exactly, and the primal and dual identities of
the transformed problem are checked node by node. A :class:`TreeModel` also
speaks the simulation protocol of :class:`~riskstop.market.GbmModel`, so the
Monte Carlo bounds can be run on it and compared with exact values.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from ._validation import check_positive_int
from .market import PathSet
from .primal import FiniteLevels, TransformedPayoff
from .risk import (
    AvarLevel,
    DiscreteMeasure,
    EmpiricalDist,
    Expectile,
    Identity,
    SemidevKappa,
    ExpectileGamma,
    avar,
    choquet,
)

__all__ = [
    "TreeModel",
    "StoppingRule",
    "CheckResult",
    "enumerate_rules",
    "rule_value",
    "exact_value",
    "snell_envelope",
    "snell_dual_check",
    "primal_identity_check",
    "random_tree",
    "run_battery",
]

RULE_BUDGET = 2**20
TOL = 1e-12


class TreeModel:
    """Binary tree of depth ``D``; node ``(j, k)`` has children ``(j+1, 2k)`` and ``(j+1, 2k+1)``.

    Parameters
    ----------
    payoffs : list of arrays
        ``payoffs[j]`` holds the ``2**j`` nonnegative node payoffs at depth ``j``.
    probs : list of arrays, optional
        ``probs[j][k]`` is the probability of moving from ``(j, k)`` to its
        first child. Defaults to 1/2 everywhere.
    """

    state_dim = 1

    def __init__(self, payoffs, probs=None):
        self.payoffs = [np.asarray(p, dtype=float).reshape(-1) for p in payoffs]
        D = len(self.payoffs) - 1
        if not 0 <= D <= 5:
            raise ValueError("tree depth must lie in 0..5")
        for j, p in enumerate(self.payoffs):
            if p.size != 2**j:
                raise ValueError(f"depth {j} needs {2**j} payoffs, got {p.size}")
            if np.any(p < 0) or not np.all(np.isfinite(p)):
                raise ValueError("payoffs must be finite and nonnegative")
        if probs is None:
            probs = [np.full(2**j, 0.5) for j in range(D)]
        self.probs = [np.asarray(q, dtype=float).reshape(-1) for q in probs]
        if len(self.probs) != D or any(q.size != 2**j for j, q in enumerate(self.probs)):
            raise ValueError("one branching probability per internal node is required")
        if any(np.any((q <= 0) | (q >= 1)) for q in self.probs):
            raise ValueError("branching probabilities must lie in (0, 1)")
        self.depth = D

    def __repr__(self):
        return f"TreeModel(depth={self.depth})"

    # -- structure ---------------------------------------------------------
    @property
    def n_dates(self) -> int:
        return self.depth + 1

    @property
    def n_leaves(self) -> int:
        return 2**self.depth

    @property
    def n_internal(self) -> int:
        return 2**self.depth - 1

    def leaf_probs(self) -> np.ndarray:
        w = np.ones(1)
        for q in self.probs:
            w = np.stack([w * q, w * (1.0 - q)], axis=1).reshape(-1)
        return w

    def node_on_path(self, leaf, j):
        return np.asarray(leaf) >> (self.depth - j)

    def path_payoffs(self) -> np.ndarray:
        """Payoff along each root-to-leaf path, shape ``(n_leaves, D + 1)``."""
        leaves = np.arange(self.n_leaves)
        return np.stack([self.payoffs[j][self.node_on_path(leaves, j)] for j in range(self.n_dates)], axis=1)

    # -- simulation protocol ------------------------------------------------
    @property
    def n_features(self) -> int:
        return 2 ** max(self.depth - 1, 0)

    def payoff(self, states, j: int):
        k = np.asarray(states)[..., 0].astype(np.int64)
        return self.payoffs[j][k]

    def features(self, states, j: int, payoff=None):
        k = np.asarray(states)[..., 0].astype(np.int64)
        out = np.zeros(k.shape + (self.n_features,))
        np.put_along_axis(out, k[..., None], 1.0, axis=-1)
        return out

    def _walk(self, start, u, j0):
        # start: (...,) node indices at depth j0; u: (..., steps) uniforms
        steps = u.shape[-1]
        out = np.empty(start.shape + (steps + 1,), dtype=np.int64)
        out[..., 0] = start
        k = start
        for s in range(steps):
            q = self.probs[j0 + s][k]
            k = 2 * k + (u[..., s] >= q)
            out[..., s + 1] = k
        return out

    def simulate(self, n_paths: int, seed: int, first_path: int = 0) -> PathSet:
        check_positive_int(n_paths, "n_paths")
        D = self.depth
        u = np.stack([rng.substream(seed, rng.OUTER, first_path + i).random(D) for i in range(n_paths)])
        nodes = self._walk(np.zeros(n_paths, dtype=np.int64), u, 0)
        ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
        return PathSet(nodes[..., None].astype(float), int(seed), ids, self)

    def simulate_from(self, states, j: int, n_inner: int, seed: int, path_ids) -> np.ndarray:
        k = np.asarray(states)[..., 0].astype(np.int64)
        steps = self.depth - j
        u = np.stack([rng.substream(seed, rng.INNER, int(pid), j).random((n_inner, steps)) for pid in path_ids])
        start = np.broadcast_to(k[:, None], (k.size, n_inner))
        return self._walk(start, u, j)[..., None].astype(float)


@dataclass(frozen=True, eq=False)
class StoppingRule:
    """Stopping depth on every root-to-leaf path of a tree."""

    stop_depth: np.ndarray

    def validate(self, tree: TreeModel) -> None:
        s = np.asarray(self.stop_depth)
        D = tree.depth
        if s.shape != (tree.n_leaves,) or np.any(s < 0) or np.any(s > D):
            raise ValueError("one stopping depth in 0..D per leaf is required")
        leaves = np.arange(tree.n_leaves)
        for j in range(D + 1):
            node = leaves >> (D - j)
            for k in np.unique(node):
                below = s[node == k]
                if np.any(below == j) and not np.all(below == j):
                    raise ValueError(f"rule is not adapted at node ({j}, {k})")

    def nodes(self, tree: TreeModel) -> set:
        leaves = np.arange(tree.n_leaves)
        return {(int(j), int(leaf >> (tree.depth - j))) for leaf, j in zip(leaves, self.stop_depth)}

    def stopped_values(self, tree: TreeModel, node_values=None) -> np.ndarray:
        vals = tree.payoffs if node_values is None else node_values
        leaves = np.arange(tree.n_leaves)
        return np.array([vals[j][leaf >> (tree.depth - j)] for leaf, j in zip(leaves, self.stop_depth)])


def _rules_below(D, j):
    # every adapted rule restricted to the subtree of a depth-j node
    if j == D:
        return [np.array([D])]
    child = _rules_below(D, j + 1)
    out = [np.full(2 ** (D - j), j)]
    out.extend(np.concatenate([a, b]) for a in child for b in child)
    return out


def enumerate_rules(tree: TreeModel) -> list:
    """Every stopping rule of the tree exactly once."""
    if 2**tree.n_internal > RULE_BUDGET:
        raise ValueError(f"{tree.n_internal} internal nodes exceed the enumeration budget of 2**20")
    # subtrees at the same depth are isomorphic, so one enumeration per depth suffices
    return [StoppingRule(s) for s in _rules_below(tree.depth, 0)]


def _stopped_matrix(tree: TreeModel, rules, node_values=None) -> np.ndarray:
    vals = tree.path_payoffs() if node_values is None else node_values
    S = np.stack([r.stop_depth for r in rules])
    return np.take_along_axis(vals[None, :, :], S[:, :, None], axis=2)[:, :, 0]


def _path_values(tree: TreeModel, node_values) -> np.ndarray:
    leaves = np.arange(tree.n_leaves)
    return np.stack([node_values[j][leaves >> (tree.depth - j)] for j in range(tree.n_dates)], axis=1)


def rule_value(tree: TreeModel, rule: StoppingRule, g) -> float:
    """Distorted expectation of the stopped payoff under ``rule``."""
    dist = EmpiricalDist.from_sample(rule.stopped_values(tree), tree.leaf_probs())
    return choquet(dist, g)


def exact_value(tree: TreeModel, g):
    """``(max over rules of rule_value, maximising rule)``."""
    rules = enumerate_rules(tree)
    w = tree.leaf_probs()
    X = _stopped_matrix(tree, rules)
    vals = np.array([choquet(EmpiricalDist.from_sample(x, w), g) for x in X])
    best = int(np.argmax(vals))
    return float(vals[best]), rules[best]


def snell_envelope(tree: TreeModel, node_values):
    """Backward induction; returns ``(V, EV)`` per depth with ``EV[j]`` the continuation at depth ``j``."""
    D = tree.depth
    V = [None] * (D + 1)
    EV = [None] * (D + 1)
    V[D] = np.asarray(node_values[D], dtype=float)
    EV[D] = np.full(2**D, -np.inf)
    for j in range(D - 1, -1, -1):
        q = tree.probs[j]
        EV[j] = q * V[j + 1][0::2] + (1.0 - q) * V[j + 1][1::2]
        V[j] = np.maximum(node_values[j], EV[j])
    return V, EV


@dataclass
class CheckResult:
    name: str
    passed: bool
    gap: float
    detail: dict = field(default_factory=dict)

    def to_dict(self):
        return {"name": self.name, "status": "pass" if self.passed else "fail", "gap": self.gap, **self.detail}


def snell_dual_check(tree: TreeModel, mu, z=None, martingale=None, tol: float = TOL) -> list:
    """Snell envelope of the transformed payoff against enumeration and the pathwise dual.

    ``martingale`` optionally replaces the Doob martingale ``M*`` by a
    user-supplied ``(n_leaves, D + 1)`` array, to exercise the failure path.
    """
    reward = TransformedPayoff(mu, z)
    U = [reward(p) for p in tree.payoffs]
    V, EV = snell_envelope(tree, U)
    V0 = float(V[0][0])
    D = tree.depth
    Vp = _path_values(tree, V)
    Up = _path_values(tree, U)
    leaves = np.arange(tree.n_leaves)
    dM = np.zeros((tree.n_leaves, D + 1))
    for j in range(1, D + 1):
        parent = leaves >> (D - j + 1)
        dM[:, j] = Vp[:, j] - EV[j - 1][parent]
    M = np.cumsum(dM, axis=1) if martingale is None else np.asarray(martingale, dtype=float)

    results = []
    if 2**tree.n_internal <= RULE_BUDGET:
        rules = enumerate_rules(tree)
        best = float(np.max(_stopped_matrix(tree, rules, Up) @ tree.leaf_probs()))
        gap = abs(best - V0)
        results.append(CheckResult("snell_equals_enumeration", gap <= tol, gap, {"V0": V0, "max_rule": best}))
    pathwise = np.max(Up - M, axis=1)
    gap = float(np.max(np.abs(pathwise - V0)))
    results.append(CheckResult("pathwise_dual_equality", gap <= tol, gap, {"V0": V0}))
    w = tree.leaf_probs()
    if martingale is None:
        # the conditional-mean-zero property of M*, node by node
        mg = 0.0
        for j in range(1, D + 1):
            parent = leaves >> (D - j + 1)
            m = np.bincount(parent, weights=w * dM[:, j], minlength=2 ** (j - 1))
            mg = max(mg, float(np.max(np.abs(m))))
        results.append(CheckResult("doob_martingale_property", mg <= tol, mg))
    zero_bound = float(np.dot(np.max(Up, axis=1), w))
    results.append(CheckResult("zero_martingale_upper", zero_bound >= V0 - tol, zero_bound - V0,
                               {"mean_pathwise_max": zero_bound}))
    return results


def _quantile_left(dist: EmpiricalDist, level: float) -> float:
    # left-continuous quantile F^{<-}(level) = inf{x : F(x) >= level}
    F = np.cumsum(dist.weights)
    k = int(np.searchsorted(F, level - 1e-15, side="left"))
    return float(dist.sample[min(k, dist.sample.size - 1)])


def primal_identity_check(tree: TreeModel, g, x_grid=None, tol: float = TOL, max_grid_cells: int = 200_000) -> list:
    """Check the level-function representations of the distorted stopping value.

    (a) per rule, the minimum over levels on ``x_grid`` of the transformed
    expectation equals the distorted expectation, attained at the left
    quantile; (b) the max-min equals :func:`exact_value`; (c) the min-max is
    not below it, and the gap is reported.
    """
    mu = g.measure()
    if not isinstance(mu, DiscreteMeasure):
        raise ValueError("the identity check needs a finitely supported measure")
    grid = np.unique(np.concatenate([[0.0]] + [p for p in tree.payoffs])) if x_grid is None else np.unique(np.asarray(x_grid, dtype=float))
    rules = enumerate_rules(tree)
    w = tree.leaf_probs()
    X = _stopped_matrix(tree, rules)
    free = mu.alphas < 1.0
    a_free, w_free = mu.alphas[free], mu.weights[free]
    w_unit = float(mu.weights[~free].sum())

    lemma_gap = 0.0
    quantile_gap = 0.0
    inf_vals = np.empty(len(rules))
    choq = np.empty(len(rules))
    for r, x in enumerate(X):
        dist = EmpiricalDist.from_sample(x, w)
        # E[(Y - x)^+] on every grid level at once
        excess = np.maximum(x[None, :] - grid[:, None], 0.0) @ w
        total = w_unit * float(np.dot(x, w))
        for a, wt in zip(a_free, w_free):
            obj = excess / a + grid
            total += wt * float(obj.min())
            q = _quantile_left(dist, 1.0 - a)
            at_q = float(np.dot(np.maximum(x - q, 0.0), w)) / a + q
            quantile_gap = max(quantile_gap, abs(at_q - avar(dist, a)))
        inf_vals[r] = total
        choq[r] = choquet(dist, g)
        lemma_gap = max(lemma_gap, abs(total - choq[r]))

    exact = float(np.max(choq))
    sup_inf = float(np.max(inf_vals))
    res = [
        CheckResult("lemma_per_rule", lemma_gap <= tol, lemma_gap, {"rules": len(rules)}),
        CheckResult("left_quantile_minimiser", quantile_gap <= tol, quantile_gap),
        CheckResult("sup_inf_equals_exact", abs(sup_inf - exact) <= tol, abs(sup_inf - exact),
                    {"exact": exact, "sup_inf": sup_inf}),
    ]

    n_cells = grid.size ** int(free.sum())
    if n_cells > max_grid_cells:
        raise ValueError(f"{n_cells} level vectors exceed the grid budget")
    best = np.inf
    for levels in itertools.product(grid, repeat=int(free.sum())):
        reward = TransformedPayoff(mu, FiniteLevels(levels) if levels else None)
        V, _ = snell_envelope(tree, [reward(p) for p in tree.payoffs])
        best = min(best, float(V[0][0]))
    gap = best - exact
    res.append(CheckResult("weak_duality_gap", gap >= -tol, gap, {"inf_sup": best, "exact": exact}))
    return res


# --------------------------------------------------------------------------- #
# random instances and the battery
# --------------------------------------------------------------------------- #
def random_tree(gen: np.random.Generator, depth: int, p: Optional[float] = 0.5, scale: float = 10.0,
                zero_frac: float = 0.25) -> TreeModel:
    """Tree with rounded uniform payoffs, a share of them zero."""
    payoffs = []
    for j in range(depth + 1):
        y = np.round(gen.uniform(0.0, scale, 2**j), 2)
        y[gen.random(2**j) < zero_frac] = 0.0
        payoffs.append(y)
    if p is None:
        probs = [np.round(gen.uniform(0.2, 0.8, 2**j), 2) for j in range(depth)]
    else:
        probs = [np.full(2**j, p) for j in range(depth)]
    return TreeModel(payoffs, probs)


def _random_family(gen, name):
    if name == "avar":
        return AvarLevel(float(np.round(gen.uniform(0.05, 0.95), 2)))
    if name == "semidev":
        return SemidevKappa(float(np.round(gen.uniform(0.1, 1.0), 2)), float(np.round(gen.uniform(0.05, 0.95), 2)))
    if name == "expectile":
        alpha = float(np.round(gen.uniform(0.55, 0.95), 2))
        lo, hi = Expectile(alpha).bounds()
        return ExpectileGamma(alpha, float(lo + (hi - lo) * gen.uniform(0.05, 0.95)))
    if name == "identity":
        return Identity()
    raise ValueError(f"unknown family {name!r}")


def run_battery(n_trees: int = 50, families=("avar", "semidev", "expectile"), max_depth: int = 4, seed: int = 0,
                corrupt: bool = False) -> dict:
    """Primal and dual checks on random trees; ``corrupt`` perturbs the dual martingale."""
    gen = np.random.default_rng(seed)
    cases = []
    for t in range(n_trees):
        depth = int(gen.integers(1, max_depth + 1))
        tree = random_tree(gen, depth, p=0.5 if t % 2 == 0 else None)
        for fam in families:
            g = _random_family(gen, fam)
            mu = g.measure()
            free = int(np.sum(mu.alphas < 1.0))
            levels = tuple(gen.choice(np.concatenate([[0.0], tree.payoffs[-1]]), size=free).tolist())
            z = FiniteLevels(levels) if free else None
            mart = None
            if corrupt:
                mart = gen.normal(size=(tree.n_leaves, tree.n_dates))
                mart[:, 0] = 0.0
            checks = primal_identity_check(tree, g) + snell_dual_check(tree, mu, z, martingale=mart)
            cases.append({"tree": t, "depth": depth, "family": fam, "distortion": repr(g),
                          "checks": [c.to_dict() for c in checks]})
    failed = [(c["tree"], c["family"], ch["name"]) for c in cases for ch in c["checks"] if ch["status"] == "fail"]
    return {"n_cases": len(cases), "n_failed": len(failed), "failed": failed, "cases": cases}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
