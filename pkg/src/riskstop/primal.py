"""Regression stopping rules for the transformed payoff and the low-biased search.

A distorted stopping problem is turned into a family of ordinary stopping
problems for the transformed reward

    U(y) = sum_i w_i [ (y - Z(a_i))^+ / a_i + Z(a_i) ]

indexed by the level function ``Z``. Each member is solved by least-squares
Monte Carlo; the risk-adjusted value is the max over the Kusuoka family of
the min over ``Z``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import comb
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from ._parallel import pmap
from .market import PathSet, maxcall_basis
from .risk import DensityMeasure, DiscreteMeasure, RepMeasure

__all__ = [
    "FiniteLevels",
    "Bernstein",
    "zspec_eval",
    "TransformedPayoff",
    "transformed_payoff",
    "regression_basis",
    "BoundEstimate",
    "RegressionPolicy",
    "fit_policy",
    "evaluate_policy",
    "SearchConfig",
    "lower_bound_search",
    "bernstein_lower_bound",
]


# --------------------------------------------------------------------------- #
# level functions Z
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class FiniteLevels:
    """One level per atom ``a_i < 1`` of a discrete measure; the unit atom gets 0."""

    levels: tuple

    def __post_init__(self):
        lv = np.atleast_1d(np.asarray(self.levels, dtype=float))
        if np.any(lv < 0) or not np.all(np.isfinite(lv)):
            raise ValueError("levels must be finite and nonnegative")
        object.__setattr__(self, "levels", tuple(lv.tolist()))


@dataclass(frozen=True)
class Bernstein:
    """``Z(a) = sum_{i<n} b_i B_{i,n}(a) + delta 1{a <= anchor_a}``."""

    coeffs: tuple
    anchor: Optional[tuple] = None

    def __post_init__(self):
        b = np.atleast_1d(np.asarray(self.coeffs, dtype=float))
        if b.size == 0 or np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("Bernstein coefficients must be finite and nonnegative")
        object.__setattr__(self, "coeffs", tuple(b.tolist()))
        if self.anchor is not None:
            delta, a = self.anchor
            if delta < 0 or not 0 < a < 1:
                raise ValueError("anchor needs delta >= 0 and a in (0, 1)")

    @property
    def degree(self) -> int:
        return len(self.coeffs)


def zspec_eval(z, alpha):
    """Evaluate a level function at ``alpha`` in (0, 1]."""
    a = np.asarray(alpha, dtype=float)
    if np.any(a <= 0) or np.any(a > 1):
        raise ValueError("alpha must lie in (0, 1]")
    if isinstance(z, Bernstein):
        n = z.degree
        i = np.arange(n)
        basis = comb(n, i) * a[..., None] ** i * (1.0 - a[..., None]) ** (n - i)
        out = basis @ np.asarray(z.coeffs)
        if z.anchor is not None:
            delta, cut = z.anchor
            out = out + delta * (a <= cut)
    elif isinstance(z, FiniteLevels):
        raise TypeError("finite levels are attached to atoms; use TransformedPayoff")
    else:
        raise TypeError(f"unknown level function {z!r}")
    return float(out) if out.ndim == 0 else out


class TransformedPayoff:
    """The reward ``y -> int [(y - Z(a))^+ / a + Z(a)] mu(da)`` as a finite sum.

    ``alphas``, ``weights`` and ``levels`` describe the sum; a density measure
    is replaced by its quadrature rule and its atom at 1.
    """

    def __init__(self, mu: RepMeasure, z=None):
        self.mu = mu
        self.z = z
        if isinstance(mu, DiscreteMeasure):
            a, w = mu.alphas, mu.weights
            if z is None:
                lv = np.zeros_like(a)
            elif isinstance(z, FiniteLevels):
                n_free = int(np.sum(a < 1.0))
                if len(z.levels) != n_free:
                    raise ValueError(f"{n_free} levels expected for this measure, got {len(z.levels)}")
                lv = np.zeros_like(a)
                lv[a < 1.0] = z.levels
            elif isinstance(z, Bernstein):
                lv = np.where(a < 1.0, zspec_eval(z, a), 0.0)
            else:
                raise TypeError(f"unknown level function {z!r}")
        elif isinstance(mu, DensityMeasure):
            if isinstance(z, FiniteLevels):
                raise ValueError("finite levels need a discrete measure")
            # the anchor indicator jumps at its cut point; split the rule there
            cut = [z.anchor[1]] if isinstance(z, Bernstein) and z.anchor is not None else None
            a, w = mu.rule(breaks=cut)
            lv = np.zeros_like(a) if z is None else np.asarray(zspec_eval(z, a), dtype=float)
            if mu.atom_at_one > 0:
                a = np.append(a, 1.0)
                w = np.append(w, mu.atom_at_one)
                lv = np.append(lv, 0.0)
        else:
            raise TypeError(f"unknown measure {mu!r}")
        self.alphas = np.asarray(a, dtype=float)
        self.weights = np.asarray(w, dtype=float)
        self.levels = np.asarray(lv, dtype=float)

    def __repr__(self):
        return f"TransformedPayoff(mu={self.mu!r}, z={self.z!r})"

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        out = np.zeros_like(y)
        for a, w, lv in zip(self.alphas, self.weights, self.levels):
            if a == 1.0 and lv == 0.0:
                out += w * y
            else:
                out += w * (np.maximum(y - lv, 0.0) / a + lv)
        return out


def transformed_payoff(y, mu: RepMeasure, z=None):
    return TransformedPayoff(mu, z)(y)


def regression_basis(prices, payoff, K: float = 100.0):
    return maxcall_basis(prices, payoff, K)


# --------------------------------------------------------------------------- #
# estimates
# --------------------------------------------------------------------------- #
@dataclass
class BoundEstimate:
    value: float
    stderr: float
    n: int
    bias_tag: str
    argmax: Optional[dict] = None
    table: list = field(default_factory=list, repr=False)

    @classmethod
    def from_samples(cls, samples, bias_tag: str, **kw) -> "BoundEstimate":
        s = np.asarray(samples, dtype=float)
        se = float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else 0.0
        return cls(float(s.mean()), se, int(s.size), bias_tag, **kw)

    @property
    def stderr_defined(self) -> bool:
        return self.n > 1


# --------------------------------------------------------------------------- #
# regression policy
# --------------------------------------------------------------------------- #
class RegressionPolicy(BaseEstimator):
    """Least-squares Monte Carlo stopping rule for a transformed payoff.

    Parameters
    ----------
    reward : TransformedPayoff, optional
        Map from raw payoff to reward. ``None`` means the raw payoff.
    ridge : float
        Ridge weight on the normalised normal equations.
    itm_only : bool
        Regress and allow early exercise only where the raw payoff is positive.
    """

    def __init__(self, reward=None, ridge=1e-8, itm_only=True):
        self.reward = reward
        self.ridge = ridge
        self.itm_only = itm_only

    def _reward(self, y):
        return y if self.reward is None else self.reward(y)

    def _exercise_region(self, y):
        return y > 0 if self.itm_only else np.ones(np.shape(y), dtype=bool)

    def fit(self, X: PathSet, y=None):
        paths = X
        model = paths.model
        n, n_dates = paths.n_paths, paths.n_dates
        J = n_dates - 1
        nf = model.n_features
        if n < 10 * nf:
            raise ValueError(f"need at least {10 * nf} training paths for {nf} basis functions, got {n}")
        Y = paths.payoffs()
        U = self._reward(Y)
        cash = U[:, J].copy()
        coef = [None] * n_dates
        offset = np.zeros(n_dates)
        for j in range(J - 1, 0, -1):
            states = paths.values[:, j]
            region = self._exercise_region(Y[:, j])
            if not region.any():
                continue
            Xj = model.features(states[region], j, Y[region, j])
            target = cash[region]
            mean = target.mean()
            beta = _ridge_solve(Xj, target - mean, self.ridge, j)
            coef[j] = beta
            offset[j] = mean
            cont = np.sum(Xj * beta, axis=1) + mean
            stop = U[region, j] >= cont
            idx = np.flatnonzero(region)[stop]
            cash[idx] = U[idx, j]
        if n_dates > 1:
            # the start state is common to every path, so the continuation is a constant
            self.start_continuation_ = float(cash.mean())
        self.coef_ = coef
        self.offset_ = offset
        self.n_dates_ = n_dates
        self.train_seed_ = paths.seed
        self.train_ids_ = (int(paths.path_ids.min()), int(paths.path_ids.max()))
        return self

    def _check_fitted(self):
        if not hasattr(self, "coef_"):
            raise NotFittedError("RegressionPolicy is not fitted yet")

    def continuation(self, model, states, j: int, payoff=None):
        """Fitted continuation value at date ``j``."""
        self._check_fitted()
        if j == 0:
            return np.full(np.shape(states)[:-1], self.start_continuation_)
        if j >= self.n_dates_ - 1:
            return np.full(np.shape(states)[:-1], -np.inf)
        beta = self.coef_[j]
        if beta is None:
            return np.full(np.shape(states)[:-1], np.inf)
        F = model.features(states, j, payoff)
        return np.sum(F * beta, axis=-1) + self.offset_[j]

    def stop_mask(self, model, states, j: int, payoff=None):
        """Whether the rule stops at date ``j`` in each state."""
        if payoff is None:
            payoff = model.payoff(states, j)
        if j >= self.n_dates_ - 1:
            return np.ones(np.shape(payoff), dtype=bool)
        region = self._exercise_region(payoff)
        return region & (self._reward(payoff) >= self.continuation(model, states, j, payoff))

    def stop_matrix(self, paths: PathSet) -> np.ndarray:
        Y = paths.payoffs()
        return np.stack(
            [self.stop_mask(paths.model, paths.values[:, j], j, Y[:, j]) for j in range(paths.n_dates)], axis=1
        )

    def predict(self, X: PathSet):
        """First stopping date index on each path."""
        self._check_fitted()
        return np.argmax(self.stop_matrix(X), axis=1)

    def rewards(self, X: PathSet):
        tau = self.predict(X)
        Y = X.payoffs()
        return self._reward(Y[np.arange(X.n_paths), tau])

    def evaluate(self, X: PathSet) -> BoundEstimate:
        self._check_fitted()
        if X.seed == self.train_seed_:
            raise ValueError("test paths must use a different seed from the training paths")
        return BoundEstimate.from_samples(self.rewards(X), "low")

    def score(self, X: PathSet, y=None) -> float:
        return float(self.rewards(X).mean())


def _ridge_solve(X, y, ridge, j):
    n = X.shape[0]
    A = X.T @ X / n
    b = X.T @ y / n
    A[np.diag_indices_from(A)] += ridge
    try:
        beta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise ValueError(f"singular regression design at exercise date {j}") from exc
    if not np.all(np.isfinite(beta)):
        raise ValueError(f"non-finite regression coefficients at exercise date {j}")
    return beta


def fit_policy(train: PathSet, mu: RepMeasure, z=None, ridge=1e-8, itm_only=True) -> RegressionPolicy:
    return RegressionPolicy(TransformedPayoff(mu, z), ridge=ridge, itm_only=itm_only).fit(train)


def evaluate_policy(test: PathSet, policy: RegressionPolicy) -> BoundEstimate:
    return policy.evaluate(test)


# --------------------------------------------------------------------------- #
# search over the Kusuoka family and the level x
# --------------------------------------------------------------------------- #
@dataclass
class SearchConfig:
    """Outer family grid and inner golden-section settings."""

    grid: Optional[Sequence[float]] = None
    n_coarse: int = 25
    rel_tol: float = 1e-3
    x_max: Optional[float] = None
    x_max_quantile: float = 0.995
    ridge: float = 1e-8
    itm_only: bool = True

    def family_grid(self, family) -> np.ndarray:
        g = family.default_grid() if self.grid is None else np.asarray(self.grid, dtype=float)
        if g.size == 0:
            raise ValueError("the family grid is empty")
        for v in g:
            family.check_param(float(v))
        return g


_GOLD = (np.sqrt(5.0) - 1.0) / 2.0


def golden_min(f, lo, hi, tol, key=lambda v: v.value):
    """Golden-section minimisation on [lo, hi]; returns every evaluated point."""
    seen = {}

    def F(x):
        if x not in seen:
            seen[x] = f(x)
        return seen[x]

    a, b = lo, hi
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    while b - a > tol:
        if key(F(c)) <= key(F(d)):
            b, d = d, c
            c = b - _GOLD * (b - a)
        else:
            a, c = c, d
            d = a + _GOLD * (b - a)
    F(0.5 * (a + b))
    return seen


def _minimise_level(objective, x_max, n_coarse, rel_tol):
    xs = np.linspace(0.0, x_max, n_coarse)
    seen = {float(x): objective(float(x)) for x in xs}
    vals = np.array([seen[float(x)].value for x in xs])
    i = int(np.argmin(vals))
    lo, hi = xs[max(i - 1, 0)], xs[min(i + 1, n_coarse - 1)]
    if hi > lo:
        seen.update(golden_min(objective, float(lo), float(hi), rel_tol * x_max))
    best_x = min(seen, key=lambda x: (seen[x].value, x))
    return best_x, seen[best_x], seen


def lower_bound_search(train: PathSet, test: PathSet, family, cfg: Optional[SearchConfig] = None) -> BoundEstimate:
    """``max`` over the family grid of ``min`` over ``x >= 0`` of policy values.

    Each ``(param, x)`` cell fits a fresh policy on ``train`` and evaluates it
    on ``test``; both path sets are shared by all cells.
    """
    cfg = cfg or SearchConfig()
    if test.seed == train.seed:
        raise ValueError("training and testing seeds must differ")
    grid = cfg.family_grid(family)
    if family.degenerate:
        grid = grid[:1]
    x_max = cfg.x_max
    if x_max is None:
        x_max = float(np.quantile(train.payoffs(), cfg.x_max_quantile))
    if not x_max > 0:
        x_max = 1.0

    def cell_value(mu, x):
        z = FiniteLevels((x,)) if x is not None else None
        return fit_policy(train, mu, z, cfg.ridge, cfg.itm_only).evaluate(test)

    def cell(param):
        mu = family.measure(float(param))
        n_free = int(np.sum(mu.alphas < 1.0))
        if n_free == 0:
            est = cell_value(mu, None)
            return {"param": float(param), "x": 0.0, "value": est.value, "stderr": est.stderr, "n": est.n}
        if n_free > 1:
            raise ValueError("the level search handles one free atom")
        x, est, _ = _minimise_level(lambda x: cell_value(mu, x), x_max, cfg.n_coarse, cfg.rel_tol)
        return {"param": float(param), "x": float(x), "value": est.value, "stderr": est.stderr, "n": est.n}

    table = pmap(cell, grid)
    best = max(range(len(table)), key=lambda k: (table[k]["value"], -k))
    row = table[best]
    return BoundEstimate(
        row["value"],
        row["stderr"],
        row["n"],
        "low",
        argmax={"param": row["param"], "x": row["x"], "x_max": x_max},
        table=table,
    )


def bernstein_lower_bound(train: PathSet, test: PathSet, mu: RepMeasure, degree: int, coeff_max: float,
                          anchor=None, sweeps: int = 2, n_coarse: int = 9, rel_tol: float = 1e-2,
                          ridge: float = 1e-8, itm_only: bool = True) -> BoundEstimate:
    """Minimise the policy value over Bernstein level functions of one degree.

    Coordinate descent: each coefficient in turn is set by a coarse grid on
    ``[0, coeff_max]`` refined by golden section, the others held fixed.
    """
    if degree < 1:
        raise ValueError("degree must be at least 1")
    b = np.zeros(degree)
    cache = {}

    def value(coeffs):
        key = tuple(np.round(coeffs, 12))
        if key not in cache:
            z = Bernstein(tuple(coeffs), anchor)
            pol = RegressionPolicy(TransformedPayoff(mu, z), ridge=ridge, itm_only=itm_only).fit(train)
            cache[key] = pol.evaluate(test)
        return cache[key]

    for _ in range(sweeps):
        for i in range(degree):
            def obj(x, i=i):
                trial = b.copy()
                trial[i] = x
                return value(trial)

            x, _, _ = _minimise_level(obj, coeff_max, n_coarse, rel_tol)
            b[i] = x
    est = value(b)
    return BoundEstimate(est.value, est.stderr, est.n, "low", argmax={"coeffs": b.tolist(), "anchor": anchor})
