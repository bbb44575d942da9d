"""Distortion functions, representing measures and static risk evaluation.

Every functional here acts on a finite (weighted) sample and is computed
exactly, except integrals against a continuous representing measure which
use composite Gauss quadrature split at the sample's kinks.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from ._validation import check_probability, check_unit_interval

__all__ = [
    "Distortion",
    "Identity",
    "AvarLevel",
    "MinMaxVar",
    "PiecewiseLinear",
    "SemidevKappa",
    "ExpectileGamma",
    "DiscreteMeasure",
    "DensityMeasure",
    "EmpiricalDist",
    "Semidev",
    "Expectile",
    "g_eval",
    "g_right_derivative",
    "mu_from_distortion",
    "avar",
    "avar_minimization",
    "choquet",
    "mixture_eval",
    "semideviation",
    "expectile",
    "kusuoka_family",
]


# --------------------------------------------------------------------------- #
# representing measures
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class DiscreteMeasure:
    """Finitely supported measure on (0, 1].

    Parameters
    ----------
    alphas : array_like
        Atom locations in (0, 1], strictly increasing.
    weights : array_like
        Atom masses. Must be nonnegative unless ``signed`` is set, which is
        only used for the non-coherent semideviation with ``c > 1``.
    """

    alphas: np.ndarray
    weights: np.ndarray
    signed: bool = False

    def __post_init__(self):
        a = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        if a.shape != w.shape or a.ndim != 1 or a.size == 0:
            raise ValueError("alphas and weights must be nonempty 1-d arrays of equal length")
        if np.any(a <= 0) or np.any(a > 1):
            raise ValueError("atoms must lie in (0, 1]")
        if np.any(np.diff(a) <= 0):
            raise ValueError("atoms must be strictly increasing")
        if not self.signed and np.any(w < 0):
            raise ValueError("atom weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise ValueError(f"total mass {w.sum()!r} differs from 1")
        object.__setattr__(self, "alphas", a)
        object.__setattr__(self, "weights", w)

    def total_mass(self) -> float:
        return float(self.weights.sum())

    def atoms(self):
        return list(zip(self.alphas.tolist(), self.weights.tolist()))

    @property
    def has_unit_atom(self) -> bool:
        return bool(self.alphas[-1] == 1.0)

    def rule(self, breaks=None):
        return self.alphas, self.weights


@dataclass(frozen=True)
class DensityMeasure:
    """Absolutely continuous measure on (0, 1) plus an optional atom at 1.

    Integration uses the substitution ``alpha = u**power``, after which the
    density reads ``(1 - u)**(order - 1) * smooth(u)`` with ``smooth``
    regular on [0, 1]. Interior panels use Gauss-Legendre. On the panel
    touching 1 the value of the integrand at 1 is subtracted, the remainder
    divided by ``1 - u`` goes through Gauss-Jacobi with exponent ``order``,
    and the exact panel mass times the value at 1 becomes a node at 1. The
    panel mass is therefore exact for constant ``smooth`` at any ``order > 0``.
    """

    density: Callable[[np.ndarray], np.ndarray]
    power: float = 1.0
    endpoint_order: float = 1.0
    atom_at_one: float = 0.0
    n_nodes: int = 64
    smooth: Optional[Callable[[np.ndarray], np.ndarray]] = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self.endpoint_order > 0:
            raise ValueError("endpoint_order must be positive")
        if self.endpoint_order != 1.0 and self.smooth is None:
            raise ValueError("a singular endpoint needs the smooth factor in closed form")

    def _jacobian(self, u):
        # f(u^q) * q * u^(q-1): the density seen in the substituted variable
        q = self.power
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.density(u**q) * q * u ** (q - 1.0)

    def rule(self, breaks=None):
        """Nodes (in alpha) and weights of the composite quadrature.

        Parameters
        ----------
        breaks : array_like, optional
            Points of (0, 1) where the integrand has kinks; panels are split
            there so that each panel sees a smooth integrand.
        """
        key = None
        if breaks is None:
            key = "default"
            if key in self._cache:
                return self._cache[key]
        q = self.power
        edges = np.array([0.0, 1.0])
        if breaks is not None:
            b = np.asarray(breaks, dtype=float)
            b = b[(b > 0) & (b < 1)]
            edges = np.unique(np.concatenate([edges, b ** (1.0 / q)]))
        n = self.n_nodes
        x_leg, w_leg = roots_legendre(n)
        nu = self.endpoint_order
        singular = nu != 1.0
        if singular:
            x_jac, w_jac = roots_jacobi(n, nu, 0.0)
            s1 = float(self.smooth(np.ones(1))[0])
        nodes, weights = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            half = 0.5 * (hi - lo)
            if hi == 1.0 and singular:
                u = 1.0 - half * (1.0 - x_jac)
                ratio = half**nu * w_jac / (1.0 - x_jac)
                at_one = s1 * ((1.0 - lo) ** nu / nu - ratio.sum())
                nodes.append(np.append(u**q, 1.0))
                weights.append(np.append(ratio * self.smooth(u), at_one))
                continue
            u = lo + half * (x_leg + 1.0)
            nodes.append(u**q)
            weights.append(w_leg * half * self._jacobian(u))
        out = np.concatenate(nodes), np.concatenate(weights)
        if key is not None:
            self._cache[key] = out
        return out

    def total_mass(self) -> float:
        _, w = self.rule()
        return float(w.sum() + self.atom_at_one)


RepMeasure = Union[DiscreteMeasure, DensityMeasure]


# --------------------------------------------------------------------------- #
# distortion functions
# --------------------------------------------------------------------------- #
class Distortion:
    """Concave distortion ``g`` on [0, 1] with ``g(0) = 0`` and ``g(1) = 1``."""

    def _eval(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _slope(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, u):
        u = check_unit_interval(u, "u")
        out = self._eval(np.asarray(u, dtype=float))
        return float(out) if np.ndim(out) == 0 else out

    def derivative(self, u):
        """Right derivative on (0, 1)."""
        arr = np.asarray(u, dtype=float)
        if np.any(arr <= 0) or np.any(arr >= 1):
            raise ValueError("right derivative is defined on the open interval (0, 1)")
        out = self._slope(arr)
        return float(out) if np.ndim(out) == 0 else out

    def measure(self) -> RepMeasure:
        raise NotImplementedError

    def check(self, n_grid: int = 1001, tol: float = 1e-12) -> None:
        """Assert the distortion axioms on a uniform grid."""
        u = np.linspace(0.0, 1.0, n_grid)
        g = self._eval(u)
        if abs(g[0]) > tol or abs(g[-1] - 1.0) > tol:
            raise ValueError("distortion must satisfy g(0)=0 and g(1)=1")
        if np.any(np.diff(g) < -tol):
            raise ValueError("distortion must be nondecreasing")
        mid = self._eval(0.5 * (u[:-2] + u[2:]))
        if np.any(mid < 0.5 * (g[:-2] + g[2:]) - tol):
            raise ValueError("distortion must be concave")
        if np.any(g < u - tol):
            raise ValueError("concave distortion must dominate the identity")
        s = self._slope(u[1:-1])
        if np.any(np.diff(s) > tol * max(1.0, float(np.max(np.abs(s))))):
            raise ValueError("right derivative must be nonincreasing")


@dataclass(frozen=True)
class PiecewiseLinear(Distortion):
    """Concave piecewise-linear distortion through ``(knots[i], values[i])``."""

    knots: tuple
    values: tuple

    def __post_init__(self):
        k = np.asarray(self.knots, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if k.ndim != 1 or k.shape != v.shape or k.size < 2:
            raise ValueError("knots and values must be 1-d of equal length >= 2")
        if k[0] != 0.0 or k[-1] != 1.0 or np.any(np.diff(k) <= 0):
            raise ValueError("knots must increase strictly from 0 to 1")
        if abs(v[0]) > 1e-12 or abs(v[-1] - 1.0) > 1e-12:
            raise ValueError("values must start at 0 and end at 1")
        s = np.diff(v) / np.diff(k)
        if np.any(s < -1e-12):
            raise ValueError("piecewise-linear distortion must be nondecreasing")
        if np.any(np.diff(s) > 1e-12):
            raise ValueError("piecewise-linear distortion must be concave")
        object.__setattr__(self, "knots", tuple(k.tolist()))
        object.__setattr__(self, "values", tuple(v.tolist()))

    @property
    def slopes(self) -> np.ndarray:
        return np.diff(self.values) / np.diff(self.knots)

    def _eval(self, u):
        return np.interp(u, self.knots, self.values)

    def _slope(self, u):
        idx = np.searchsorted(self.knots, u, side="right") - 1
        idx = np.clip(idx, 0, len(self.knots) - 2)
        return self.slopes[idx]

    def measure(self) -> DiscreteMeasure:
        k = np.asarray(self.knots)
        s = self.slopes
        alphas = list(k[1:-1])
        weights = list(k[1:-1] * (s[:-1] - s[1:]))
        alphas.append(1.0)
        weights.append(s[-1])
        a = np.asarray(alphas)
        w = np.asarray(weights)
        keep = w > 1e-15
        return DiscreteMeasure(a[keep], w[keep])


@dataclass(frozen=True)
class Identity(Distortion):
    def _eval(self, u):
        return u * 1.0

    def _slope(self, u):
        return np.ones_like(u)

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure([1.0], [1.0])


@dataclass(frozen=True)
class AvarLevel(Distortion):
    """``g(u) = min(1, u / alpha)``; the distorted expectation is AV@R at ``alpha``."""

    alpha: float

    def __post_init__(self):
        check_probability(self.alpha, "alpha", open_left=True)

    def _eval(self, u):
        return np.minimum(1.0, u / self.alpha)

    def _slope(self, u):
        return np.where(u < self.alpha, 1.0 / self.alpha, 0.0)

    def measure(self) -> DiscreteMeasure:
        return DiscreteMeasure([self.alpha], [1.0])

    def as_piecewise(self) -> PiecewiseLinear:
        if self.alpha == 1.0:
            return PiecewiseLinear((0.0, 1.0), (0.0, 1.0))
        return PiecewiseLinear((0.0, self.alpha, 1.0), (0.0, 1.0, 1.0))


@dataclass(frozen=True)
class MinMaxVar(Distortion):
    """``g_p(u) = 1 - (1 - u**(1/(1+p)))**(1+p)``."""

    p: float

    def __post_init__(self):
        if not np.isfinite(self.p) or self.p < 0:
            raise ValueError("MINMAXVAR parameter p must be a finite nonnegative real")

    def _eval(self, u):
        p = self.p
        return 1.0 - (1.0 - u ** (1.0 / (1.0 + p))) ** (1.0 + p)

    def _slope(self, u):
        p = self.p
        v = u ** (1.0 / (1.0 + p))
        return (1.0 - v) ** p * u ** (-p / (1.0 + p))

    def density(self, z):
        p = self.p
        z = np.asarray(z, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            return (p / (1.0 + p)) * (1.0 - z ** (1.0 / (1.0 + p))) ** (p - 1.0) * z ** (-p / (1.0 + p))

    def measure(self) -> RepMeasure:
        if self.p == 0:
            return DiscreteMeasure([1.0], [1.0])
        return DensityMeasure(
            density=self.density,
            power=1.0 + self.p,
            endpoint_order=self.p,
            atom_at_one=0.0,
            smooth=self._u_smooth,
        )

    def _u_smooth(self, u):
        # in u = alpha**(1/(1+p)) the density is exactly p (1-u)**(p-1)
        return np.full(np.shape(u), self.p)


class _PiecewiseFamily(Distortion):
    def as_piecewise(self) -> PiecewiseLinear:
        raise NotImplementedError

    def _eval(self, u):
        return self.as_piecewise()._eval(u)

    def _slope(self, u):
        return self.as_piecewise()._slope(u)

    def measure(self) -> DiscreteMeasure:
        return self.as_piecewise().measure()


@dataclass(frozen=True)
class SemidevKappa(_PiecewiseFamily):
    """Two-slope distortion whose supremum over ``kappa`` is the absolute semideviation."""

    c: float
    kappa: float

    def __post_init__(self):
        if not 0.0 <= self.c <= 1.0:
            raise ValueError("semideviation distortion needs c in [0, 1]")
        check_probability(self.kappa, "kappa", open_left=True, open_right=True)

    def as_piecewise(self) -> PiecewiseLinear:
        c, k = self.c, self.kappa
        return PiecewiseLinear((0.0, k, 1.0), (0.0, k * (c * (1.0 - k) + 1.0), 1.0))


def _expectile_level(alpha: float, gamma: float) -> float:
    return (1.0 - alpha) * (1.0 - gamma) / (gamma * (2.0 * alpha - 1.0))


@dataclass(frozen=True)
class ExpectileGamma(_PiecewiseFamily):
    """Member of the Kusuoka family of the ``alpha``-expectile."""

    alpha: float
    gamma: float

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("expectile level alpha must lie in (1/2, 1)")
        lo = (1.0 - self.alpha) / self.alpha
        if not lo - 1e-12 <= self.gamma <= 1.0 + 1e-12:
            raise ValueError(f"gamma must lie in [{lo}, 1]")

    @property
    def level(self) -> float:
        return _expectile_level(self.alpha, self.gamma)

    def as_piecewise(self) -> PiecewiseLinear:
        b = self.level
        if b <= 1e-15 or b >= 1.0 - 1e-15:
            return PiecewiseLinear((0.0, 1.0), (0.0, 1.0))
        a, gm = self.alpha, self.gamma
        return PiecewiseLinear((0.0, b, 1.0), (0.0, a * b * gm / (1.0 - a), 1.0))


def g_eval(g: Distortion, u):
    """Evaluate ``g`` at ``u``; raises ``ValueError`` outside [0, 1]."""
    return g(u)


def g_right_derivative(g: Distortion, u):
    return g.derivative(u)


def mu_from_distortion(g: Distortion) -> RepMeasure:
    """Representing probability measure of ``g`` on (0, 1]."""
    return g.measure()


# --------------------------------------------------------------------------- #
# empirical distributions
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class EmpiricalDist:
    """Finite distribution; ``sample`` sorted ascending with matching ``weights``."""

    sample: np.ndarray
    weights: np.ndarray

    @classmethod
    def from_sample(cls, x, weights=None) -> "EmpiricalDist":
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            raise ValueError("empty sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("sample contains NaN or Inf")
        if weights is None:
            w = np.full(x.size, 1.0 / x.size)
        else:
            w = np.asarray(weights, dtype=float).ravel()
            if w.shape != x.shape:
                raise ValueError("weights must match the sample")
            if np.any(w < 0):
                raise ValueError("weights must be nonnegative")
            total = w.sum()
            if abs(total - 1.0) > 1e-9:
                raise ValueError(f"weights sum to {total!r}, not 1")
            w = w / total
        order = np.argsort(x, kind="stable")
        return cls(x[order], w[order])

    def __len__(self):
        return self.sample.size

    def mean(self) -> float:
        return float(np.dot(self.sample, self.weights))

    def _tail(self):
        # values in descending order with cumulative tail masses
        v = self.sample[::-1]
        w = self.weights[::-1]
        return v, w, np.cumsum(w), np.cumsum(v * w)


def _as_dist(dist) -> EmpiricalDist:
    return dist if isinstance(dist, EmpiricalDist) else EmpiricalDist.from_sample(dist)


def _avar_many(dist: EmpiricalDist, alphas: np.ndarray) -> np.ndarray:
    v, w, S, CV = dist._tail()
    a = np.asarray(alphas, dtype=float)
    k = np.minimum(np.searchsorted(S, a, side="left"), v.size - 1)
    S_prev = np.where(k > 0, S[k - 1], 0.0)
    CV_prev = np.where(k > 0, CV[k - 1], 0.0)
    return (CV_prev + (a - S_prev) * v[k]) / a


def avar(dist, alpha) -> float:
    """Upper-tail average ``(1/alpha) * int_{1-alpha}^1 q(b) db`` of the sample.

    Returns AV@R at level ``alpha`` of the negated variable, i.e. the mean of
    the best ``alpha`` fraction of outcomes, splitting a partial atom.
    """
    dist = _as_dist(dist)
    check_probability(alpha, "alpha", open_left=True)
    return float(_avar_many(dist, np.asarray([alpha]))[0])


def avar_minimization(dist, alpha) -> float:
    """Same quantity as :func:`avar` via ``min_x E[(X - x)^+ / alpha + x]``.

    The objective is piecewise linear in ``x`` with kinks at sample points,
    so evaluating it at every sample point finds the exact minimum.
    """
    dist = _as_dist(dist)
    check_probability(alpha, "alpha", open_left=True)
    x, w = dist.sample, dist.weights
    if x.size <= 2000:
        excess = np.maximum(x[None, :] - x[:, None], 0.0) @ w
    else:
        # E[(X - x_k)^+] from suffix sums of the ascending sample
        above_mass = np.cumsum(w[::-1])[::-1]
        above_mean = np.cumsum((x * w)[::-1])[::-1]
        excess = above_mean - x * above_mass
    return float(np.min(excess / alpha + x))


def choquet(dist, g: Distortion) -> float:
    """Distorted expectation of the sample as a finite sum over order statistics."""
    dist = _as_dist(dist)
    v, _, S, _ = dist._tail()
    gS = g._eval(np.clip(S, 0.0, 1.0))
    gS[-1] = 1.0
    return float(np.dot(v, np.diff(gS, prepend=0.0)))


def mixture_eval(dist, mu: RepMeasure) -> float:
    """``int AV@R_alpha(-X) mu(d alpha)`` on the sample."""
    dist = _as_dist(dist)
    if isinstance(mu, DiscreteMeasure):
        return float(np.dot(mu.weights, _avar_many(dist, mu.alphas)))
    _, _, S, _ = dist._tail()
    nodes, weights = mu.rule(breaks=S[:-1])
    return float(np.dot(weights, _avar_many(dist, nodes)) + mu.atom_at_one * dist.mean())


def semideviation(dist, c: float) -> float:
    """``E[X] + c E[(X - E[X])^+]``; ``c > 1`` is allowed but not coherent."""
    dist = _as_dist(dist)
    if c < 0:
        raise ValueError("c must be nonnegative")
    m = dist.mean()
    return m + c * float(np.dot(np.maximum(dist.sample - m, 0.0), dist.weights))


def expectile(dist, alpha: float, tol: float = 1e-10) -> float:
    """Root of ``alpha E[(X-x)^+] - (1-alpha) E[(X-x)^-]`` by bisection."""
    dist = _as_dist(dist)
    check_probability(alpha, "alpha", open_left=True, open_right=True)
    x, w = dist.sample, dist.weights
    lo, hi = float(x[0]), float(x[-1])
    if hi - lo <= tol:
        return lo

    def score(t):
        return alpha * np.dot(np.maximum(x - t, 0.0), w) - (1.0 - alpha) * np.dot(np.maximum(t - x, 0.0), w)

    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if score(mid) > 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------- #
# Kusuoka families
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class Semidev:
    """Absolute semideviation with weight ``c``, indexed by ``kappa`` in (0, 1)."""

    c: float

    def __post_init__(self):
        if not np.isfinite(self.c) or self.c < 0:
            raise ValueError("c must be a finite nonnegative real")

    name = "semidev"

    @property
    def coherent(self) -> bool:
        return self.c <= 1.0

    @property
    def degenerate(self) -> bool:
        return self.c == 0.0

    def bounds(self):
        return 0.0, 1.0

    def default_grid(self) -> np.ndarray:
        return np.round(np.arange(1, 20) * 0.05, 10)

    def check_param(self, kappa):
        if not 0.0 < kappa < 1.0:
            raise ValueError("kappa must lie in (0, 1)")

    def distortion(self, kappa) -> Distortion:
        self.check_param(kappa)
        if self.c == 0:
            return Identity()
        return SemidevKappa(self.c, kappa)

    def measure(self, kappa) -> DiscreteMeasure:
        """Atoms ``{(kappa, c kappa), (1, 1 - c kappa)}``; signed when ``c kappa > 1``."""
        self.check_param(kappa)
        if self.c == 0:
            return DiscreteMeasure([1.0], [1.0])
        ck = self.c * kappa
        return DiscreteMeasure([kappa, 1.0], [ck, 1.0 - ck], signed=ck > 1.0)

    def value(self, dist) -> float:
        return semideviation(dist, self.c)


@dataclass(frozen=True)
class Expectile:
    """``alpha``-expectile, indexed by ``gamma`` in [(1-alpha)/alpha, 1]."""

    alpha: float

    def __post_init__(self):
        if not 0.5 < self.alpha < 1.0:
            raise ValueError("expectile level alpha must lie in (1/2, 1)")

    name = "expectile"
    coherent = True
    degenerate = False

    def bounds(self):
        return (1.0 - self.alpha) / self.alpha, 1.0

    def default_grid(self) -> np.ndarray:
        lo, hi = self.bounds()
        return np.linspace(lo, hi, 19)

    def check_param(self, gamma):
        lo, hi = self.bounds()
        if not lo - 1e-12 <= gamma <= hi + 1e-12:
            raise ValueError(f"gamma must lie in [{lo}, {hi}]")

    def distortion(self, gamma) -> Distortion:
        self.check_param(gamma)
        return ExpectileGamma(self.alpha, gamma)

    def measure(self, gamma) -> DiscreteMeasure:
        self.check_param(gamma)
        level = _expectile_level(self.alpha, gamma)
        if level >= 1.0 - 1e-15 or gamma >= 1.0 - 1e-15:
            return DiscreteMeasure([1.0], [1.0])
        return DiscreteMeasure([level, 1.0], [1.0 - gamma, gamma])

    def value(self, dist) -> float:
        return expectile(dist, self.alpha)


def kusuoka_family(measure_id, param) -> Distortion:
    """Distortion of the Kusuoka family ``measure_id`` at index ``param``."""
    return measure_id.distortion(param)
