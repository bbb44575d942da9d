"""Andersen-Broadie martingales by nested simulation and upper-biased estimates."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numba
import numpy as np

from ._parallel import chunk_bounds, pmap
from ._validation import check_positive_int
from .market import PathSet
from .primal import BoundEstimate, FiniteLevels, RegressionPolicy, SearchConfig, TransformedPayoff

__all__ = [
    "MartingaleEstimate",
    "build_martingale",
    "build_martingales",
    "upper_bound",
    "upper_bound_search",
]


@dataclass
class MartingaleEstimate:
    """Increments ``dM[:, j-1] = M_j - M_{j-1}`` for ``j = 1..J`` per outer path.

    ``value`` holds the estimated policy value ``L_j`` and ``continuation``
    the inner-sample estimate of ``E[L_{j+1} | F_j]``.
    """

    increments: np.ndarray
    value: np.ndarray
    continuation: np.ndarray
    n_inner: int
    seed: int
    outer_seed: int

    def martingale(self) -> np.ndarray:
        n = self.increments.shape[0]
        return np.concatenate([np.zeros((n, 1)), np.cumsum(self.increments, axis=1)], axis=1)


@numba.njit(cache=True)
def _inner_policy_values(Y, F, coef, off, has_coef, alphas, weights, levels, itm, j, J):
    # Y: (B, n, S+1) raw payoffs at dates j..J; F: (B, n, S-1, nf) features at j+1..J-1
    P = coef.shape[0]
    B, n = Y.shape[0], Y.shape[1]
    nf = coef.shape[2]
    m = alphas.shape[1]
    out = np.zeros((P, B))
    for p in range(P):
        for b in range(B):
            acc = 0.0
            for i in range(n):
                u = 0.0
                for k in range(j + 1, J + 1):
                    y = Y[b, i, k - j]
                    u = 0.0
                    for a in range(m):
                        w = weights[p, a]
                        if w != 0.0:
                            x = y - levels[p, a]
                            if x < 0.0:
                                x = 0.0
                            u += w * (x / alphas[p, a] + levels[p, a])
                    if k == J:
                        break
                    if itm[p] and not y > 0.0:
                        continue
                    if not has_coef[p, k]:
                        continue
                    c = off[p, k]
                    for f in range(nf):
                        c += F[b, i, k - j - 1, f] * coef[p, k, f]
                    if u >= c:
                        break
                acc += u
            out[p, b] = acc / n
    return out


def _pack(policies: Sequence[RegressionPolicy], n_dates: int, nf: int):
    P = len(policies)
    coef = np.zeros((P, n_dates, nf))
    off = np.zeros((P, n_dates))
    has = np.zeros((P, n_dates), dtype=np.bool_)
    m = max(len(p.reward.alphas) if p.reward is not None else 1 for p in policies)
    alphas = np.ones((P, m))
    weights = np.zeros((P, m))
    levels = np.zeros((P, m))
    itm = np.zeros(P, dtype=np.bool_)
    for i, pol in enumerate(policies):
        for j, beta in enumerate(pol.coef_):
            if beta is not None:
                coef[i, j] = beta
                has[i, j] = True
        off[i] = pol.offset_
        if pol.reward is None:
            weights[i, 0] = 1.0
        else:
            k = len(pol.reward.alphas)
            alphas[i, :k] = pol.reward.alphas
            weights[i, :k] = pol.reward.weights
            levels[i, :k] = pol.reward.levels
        itm[i] = bool(pol.itm_only)
    return coef, off, has, alphas, weights, levels, itm


def build_martingales(outer: PathSet, policies: Sequence[RegressionPolicy], n_inner: int, seed: int,
                      chunk: int = 8) -> list:
    """Nested-simulation martingales for several policies on shared inner paths.

    At every outer date ``j < J`` one batch of ``n_inner`` inner paths is
    launched; it estimates ``C_j``, the value of following each policy from
    ``j + 1`` on. The policy value is ``L_j = U_j`` where the policy stops and
    ``C_j`` otherwise (``L_J = U_J``), and ``dM_j = L_j - C_{j-1}``.
    """
    check_positive_int(n_inner, "n_inner")
    if seed == outer.seed:
        raise ValueError("inner simulations need a seed distinct from the outer paths")
    model = outer.model
    n, n_dates = outer.n_paths, outer.n_dates
    J = n_dates - 1
    nf = model.n_features
    packed = _pack(policies, n_dates, nf)
    P = len(policies)
    Y = outer.payoffs()

    def work(bounds):
        lo, hi = bounds
        C = np.empty((P, hi - lo, J))
        ids = outer.path_ids[lo:hi]
        for j in range(J):
            inner = model.simulate_from(outer.values[lo:hi, j], j, n_inner, seed, ids)
            Yi = _payoffs(model, inner, j)
            S = J - j
            if S > 1:
                F = np.stack([model.features(inner[:, :, s], j + s, Yi[:, :, s]) for s in range(1, S)], axis=2)
            else:
                F = np.zeros((hi - lo, n_inner, 0, nf))
            C[:, :, j] = _inner_policy_values(Yi, F, *packed, j, J)
        return C

    blocks = pmap(work, chunk_bounds(n, chunk))
    C_all = np.concatenate(blocks, axis=1)
    out = []
    for p, pol in enumerate(policies):
        U = pol._reward(Y)
        stops = pol.stop_matrix(outer)
        L = np.empty((n, n_dates))
        L[:, J] = U[:, J]
        L[:, :J] = np.where(stops[:, :J], U[:, :J], C_all[p])
        dM = L[:, 1:] - C_all[p]
        out.append(MartingaleEstimate(dM, L, C_all[p], n_inner, int(seed), int(outer.seed)))
    return out


def _payoffs(model, inner, j):
    return np.stack([model.payoff(inner[:, :, s], j + s) for s in range(inner.shape[2])], axis=2)


def build_martingale(outer: PathSet, policy: RegressionPolicy, n_inner: int, seed: int) -> MartingaleEstimate:
    return build_martingales(outer, [policy], n_inner, seed)[0]


def upper_bound(outer: PathSet, mart: MartingaleEstimate, reward=None) -> BoundEstimate:
    """Mean over outer paths of ``max_j (U_j - M_j)``."""
    if mart.outer_seed != outer.seed or mart.increments.shape != (outer.n_paths, outer.n_dates - 1):
        raise ValueError("martingale was not built on these outer paths")
    Y = outer.payoffs()
    U = Y if reward is None else reward(Y)
    return BoundEstimate.from_samples(np.max(U - mart.martingale(), axis=1), "high")


def upper_bound_search(outer: PathSet, train: PathSet, family, anchor, n_inner: int, seed: int,
                       cfg: Optional[SearchConfig] = None, refine: bool = False) -> BoundEstimate:
    """Max over the family grid of the dual bound with ``x`` fixed at the primal minimiser.

    ``anchor`` is the table of a :func:`~riskstop.primal.lower_bound_search`
    run (rows with ``param`` and ``x``) or its :class:`BoundEstimate`. With
    ``refine`` the bound is also computed at four neighbouring levels and the
    smallest of the five is kept per family point.
    """
    if anchor is None:
        raise ValueError("the dual search needs the primal minimisers (kappa*, x*)")
    rows = anchor.table if isinstance(anchor, BoundEstimate) else list(anchor)
    if not rows:
        raise ValueError("the primal anchor table is empty")
    cfg = cfg or SearchConfig()
    x_max = None
    if isinstance(anchor, BoundEstimate) and anchor.argmax:
        x_max = anchor.argmax.get("x_max")
    step = cfg.rel_tol * (x_max or 1.0) * 10

    cells = []
    for row in rows:
        mu = family.measure(float(row["param"]))
        free = int(np.sum(mu.alphas < 1.0))
        xs = [float(row["x"])]
        if refine and free:
            xs = [max(0.0, xs[0] + k * step) for k in (-2, -1, 0, 1, 2)]
        for x in xs:
            z = FiniteLevels((x,)) if free else None
            cells.append((float(row["param"]), x, TransformedPayoff(mu, z)))
    policies = [RegressionPolicy(r, ridge=cfg.ridge, itm_only=cfg.itm_only).fit(train) for _, _, r in cells]
    marts = build_martingales(outer, policies, n_inner, seed)
    ests = [upper_bound(outer, mt, r) for mt, (_, _, r) in zip(marts, cells)]

    table = {}
    for (param, x, _), est in zip(cells, ests):
        cur = table.get(param)
        if cur is None or est.value < cur["value"]:
            table[param] = {"param": param, "x": x, "value": est.value, "stderr": est.stderr, "n": est.n}
    rows_out = list(table.values())
    best = max(rows_out, key=lambda r: r["value"])
    return BoundEstimate(best["value"], best["stderr"], best["n"], "high",
                         argmax={"param": best["param"], "x": best["x"]}, table=rows_out)
