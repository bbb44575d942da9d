"""Multi-asset geometric Brownian motion on a Bermudan exercise grid."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import rng
from ._parallel import chunk_bounds, pmap
from ._validation import check_positive_int

__all__ = [
    "GbmParams",
    "ExerciseGrid",
    "PathSet",
    "GbmModel",
    "simulate_paths",
    "payoff_maxcall",
    "maxcall_basis",
    "dump_paths",
    "load_paths",
]


@dataclass(frozen=True)
class GbmParams:
    """Model and contract parameters; defaults are the two-asset max-call benchmark."""

    d: int = 2
    s0: float = 90.0
    r: float = 0.05
    delta: float = 0.1
    sigma: float = 0.2
    K: float = 100.0
    T: float = 3.0
    J: int = 9

    def __post_init__(self):
        check_positive_int(self.d, "d")
        check_positive_int(self.J, "J")
        if not self.s0 > 0 or not self.K > 0:
            raise ValueError("s0 and K must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        if not self.T > 0:
            raise ValueError("T must be positive")


@dataclass(frozen=True)
class ExerciseGrid:
    """Exercise dates ``t_0 < ... < t_J``."""

    dates: tuple

    def __post_init__(self):
        t = np.asarray(self.dates, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise ValueError("an exercise grid needs at least two dates")
        if np.any(np.diff(t) <= 0) or t[0] < 0:
            raise ValueError("exercise dates must be nonnegative and strictly increasing")
        object.__setattr__(self, "dates", tuple(t.tolist()))

    @classmethod
    def uniform(cls, T: float, J: int) -> "ExerciseGrid":
        return cls(tuple((np.arange(J + 1) * (T / J)).tolist()))

    @property
    def J(self) -> int:
        return len(self.dates) - 1

    def __len__(self):
        return len(self.dates)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.dates)


@dataclass(frozen=True, eq=False)
class PathSet:
    """Simulated states, shape ``(n_paths, J + 1, state_dim)``.

    ``path_ids`` are the substream indices the rows were drawn from; together
    with ``seed`` they reproduce ``values`` bit for bit.
    """

    values: np.ndarray
    seed: int
    path_ids: np.ndarray
    model: object = field(repr=False, default=None)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValueError("path values must be a 3-d array")
        if self.path_ids.shape != (self.values.shape[0],):
            raise ValueError("one path id per path is required")
        self.values.setflags(write=False)
        self.path_ids.setflags(write=False)

    @property
    def n_paths(self) -> int:
        return self.values.shape[0]

    @property
    def n_dates(self) -> int:
        return self.values.shape[1]

    def payoffs(self) -> np.ndarray:
        """Raw payoff ``(n_paths, J + 1)`` along every path."""
        return np.stack([self.model.payoff(self.values[:, j], j) for j in range(self.n_dates)], axis=1)

    def subset(self, idx) -> "PathSet":
        idx = np.asarray(idx)
        return PathSet(self.values[idx].copy(), self.seed, self.path_ids[idx].copy(), self.model)


def payoff_maxcall(prices, t: float, params: GbmParams):
    """Discounted max-call payoff ``exp(-r t) (max_i S^i - K)^+``.

    ``prices`` may carry leading batch dimensions; the asset axis is last.
    """
    prices = np.asarray(prices, dtype=float)
    out = np.exp(-params.r * t) * np.maximum(prices.max(axis=-1) - params.K, 0.0)
    return float(out) if out.ndim == 0 else out


def maxcall_basis(prices, payoff, K: float = 100.0) -> np.ndarray:
    """Twelve regression functions for the two-asset max-call.

    With ``s1 >= s2`` the sorted prices and ``y`` the payoff, all scaled by
    ``1/K``: ``1, s1, s1^2, s1^3, s2, s2^2, s2^3, s1 s2, s1^2 s2, s1 s2^2,
    y, y s1``.
    """
    prices = np.asarray(prices, dtype=float)
    if prices.shape[-1] != 2:
        raise NotImplementedError("the regression basis is only defined for d = 2")
    s1 = prices.max(axis=-1) / K
    s2 = prices.min(axis=-1) / K
    y = np.asarray(payoff, dtype=float) / K
    y = np.broadcast_to(y, s1.shape)
    one = np.ones_like(s1)
    return np.stack(
        [one, s1, s1**2, s1**3, s2, s2**2, s2**3, s1 * s2, s1**2 * s2, s1 * s2**2, y, y * s1],
        axis=-1,
    )


class GbmModel:
    """Independent GBMs with the max-call payoff, driven by Philox substreams."""

    n_features = 12

    def __init__(self, params: GbmParams = GbmParams(), grid: Optional[ExerciseGrid] = None):
        self.params = params
        self.grid = grid if grid is not None else ExerciseGrid.uniform(params.T, params.J)
        if abs(self.grid.dates[-1] - params.T) > 1e-12:
            raise ValueError("the last exercise date must equal T")
        t = self.grid.as_array()
        dt = np.diff(t)
        p = params
        self._drift = (p.r - p.delta - 0.5 * p.sigma**2) * dt
        self._vol = p.sigma * np.sqrt(dt)
        self._disc = np.exp(-p.r * t)

    def __repr__(self):
        return f"GbmModel({self.params!r})"

    @property
    def n_dates(self) -> int:
        return len(self.grid)

    @property
    def state_dim(self) -> int:
        return self.params.d

    def payoff(self, states, j: int):
        states = np.asarray(states, dtype=float)
        return self._disc[j] * np.maximum(states.max(axis=-1) - self.params.K, 0.0)

    def features(self, states, j: int, payoff=None):
        if payoff is None:
            payoff = self.payoff(states, j)
        return maxcall_basis(states, payoff, self.params.K)

    def _paths_from(self, start, normals, j0: int) -> np.ndarray:
        # start: (..., d); normals: (..., steps, d) for steps starting at date j0
        steps = normals.shape[-2]
        incr = self._drift[j0 : j0 + steps, None] + self._vol[j0 : j0 + steps, None] * normals
        logs = np.cumsum(incr, axis=-2)
        out = np.empty(normals.shape[:-2] + (steps + 1, normals.shape[-1]))
        out[..., 0, :] = start
        out[..., 1:, :] = start[..., None, :] * np.exp(logs)
        return out

    def simulate(self, n_paths: int, seed: int, first_path: int = 0, chunk: int = 2048) -> PathSet:
        check_positive_int(n_paths, "n_paths")
        J, d = self.n_dates - 1, self.params.d
        s0 = np.full(d, float(self.params.s0))

        def work(bounds):
            lo, hi = bounds
            z = np.stack([rng.normals(rng.substream(seed, rng.OUTER, first_path + i), (J, d)) for i in range(lo, hi)])
            return self._paths_from(np.broadcast_to(s0, (hi - lo, d)), z, 0)

        blocks = pmap(work, chunk_bounds(n_paths, chunk))
        values = np.concatenate(blocks, axis=0)
        ids = np.arange(first_path, first_path + n_paths, dtype=np.int64)
        return PathSet(values, int(seed), ids, self)

    def simulate_from(self, states, j: int, n_inner: int, seed: int, path_ids) -> np.ndarray:
        """Inner paths launched at date ``j`` from each row of ``states``.

        Returns shape ``(len(states), n_inner, J + 1 - j, d)`` whose slot 0 is
        the launch state. The draws for outer path ``k`` come from substream
        ``(seed, inner, path_ids[k], j)``.
        """
        states = np.asarray(states, dtype=float)
        J, d = self.n_dates - 1, self.params.d
        steps = J - j
        z = np.stack([rng.normals(rng.substream(seed, rng.INNER, int(pid), j), (n_inner, steps, d)) for pid in path_ids])
        start = np.broadcast_to(states[:, None, :], (states.shape[0], n_inner, d))
        return self._paths_from(start, z, j)


def simulate_paths(params: GbmParams, grid: ExerciseGrid, n_paths: int, seed: int) -> PathSet:
    """Exact log-Euler simulation of ``n_paths`` GBM paths on ``grid``."""
    return GbmModel(params, grid).simulate(n_paths, seed)


# --------------------------------------------------------------------------- #
# path dumps
# --------------------------------------------------------------------------- #
_MAGIC = b"RSPATHS1"


def dump_paths(paths: PathSet, filename, fmt: str = "csv") -> None:
    """Write paths as CSV (path_id, date_index, asset_index, price) or binary.

    Binary layout, little-endian: 8-byte magic ``RSPATHS1``, uint64 seed,
    uint64 n_paths, uint64 n_dates, uint64 n_assets, n_paths int64 path ids,
    then float64 prices in C order (path, date, asset).
    """
    v = paths.values
    if fmt == "csv":
        with open(filename, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "date_index", "asset_index", "price"])
            for n, pid in enumerate(paths.path_ids):
                for j in range(v.shape[1]):
                    for a in range(v.shape[2]):
                        w.writerow([int(pid), j, a, repr(float(v[n, j, a]))])
    elif fmt == "bin":
        with open(filename, "wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<4Q", int(paths.seed) & ((1 << 64) - 1), *v.shape))
            fh.write(np.ascontiguousarray(paths.path_ids, dtype="<i8").tobytes())
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())
    else:
        raise ValueError(f"unknown dump format {fmt!r}")


def load_paths(filename, model=None) -> PathSet:
    """Read a binary dump written by :func:`dump_paths`."""
    raw = Path(filename).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a riskstop binary path dump")
    seed, n, m, d = struct.unpack_from("<4Q", raw, 8)
    off = 8 + 32
    ids = np.frombuffer(raw, dtype="<i8", count=n, offset=off).astype(np.int64)
    off += 8 * n
    values = np.frombuffer(raw, dtype="<f8", count=n * m * d, offset=off).reshape(n, m, d).astype(float)
    return PathSet(values, int(seed), ids, model)
