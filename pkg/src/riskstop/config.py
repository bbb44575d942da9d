"""Run configuration: JSON schema, defaults, flag overrides and validation.

A config file is a JSON object with the optional sections below; any field
left out takes its default. Unknown sections or fields are rejected.

``model``
    ``d, s0, r, delta, sigma, K, T, J``.
``risk``
    ``family`` (``"semidev"`` or ``"expectile"``), ``c`` (semideviation
    weight, >= 0), ``alpha`` (expectile level in (1/2, 1)).
``sampling``
    ``n_train, n_test, n_outer, n_inner`` (counts >= 1) and
    ``seed_train, seed_test, seed_outer, seed_inner`` (pairwise distinct).
``search``
    ``grid`` (list of family parameters or null for the default grid),
    ``n_coarse, rel_tol, x_max_quantile, ridge, itm_only, refine``.
``table``
    ``c``: semideviation weights, one table row each.
``oracle``
    ``n_trees, max_depth, families, seed``.
``output``
    ``dir, csv, json, anchor, paths_format``.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .market import GbmParams
from .primal import SearchConfig
from .risk import Expectile, Semidev


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class RiskConfig:
    family: str = "semidev"
    c: float = 0.0
    alpha: float = 0.75


@dataclass
class SamplingConfig:
    n_train: int = 10_000
    n_test: int = 10_000
    n_outer: int = 10_000
    n_inner: int = 1_000
    seed_train: int = 1
    seed_test: int = 2
    seed_outer: int = 3
    seed_inner: int = 4


@dataclass
class SearchSection:
    grid: Optional[list] = None
    n_coarse: int = 25
    rel_tol: float = 1e-3
    x_max_quantile: float = 0.995
    ridge: float = 1e-8
    itm_only: bool = True
    refine: bool = False


@dataclass
class TableConfig:
    c: list = field(default_factory=lambda: [0.0, 0.5, 1.0, 1.5])


@dataclass
class OracleConfig:
    n_trees: int = 50
    max_depth: int = 4
    families: list = field(default_factory=lambda: ["avar", "semidev", "expectile"])
    seed: int = 0


@dataclass
class OutputConfig:
    dir: str = "results"
    csv: str = "results.csv"
    json: str = "result.json"
    anchor: str = "anchor.json"
    paths_format: str = "csv"


@dataclass
class RunConfig:
    model: GbmParams = field(default_factory=GbmParams)
    risk: RiskConfig = field(default_factory=RiskConfig)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    search: SearchSection = field(default_factory=SearchSection)
    table: TableConfig = field(default_factory=TableConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    # -- construction --------------------------------------------------------
    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config: top level must be a JSON object")
        sections = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for name, value in raw.items():
            if name not in sections:
                raise ConfigError(f"config.{name}: unknown section")
            kwargs[name] = _build_section(name, sections[name], value)
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def override(self, section: str, name: str, value) -> None:
        """Set one field from a command-line flag, with the same checks as the file."""
        target = getattr(self, section)
        if isinstance(target, GbmParams):
            data = dataclasses.asdict(target)
            data[name] = value
            self.model = _build_section("model", None, data)
        else:
            setattr(target, name, value)

    # -- checks -------------------------------------------------------------
    def validate(self) -> None:
        s = self.sampling
        for name in ("n_train", "n_test", "n_outer", "n_inner"):
            v = getattr(s, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"config.sampling.{name}: must be an integer >= 1, got {v!r}")
        seeds = {n: getattr(s, n) for n in ("seed_train", "seed_test", "seed_outer", "seed_inner")}
        for n, v in seeds.items():
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                raise ConfigError(f"config.sampling.{n}: must be a nonnegative integer, got {v!r}")
        names = list(seeds)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if seeds[a] == seeds[b]:
                    raise ConfigError(f"config.sampling.{a}: equals {b} ({seeds[a]}); seeds must be pairwise distinct")
        r = self.risk
        if r.family not in ("semidev", "expectile"):
            raise ConfigError(f"config.risk.family: expected 'semidev' or 'expectile', got {r.family!r}")
        try:
            self.family()
        except ValueError as exc:
            raise ConfigError(f"config.risk: {exc}") from exc
        if not self.table.c:
            raise ConfigError("config.table.c: needs at least one value")
        for c in self.table.c:
            if not c >= 0:
                raise ConfigError(f"config.table.c: weights must be nonnegative, got {c!r}")
        q = self.search
        if q.grid is not None:
            if len(q.grid) == 0:
                raise ConfigError("config.search.grid: empty grid")
            try:
                self.search_config().family_grid(self.family())
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config.search.grid: {exc}") from exc
        if not (isinstance(q.n_coarse, int) and q.n_coarse >= 2):
            raise ConfigError("config.search.n_coarse: must be an integer >= 2")
        if not 0 < q.rel_tol < 1:
            raise ConfigError("config.search.rel_tol: must lie in (0, 1)")
        if not 0 < q.x_max_quantile <= 1:
            raise ConfigError("config.search.x_max_quantile: must lie in (0, 1]")
        if not q.ridge >= 0:
            raise ConfigError("config.search.ridge: must be nonnegative")
        o = self.oracle
        if not (isinstance(o.n_trees, int) and o.n_trees >= 1):
            raise ConfigError("config.oracle.n_trees: must be an integer >= 1")
        if not (isinstance(o.max_depth, int) and 1 <= o.max_depth <= 4):
            raise ConfigError("config.oracle.max_depth: enumeration budget allows depth 1..4")
        for fam in o.families:
            if fam not in ("avar", "semidev", "expectile", "identity"):
                raise ConfigError(f"config.oracle.families: unknown family {fam!r}")
        if self.output.paths_format not in ("csv", "bin"):
            raise ConfigError("config.output.paths_format: expected 'csv' or 'bin'")

    # -- derived objects -----------------------------------------------------
    def family(self, c: Optional[float] = None):
        if self.risk.family == "semidev":
            return Semidev(self.risk.c if c is None else c)
        return Expectile(self.risk.alpha)

    def family_param(self) -> float:
        return self.risk.c if self.risk.family == "semidev" else self.risk.alpha

    def search_config(self) -> SearchConfig:
        q = self.search
        return SearchConfig(grid=None if q.grid is None else tuple(float(g) for g in q.grid),
                            n_coarse=q.n_coarse, rel_tol=q.rel_tol, x_max_quantile=q.x_max_quantile,
                            ridge=q.ridge, itm_only=q.itm_only)

    def out_path(self, name: str) -> Path:
        return Path(self.output.dir) / getattr(self.output, name)


def _build_section(name, fld, value):
    if name == "model":
        if not isinstance(value, dict):
            raise ConfigError("config.model: must be an object")
        known = {f.name for f in dataclasses.fields(GbmParams)}
        for k in value:
            if k not in known:
                raise ConfigError(f"config.model.{k}: unknown field")
        try:
            return GbmParams(**value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config.model: {exc}") from exc
    cls = fld.default_factory
    if not isinstance(value, dict):
        raise ConfigError(f"config.{name}: must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    for k in value:
        if k not in known:
            raise ConfigError(f"config.{name}.{k}: unknown field")
    return cls(**value)
