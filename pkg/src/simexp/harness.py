"""Sweep orchestration: configuration, seeding, per-cell runs and reports.

The unit of work is one seed index: it draws the data pools once and runs
every configured cell on them, so methods and cells are paired row by row.
Units run on a process pool; results are sorted by (cell, seed, method)
before anything is written, which makes outputs independent of scheduling.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import __version__
from .estimators import (
    BASELINE_FAMILIES,
    FAMILIES,
    PROXY_FAMILIES,
    Grids,
    ObsSide,
    Penalties,
    Rows,
    candidate_grid,
    make_fitter,
)
from .metrics import CellReport, aggregate, regret, rmse_agent, rmse_xa
from .scm import REWARD_MODES, DataFactory, GeneratorConfig, make_params, reward_family, stream_seed
from .tuning import CvPlan, select
from .values import dm_values, dr_values

log = logging.getLogger(__name__)

FIXED_FAMILIES = ("EXP_ONLY", "OBS_ONLY", "PROXY_EXP")
HOLDOUT_FAMILIES = ("GROUNDED_LIN",)


@dataclass
class SweepConfig:
    """Resolved run configuration; every output is a function of it."""

    master_seed: int = 20250101
    seeds: int = 30
    betas: list = field(default_factory=lambda: [0.0, 0.2, 0.5, 0.8, 0.9, 0.99])
    n_obs: list = field(default_factory=lambda: [2000, 20000])
    n_exp: list = field(default_factory=lambda: [20, 100])
    reward_modes: list = field(default_factory=lambda: ["scalar"])
    router: str = "auto"
    alpha_fix: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    omega_weak: list = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])
    methods: list = field(default_factory=lambda: list(FAMILIES))
    n_eval: int = 100
    n_true: int = 100
    b_true: int = 64
    b_sim: int = 5
    d_dense: int = 512
    k_cv: int = 4
    k_cf: int = 5
    holdout_frac: float = 0.3
    d_psi: int = 20
    d_compress: int = 16
    dr: bool = True
    penalties: dict = field(default_factory=dict)
    grids: dict = field(default_factory=dict)
    generator: dict = field(default_factory=dict)

    def validate(self):
        if not self.methods:
            raise ValueError("empty method list")
        bad = [m for m in self.methods if m not in FAMILIES]
        if bad:
            raise ValueError(f"unknown methods {bad}")
        for name in ("betas", "n_obs", "n_exp", "reward_modes"):
            if not getattr(self, name):
                raise ValueError(f"config grid {name!r} is empty")
        for m in self.reward_modes:
            if m not in REWARD_MODES:
                raise ValueError(f"unknown reward mode {m!r}")
        if "coding" in self.reward_modes and (not self.alpha_fix or not self.omega_weak):
            raise ValueError("coding grid is empty")
        if self.router not in ("auto", "mixture", "softmax"):
            raise ValueError(f"unknown router {self.router!r}")
        if self.seeds < 1:
            raise ValueError("need at least one seed")
        return self

    # -- derived objects -------------------------------------------------
    def penalty_set(self) -> Penalties:
        return Penalties(**self.penalties)

    def grid_set(self) -> Grids:
        return Grids(**{k: tuple(v) for k, v in self.grids.items()})

    def generator_config(self) -> GeneratorConfig:
        g = dict(self.generator)
        if "style_strength" in g:
            g["style_strength"] = tuple(g["style_strength"])
        return GeneratorConfig(**g)

    def dense_seed(self) -> int:
        return stream_seed(self.master_seed, "densify")

    def cells(self) -> list["CellKey"]:
        out = []
        for mode in self.reward_modes:
            variants = [(a, w) for a in self.alpha_fix for w in self.omega_weak] if mode == "coding" else [(None, None)]
            for a, w in variants:
                for beta in self.betas:
                    for n_obs in self.n_obs:
                        for n_exp in self.n_exp:
                            out.append(CellKey(mode, float(beta), int(n_obs), int(n_exp), a, w))
        return out

    # -- serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        """Fully resolved configuration: nested tables list every default."""
        d = asdict(self)
        d["penalties"] = asdict(self.penalty_set())
        d["grids"] = {k: list(v) for k, v in asdict(self.grid_set()).items()}
        gen = asdict(self.generator_config())
        d["generator"] = {k: list(v) if isinstance(v, tuple) else v for k, v in gen.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SweepConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "SweepConfig":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def dumps(self) -> str:
        import tomli_w

        return tomli_w.dumps(self.to_dict())


@dataclass(frozen=True, order=True)
class CellKey:
    mode: str
    beta: float
    n_obs: int
    n_exp: int
    alpha_fix: Optional[float] = None
    omega_weak: Optional[float] = None

    @property
    def name(self) -> str:
        mode = self.mode
        if self.mode == "coding":
            mode = f"coding-a{self.alpha_fix:g}-w{self.omega_weak:g}"
        return f"{mode}_b{self.beta:g}_nobs{self.n_obs}_nexp{self.n_exp}"

    def router(self, cfg: SweepConfig) -> str:
        if cfg.router != "auto":
            return cfg.router
        return "mixture" if self.mode == "scalar" else "softmax"

    def sort_key(self):
        return (self.mode, self.alpha_fix or 0.0, self.omega_weak or 0.0, self.beta, self.n_obs, self.n_exp)


def derive_cell_seed(master_seed: int, cell: CellKey | str, seed_index: int) -> int:
    """64-bit stream seed of a (cell, seed index) pair."""
    name = cell.name if isinstance(cell, CellKey) else str(cell)
    return stream_seed(master_seed, "cell", name, seed_index)


# ---------------------------------------------------------------------------
# One seed index
# ---------------------------------------------------------------------------


@lru_cache(maxsize=4)
def _params(master_seed: int, gen_json: str):
    return make_params(GeneratorConfig(**json.loads(gen_json)), master_seed)


def run_params(cfg: SweepConfig):
    gen = cfg.generator_config()
    payload = {f.name: getattr(gen, f.name) for f in fields(gen)}
    return _params(cfg.master_seed, json.dumps(payload, sort_keys=True, default=list))


@dataclass
class MethodResult:
    report: CellReport
    trace: dict
    values: list


def tuning_plan(family: str, cfg: SweepConfig) -> CvPlan:
    if family in FIXED_FAMILIES:
        return CvPlan("fixed", folds=cfg.k_cv)
    if family in HOLDOUT_FAMILIES:
        return CvPlan("exp_holdout", folds=cfg.k_cv, holdout_frac=cfg.holdout_frac)
    return CvPlan("agent_cv", folds=cfg.k_cv)


class SeedUnit:
    """Runs every requested cell for one seed index on shared data pools."""

    def __init__(self, cfg: SweepConfig, seed_index: int):
        self.cfg = cfg
        self.seed_index = seed_index
        self.base_params = run_params(cfg)
        self.factory = DataFactory(self.base_params, cfg.master_seed, seed_index)
        self._dense: dict = {}
        self._sides: dict = {}
        self._sim_X = None

    def reward_params(self, cell: CellKey):
        if cell.mode == "coding":
            return self.base_params.with_config(alpha_fix=cell.alpha_fix, omega_weak=cell.omega_weak)
        return self.base_params

    def factory_for(self, cell: CellKey) -> DataFactory:
        if cell.mode != "coding":
            return self.factory
        f = DataFactory(self.reward_params(cell), self.cfg.master_seed, self.seed_index)
        f._ctx, f._obs, f._sim = self.factory._ctx, self.factory._obs, self.factory._sim
        return f

    def dense(self, key, mediators):
        if key not in self._dense:
            self._dense[key] = mediators.dense(self.cfg.d_dense, self.cfg.dense_seed())
        return self._dense[key]

    def sim_design(self) -> Rows:
        if self._sim_X is None:
            _, med = self.factory.sim("eval", self.cfg.n_eval, self.cfg.b_sim)
            X = med.dense(self.cfg.d_dense, self.cfg.dense_seed())
            self._sim_X = Rows(X, np.zeros(X.shape[0]), np.zeros(X.shape[0], dtype=np.int64))
        return self._sim_X

    def obs_side(self, cell: CellKey, f: DataFactory) -> ObsSide:
        variant = (cell.mode, cell.alpha_fix, cell.omega_weak, cell.beta, cell.n_obs)
        if variant not in self._sides:
            obs = f.obs(cell.n_obs, cell.beta, cell.router(self.cfg), cell.mode)
            X = self.dense(("obs", obs.n, cell.beta, cell.router(self.cfg), reward_family(cell.mode)), obs.mediators)
            rows = Rows(X, obs.outcomes, obs.actions, obs.aux)
            methods = set(self.cfg.methods)
            self._sides.clear()  # one OBS side alive at a time keeps memory flat
            self._sides[variant] = ObsSide(
                rows,
                self.cfg.penalty_set(),
                need_proxy=bool(methods & PROXY_FAMILIES),
                d_psi=self.cfg.d_psi,
                d_compress=self.cfg.d_compress,
                cross_folds=5,
                seed=stream_seed(self.cfg.master_seed, "obs-crossfit", self.seed_index, *variant),
                need_cross_fit="GROUNDED_ANCHOR" in methods,
            )
        return self._sides[variant]

    def run_cell(self, cell: CellKey) -> list[MethodResult]:
        cfg = self.cfg
        f = self.factory_for(cell)
        side = self.obs_side(cell, f)
        exp_data = f.exp(cell.n_exp, cell.mode)
        X_exp = self.dense(("exp", cell.n_exp), exp_data.mediators)
        exp = Rows(X_exp, exp_data.outcomes, exp_data.actions)
        truth = f.truth(cell.mode, cfg.n_eval, cfg.n_true, cfg.b_true)
        X_sim = self.sim_design()
        A = self.base_params.n_agents
        cell_seed = derive_cell_seed(cfg.master_seed, cell, self.seed_index)
        grids, pen = cfg.grid_set(), cfg.penalty_set()
        out = []
        for method in cfg.methods:
            fitter = make_fitter(method, side, pen)
            plan = tuning_plan(method, cfg)
            cands = candidate_grid(method, grids)
            tune_seed = stream_seed(cell_seed, "tune", method)
            sel = select(plan, cands, fitter, exp, tune_seed, method)
            model = fitter(sel.params, exp)
            dm = dm_values(model, X_sim, cfg.n_eval, A, cfg.b_sim)
            rep_kwargs = {}
            mu_dr = [float("nan")] * A
            if cfg.dr:
                refit = None if method == "OBS_ONLY" else (lambda rows, p=sel.params, ft=fitter: ft(p, rows))
                k_cf = min(cfg.k_cf, exp.n)
                dr = dr_values(model, refit, exp, dm, max(k_cf, 2), stream_seed(cell_seed, "crossfit", method))
                mu_dr = dr.mu_dr.tolist()
                rep_kwargs["rmse_agent_dr"] = rmse_agent(dr.mu_dr, truth.mu_true)
            report = CellReport(
                self.seed_index, cell.name, method,
                regret(dm.q_dm, truth.q_true), rmse_xa(dm.q_dm, truth.q_true), rmse_agent(dm.mu_dm, truth.mu_true),
                hparams=sel.params, mu_dm=dm.mu_dm.tolist(), mu_dr=mu_dr, **rep_kwargs,
            )
            trace = sel.trace(cell=cell.name, seed=self.seed_index, method=method, mode=plan.mode)
            values = [(a, dm.mu_dm[a], mu_dr[a], truth.mu_true[a]) for a in range(A)]
            out.append(MethodResult(report, trace, values))
        return out


def _run_unit(args) -> tuple[int, list]:
    cfg_dict, seed_index, cell_dicts = args
    from threadpoolctl import threadpool_limits

    cfg = SweepConfig.from_dict(cfg_dict)
    unit = SeedUnit(cfg, seed_index)
    results = []
    with threadpool_limits(limits=1):
        # group cells so each OBS side is built once
        cells = sorted((CellKey(**c) for c in cell_dicts), key=lambda c: (c.mode, c.alpha_fix or 0, c.omega_weak or 0, c.beta, c.n_obs, c.n_exp))
        for cell in cells:
            try:
                res = unit.run_cell(cell)
                results.append((cell, res, None))
            except Exception as exc:  # recorded per cell, sweep continues
                log.exception("cell %s seed %d failed", cell.name, seed_index)
                results.append((cell, [], f"{type(exc).__name__}: {exc} [cell {cell.name}, seed {seed_index}]"))
    return seed_index, results


def run_cell(cfg: SweepConfig, cell: CellKey, seed_index: int) -> list[CellReport]:
    """Reports of every configured method for one (cell, seed index)."""
    cfg.validate()
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        return [r.report for r in SeedUnit(cfg, seed_index).run_cell(cell)]


# ---------------------------------------------------------------------------
# Sweep and reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ["seed", "method", "regret", "rmse_xa", "rmse_agent", "rmse_agent_dr", "hparams"]
VALUE_COLUMNS = ["seed", "method", "agent", "mu_dm", "mu_dr", "mu_true"]


def fmt(x) -> str:
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


@dataclass
class SweepResult:
    out_dir: Path
    reports: list
    failures: list
    aggregate: object
    elapsed: float


def run_sweep(cfg: SweepConfig, out_dir, threads: int = 1, cells: Optional[Sequence[CellKey]] = None) -> SweepResult:
    """Run all cells x seeds, then write per-cell CSVs and the aggregate reports."""
    cfg.validate()
    out = Path(out_dir)
    cells = list(cells) if cells is not None else cfg.cells()
    t0 = time.perf_counter()
    jobs = [(cfg.to_dict(), s, [asdict(c) for c in cells]) for s in range(cfg.seeds)]
    if threads <= 1:
        done = [_run_unit(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            done = list(ex.map(_run_unit, jobs))
    results, failures, traces = {}, [], []
    for seed_index, unit_res in done:
        for cell, res, err in unit_res:
            if err:
                failures.append({"cell": cell.name, "seed": seed_index, "error": err})
            for r in res:
                results.setdefault(cell, []).append(r)
    all_reports = []
    for cell in sorted(results, key=CellKey.sort_key):
        res = sorted(results[cell], key=lambda r: (r.report.seed, cfg.methods.index(r.report.method)))
        rows, vrows = [], []
        for r in res:
            rep = r.report
            rows.append([rep.seed, rep.method, rep.regret, rep.rmse_xa, rep.rmse_agent, rep.rmse_agent_dr,
                         json.dumps(rep.hparams, sort_keys=True)])
            vrows += [[rep.seed, rep.method, a, dm, dr, tr] for a, dm, dr, tr in r.values]
            traces.append(json.dumps(r.trace, sort_keys=True, default=float))
            all_reports.append(rep)
        _write(out / "cells" / f"{cell.name}.csv", _csv_text(REPORT_COLUMNS, rows))
        _write(out / "cells" / f"{cell.name}_values.csv", _csv_text(VALUE_COLUMNS, vrows))
    _write(out / "selection_trace.jsonl", "".join(t + "\n" for t in traces))
    agg = write_reports(all_reports, out) if all_reports else None
    manifest = {
        "software": {"package": "simexp", "version": __version__},
        "config": cfg.to_dict(),
        "cells": [c.name for c in sorted(cells, key=CellKey.sort_key)],
        "cell_seeds": {
            c.name: [str(derive_cell_seed(cfg.master_seed, c, s)) for s in range(cfg.seeds)]
            for c in sorted(cells, key=CellKey.sort_key)
        },
        "failures": sorted(failures, key=lambda f: (f["cell"], f["seed"])),
        "outputs": ["cells/*.csv", "aggregate.csv", "winner_map.csv", "selection_trace.jsonl"],
    }
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return SweepResult(out, all_reports, failures, agg, time.perf_counter() - t0)


def write_reports(reports: Sequence[CellReport], out_dir) -> object:
    out = Path(out_dir)
    agg = aggregate(reports)
    methods = [m.method for m in agg.methods]
    _write(
        out / "aggregate.csv",
        _csv_text(
            ["method", "avg_rank", "top3_count", "excess_pct", "macro_regret"],
            [[m.method, m.avg_rank, m.top3_count, m.excess_pct, m.macro_regret] for m in agg.methods],
        ),
    )
    header = ["cell", "winner", "runner_up", "gap"] + [f"{m}_mean" for m in methods] + [f"{m}_se" for m in methods]
    rows = [
        [c.cell, c.winner, c.runner_up, c.gap] + [c.mean_regret[m] for m in methods] + [c.se_regret[m] for m in methods]
        for c in agg.cells
    ]
    _write(out / "winner_map.csv", _csv_text(header, rows))
    return agg


def read_reports(out_dir) -> list[CellReport]:
    """Reload per-cell report CSVs written by :func:`run_sweep`."""
    reps = []
    for path in sorted(Path(out_dir, "cells").glob("*.csv")):
        if path.name.endswith("_values.csv"):
            continue
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                reps.append(
                    CellReport(
                        int(row["seed"]), path.stem, row["method"], float(row["regret"]), float(row["rmse_xa"]),
                        float(row["rmse_agent"]), float(row["rmse_agent_dr"]), json.loads(row["hparams"]),
                    )
                )
    return reps
