"""Instance generation, solver comparison and metrics for the benchmark CLI."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from mipdeco import fem
from mipdeco.ipm import IpmConfig
from mipdeco.model import MipdecoProblem, feasibility_gap, lift_control
from mipdeco.oracle import BudgetExceeded, EnumerationBudget, enumerate_global_min
from mipdeco.penalty import (
    ExpConfig,
    OuterConfig,
    SolveReport,
    exp_algorithm,
    ipa,
    oracle_subsolver,
    simple_penalty,
)

RECIPES = ("random-centers", "grid-exact", "file")
ALGORITHMS = ("penalty", "ipa", "exp", "oracle")
RUN_HEADER = ["instance", "algorithm", "objective", "time_s", "feasible", "flags"]
METRICS_HEADER = ["algorithm", "min_count", "rel_err_av", "t_av", "failures"]
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class InstanceSpec:
    kind: str = fem.POISSON
    h: float = 2.0**-5
    m: int = 4
    S: int = 2
    recipe: str = "random-centers"
    seed: int = 0
    centers: tuple | None = None
    control: tuple | None = None
    y_d_file: str | None = None
    name: str = "instance"

    def __post_init__(self):
        if self.kind not in (fem.POISSON, fem.CONVECTION_DIFFUSION, fem.NONLINEAR_POISSON):
            raise ValueError(f"unknown PDE kind {self.kind!r}")
        if self.recipe not in RECIPES:
            raise ValueError(f"unknown recipe {self.recipe!r}")
        fem.dyadic_level(self.h)
        if not 1 <= self.S <= self.m * self.m:
            raise ValueError("S must lie in [1, m²]")
        if self.recipe == "grid-exact" and self.control is not None:
            if len(self.control) != self.m * self.m or sum(self.control) > self.S:
                raise ValueError("grid-exact control inconsistent with m and S")
        if self.recipe == "file" and not self.y_d_file:
            raise ValueError("file recipe needs y_d_file")

    @property
    def n_controls(self) -> int:
        return self.m * self.m

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("centers", "control"):
            if d[k] is not None:
                d[k] = [list(c) if isinstance(c, (tuple, list)) else c for c in d[k]]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "InstanceSpec":
        d = dict(d)
        if d.get("centers") is not None:
            d["centers"] = tuple(tuple(float(v) for v in c) for c in d["centers"])
        if d.get("control") is not None:
            d["control"] = tuple(int(v) for v in d["control"])
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    @classmethod
    def load(cls, path) -> "InstanceSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_json())
        return path


@lru_cache(maxsize=16)
def build_system(kind: str, h: float, m: int) -> fem.FemSystem:
    mesh = fem.build_mesh(h)
    if kind == fem.CONVECTION_DIFFUSION:
        return fem.assemble_convection_diffusion(mesh, fem.PatchGrid(m))
    return fem.assemble_poisson(mesh, fem.GaussianSourceGrid(m), kind=kind)


def _grid_sources(m: int) -> fem.GaussianSourceGrid:
    return fem.GaussianSourceGrid(m)


def desired_state(spec: InstanceSpec, system: fem.FemSystem | None = None) -> np.ndarray:
    """Nodal desired state for the recipe in ``spec``."""
    system = system or build_system(spec.kind, spec.h, spec.m)
    if spec.recipe == "grid-exact":
        return fem.solve_state(system, np.asarray(spec.control, dtype=float))
    if spec.recipe == "file":
        y_d = np.loadtxt(spec.y_d_file, dtype=float).ravel()
        if y_d.size != system.n_state:
            raise ValueError(f"{spec.y_d_file}: {y_d.size} values, expected {system.n_state}")
        return y_d
    # random Gaussian sources with the grid's height and width, pushed
    # through the same state equation
    grid = _grid_sources(spec.m)
    centers = np.asarray(spec.centers, dtype=float)
    src = fem.GaussianSources(centers, grid.kappa, grid.omega)
    driven = dataclasses.replace(system, phi=np.ascontiguousarray(src.evaluate(system.mesh.interior_coords())))
    return fem.solve_state(driven, np.ones(len(centers)))


def build_problem(spec: InstanceSpec) -> MipdecoProblem:
    system = build_system(spec.kind, spec.h, spec.m)
    return MipdecoProblem(system, desired_state(spec, system), spec.S)


def random_instance(template: InstanceSpec, S: int, rng: np.random.Generator, name: str) -> InstanceSpec:
    grid = _grid_sources(template.m)
    if template.recipe == "grid-exact":
        u = np.zeros(template.n_controls, dtype=int)
        u[rng.choice(template.n_controls, S, replace=False)] = 1
        return dataclasses.replace(template, S=S, control=tuple(int(v) for v in u), centers=None, name=name)
    centers = rng.uniform(grid.lower, grid.upper, size=(S, 2))
    return dataclasses.replace(
        template, S=S, recipe="random-centers", name=name,
        centers=tuple(tuple(float(v) for v in c) for c in centers), control=None,
    )


def generate_test_set(template: InstanceSpec, count: int, S_values, seed: int, out_dir=None) -> list[InstanceSpec]:
    """``count`` instances per value of ``S``; deterministic in ``seed``."""
    specs = []
    streams = np.random.SeedSequence(seed).spawn(len(S_values) * count)
    k = 0
    for S in S_values:
        for i in range(count):
            rng = np.random.default_rng(streams[k])
            spec = random_instance(dataclasses.replace(template, seed=seed), S, rng, f"S{S}_{i:03d}")
            specs.append(spec)
            k += 1
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for spec in specs:
            spec.save(out / f"{spec.name}.json")
    return specs


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    outer: OuterConfig = field(default_factory=OuterConfig)
    exp: ExpConfig = field(default_factory=ExpConfig)
    exp_subsolver: str = "perturbation"
    oracle_budget: int = EnumerationBudget().max_candidates


def default_config_dict() -> dict:
    cfg = RunConfig()
    d = dataclasses.asdict(cfg)
    return d


def config_from_dict(d: dict | None) -> RunConfig:
    d = dict(d or {})
    outer = dict(d.pop("outer", {}) or {})
    ipm_cfg = IpmConfig(**(outer.pop("ipm", {}) or {}))
    outer_cfg = OuterConfig(ipm=ipm_cfg, **outer)
    exp_cfg = ExpConfig(**(d.pop("exp", {}) or {}))
    return RunConfig(outer=outer_cfg, exp=exp_cfg, **d)


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return config_from_dict(json.loads(Path(path).read_text()))


def with_overrides(cfg: RunConfig, **outer) -> RunConfig:
    outer = {k: v for k, v in outer.items() if v is not None}
    return dataclasses.replace(cfg, outer=dataclasses.replace(cfg.outer, **outer)) if outer else cfg


# ---------------------------------------------------------------------------
# solving
# ---------------------------------------------------------------------------

def solve(problem: MipdecoProblem, algorithm: str, cfg: RunConfig, seed: int) -> SolveReport:
    outer = dataclasses.replace(cfg.outer, seed=seed)
    if algorithm == "penalty":
        return simple_penalty(problem, config=outer)
    if algorithm == "ipa":
        return ipa(problem, config=outer)
    if algorithm == "exp":
        sub = oracle_subsolver(problem) if cfg.exp_subsolver == "oracle" else None
        return exp_algorithm(problem, outer, cfg.exp, subsolver=sub)
    if algorithm == "oracle":
        t0 = time.perf_counter()
        res = enumerate_global_min(problem, EnumerationBudget(cfg.oracle_budget))
        x = lift_control(problem, res.u)
        return SolveReport("oracle", x.u, x.y, res.objective, wall_time=time.perf_counter() - t0)
    raise ValueError(f"unknown algorithm {algorithm!r}")


def is_feasible(u: np.ndarray, S: int) -> bool:
    u = np.asarray(u)
    return bool(np.all((u == 0) | (u == 1)) and u.sum() <= S and feasibility_gap(u, S) == 0.0)


@dataclass
class RunRow:
    instance: str
    algorithm: str
    objective: float
    time_s: float
    feasible: bool
    flags: str = ""

    @property
    def failed(self) -> bool:
        return "fail" in self.flags or not self.feasible


def run_comparison(specs, algorithms, cfg: RunConfig | None = None, seed: int = 0, reports=None) -> tuple[list[RunRow], dict]:
    """Solve every instance with every algorithm; returns rows and metrics.

    Each instance gets its own seed derived from ``seed`` and its index, so
    all algorithms on one instance share the same random stream.
    """
    cfg = cfg or RunConfig()
    rows = []
    streams = np.random.SeedSequence(seed).spawn(len(specs))
    for spec, ss in zip(specs, streams):
        problem = build_problem(spec)
        inst_seed = int(ss.generate_state(1)[0])
        for alg in algorithms:
            try:
                rep = solve(problem, alg, cfg, inst_seed)
            except BudgetExceeded:
                rows.append(RunRow(spec.name, alg, math.nan, 0.0, False, "fail:budget"))
                continue
            if reports is not None:
                reports[(spec.name, alg)] = rep
            rows.append(RunRow(
                spec.name, alg, float(rep.objective), round(rep.wall_time, 3),
                is_feasible(rep.u, problem.S), ";".join(rep.flags),
            ))
    return rows, compute_metrics(rows, algorithms)


def compute_metrics(rows, algorithms=None) -> dict:
    """Per-algorithm ``min_count``, ``rel_err_av``, ``t_av`` and failure count.

    Every algorithm attaining the best objective of an instance (up to a
    relative tie tolerance) scores; relative errors are averaged over the
    runs where they are nonzero.
    """
    algorithms = list(algorithms) if algorithms is not None else sorted({r.algorithm for r in rows})
    by_inst: dict[str, list[RunRow]] = {}
    for r in rows:
        by_inst.setdefault(r.instance, []).append(r)
    stats = {a: {"min_count": 0, "rel_errs": [], "times": [], "failures": 0} for a in algorithms}
    for inst_rows in by_inst.values():
        ok = [r for r in inst_rows if not r.failed]
        best = min((r.objective for r in ok), default=math.nan)
        for r in inst_rows:
            s = stats[r.algorithm]
            s["times"].append(r.time_s)
            if r.failed:
                s["failures"] += 1
                continue
            err = relative_error(r.objective, best)
            if err <= TIE_RTOL:
                s["min_count"] += 1
            else:
                s["rel_errs"].append(err)
    table = {}
    for a in algorithms:
        s = stats[a]
        table[a] = {
            "min_count": s["min_count"],
            "rel_err_av": float(np.mean(s["rel_errs"])) if s["rel_errs"] else 0.0,
            "t_av": float(np.mean(s["times"])) if s["times"] else 0.0,
            "failures": s["failures"],
        }
    return table


def relative_error(value: float, best: float) -> float:
    scale = abs(best) if abs(best) > 1e-14 else 1.0
    return max(value - best, 0.0) / scale


def write_runs_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RUN_HEADER)
        for r in rows:
            w.writerow([r.instance, r.algorithm, repr(r.objective), f"{r.time_s:.3f}", int(r.feasible), r.flags])


def read_runs_csv(path) -> list[RunRow]:
    with open(path, newline="") as fh:
        return [
            RunRow(d["instance"], d["algorithm"], float(d["objective"]), float(d["time_s"]),
                   bool(int(d["feasible"])), d["flags"])
            for d in csv.DictReader(fh)
        ]


def write_metrics_csv(table: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRICS_HEADER)
        for alg, m in table.items():
            w.writerow([alg, m["min_count"], f"{m['rel_err_av']:.6e}", f"{m['t_av']:.3f}", m["failures"]])


def emit_trace(report: SolveReport, path) -> Path:
    """Write ``ε  aGMRES  NLI`` rows, one per local solve, in call order."""
    path = Path(path)
    rows = report.trace_rows()
    with open(path, "w") as fh:
        for eps, agm, nli in rows:
            fh.write(f"{eps:.10e} {agm:.6f} {nli:d}\n")
    return path
