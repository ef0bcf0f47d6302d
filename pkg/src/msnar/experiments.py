"""Config-driven experiments: simulation, estimation, sweeps and figure data."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np

from msnar.hmm import PsiState
from msnar.kernels import KernelConfig
from msnar.model import ModelError, ModelSpec, check_stability, paper_section4_model
from msnar.nw import ThetaField, align_labels, nw_estimate, sup_error
from msnar.rm import RmResult, StepSchedule, initial_state, run_restoration_estimation
from msnar.saem import SaemConfig
from msnar.simulation import Trajectory, simulate

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODES = (
    "simulate",
    "estimate-complete",
    "estimate-rm",
    "stability-check",
    "consistency-sweep",
    "reproduce-figures",
)
PRESETS: dict[str, Callable[[], ModelSpec]] = {"paper_section4": paper_section4_model}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    model: ModelSpec
    n: int = 1000
    seeds: tuple[int, ...] = (0,)
    y0: float | str = "stationary"
    burn_in: int | None = None
    kernel_family: str = "gaussian"
    bandwidth: float | None = None
    grid: tuple[float, float, int] | None = None
    grid_points: int = 201
    schedule: StepSchedule = field(default_factory=StepSchedule)
    saem_iterations: int = 100
    saem_warmup: int = 20
    frozen_psi: bool = False
    region: tuple[float, float] = (-1.0, 1.0)
    ns: tuple[int, ...] = (500, 1000, 2000, 4000)
    moment_order: float = 1.0
    data: str | None = None
    output_dir: Path = Path("out")
    threads: int = 1
    preset: str | None = None

    def kernel_for(self, traj: Trajectory) -> KernelConfig:
        if self.grid is None:
            return KernelConfig.for_data(traj.y, self.kernel_family, self.bandwidth, self.grid_points)
        lo, hi, num = self.grid
        cfg = KernelConfig.for_data(traj.y, self.kernel_family, self.bandwidth, 2)
        return KernelConfig(self.kernel_family, cfg.bandwidth, tuple(np.linspace(lo, hi, num)))

    def saem_for(self, seed: int) -> SaemConfig:
        return SaemConfig(
            m=self.model.m,
            iterations=self.saem_iterations,
            warmup=self.saem_warmup,
            seed=derived_seed(seed, "saem"),
        )

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "preset": self.preset,
            "model": self.model.to_dict(),
            "n": self.n,
            "seeds": list(self.seeds),
            "y0": self.y0,
            "burn_in": self.burn_in,
            "kernel": {
                "family": self.kernel_family,
                "bandwidth": self.bandwidth,
                "grid": None
                if self.grid is None
                else {"lo": self.grid[0], "hi": self.grid[1], "num": self.grid[2]},
                "grid_points": self.grid_points,
            },
            "schedule": {"warmup": self.schedule.warmup, "iterations": self.schedule.iterations},
            "saem": {"iterations": self.saem_iterations, "warmup": self.saem_warmup},
            "frozen_psi": self.frozen_psi,
            "region": list(self.region),
            "ns": list(self.ns),
            "moment_order": self.moment_order,
            "data": self.data,
        }


def derived_seed(seed: int, purpose: str) -> int:
    """Stable 32-bit seed for one purpose, independent of the simulation streams."""
    tag = int.from_bytes(purpose.encode(), "little")
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _need(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def parse_config(doc: dict, mode: str | None = None) -> ExperimentConfig:
    """Validate a config document (already decoded from JSON)."""
    _need(isinstance(doc, dict), "config document must be a JSON object")
    mode = mode or doc.get("mode")
    _need(mode in MODES, f"mode must be one of {', '.join(MODES)}; got {mode!r}")

    preset = doc.get("preset")
    model_doc = doc.get("model", preset)
    _need(model_doc is not None, "config needs 'model' (object or preset name) or 'preset'")
    if isinstance(model_doc, str):
        _need(model_doc in PRESETS, f"unknown preset {model_doc!r}")
        preset = model_doc
        model = PRESETS[model_doc]()
    else:
        _need(isinstance(model_doc, dict), "'model' must be an object or a preset name")
        try:
            model = ModelSpec.from_dict(model_doc)
        except (ModelError, ValueError, TypeError) as exc:
            raise ConfigError(f"invalid model: {exc}") from None

    kernel = doc.get("kernel") or {}
    sched = doc.get("schedule") or {}
    saem = doc.get("saem") or {}
    grid = kernel.get("grid")
    if grid is not None:
        _need(
            isinstance(grid, dict) and {"lo", "hi", "num"} <= grid.keys(),
            "kernel.grid must have lo, hi, num",
        )
        _need(grid["hi"] > grid["lo"] and int(grid["num"]) >= 2, "kernel.grid needs hi > lo, num >= 2")
        grid = (float(grid["lo"]), float(grid["hi"]), int(grid["num"]))

    seeds = doc.get("seeds", [doc["seed"]] if "seed" in doc else [0])
    _need(
        isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds),
        "seeds must be a nonempty list of nonnegative integers",
    )
    n = doc.get("n", 1000)
    _need(isinstance(n, int) and n >= 2, "n must be an integer >= 2")
    ns = tuple(doc.get("ns", (500, 1000, 2000, 4000)))
    _need(all(isinstance(v, int) and v >= 2 for v in ns) and ns, "ns must list integers >= 2")
    region = tuple(doc.get("region", (-1.0, 1.0)))
    _need(len(region) == 2 and region[0] < region[1], "region must be [lo, hi] with lo < hi")
    y0 = doc.get("y0", "stationary")
    _need(y0 == "stationary" or isinstance(y0, (int, float)), "y0 must be a number or 'stationary'")
    family = kernel.get("family", "gaussian")
    _need(family in ("gaussian", "epanechnikov"), f"unknown kernel family {family!r}")
    bw = kernel.get("bandwidth")
    _need(bw is None or (isinstance(bw, (int, float)) and bw > 0), "kernel.bandwidth must be positive")
    if mode in ("estimate-rm", "reproduce-figures"):
        _need(model.m >= 1, "estimate-rm needs a model with at least one regime")
    data = doc.get("data")
    _need(data is None or isinstance(data, str), "data must be a path string")
    try:
        schedule = StepSchedule(int(sched.get("warmup", 50)), int(sched.get("iterations", 2000)))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    return ExperimentConfig(
        mode=mode,
        model=model,
        n=n,
        seeds=tuple(seeds),
        y0=y0,
        burn_in=doc.get("burn_in"),
        kernel_family=family,
        bandwidth=None if bw is None else float(bw),
        grid=grid,
        grid_points=int(kernel.get("grid_points", 201)),
        schedule=schedule,
        saem_iterations=int(saem.get("iterations", 100)),
        saem_warmup=int(saem.get("warmup", 20)),
        frozen_psi=bool(doc.get("frozen_psi", False)),
        region=(float(region[0]), float(region[1])),
        ns=ns,
        moment_order=float(doc.get("moment_order", 1.0)),
        data=data,
        output_dir=Path(doc.get("output_dir", "out")),
        threads=int(doc.get("threads", 1)),
        preset=preset,
    )


def load_config(path: str | Path, mode: str | None = None) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc, mode)


# ---------------------------------------------------------------------------
# Building blocks shared with the acceptance suite
# ---------------------------------------------------------------------------


def trajectory_for(config: ExperimentConfig, seed: int, n: int | None = None) -> Trajectory:
    if config.data is not None:
        return Trajectory.load_csv(config.data)
    return simulate(config.model, n or config.n, config.y0, seed, config.burn_in)


def complete_data_errors(
    model: ModelSpec, n: int, seed: int, region: tuple[float, float], grid_points: int = 201
) -> np.ndarray:
    traj = simulate(model, n, seed=seed)
    cfg = KernelConfig.for_data(traj.y, num=grid_points)
    return sup_error(nw_estimate(traj, cfg, m=model.m), model, region).errors


def _sweep_cell(args):
    model_doc, n, seed, region, grid_points = args
    return complete_data_errors(ModelSpec.from_dict(model_doc), n, seed, region, grid_points)


def _pool_map(fn, items: list, threads: int) -> list:
    if threads <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def consistency_sweep(
    model: ModelSpec,
    ns: Iterable[int],
    seeds: Iterable[int],
    region: tuple[float, float] = (-1.5, 1.5),
    threads: int = 1,
    grid_points: int = 201,
) -> dict:
    """Median complete-data sup error per ``n`` across ``seeds``."""
    ns = list(ns)
    seeds = list(seeds)
    cells = [(model.to_dict(), n, s, region, grid_points) for n in ns for s in seeds]
    errs = np.array(_pool_map(_sweep_cell, cells, threads)).reshape(len(ns), len(seeds), model.m)
    med = np.median(errs, axis=1)
    monotone = bool(np.all(np.diff(med, axis=0) <= 0))
    return {
        "ns": ns,
        "seeds": seeds,
        "region": list(region),
        "median_sup_error": med.tolist(),
        "errors": errs.tolist(),
        "monotone_nonincreasing": monotone,
        "last_over_first": (med[-1] / med[0]).tolist(),
    }


@dataclass
class PipelineRun:
    seed: int
    traj: Trajectory
    kernel: KernelConfig
    complete: ThetaField
    rm: RmResult
    perm: list[int]
    rm_error: np.ndarray  # indexed by true regime
    complete_error: np.ndarray
    A_aligned: np.ndarray


def full_pipeline(
    model: ModelSpec,
    n: int,
    seed: int,
    schedule: StepSchedule,
    region: tuple[float, float] = (-1.0, 1.0),
    saem: SaemConfig | None = None,
    grid_points: int = 201,
) -> PipelineRun:
    """Simulate, estimate with observed and with hidden regimes, align labels, score."""
    traj = simulate(model, n, seed=seed)
    cfg = KernelConfig.for_data(traj.y, num=grid_points)
    complete = nw_estimate(traj, cfg, m=model.m)
    saem = saem or SaemConfig(m=model.m, seed=derived_seed(seed, "saem"))
    rm = run_restoration_estimation(
        traj.hidden(), model.m, schedule, cfg, derived_seed(seed, "rm"), saem_config=saem
    )
    perm, err = align_labels(rm.estimate, model, region)
    inv = np.argsort(perm)
    A = rm.A_final[np.ix_(inv, inv)]
    return PipelineRun(
        seed, traj, cfg, complete, rm, perm, err.errors[inv], sup_error(complete, model, region).errors, A
    )


@dataclass
class FrozenRun:
    seed: int
    traj: Trajectory
    kernel: KernelConfig
    rm: RmResult
    fixed_point: ThetaField
    grad_ratio: float
    median_gap: float


def frozen_psi_run(
    model: ModelSpec,
    n: int,
    seed: int,
    schedule: StepSchedule,
    psi: PsiState | None = None,
    gap_floor: float = 1e-6,
    grid_points: int = 201,
) -> FrozenRun:
    """Robbins-Monro with the restoration law frozen at the Step 0 state (or ``psi``)."""
    traj = simulate(model, n, seed=seed)
    cfg = KernelConfig.for_data(traj.y, num=grid_points)
    hidden = traj.hidden()
    init = initial_state(hidden, model.m, cfg, SaemConfig(m=model.m, seed=derived_seed(seed, "saem")))
    rm = run_restoration_estimation(
        hidden,
        model.m,
        schedule,
        cfg,
        derived_seed(seed, "rm"),
        initial=init,
        frozen_psi=psi if psi is not None else True,
    )
    fp = rm.extras["fixed_point"]
    g = rm.trace.grad_u_norm
    mask = fp.f_hat > gap_floor
    gap = float(np.median(np.abs(rm.trace.theta_bar[-1] - fp.theta)[mask]))
    return FrozenRun(seed, traj, cfg, rm, fp, float(g[-1] / g[0]), gap)


def figure_data(model: ModelSpec, traj: Trajectory, complete: ThetaField, rm_field: ThetaField | None, perm=None) -> str:
    """CSV with truth, complete-data and RM curves on the estimation grid."""
    m = model.m
    grid = complete.grid
    rm_rows = None
    if rm_field is not None:
        inv = np.argsort(perm) if perm is not None else np.arange(m)
        rm_rows = rm_field.theta[inv]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    head = ["y_grid"] + [f"truth_r{i + 1}" for i in range(m)] + [f"complete_r{i + 1}" for i in range(m)]
    if rm_rows is not None:
        head += [f"rm_r{i + 1}" for i in range(m)]
    w.writerow(head)
    truth = np.vstack([model.regression(i, grid) for i in range(m)])
    for g, yg in enumerate(grid):
        row = [yg] + list(truth[:, g]) + list(complete.theta[:, g])
        if rm_rows is not None:
            row += list(rm_rows[:, g])
        w.writerow([format(float(v), ".17g") for v in row])
    return buf.getvalue()


def scatter_data(traj: Trajectory) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "y_prev", "y"])
    for k in range(1, traj.y.size):
        w.writerow([k, format(float(traj.y[k - 1]), ".17g"), format(float(traj.y[k]), ".17g")])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Modes
# ---------------------------------------------------------------------------


def _mode_stability(cfg: ExperimentConfig, out: Path) -> dict:
    return {"stability": check_stability(cfg.model, cfg.moment_order).to_dict()}


def _mode_simulate(cfg: ExperimentConfig, out: Path) -> dict:
    files = {}
    occupancy = {}
    for s in cfg.seeds:
        traj = simulate(cfg.model, cfg.n, cfg.y0, s, cfg.burn_in)
        name = f"trajectory_seed{s}.csv"
        traj.save_csv(out / name)
        files[str(s)] = name
        occupancy[str(s)] = np.bincount(traj.x, minlength=cfg.model.m).tolist()
    return {"files": files, "occupancy": occupancy}


def _mode_estimate_complete(cfg: ExperimentConfig, out: Path) -> dict:
    results = {}
    for s in cfg.seeds:
        traj = trajectory_for(cfg, s)
        kc = cfg.kernel_for(traj)
        field_ = nw_estimate(traj, kc, m=cfg.model.m)
        name = f"theta_complete_seed{s}.csv"
        field_.save_csv(out / name)
        entry: dict[str, Any] = {"file": name, "bandwidth": kc.bandwidth}
        if cfg.data is None:
            entry["sup_error"] = sup_error(field_, cfg.model, cfg.region).errors.tolist()
        results[str(s)] = entry
    return {"runs": results}


def _rm_cell(args) -> dict:
    cfg_doc, s, out = args
    cfg = parse_config(cfg_doc, cfg_doc["mode"])
    out = Path(out)
    traj = trajectory_for(cfg, s)
    kc = cfg.kernel_for(traj)
    m = cfg.model.m
    rm = run_restoration_estimation(
        traj.hidden(),
        m,
        cfg.schedule,
        kc,
        derived_seed(s, "rm"),
        saem_config=cfg.saem_for(s),
        frozen_psi=True if cfg.frozen_psi else None,
    )
    rm.trace.save_csv(out / f"rm_trace_seed{s}.csv")
    rm.estimate.save_csv(out / f"theta_rm_seed{s}.csv")
    entry: dict[str, Any] = {
        "bandwidth": kc.bandwidth,
        "saem_init": rm.saem.params.to_dict() if rm.saem else None,
        "A_final": rm.A_final.tolist(),
        "grad_u_norm": {"initial": float(rm.trace.grad_u_norm[0]), "final": float(rm.trace.grad_u_norm[-1])},
        "files": {"trace": f"rm_trace_seed{s}.csv", "theta": f"theta_rm_seed{s}.csv"},
    }
    if cfg.data is None:
        perm, err = align_labels(rm.estimate, cfg.model, cfg.region)
        entry["alignment_permutation"] = perm
        entry["sup_error"] = err.errors[np.argsort(perm)].tolist()
        complete = nw_estimate(traj, kc, m=m)
        complete.save_csv(out / f"theta_complete_seed{s}.csv")
        entry["complete_sup_error"] = sup_error(complete, cfg.model, cfg.region).errors.tolist()
    return entry


def _mode_estimate_rm(cfg: ExperimentConfig, out: Path) -> dict:
    doc = cfg.to_dict()
    cells = [(doc, s, str(out)) for s in cfg.seeds]
    entries = _pool_map(_rm_cell, cells, cfg.threads)
    return {
        "schedule": {"warmup": cfg.schedule.warmup, "iterations": cfg.schedule.iterations},
        "frozen_psi": cfg.frozen_psi,
        "runs": {str(s): e for s, e in zip(cfg.seeds, entries)},
    }


def _mode_sweep(cfg: ExperimentConfig, out: Path) -> dict:
    table = consistency_sweep(cfg.model, cfg.ns, cfg.seeds, cfg.region, cfg.threads, cfg.grid_points)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n"] + [f"median_sup_error_{i + 1}" for i in range(cfg.model.m)])
    for n, row in zip(table["ns"], table["median_sup_error"]):
        w.writerow([n] + [format(v, ".17g") for v in row])
    (out / "consistency_sweep.csv").write_text(buf.getvalue())
    return {"sweep": table}


def _mode_figures(cfg: ExperimentConfig, out: Path) -> dict:
    results = {}
    for s in cfg.seeds:
        run = full_pipeline(
            cfg.model, cfg.n, s, cfg.schedule, cfg.region, cfg.saem_for(s), cfg.grid_points
        )
        (out / f"figure_curves_seed{s}.csv").write_text(
            figure_data(cfg.model, run.traj, run.complete, run.rm.estimate, run.perm)
        )
        (out / f"figure_scatter_seed{s}.csv").write_text(scatter_data(run.traj))
        run.traj.save_csv(out / f"trajectory_seed{s}.csv")
        results[str(s)] = {
            "alignment_permutation": run.perm,
            "rm_sup_error": run.rm_error.tolist(),
            "complete_sup_error": run.complete_error.tolist(),
            "A_final_aligned": run.A_aligned.tolist(),
            "saem_init": run.rm.saem.params.to_dict() if run.rm.saem else None,
        }
    return {"runs": results}


_DISPATCH = {
    "stability-check": _mode_stability,
    "simulate": _mode_simulate,
    "estimate-complete": _mode_estimate_complete,
    "estimate-rm": _mode_estimate_rm,
    "consistency-sweep": _mode_sweep,
    "reproduce-figures": _mode_figures,
}


def run(cfg: ExperimentConfig) -> dict:
    """Execute one mode, write its artifacts and ``report.json`` into ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    results = _DISPATCH[cfg.mode](cfg, out)
    report = {
        "schema_version": SCHEMA_VERSION,
        "mode": cfg.mode,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "model_hash": cfg.model.digest(),
        "timings": {"total_seconds": time.perf_counter() - start},
        "results": results,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, default=_json_default))
    return report


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o) if math.isfinite(o) else str(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["schema_version", "mode", "config", "seeds", "model_hash", "timings", "results"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "mode": {"enum": list(MODES)},
        "config": {"type": "object", "required": ["model", "n", "seeds"]},
        "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "model_hash": {"type": "string", "pattern": "^[0-9a-f]{16}$"},
        "timings": {
            "type": "object",
            "required": ["total_seconds"],
            "properties": {"total_seconds": {"type": "number", "minimum": 0}},
        },
        "results": {"type": "object"},
    },
}
