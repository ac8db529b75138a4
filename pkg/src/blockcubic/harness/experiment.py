"""Experiment configuration, batch runs over (method, tau) and artifact output.

A configuration file is YAML (JSON also parses) with these keys:

.. code-block:: yaml

    task: synthetic_cubic          # or logistic_constrained, poisson_dual, poisson_synthetic
    methods: [rbcn, bcgd]          # per task, see TASK_METHODS
    taus: [1, 8, 64]
    generator: {N: 64, seed: 0}    # exactly one of generator / dataset
    # dataset: data/leu.svm        # LIBSVM file, relative to the config file
    target: 1.0e-12                # residual for primal tasks, duality gap for dual tasks
    max_iterations: 1000000        # primal methods
    max_epochs: 100                # dual methods
    seed: 0                        # sampling seed
    lam: null                      # ERM regularization, default 1/m
    h_strategy: constant           # or adaptive (rbcn only)
    record_every: 1                # dual trace thinning
    output: runs/synthetic

The output directory receives one trace CSV per (method, tau), ``summary.json``
and two SVG plots: ``convergence.svg`` (residual or gap against epochs) and
``time_vs_tau.svg`` (time to target against tau).
"""
from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import yaml

from ..baselines import BaselineConfig, bcgd_run, dual_baseline_run
from ..blocks import SamplingSpec
from ..cubsolve import NumericalFailure
from ..erm import (
    ErmProblem,
    SdcnaConfig,
    constrained_rbcn_run,
    logistic_erm,
    poisson_erm,
    primal_problem,
    sdcna_run,
)
from ..problem import CompositeProblem
from ..rbcn import AdaptiveH, ConstantH, RbcnConfig, rbcn_run
from .data import gen_synthetic_cubic, gen_synthetic_logistic, gen_synthetic_poisson, parse_libsvm
from .svgplot import Series, line_plot

__all__ = [
    "TASK_METHODS",
    "ExperimentConfig",
    "load_config",
    "Instance",
    "load_instance",
    "reference_optimum",
    "ExperimentResult",
    "run_experiment",
]

TASK_METHODS = {
    "synthetic_cubic": ("rbcn", "bcgd"),
    "logistic_constrained": ("rbcn", "bcgd"),
    "poisson_dual": ("sdcna", "sdca", "sdna"),
    "poisson_synthetic": ("sdcna", "sdca", "sdna"),
}
DUAL_TASKS = ("poisson_dual", "poisson_synthetic")
DEFAULT_TARGET = {
    "synthetic_cubic": 1e-12,
    "logistic_constrained": 1e-8,
    "poisson_dual": 1e-6,
    "poisson_synthetic": 1e-6,
}
GENERATOR_KEYS = {
    "synthetic_cubic": {"N", "seed", "form"},
    "logistic_constrained": {"m", "d", "seed", "noise"},
    "poisson_dual": {"m", "d", "seed"},
    "poisson_synthetic": {"m", "d", "seed"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    methods: tuple
    taus: tuple
    generator: Optional[dict] = None
    dataset: Optional[str] = None
    target: Optional[float] = None
    max_iterations: int = 1_000_000
    max_epochs: float = 100.0
    seed: int = 0
    lam: Optional[float] = None
    h_strategy: str = "constant"
    record_every: int = 1
    output: str = "runs"

    def __post_init__(self):
        if self.task not in TASK_METHODS:
            raise ValueError(f"task must be one of {sorted(TASK_METHODS)}, got {self.task!r}")
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "taus", tuple(int(t) for t in self.taus))
        allowed = TASK_METHODS[self.task]
        if not self.methods:
            raise ValueError("methods must not be empty")
        bad = [m for m in self.methods if m not in allowed]
        if bad:
            raise ValueError(f"methods {bad} do not apply to {self.task}; choose from {allowed}")
        if not self.taus:
            raise ValueError("taus must not be empty")
        if min(self.taus) < 1:
            raise ValueError("every tau must be >= 1")
        if (self.generator is None) == (self.dataset is None):
            raise ValueError("give exactly one of 'generator' and 'dataset'")
        if self.task == "synthetic_cubic" and self.dataset is not None:
            raise ValueError("synthetic_cubic takes a generator, not a dataset")
        if self.generator is not None:
            unknown = set(self.generator) - GENERATOR_KEYS[self.task]
            if unknown:
                raise ValueError(f"unknown generator keys {sorted(unknown)} for {self.task}")
        if self.target is None:
            object.__setattr__(self, "target", DEFAULT_TARGET[self.task])
        if not self.target > 0:
            raise ValueError("target must be positive")
        if self.h_strategy not in ("constant", "adaptive"):
            raise ValueError("h_strategy must be 'constant' or 'adaptive'")
        if self.max_iterations < 1 or not self.max_epochs > 0 or self.record_every < 1:
            raise ValueError("iteration, epoch and record limits must be positive")

    @classmethod
    def from_mapping(cls, data: dict, base_dir: str = ".") -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        data = dict(data)
        if data.get("dataset") is not None:
            data["dataset"] = os.path.join(base_dir, str(data["dataset"]))
        for key in ("methods", "taus"):
            if isinstance(data.get(key), (str, int)):
                data[key] = [data[key]]
        return cls(**data)

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with the non-None ``changes`` applied."""
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.from_mapping(data, base_dir=os.path.dirname(os.path.abspath(path)))


@dataclass(eq=False)
class Instance:
    """A loaded problem: ``problem`` for the synthetic task, ``erm`` otherwise."""

    task: str
    name: str
    problem: Optional[CompositeProblem] = None
    erm: Optional[ErmProblem] = None

    @property
    def dim(self) -> int:
        """Number of sampled coordinates: blocks, features or dual variables."""
        if self.problem is not None:
            return self.problem.partition.n
        return self.erm.m if self.task in DUAL_TASKS else self.erm.d


def load_instance(cfg: ExperimentConfig) -> Instance:
    gen = dict(cfg.generator or {})
    if cfg.task == "synthetic_cubic":
        N, seed = int(gen.get("N", 64)), int(gen.get("seed", 0))
        problem = gen_synthetic_cubic(N, seed, form=gen.get("form", "residual"))
        return Instance(cfg.task, f"synthetic_cubic_N{N}_s{seed}", problem=problem)
    if cfg.dataset is not None:
        with open(cfg.dataset, encoding="utf-8") as f:
            ds = parse_libsvm(f, name=os.path.basename(cfg.dataset))
    elif cfg.task == "logistic_constrained":
        ds = gen_synthetic_logistic(int(gen.get("m", 40)), int(gen.get("d", 500)),
                                    int(gen.get("seed", 0)), noise=float(gen.get("noise", 0.5)))
    else:
        ds = gen_synthetic_poisson(int(gen.get("m", 200)), int(gen.get("d", 40)), int(gen.get("seed", 0)))
    if cfg.task == "logistic_constrained":
        erm = logistic_erm(ds.dense(), ds.labels, cfg.lam)
    else:
        y = ds.labels
        if np.any(y < 0) or np.any(y != np.round(y)):
            raise ValueError("poisson tasks need nonnegative integer counts")
        erm = poisson_erm(ds.dense(), y, cfg.lam)
    return Instance(cfg.task, ds.name, erm=erm)


def reference_optimum(inst: Instance, max_iterations: int = 1000):
    """``(F*, x*)`` from a full-sampling cubic Newton run to numerical stagnation."""
    full = RbcnConfig(sampling=SamplingSpec(kind="full"), max_iterations=max_iterations)
    if inst.problem is not None:
        tr = rbcn_run(inst.problem, full)
    elif inst.task == "logistic_constrained":
        tr = constrained_rbcn_run(inst.erm, full)
    else:
        raise ValueError("dual tasks measure the duality gap and need no reference optimum")
    return float(np.min(tr.objectives())), tr.x


@dataclass
class ExperimentResult:
    output: str
    summary: dict
    runs: list = field(default_factory=list)

    @property
    def all_failed(self) -> bool:
        return bool(self.runs) and all(r["status"] == "failed" for r in self.runs)


def _strategy(cfg: ExperimentConfig):
    return AdaptiveH() if cfg.h_strategy == "adaptive" else ConstantH()


def _run_one(inst: Instance, cfg: ExperimentConfig, method: str, tau: int, f_star):
    spec = SamplingSpec(tau=tau, seed=cfg.seed)
    if method == "rbcn":
        rc = RbcnConfig(sampling=spec, h_strategy=_strategy(cfg), max_iterations=cfg.max_iterations,
                        target_accuracy=cfg.target, stall_tol=0.0)
        if inst.problem is not None:
            return rbcn_run(inst.problem, rc, f_star=f_star)
        return constrained_rbcn_run(inst.erm, rc, f_star=f_star)
    if method == "bcgd":
        problem = inst.problem if inst.problem is not None else primal_problem(inst.erm)
        bc = BaselineConfig(method="bcgd", sampling=spec, max_iterations=cfg.max_iterations,
                            target_accuracy=cfg.target)
        return bcgd_run(problem, bc, f_star=f_star)
    if method == "sdcna":
        sc = SdcnaConfig(sampling=spec, max_epochs=cfg.max_epochs, target_gap=cfg.target,
                         record_every=cfg.record_every)
        return sdcna_run(inst.erm, sc).trace
    bc = BaselineConfig(method=method, sampling=spec, max_epochs=cfg.max_epochs,
                        target_gap=cfg.target, record_every=cfg.record_every)
    return dual_baseline_run(inst.erm, bc).trace


def _describe(inst: Instance, trace, method: str, tau: int, f_star) -> dict:
    """Summary numbers, all read off the terminal row of ``trace``."""
    if inst.task in DUAL_TASKS:
        epochs = float(trace.epoch[-1])
        final = float(trace.gap[-1])
        iterations = None
    else:
        iterations = int(trace.k[-1])
        epochs = iterations * tau / inst.dim
        final = float(trace.objective[-1]) - f_star
    return {
        "method": method,
        "tau": tau,
        "status": trace.status,
        "reached": trace.status == "target",
        "iterations": iterations,
        "epochs": epochs,
        "time_ms": float(trace.elapsed_ms[-1]),
        "final": final,
        "error": None,
    }


def _curves(inst: Instance, trace, tau: int, f_star):
    if inst.task in DUAL_TASKS:
        return np.asarray(trace.epoch), np.asarray(trace.gap)
    k = np.asarray(trace.k, dtype=float)
    return k * tau / inst.dim, np.asarray(trace.objective) - f_star


def run_experiment(cfg: ExperimentConfig, log=None) -> ExperimentResult:
    """Run every (method, tau) pair and write traces, ``summary.json`` and SVG plots.

    A run that raises a numerical failure is recorded with status ``failed``
    and its partial trace; the remaining runs still execute.
    """
    inst = load_instance(cfg)
    too_big = [t for t in cfg.taus if t > inst.dim]
    if too_big:
        raise ValueError(f"taus {too_big} exceed the {inst.dim} sampled coordinates of {inst.name}")
    os.makedirs(cfg.output, exist_ok=True)
    f_star = None
    if inst.task not in DUAL_TASKS:
        f_star, _ = reference_optimum(inst)
    runs, series = [], []
    for method in cfg.methods:
        for tau in cfg.taus:
            if log:
                log(f"{method} tau={tau} ...")
            error = None
            try:
                trace = _run_one(inst, cfg, method, tau, f_star)
            except NumericalFailure as e:
                trace = e.info.get("trace")
                error = str(e)
            fname = f"{method}_tau{tau}.csv"
            if trace is not None and len(trace):
                trace.write_csv(os.path.join(cfg.output, fname))
                row = _describe(inst, trace, method, tau, f_star)
                x, y = _curves(inst, trace, tau, f_star)
                series.append(Series(f"{method} tau={tau}", x, y))
            else:
                row = {"method": method, "tau": tau, "reached": False, "iterations": None,
                       "epochs": None, "time_ms": None, "final": None}
            if error is not None:
                row.update(status="failed", reached=False, error=error)
            row["trace"] = fname if trace is not None and len(trace) else None
            runs.append(row)
            if log:
                log(f"  {row['status']}: final={row['final']!r} time_ms={row['time_ms']!r}")
    dual = inst.task in DUAL_TASKS
    summary = {
        "task": inst.task,
        "instance": inst.name,
        "dimension": inst.dim,
        "target": cfg.target,
        "measure": "duality_gap" if dual else "objective_residual",
        "f_star": f_star,
        "config": dataclasses.asdict(cfg),
        "runs": runs,
    }
    with open(os.path.join(cfg.output, "summary.json"), "w", encoding="utf-8") as f:
        json.dump(summary, f, indent=2, default=float)
        f.write("\n")
    ylabel = "duality gap" if dual else "F(x) - F*"
    with open(os.path.join(cfg.output, "convergence.svg"), "w", encoding="utf-8") as f:
        f.write(line_plot(series, f"{inst.name}: convergence", "epochs", ylabel, logy=True))
    timing = []
    for method in cfg.methods:
        done = [r for r in runs if r["method"] == method and r["reached"]]
        timing.append(Series(method, [r["tau"] for r in done], [r["time_ms"] for r in done]))
    with open(os.path.join(cfg.output, "time_vs_tau.svg"), "w", encoding="utf-8") as f:
        f.write(line_plot(timing, f"{inst.name}: time to {cfg.target:g}", "tau",
                          "time to target (ms)", logy=True, markers=True))
    return ExperimentResult(cfg.output, summary, runs)
