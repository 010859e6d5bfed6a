"""Experiment configuration, replicate execution and reports.

A run is described by an :class:`ExperimentConfig`. The model instance
(design or rating data) is built once from the ``design`` stream of the base
seed, or read from ``data_file``. Replicate ``r`` draws its initial pair from
stream ``(base_seed, r, "init")`` and runs the coupled kernel on stream
``(base_seed, r, "kernel")``, so rows do not depend on the number of workers.
Rows are returned sorted by replicate id.
"""

import csv
import itertools
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from importlib import resources

import jsonschema
import numpy as np

from . import __version__
from ._validation import check_choice, check_int, check_positive
from .chain import EstimatorConfig, h_k_m, init_offset_pair, run_two_step
from .crem import CremModel, CrossedDesign, design_from_csv, design_to_csv, simulate_regime
from .gaussian import (
    UpdateSchedule,
    bgs_autoregression,
    bound_crem_random_design,
    bound_general,
    bound_relaxation_form,
    bound_reversible,
    bound_two_block,
    c_epsilon,
    kernel_tv_distance,
    start_log_distance,
)
from .glmm import MH_VARIANTS, GlmmModel, make_family, simulate_glmm
from .pmf import PmfData, PmfModel, pmf_from_csv, pmf_to_csv, simulate_pmf
from .rng import derive_rng, replicate_seed

MODELS = ("crem_vanilla", "crem_collapsed", "glmm_mwg", "pmf_vanilla", "pmf_local")
SCHEMA_VERSION = "1.0"


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a batch of coupled runs.

    ``I`` is the number of levels per factor (users and items for PMF).
    ``eps=None`` selects the model default threshold. ``m < 0`` disables the
    estimator; otherwise ``k <= m`` and ``test_functions`` lists names such
    as ``"mu"``, ``"a1_3"`` (factor 1, level 3, 1-based), ``"tau0"``,
    ``"effects"`` (all of mu and a as a vector) or, for PMF, ``"fit_1_2"``
    and ``"scaled_norm_u"``.
    """

    model: str = "crem_collapsed"
    regime: int = 1
    data_file: str | None = None
    K: int = 2
    I: int = 50
    d: int = 1
    tau: float | list = 1.0
    tau_mode: str = "fixed"
    tau_shape_convention: str = "paper"
    family: str = "laplace"
    laplace_scale: float = 1.0
    S: int = 1
    variant: str = "fully_factorized_maximal"
    hyper: dict = field(default_factory=lambda: {"a": 1.0, "b": 1.0, "c": 1.0, "d_scale": 1.0})
    init_sd: float = 0.1
    eps: float | None = None
    max_iter: int = 100000
    distance: str = "euclidean"
    k: int = 0
    m: int = -1
    test_functions: list = field(default_factory=list)
    replicates: int = 10
    base_seed: int = 0
    threads: int = 1
    bounds: bool = False
    bound_deltas: list = field(default_factory=lambda: [0.1, 0.5, 1.0])
    force_equal_start: bool = False

    def __post_init__(self):
        self.validate()

    def validate(self):
        jsonschema.validate(self.to_dict(), load_schema("config"))
        check_choice(self.model, "model", MODELS)
        check_choice(self.regime, "regime", (1, 2))
        check_choice(self.variant, "variant", MH_VARIANTS)
        check_int(self.replicates, "replicates", 1)
        check_int(self.threads, "threads", 1)
        check_int(self.max_iter, "max_iter", 1)
        if self.eps is not None:
            check_positive(self.eps, "eps")
        if self.m >= 0 and not 0 <= self.k <= self.m:
            raise ValueError("estimator horizon must satisfy 0 <= k <= m")
        return self

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def replace(self, **changes):
        d = self.to_dict()
        d.update({k: v for k, v in changes.items() if v is not None})
        return ExperimentConfig.from_dict(d)

    @property
    def estimator_enabled(self):
        return self.m >= 0


def load_schema(name):
    text = resources.files("coupled_gibbs").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_output(obj, name):
    jsonschema.validate(obj, load_schema(name))
    return obj


# --- instances -------------------------------------------------------------


def simulate_data(cfg: ExperimentConfig):
    """Simulate the data set of ``cfg`` from the ``design`` stream of the base seed."""
    rng = derive_rng(cfg.base_seed, 0, "design")
    if cfg.model.startswith("crem"):
        return simulate_regime(cfg.regime, cfg.K, cfg.I, cfg.tau, rng)
    if cfg.model == "glmm_mwg":
        return simulate_glmm(cfg.regime, cfg.K, cfg.I, cfg.tau, _family(cfg), rng)
    return simulate_pmf(cfg.regime, cfg.I, rng, d=cfg.d, **cfg.hyper)


def write_data(cfg: ExperimentConfig, data, path):
    if cfg.model.startswith("pmf"):
        pmf_to_csv(data, path)
    else:
        design_to_csv(data, path)


def read_data(cfg: ExperimentConfig, path=None):
    path = cfg.data_file if path is None else path
    if cfg.model.startswith("pmf"):
        data = pmf_from_csv(path, d=cfg.d, **cfg.hyper)
        if data.I1 < cfg.I or data.I2 < cfg.I:
            data = PmfData(data.i, data.j, data.y, max(data.I1, cfg.I), max(data.I2, cfg.I), cfg.d, **cfg.hyper)
        return data
    design = design_from_csv(path)
    if design.K != cfg.K:
        raise ValueError(f"{path}: file has {design.K} factors, config says K={cfg.K}")
    sizes = np.maximum(design.sizes, cfg.I)
    return CrossedDesign(design.levels, design.y, sizes)


def _family(cfg):
    tau0 = float(np.atleast_1d(cfg.tau)[0])
    return make_family(cfg.family, cfg.laplace_scale, tau0)


def build_model(cfg: ExperimentConfig, data=None):
    """Model object for ``cfg``; data are read, simulated, or taken as given."""
    if data is None:
        data = read_data(cfg) if cfg.data_file else simulate_data(cfg)
    if cfg.model.startswith("crem"):
        return CremModel(data, cfg.tau, cfg.tau_mode, cfg.model.split("_")[1], cfg.tau_shape_convention)
    if cfg.model == "glmm_mwg":
        return GlmmModel(data, _family(cfg), cfg.tau, cfg.tau_mode, cfg.S, cfg.variant,
                         tau_shape_convention=cfg.tau_shape_convention)
    return PmfModel(data, "vanilla" if cfg.model == "pmf_vanilla" else "local_centering", cfg.init_sd)


def configured_pair_kernel(cfg: ExperimentConfig, model):
    """The model's pair kernel with the distance selected in ``cfg``.

    ``"tv"`` is the total variation between the two next-sweep laws, which is
    available in closed form for fixed-precision Gaussian crossed-effects
    models. For the collapsed sampler the intercept is redrawn given the
    effects, so the TV of the effect kernels is the TV of the full sweep.
    """
    pk = model.pair_kernel()
    if cfg.distance == "tv":
        if not isinstance(model, CremModel) or model.tau_mode != "fixed":
            raise ValueError("tv distance needs a fixed-precision Gaussian crossed-effects model")
        target = model.gaussian_target()
        ar = bgs_autoregression(target, UpdateSchedule.forward(target.n_blocks))
        pk.distance = lambda x, y: kernel_tv_distance(ar, model.target_coordinates(x), model.target_coordinates(y))
    return pk


def model_eps(cfg, model):
    return float(model.default_eps()) if cfg.eps is None else float(cfg.eps)


def resolve_test_functions(cfg: ExperimentConfig, model):
    """Resolve test-function names to callables on flat state vectors."""
    out = {}
    if isinstance(model, PmfModel):
        for name in cfg.test_functions:
            if name in ("tau0", "scaled_norm_u"):
                out[name] = model.test_functions(())[name]
            elif name.startswith("fit_"):
                i, j = _indices(name, 2)
                out[name] = model.test_functions(((i - 1, j - 1),))[name]
            else:
                raise ValueError(f"unknown PMF test function {name!r}")
        return out
    lay = model.layout
    for name in cfg.test_functions:
        if name == "mu":
            out[name] = lambda v: float(v[0])
        elif name == "effects":
            out[name] = lambda v, n=lay.n_effects: np.asarray(v[:n])
        elif name.startswith("tau") and name[3:].isdigit():
            idx = lay.n_effects + int(name[3:])
            if idx >= lay.dim:
                raise ValueError(f"test function {name!r} out of range")
            out[name] = lambda v, idx=idx: float(v[idx])
        elif name.startswith("a"):
            k, i = _indices(name, 2, sep_first=1)
            if not (1 <= k <= lay.K and 1 <= i <= lay.sizes[k - 1]):
                raise ValueError(f"test function {name!r} out of range")
            idx = lay.a[k - 1].start + i - 1
            out[name] = lambda v, idx=idx: float(v[idx])
        else:
            raise ValueError(f"unknown test function {name!r}")
    return out


def _indices(name, n, sep_first=None):
    body = name[sep_first:] if sep_first else name.split("_", 1)[1]
    parts = body.split("_")
    if len(parts) != n or not all(p.isdigit() for p in parts):
        raise ValueError(f"malformed test function name {name!r}")
    return [int(p) for p in parts]


# --- bounds ----------------------------------------------------------------


class BoundEvaluator:
    """Meeting-time bounds for a fixed-precision CREM instance.

    The chain is viewed as a blocked Gibbs sampler on a Gaussian target (the
    effects with mu integrated out for the collapsed sampler). The TV
    threshold is 1 / (K I). Bounds whose preconditions fail are reported as
    ``{"applicable": False, "reason": ...}``.
    """

    def __init__(self, model, deltas=(0.1, 0.5, 1.0), gamma=0.1):
        self.model = model
        self.gamma = float(gamma)
        self.deltas = tuple(float(x) for x in deltas)
        self.reason = None
        if not isinstance(model, CremModel):
            self.reason = "bounds need a Gaussian crossed-effects model"
        elif model.tau_mode != "fixed":
            self.reason = "bounds need fixed precisions"
        if self.reason is None:
            self.target = model.gaussian_target()
            K = self.target.n_blocks
            self.schedule = UpdateSchedule.forward(K)
            self.ar = bgs_autoregression(self.target, self.schedule)
            self.chol = self.target.chol_covariance
        self.eps = 1.0 / (model.design.K * float(np.max(model.design.sizes))) if isinstance(model, CremModel) else None

    def evaluate(self, x0, y0):
        if self.reason is not None:
            return {"all": {"applicable": False, "reason": self.reason}}
        tx, ty = self.model.target_coordinates(x0), self.model.target_coordinates(y0)
        out = {}

        def attempt(name, fn):
            try:
                out[name] = {"applicable": True, "value": float(fn())}
            except (ValueError, RuntimeError) as exc:
                out[name] = {"applicable": False, "reason": str(exc)}

        attempt("reversible", lambda: bound_reversible(self.ar, self.chol, tx, ty, self.eps))
        attempt("relaxation_form", lambda: bound_relaxation_form(self.ar, tx, ty, self.eps, self.chol))
        attempt("two_block_forward", lambda: bound_two_block(self.ar, tx, ty, self.eps, self.chol))
        for delta in self.deltas:
            attempt(f"general_delta_{delta:g}", lambda delta=delta: bound_general(self.ar, self.chol, tx, ty, self.eps, delta)[0])
        # holds with high probability over uniformly drawn bi-regular designs only
        attempt("random_design", lambda: self._random_design(tx, ty))
        vals = [v["value"] for n, v in out.items() if v["applicable"] and n != "random_design"]
        out["best"] = {"applicable": bool(vals), "value": float(min(vals))} if vals else {"applicable": False, "reason": "no bound applies"}
        return out

    def _random_design(self, tx, ty):
        des = self.model.design
        if des.K != 2 or self.model.sampler != "collapsed":
            raise ValueError("closed-form random-design bound needs the collapsed two-factor sampler")
        c1, c2 = des.counts[0], des.counts[1]
        if np.any(c1 != c1[0]) or np.any(c2 != c2[0]) or np.any(des.pair_counts(0, 1).data > 1):
            raise ValueError("closed-form random-design bound needs a bi-regular design with one observation per cell")
        c0 = start_log_distance(self.target, tx, ty, self.chol)
        tau = self.model.tau
        return bound_crem_random_design(tau[0], tau[1], tau[2], int(c1[0]), int(c2[0]), self.gamma, c0, c_epsilon(self.eps))


# --- replicates ------------------------------------------------------------

_WORKER = {}


def _setup(cfg_dict, data):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    model = build_model(cfg, data)
    _WORKER.clear()
    _WORKER.update(cfg=cfg, model=model, bounds=None, pair_kernel=configured_pair_kernel(cfg, model))


def _bounds_for(x0, y0):
    if _WORKER["bounds"] is None:
        _WORKER["bounds"] = BoundEvaluator(_WORKER["model"], _WORKER["cfg"].bound_deltas)
    return _WORKER["bounds"].evaluate(x0, y0)


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return [float(x) for x in v.ravel()]
    return float(v)


def _run_one(r):
    cfg, model = _WORKER["cfg"], _WORKER["model"]
    init_rng = derive_rng(cfg.base_seed, r, "init")
    kernel_rng = derive_rng(cfg.base_seed, r, "kernel")
    pk = _WORKER["pair_kernel"]
    if cfg.force_equal_start:
        x0 = model.sample_initial(init_rng)
        y0 = x0.copy()
    else:
        x0, y0 = init_offset_pair(model.sample_initial, pk, init_rng)
    horizon = cfg.m if cfg.estimator_enabled else 0
    start = time.perf_counter_ns()
    traj = run_two_step(pk, x0, y0, model_eps(cfg, model), cfg.max_iter, kernel_rng, horizon, log_steps=False)
    elapsed = time.perf_counter_ns() - start
    T = traj.record.T
    n_coupled = T if T is not None else cfg.max_iter
    n_sweeps = 2 * n_coupled + max(0, len(traj.x) - 1 - n_coupled)
    row = {
        "replicate": r,
        "replicate_seed": replicate_seed(cfg.base_seed, r),
        "T": T,
        "truncated": traj.record.truncated,
        "k": cfg.k if cfg.estimator_enabled else None,
        "m": cfg.m if cfg.estimator_enabled else None,
        "estimates": {},
    }
    if cfg.estimator_enabled and T is not None:
        est = h_k_m(traj.x, traj.y, T, EstimatorConfig(cfg.k, cfg.m, resolve_test_functions(cfg, model)))
        row["estimates"] = {name: _jsonable(v) for name, v in est.items()}
    if cfg.bounds:
        row["bounds"] = _bounds_for(x0, y0)
    return row, elapsed, n_sweeps


def run_replicates(cfg: ExperimentConfig, data=None):
    """Execute all replicates. Returns ``(rows, total_ns, total_sweeps)`` with rows sorted by replicate."""
    if data is None:
        data = read_data(cfg) if cfg.data_file else simulate_data(cfg)
    ids = range(cfg.replicates)
    if cfg.threads == 1:
        _setup(cfg.to_dict(), data)
        results = [_run_one(r) for r in ids]
    else:
        with ProcessPoolExecutor(max_workers=cfg.threads, initializer=_setup, initargs=(cfg.to_dict(), data)) as pool:
            results = list(pool.map(_run_one, ids))
    results.sort(key=lambda t: t[0]["replicate"])
    rows = [t[0] for t in results]
    return rows, sum(t[1] for t in results), sum(t[2] for t in results)


@dataclass
class RunReport:
    config: dict
    rows: list
    wall_ns_per_sweep: float | None = None

    def aggregate(self):
        """Summary statistics recomputed from the rows."""
        times = np.array([r["T"] for r in self.rows if r["T"] is not None], dtype=float)
        agg = {"n_replicates": len(self.rows), "n_truncated": sum(bool(r["truncated"]) for r in self.rows)}
        if times.size:
            agg.update(
                mean_T=float(times.mean()),
                stderr_T=float(times.std(ddof=1) / np.sqrt(times.size)) if times.size > 1 else None,
                quantiles_T={f"q{int(q * 100)}": float(np.quantile(times, q)) for q in (0.5, 0.9, 0.95)},
                max_T=float(times.max()),
            )
        else:
            agg.update(mean_T=None, stderr_T=None, quantiles_T={}, max_T=None)
        return agg

    def estimates(self):
        names = sorted({n for r in self.rows for n in r["estimates"]})
        out = {}
        for name in names:
            vals = np.array([r["estimates"][name] for r in self.rows if name in r["estimates"]], dtype=float)
            se = vals.std(axis=0, ddof=1) / np.sqrt(vals.shape[0]) if vals.shape[0] > 1 else np.full(vals.shape[1:], np.nan)
            mean = vals.mean(axis=0)
            out[name] = {"mean": _jsonable(mean), "stderr": _nan_to_none(se), "n": int(vals.shape[0])}
        return out

    def bounds(self):
        vals = {}
        for r in self.rows:
            for name, b in r.get("bounds", {}).items():
                if b.get("applicable"):
                    vals.setdefault(name, []).append(b["value"])
                else:
                    vals.setdefault(name, b)
        out = {}
        for name, v in vals.items():
            if isinstance(v, list):
                out[name] = {"applicable": True, "mean": float(np.mean(v)), "max": float(np.max(v))}
            else:
                out[name] = {"applicable": False, "reason": v.get("reason", "")}
        return out

    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "config": self.config,
            "aggregate": self.aggregate(),
            "estimates": self.estimates(),
            "bounds": self.bounds(),
            "wall_ns_per_sweep": self.wall_ns_per_sweep,
        }

    @property
    def any_truncated(self):
        return any(r["truncated"] for r in self.rows)


def _nan_to_none(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return None if np.isnan(a) else float(a)
    return [None if np.isnan(x) else float(x) for x in a.ravel()]


def run_experiment(cfg: ExperimentConfig, data=None) -> RunReport:
    rows, ns, sweeps = run_replicates(cfg, data)
    return RunReport(cfg.to_dict(), rows, ns / sweeps if sweeps else None)


def jsonl_lines(rows):
    return [json.dumps(validate_output(r, "replicate_row"), sort_keys=True) for r in rows]


def write_report(report: RunReport, out_dir, stem="run"):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, f"{stem}.jsonl"), "w") as fh:
        for line in jsonl_lines(report.rows):
            fh.write(line + "\n")
    doc = validate_output(report.to_dict(), "run_report")
    with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return doc


def bound_report(cfg: ExperimentConfig, data=None):
    """Evaluate every bound at each replicate's initial pair (no chains are run)."""
    model = build_model(cfg, data)
    ev = BoundEvaluator(model, cfg.bound_deltas)
    rows = []
    for r in range(cfg.replicates):
        x0, y0 = init_offset_pair(model.sample_initial, model.pair_kernel(), derive_rng(cfg.base_seed, r, "init"))
        rows.append({"replicate": r, "bounds": ev.evaluate(x0, y0)})
    report = RunReport(cfg.to_dict(), [dict(row, T=None, truncated=False, estimates={}) for row in rows])
    doc = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg.to_dict(),
        "eps": ev.eps,
        "bounds": report.bounds(),
        "per_replicate": rows,
    }
    return validate_output(doc, "bound_report")


# --- sweeps ----------------------------------------------------------------

SWEEP_COLUMNS = ("cell", "model", "regime", "K", "I", "S", "n_replicates", "n_truncated", "mean_T", "stderr_T",
                 "q90_T", "bound", "error")


def sweep_cells(base: ExperimentConfig, grid: dict):
    """Cartesian product of ``grid`` axes (config field -> list of values), in declared order."""
    if not grid:
        return [("cell0", base)]
    names = list(grid)
    cells = []
    for i, values in enumerate(itertools.product(*(grid[n] for n in names))):
        cfg = base.replace(**dict(zip(names, values)))
        label = "_".join(f"{n}-{v}" for n, v in zip(names, values))
        cells.append((f"cell{i:03d}_{label}", cfg))
    return cells


def run_sweep(base: ExperimentConfig, grid: dict, out_dir):
    """Run every grid cell, writing ``cells/<cell>.json``; existing cell files are reused."""
    cell_dir = os.path.join(out_dir, "cells")
    os.makedirs(cell_dir, exist_ok=True)
    rows = []
    for name, cfg in sweep_cells(base, grid):
        path = os.path.join(cell_dir, f"{name}.json")
        if os.path.exists(path):
            with open(path) as fh:
                rows.append(json.load(fh))
            continue
        row = {"cell": name, "model": cfg.model, "regime": cfg.regime, "K": cfg.K, "I": cfg.I, "S": cfg.S}
        try:
            rep = run_experiment(cfg)
            agg = rep.aggregate()
            b = rep.bounds().get("best", {})
            row.update(n_replicates=agg["n_replicates"], n_truncated=agg["n_truncated"], mean_T=agg["mean_T"],
                       stderr_T=agg["stderr_T"], q90_T=agg["quantiles_T"].get("q90"),
                       bound=b.get("mean") if b.get("applicable") else None, error="")
        except Exception as exc:  # recorded per cell, the sweep goes on
            row.update(n_replicates=cfg.replicates, n_truncated=None, mean_T=None, stderr_T=None, q90_T=None,
                       bound=None, error=f"{type(exc).__name__}: {exc}")
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            json.dump(row, fh, sort_keys=True)
        os.replace(tmp, path)
        rows.append(row)
    with open(os.path.join(out_dir, "sweep.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({c: ("" if row.get(c) is None else row.get(c)) for c in SWEEP_COLUMNS})
    return rows
