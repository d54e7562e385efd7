"""End-to-end experiment orchestration over simulated latent-field data.

A plan names the data-generating process (kernel family, true values, grid
sizes, masking), the prior backends to compare, the hyperpriors and chain
settings, and the repeat seeds. For every (grid, lengthscale, seed) cell the
runner simulates data once, samples the reference backend once, samples every
comparison backend against the same data, and scores each against the
reference chain.

Plan files are JSON with this shape (all fields with defaults optional)::

    {
      "name": "desk_matern12",
      "kind": "grid",                     # grid | spatiotemporal | multilocation
      "grids": [16],                      # side lengths (site counts for multilocation)
      "n_times": 5,                       # spatiotemporal only
      "true_lengthscales": [30.0],
      "true_beta": 1.5,
      "family": "matern12",
      "data_theta": {"variance": 1.0},    # fixed true hyperparameters
      "likelihood": "poisson",
      "trials": 50,                       # binomial only
      "mask": {"fraction": 0.5, "mode": "contiguous_rect", "drop_times": []},
      "hyperpriors": {"lengthscale": {"dist": "lognormal", "mu": 3.0, "sd": 0.4},
                       "beta": {"dist": "normal", "mu": 0.0, "sd": 31.6227766}},
      "fixed_infer": {"variance": 1.0},
      "backends": [{"kind": "exact_gp"},
                    {"kind": "surrogate", "checkpoint": "ckpt/gmlp.drvckpt"},
                    {"kind": "rff"},
                    {"kind": "inducing"}],
      "reference": {"kind": "exact_gp"},
      "chain": {"n_warmup": 1000, "n_draws": 2000, "n_chains": 1,
                 "target_accept": 0.8, "max_depth": 10},
      "seeds": [1, 2, 3],
      "jitter": 1e-6
    }
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .distributions import priors_from_config
from .fileformats import read_blocks, write_blocks
from .inference import (
    ExactGPBackend,
    InducingBackend,
    ProbModel,
    RFFBackend,
    SurrogateBackend,
    UnsupportedBackendError,
    default_inducing_count,
    posterior_predictive,
    subset_inducing,
)
from .kernels import KernelSpec, Locations
from .metrics import MetricReport, MetricRow, coverage, ess, lpd, mse, wasserstein1
from .nuts import ChainResult, nuts_sample, save_chain
from .sampling import MaskSpec, apply_mask, chol_factor
from .surrogates import load_checkpoint

CELL_MAGIC = b"DRVCELL1"


@dataclass
class ChainSettings:
    n_warmup: int = 1000
    n_draws: int = 2000
    n_chains: int = 1
    target_accept: float = 0.8
    max_depth: int = 10


@dataclass
class ExperimentPlan:
    name: str
    kind: str = "grid"
    grids: list = field(default_factory=lambda: [16])
    n_times: int = 5
    true_lengthscales: list = field(default_factory=lambda: [30.0])
    true_beta: float = 1.5
    family: str = "matern12"
    data_theta: dict = field(default_factory=lambda: {"variance": 1.0})
    likelihood: str = "poisson"
    trials: int = 50
    mask: dict = field(default_factory=lambda: {"fraction": 0.5, "mode": "contiguous_rect"})
    hyperpriors: dict = field(default_factory=dict)
    fixed_infer: dict = field(default_factory=lambda: {"variance": 1.0})
    backends: list = field(default_factory=lambda: [{"kind": "exact_gp"}])
    reference: dict = field(default_factory=lambda: {"kind": "exact_gp"})
    chain: ChainSettings = field(default_factory=ChainSettings)
    seeds: list = field(default_factory=lambda: [1])
    jitter: float = 1e-6

    def __post_init__(self):
        if not self.seeds:
            raise ValueError("need at least one repeat seed")
        if self.kind not in ("grid", "spatiotemporal", "multilocation"):
            raise ValueError(f"unknown experiment kind {self.kind!r}")
        if isinstance(self.chain, dict):
            self.chain = ChainSettings(**self.chain)

    @staticmethod
    def from_config(cfg: dict) -> "ExperimentPlan":
        known = set(ExperimentPlan.__dataclass_fields__)
        extra = set(cfg) - known
        if extra:
            raise ValueError(f"unknown plan fields: {sorted(extra)}")
        return ExperimentPlan(**cfg)

    def to_config(self) -> dict:
        out = {}
        for k in self.__dataclass_fields__:
            v = getattr(self, k)
            out[k] = {kk: getattr(v, kk) for kk in v.__dataclass_fields__} \
                if isinstance(v, ChainSettings) else v
        return out


def load_plan(path) -> ExperimentPlan:
    with open(path) as fh:
        return ExperimentPlan.from_config(json.load(fh))


def backend_label(cfg: dict) -> str:
    kind = cfg["kind"]
    if "label" in cfg:
        return cfg["label"]
    if kind == "surrogate":
        return f"surrogate_{Path(cfg['checkpoint']).stem}"
    return kind


def make_backend(cfg: dict, family: str, locs: Locations, jitter: float):
    """Resolve one backend config; raises early when artifacts are missing."""
    kind = cfg.get("kind")
    if kind == "exact_gp":
        return ExactGPBackend(family, locs, jitter), math.nan
    if kind == "surrogate":
        path = Path(cfg["checkpoint"])
        if not path.exists():
            raise FileNotFoundError(
                f"backend {backend_label(cfg)!r}: missing checkpoint {path}")
        model, manifest, _, _ = load_checkpoint(path)
        train_s = manifest.get("train_info", {}).get("train_seconds", math.nan)
        return SurrogateBackend(model, locs, label=backend_label(cfg)), train_s
    if kind == "rff":
        n_features = int(cfg.get("n_features", 2 * locs.n_sites))
        return RFFBackend(family, locs, n_features, seed=int(cfg.get("seed", 0))), math.nan
    if kind == "inducing":
        m = int(cfg.get("count", default_inducing_count(locs.n_sites)))
        inducing = subset_inducing(Locations(locs.site_coords()) if locs.times is None else locs,
                                   m, seed=int(cfg.get("seed", 0)))
        return InducingBackend(family, locs, inducing, jitter), math.nan
    raise ValueError(f"unknown backend kind {kind!r}")


@dataclass
class CellData:
    locs: Locations
    grid_shape: tuple
    f_true: np.ndarray
    y: np.ndarray
    observed_idx: np.ndarray
    masked_idx: np.ndarray
    theta_true: dict


def _cell_locations(plan: ExperimentPlan, grid, seed: int) -> tuple[Locations, tuple]:
    if plan.kind == "grid":
        side = int(grid)
        return Locations.grid2d(side), (side, side)
    if plan.kind == "spatiotemporal":
        side = int(grid)
        locs = Locations.grid2d(side).with_times(np.arange(float(plan.n_times)))
        return locs, (plan.n_times, side, side)
    n = int(grid)
    rng_key = np.random.SeedSequence(entropy=seed, spawn_key=(31, n))
    rng = np.random.default_rng(rng_key)
    return Locations(rng.uniform(0.0, 100.0, size=(n, 2))), (n,)


def simulate_cell(plan: ExperimentPlan, grid, ell: float, seed: int) -> CellData:
    locs, grid_shape = _cell_locations(plan, grid, seed)
    theta = dict(plan.data_theta)
    theta["lengthscale"] = float(ell)
    spec = KernelSpec(family=plan.family, spatial_dim=locs.dim, **theta)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(37, int(grid))))
    low = chol_factor(spec, locs, plan.jitter)
    f_true = low @ rng.standard_normal(locs.n_sites)
    eta = plan.true_beta + f_true
    if plan.likelihood == "poisson":
        y = rng.poisson(np.exp(eta)).astype(float)
    else:
        p = 1.0 / (1.0 + np.exp(-eta))
        y = rng.binomial(plan.trials, p).astype(float)
    mask_cfg = dict(plan.mask)
    mask = MaskSpec(fraction=float(mask_cfg.get("fraction", 0.5)),
                    mode=mask_cfg.get("mode", "contiguous_rect"),
                    seed=seed, drop_times=tuple(mask_cfg.get("drop_times", ())))
    observed, masked = apply_mask(y, mask, grid_shape if mask.mode == "contiguous_rect" else None)
    return CellData(locs=locs, grid_shape=grid_shape, f_true=f_true, y=y,
                    observed_idx=observed, masked_idx=masked, theta_true=theta)


def _build_model(plan: ExperimentPlan, cell: CellData) -> ProbModel:
    return ProbModel(
        likelihood=plan.likelihood, family=plan.family, locs=cell.locs, y=cell.y,
        observed_idx=cell.observed_idx,
        hyperpriors=priors_from_config(plan.hyperpriors),
        fixed=dict(plan.fixed_infer),
        trials=np.full(cell.locs.n_sites, float(plan.trials))
        if plan.likelihood == "binomial" else None,
        jitter=plan.jitter)


def _run_chains(model, backend, plan: ExperimentPlan, seed: int) -> ChainResult:
    cs = plan.chain
    chains = []
    for c in range(cs.n_chains):
        chain_seed = int(np.random.SeedSequence(
            entropy=seed, spawn_key=(41, c)).generate_state(1)[0] % 2**31)
        chains.append(nuts_sample(model, backend, cs.n_warmup, cs.n_draws, chain_seed,
                                  cs.target_accept, cs.max_depth))
    if len(chains) == 1:
        return chains[0]
    merged = {k: np.concatenate([c.draws[k] for c in chains]) for k in chains[0].draws}
    return ChainResult(
        draws=merged,
        divergent=np.concatenate([c.divergent for c in chains]),
        tree_depth=np.concatenate([c.tree_depth for c in chains]),
        accept_stat=np.concatenate([c.accept_stat for c in chains]),
        energy=np.concatenate([c.energy for c in chains]),
        n_leapfrog=np.concatenate([c.n_leapfrog for c in chains]),
        step_size=chains[0].step_size,
        warmup_s=sum(c.warmup_s for c in chains),
        sampling_s=sum(c.sampling_s for c in chains),
        seed=chains[0].seed,
        warning=next((c.warning for c in chains if c.warning), None))


def _write_cell_data(path, plan, cell: CellData, grid, ell, seed) -> None:
    manifest = {
        "plan": plan.name, "kind": plan.kind, "grid": str(grid), "ell_true": float(ell),
        "beta_true": plan.true_beta, "seed": seed, "family": plan.family,
        "theta_true": cell.theta_true, "grid_shape": list(cell.grid_shape),
        "version": __version__,
    }
    blocks = {
        "coords": cell.locs.site_coords(),
        "f_true": cell.f_true,
        "y": cell.y,
        "observed_idx": cell.observed_idx.astype(np.float64),
        "masked_idx": cell.masked_idx.astype(np.float64),
    }
    times = cell.locs.site_times()
    if times is not None:
        blocks["times"] = times
    write_blocks(path, CELL_MAGIC, manifest, blocks)


def read_cell_data(path):
    return read_blocks(path, CELL_MAGIC)


def _write_draws_csv(path, chain: ChainResult) -> None:
    import csv as _csv

    names = sorted(k for k, v in chain.draws.items() if np.ndim(v) == 1)
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        w.writerow(names)
        cols = [chain.draws[k] for k in names]
        for i in range(len(cols[0])):
            w.writerow([repr(float(c[i])) for c in cols])


def _write_predictive_csv(path, cell: CellData, summ, chain_label: str) -> None:
    import csv as _csv

    coords = cell.locs.site_coords()
    times = cell.locs.site_times()
    q10, q50, q90 = (np.quantile(summ.y_rep, q, axis=0) for q in (0.1, 0.5, 0.9))
    observed = np.zeros(cell.y.size, dtype=int)
    observed[cell.observed_idx] = 1
    with open(path, "w", newline="") as fh:
        w = _csv.writer(fh)
        header = ["site", "x", "y_coord"] + (["t"] if times is not None else []) + \
            ["y_true", "observed", "f_true", "pred_mean", "pred_sd", "q10", "q50", "q90"]
        w.writerow(header)
        for i in range(cell.y.size):
            row = [i, repr(float(coords[i, 0])), repr(float(coords[i, 1]))]
            if times is not None:
                row.append(repr(float(times[i])))
            row += [repr(float(cell.y[i])), observed[i], repr(float(cell.f_true[i])),
                    repr(float(summ.y_mean[i])), repr(float(summ.y_rep_sd[i])),
                    repr(float(q10[i])), repr(float(q50[i])), repr(float(q90[i]))]
            w.writerow(row)


def run_cell(plan: ExperimentPlan, grid, ell: float, seed: int, out_dir,
             log=print) -> list[MetricRow]:
    """Simulate one cell, sample every backend, and score against the reference."""
    cell_dir = Path(out_dir) / f"cell_g{grid}_l{ell:g}_s{seed}"
    cell_dir.mkdir(parents=True, exist_ok=True)
    (cell_dir / "chains").mkdir(exist_ok=True)
    cell = simulate_cell(plan, grid, ell, seed)
    model = _build_model(plan, cell)
    _write_cell_data(cell_dir / "data.drvcell", plan, cell, grid, ell, seed)

    # resolve all backends up front so missing checkpoints fail fast
    resolved = []
    for cfg in plan.backends:
        backend, train_s = make_backend(cfg, plan.family, cell.locs, plan.jitter)
        resolved.append((cfg, backend_label(cfg), backend, train_s))
    ref_backend, _ = make_backend(plan.reference, plan.family, cell.locs, plan.jitter)
    ref_label = backend_label(plan.reference)

    if log:
        log(f"[{plan.name}] cell grid={grid} ell={ell:g} seed={seed}: reference chain")
    ref_chain = _run_chains(model, ref_backend, plan, seed)
    ref_summ = posterior_predictive(model, ref_chain, seed=seed)
    save_chain(cell_dir / "chains" / f"{ref_label}_reference.drvchn", ref_chain,
               {"model": {"backend": ref_backend.describe(), "role": "reference"},
                "plan": plan.name, "cell_seed": seed})

    rows = []
    for cfg, label, backend, train_s in resolved:
        if cfg == plan.reference:
            chain, summ = ref_chain, ref_summ
        else:
            if log:
                log(f"[{plan.name}] cell grid={grid} ell={ell:g} seed={seed}: {label}")
            chain = _run_chains(model, backend, plan, seed)
            summ = posterior_predictive(model, chain, seed=seed)
        save_chain(cell_dir / "chains" / f"{label}.drvchn", chain,
                   {"model": {"backend": backend.describe(), "role": "comparison"},
                    "plan": plan.name, "cell_seed": seed})
        _write_draws_csv(cell_dir / f"draws_{label}.csv", chain)
        _write_predictive_csv(cell_dir / f"predictive_{label}.csv", cell, summ, label)

        row = MetricRow(model=label, grid=str(grid), ell_true=float(ell), seed=seed)
        row.mse_yhat = mse(summ.y_mean, ref_summ.y_mean)
        row.wass_ell = wasserstein1(chain.draws["lengthscale"], ref_chain.draws["lengthscale"])
        row.ess_ell = ess(chain.draws["lengthscale"])
        row.infer_time_s = chain.warmup_s + chain.sampling_s
        row.warmup_time_s = chain.warmup_s
        row.ess_per_sec = row.ess_ell / chain.sampling_s if chain.sampling_s > 0 else math.nan
        row.train_time_s = train_s
        if cell.masked_idx.size:
            row.lpd = lpd(chain, model, cell.masked_idx)
            row.coverage80 = coverage(chain, model, cell.masked_idx, level=0.8, seed=seed)
        rows.append(row)
    return rows


def _cells(plan: ExperimentPlan):
    for grid in plan.grids:
        for ell in plan.true_lengthscales:
            for seed in plan.seeds:
                yield grid, float(ell), int(seed)


def _run_cell_job(args):
    plan_cfg, grid, ell, seed, out_dir = args
    plan = ExperimentPlan.from_config(plan_cfg)
    return run_cell(plan, grid, ell, seed, out_dir, log=None)


def run_plan(plan: ExperimentPlan, out_dir, workers: int = 1, log=print) -> MetricReport:
    out = Path(out_dir) / plan.name
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "manifest.json", "w") as fh:
        json.dump({"plan": plan.to_config(), "version": __version__}, fh,
                  sort_keys=True, indent=1)
    _validate_plan(plan)
    report = MetricReport()
    cells = list(_cells(plan))
    if workers > 1:
        jobs = [(plan.to_config(), g, e, s, str(out)) for g, e, s in cells]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for rows in pool.map(_run_cell_job, jobs):
                for r in rows:
                    report.add(r)
    else:
        for grid, ell, seed in cells:
            for r in run_cell(plan, grid, ell, seed, out, log=log):
                report.add(r)
    paths = report.write(out)
    from .metrics import pivot_table, read_metric_csv, write_pivot_csv

    write_pivot_csv(out / "table.csv", pivot_table(read_metric_csv(paths["metrics"])))
    return report


def _validate_plan(plan: ExperimentPlan) -> None:
    if plan.kind == "spatiotemporal":
        for cfg in plan.backends:
            if cfg.get("kind") == "rff":
                raise UnsupportedBackendError(
                    "random Fourier features cannot represent the non-separable "
                    "space-time kernel; remove the rff backend from this plan")
    if plan.kind == "multilocation":
        for cfg in plan.backends:
            if cfg.get("kind") == "surrogate":
                _, manifest, _, _ = (None, None, None, None) if not Path(cfg["checkpoint"]).exists() \
                    else load_checkpoint(cfg["checkpoint"])
                if manifest is not None:
                    maxloc = manifest["config"].get("max_locations", 0)
                    too_big = [g for g in plan.grids if int(g) > maxloc]
                    if too_big:
                        raise ValueError(
                            f"site counts {too_big} exceed the checkpoint's "
                            f"max_locations={maxloc}")


def run_benchmark(plan: ExperimentPlan, out_dir, workers: int = 1, log=print) -> MetricReport:
    if plan.kind != "grid":
        raise ValueError("run_benchmark expects a grid plan")
    return run_plan(plan, out_dir, workers, log)


def run_spatiotemporal(plan: ExperimentPlan, out_dir, workers: int = 1, log=print) -> MetricReport:
    if plan.kind != "spatiotemporal":
        raise ValueError("run_spatiotemporal expects a spatiotemporal plan")
    return run_plan(plan, out_dir, workers, log)


def run_multilocation(plan: ExperimentPlan, out_dir, workers: int = 1, log=print) -> MetricReport:
    if plan.kind != "multilocation":
        raise ValueError("run_multilocation expects a multilocation plan")
    return run_plan(plan, out_dir, workers, log)
