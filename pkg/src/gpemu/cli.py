"""Command-line entry point: gen, train, infer, bench, report.

Every command reads a JSON config (``--config``), applies flag overrides
(flags win), echoes the fully resolved config, and is deterministic given
(config, seed). Exit codes: 0 success, 2 usage, 3 bad config, 4 missing
file, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autodiff import CholeskyError
from .bench import ExperimentPlan, load_plan, run_plan
from .distributions import priors_from_config
from .fileformats import write_dataset
from .inference import UnsupportedBackendError, posterior_predictive
from .kernels import Locations
from .metrics import pivot_table, read_metric_csv, write_pivot_csv
from .sampling import ThetaPrior, gen_dataset
from .surrogates import (
    GMLPSurrogate,
    MLPSurrogate,
    PriorCVAE,
    ThetaCodec,
    TransformerSurrogate,
    save_checkpoint,
)
from .training import (
    FieldStream,
    TrainConfig,
    fixed_locs_sampler,
    heldout_mse,
    random_locs_sampler,
    train_surrogate,
)

EXIT_OK = 0
EXIT_CONFIG = 3
EXIT_IO = 4
EXIT_NUMERIC = 5

log = logging.getLogger("gpemu")


class ConfigError(ValueError):
    pass


def _setup_logging(verbosity: int) -> None:
    level = os.environ.get("DRV_LOG_LEVEL")
    if level is None:
        level = {0: "INFO", 1: "DEBUG"}.get(verbosity, "DEBUG")
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args) -> dict:
    cfg = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"malformed config {path}: {err}") from err
    if args.seed is not None:
        cfg["seed"] = args.seed
    if "seed" not in cfg:
        cfg["seed"] = int(np.random.SeedSequence().entropy % 2**31)
        log.info("no seed supplied; drew %d (recorded in outputs)", cfg["seed"])
    if args.out is not None:
        cfg["out"] = args.out
    if args.workers is not None:
        cfg["workers"] = args.workers
    cfg.setdefault("workers", 1)
    return cfg


def _locations_from(cfg: dict, seed: int) -> tuple[Locations, dict]:
    kind = cfg.get("kind", "grid")
    if kind == "grid":
        locs = Locations.grid2d(int(cfg["side"]), float(cfg.get("extent", 100.0)))
    elif kind == "grid_times":
        locs = Locations.grid2d(int(cfg["side"]), float(cfg.get("extent", 100.0)))
        locs = locs.with_times(np.arange(float(cfg.get("n_times", 5))))
    elif kind == "random":
        locs = Locations.random(int(cfg["n"]), seed=seed, extent=float(cfg.get("extent", 100.0)))
    else:
        raise ConfigError(f"unknown locations kind {kind!r}")
    return locs, dict(cfg)


def _theta_prior(cfg: dict) -> ThetaPrior:
    try:
        dists = priors_from_config(cfg["prior"])
    except KeyError as err:
        raise ConfigError(f"config missing key: {err}") from err
    return ThetaPrior(dists=dists, fixed=dict(cfg.get("fixed", {"variance": 1.0})))


def cmd_gen(cfg: dict) -> None:
    prior = _theta_prior(cfg)
    locs, locs_cfg = _locations_from(cfg.get("locations", {"kind": "grid", "side": 16}),
                                     cfg["seed"])
    count = int(cfg.get("count", 100))
    out = Path(cfg.get("out", "dataset.drv"))
    out.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "family": cfg.get("family", "matern12"),
        "n": locs.n_sites,
        "count": count,
        "seed": cfg["seed"],
        "locations": locs_cfg,
        "prior": {k: d.config() for k, d in prior.dists.items()},
        "fixed": prior.fixed,
        "version": __version__,
    }
    n = write_dataset(out, header,
                      gen_dataset(prior, header["family"], locs, count, cfg["seed"],
                                  jitter=float(cfg.get("jitter", 1e-6))))
    log.info("wrote %d records to %s", n, out)


def _build_model_from_config(cfg: dict, prior: ThetaPrior, locs: Locations, seed: int):
    arch = cfg.get("arch", "gmlp")
    codec = ThetaCodec.from_prior(prior)
    mc = cfg.get("model", {})
    if arch == "mlp":
        return MLPSurrogate(locs.n_sites, codec, hidden=mc.get("hidden"), seed=seed)
    if arch == "gmlp":
        return GMLPSurrogate(locs.n_sites, codec, channels=int(mc.get("channels", 48)),
                             expansion=int(mc.get("expansion", 2)),
                             n_blocks=int(mc.get("n_blocks", 2)), seed=seed)
    if arch == "transformer":
        return TransformerSurrogate(
            int(mc.get("max_locations", locs.n_sites)), codec, cfg.get("family", "matern12"),
            prior.fixed, embed_dim=int(mc.get("embed_dim", 32)),
            n_heads=int(mc.get("n_heads", 2)), n_layers=int(mc.get("n_layers", 2)),
            ffn_mult=int(mc.get("ffn_mult", 2)), rff_dim=int(mc.get("rff_dim", 64)),
            rff_ell0=float(mc.get("rff_ell0", 10.0)), seed=seed)
    if arch == "cvae":
        return PriorCVAE(locs.n_sites, codec, latent_dim=mc.get("latent_dim"),
                         hidden=mc.get("hidden"), seed=seed)
    raise ConfigError(f"unknown architecture {arch!r}")


def cmd_train(cfg: dict) -> None:
    prior = _theta_prior(cfg)
    seed = cfg["seed"]
    loc_cfg = cfg.get("locations", {"kind": "grid", "side": 16})
    family = cfg.get("family", "matern12")
    tc_fields = {k: v for k, v in cfg.get("train", {}).items()
                 if k in TrainConfig.__dataclass_fields__}
    tcfg = TrainConfig(seed=seed, **tc_fields)

    if loc_cfg.get("kind") == "random_sizes":
        sizes = [int(s) for s in loc_cfg["sizes"]]
        sampler = random_locs_sampler(sizes, extent=float(loc_cfg.get("extent", 100.0)))
        locs = Locations.random(max(sizes), seed=seed)
        grid_locs = None
    else:
        locs, _ = _locations_from(loc_cfg, seed)
        sampler = fixed_locs_sampler(locs)
        grid_locs = locs

    model = _build_model_from_config(cfg, prior, locs, seed)
    stream = FieldStream(prior, family, sampler, tcfg, jitter=float(cfg.get("jitter", 1e-6)))
    out = Path(cfg.get("out", f"{model.arch}.drvckpt"))
    out.parent.mkdir(parents=True, exist_ok=True)
    log.info("training %s for %d steps (batch %d)", model.arch, tcfg.steps, tcfg.batch_size)
    result = train_surrogate(model, stream, tcfg, trace_path=out.with_suffix(".trace.csv"),
                             checkpoint_path=out if tcfg.checkpoint_every else None,
                             log=log.info)

    train_info = {
        "train_seconds": result.train_seconds,
        "final_loss": result.final_loss,
        "steps": tcfg.steps,
        "config": {k: getattr(tcfg, k) for k in tcfg.__dataclass_fields__},
        "family": family,
        "prior": {k: d.config() for k, d in prior.dists.items()},
        "fixed": prior.fixed,
        "locations": loc_cfg,
    }
    eval_cfg = cfg.get("eval", {"count": 100})
    if eval_cfg:
        count = int(eval_cfg.get("count", 100))
        eval_seed = int(eval_cfg.get("seed", seed + 7919))
        if loc_cfg.get("kind") == "random_sizes":
            mses = {}
            for n in loc_cfg["sizes"]:
                elocs = Locations.random(int(n), seed=eval_seed)
                tuples = list(gen_dataset(prior, family, elocs, count, eval_seed))
                mses[str(n)] = heldout_mse(model, tuples, locs=elocs)
            train_info["heldout_mse"] = mses
            log.info("held-out MSE by size: %s", mses)
        else:
            tuples = list(gen_dataset(prior, family, grid_locs, count, eval_seed))
            train_info["heldout_mse"] = heldout_mse(model, tuples, locs=grid_locs)
            log.info("held-out MSE: %.6f", train_info["heldout_mse"])
    save_checkpoint(model, out, train_info=train_info, locs=grid_locs)
    log.info("checkpoint written to %s", out)


def cmd_infer(cfg: dict) -> None:
    from .bench import CELL_MAGIC, backend_label, make_backend, read_cell_data
    from .inference import ProbModel
    from .metrics import ess
    from .nuts import nuts_sample, save_chain

    seed = cfg["seed"]
    data_path = cfg.get("data")
    if not data_path:
        raise ConfigError("infer needs a 'data' path to a cell data file")
    if not Path(data_path).exists():
        raise FileNotFoundError(f"data file not found: {data_path}")
    manifest, blocks = read_cell_data(data_path)
    times = blocks.get("times")
    if times is not None:
        side = int(round((blocks["coords"].shape[0] / len(np.unique(times))) ** 0.5))
        locs = Locations(blocks["coords"][: side * side]).with_times(np.unique(times))
    else:
        locs = Locations(blocks["coords"])
    model = ProbModel(
        likelihood=cfg.get("likelihood", "poisson"),
        family=cfg.get("family", manifest.get("family", "matern12")),
        locs=locs, y=blocks["y"], observed_idx=blocks["observed_idx"].astype(int),
        hyperpriors=priors_from_config(cfg["hyperpriors"]),
        fixed=dict(cfg.get("fixed_infer", {"variance": 1.0})),
        trials=np.full(locs.n_sites, float(cfg["trials"])) if cfg.get("likelihood") == "binomial" else None,
        jitter=float(cfg.get("jitter", 1e-6)))
    backend, _ = make_backend(cfg.get("backend", {"kind": "exact_gp"}),
                              model.family, locs, model.jitter)
    chain_cfg = cfg.get("chain", {})
    chain = nuts_sample(model, backend, int(chain_cfg.get("n_warmup", 1000)),
                        int(chain_cfg.get("n_draws", 2000)), seed,
                        float(chain_cfg.get("target_accept", 0.8)),
                        int(chain_cfg.get("max_depth", 10)))
    out = Path(cfg.get("out", "chains"))
    out.mkdir(parents=True, exist_ok=True)
    label = backend_label(cfg.get("backend", {"kind": "exact_gp"}))
    save_chain(out / f"{label}.drvchn", chain,
               {"model": {"backend": backend.describe()}, "data": str(data_path),
                "config_seed": seed})
    summ = posterior_predictive(model, chain, seed=seed)
    from .bench import CellData, _write_draws_csv, _write_predictive_csv

    cell = CellData(locs=locs, grid_shape=tuple(manifest.get("grid_shape", [locs.n_sites])),
                    f_true=blocks["f_true"], y=blocks["y"],
                    observed_idx=blocks["observed_idx"].astype(int),
                    masked_idx=blocks["masked_idx"].astype(int),
                    theta_true=manifest.get("theta_true", {}))
    _write_draws_csv(out / f"draws_{label}.csv", chain)
    _write_predictive_csv(out / f"predictive_{label}.csv", cell, summ, label)
    log.info("chain written (%d draws, %d divergent, ESS(ell) %.1f)",
             chain.n_draws, chain.n_divergent, ess(chain.draws["lengthscale"]))


def cmd_bench(cfg: dict) -> None:
    plan_path = cfg.get("plan")
    if plan_path:
        if not Path(plan_path).exists():
            raise FileNotFoundError(f"plan file not found: {plan_path}")
        plan = load_plan(plan_path)
    else:
        try:
            plan = ExperimentPlan.from_config(cfg["plan_inline"])
        except KeyError as err:
            raise ConfigError("bench needs 'plan' (path) or 'plan_inline'") from err
    out = cfg.get("out", "bench_out")
    report = run_plan(plan, out, workers=int(cfg.get("workers", 1)), log=log.info)
    log.info("wrote %d metric rows under %s", len(report.rows), Path(out) / plan.name)


def cmd_report(cfg: dict) -> None:
    inputs = cfg.get("inputs")
    if not inputs:
        raise ConfigError("report needs 'inputs': a list of report.csv paths")
    rows = []
    for path in inputs:
        if not Path(path).exists():
            raise FileNotFoundError(f"report input not found: {path}")
        rows.extend(read_metric_csv(path))
    out = Path(cfg.get("out", "tables"))
    out.mkdir(parents=True, exist_ok=True)
    table = pivot_table(rows)
    write_pivot_csv(out / "table.csv", table)
    with open(out / "table.json", "w") as fh:
        json.dump(table, fh, sort_keys=True, indent=1)
    log.info("consolidated table over %d rows -> %s", len(rows), out / "table.csv")


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "infer": cmd_infer,
            "bench": cmd_bench, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gpemu",
        description="Train neural GP-prior surrogates and run benchmark inference")
    parser.add_argument("--version", action="version", version=f"gpemu {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("gen", "generate a supervision dataset of (theta, z, f) records"),
        ("train", "train a surrogate and write a checkpoint"),
        ("infer", "run NUTS on a data file with a chosen prior backend"),
        ("bench", "run a benchmark plan end to end"),
        ("report", "consolidate metric CSVs into a pivot table"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (wins over config)")
        p.add_argument("--out", help="output path or directory")
        p.add_argument("--workers", type=int, help="worker processes for bench cells")
        p.add_argument("--dry-run", action="store_true",
                       help="validate and print the resolved config, compute nothing")
        p.add_argument("-v", "--verbose", action="count", default=0)
        if name == "gen":
            p.add_argument("--count", type=int, help="number of records")
        if name == "bench":
            p.add_argument("--plan", help="plan JSON path (same as config key 'plan')")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    try:
        cfg = _load_config(args)
        if getattr(args, "count", None) is not None:
            cfg["count"] = args.count
        if getattr(args, "plan", None) is not None:
            cfg["plan"] = args.plan
        log.info("resolved config: %s", json.dumps(cfg, sort_keys=True))
        if args.dry_run:
            print(json.dumps(cfg, sort_keys=True, indent=1))
            return EXIT_OK
        COMMANDS[args.command](cfg)
        return EXIT_OK
    except (ConfigError, ValueError) as err:
        if isinstance(err, UnsupportedBackendError):
            log.error("backend error: %s", err)
            return EXIT_CONFIG
        log.error("config error: %s", err)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        log.error("missing file: %s", err)
        return EXIT_IO
    except (CholeskyError, FloatingPointError, np.linalg.LinAlgError, RuntimeError) as err:
        log.error("numeric failure: %s", err)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
