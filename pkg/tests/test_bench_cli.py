import json
import math
from pathlib import Path

import numpy as np
import pytest

from gpemu.bench import (
    ExperimentPlan,
    UnsupportedBackendError,
    backend_label,
    load_plan,
    make_backend,
    run_benchmark,
    run_plan,
    simulate_cell,
)
from gpemu.cli import main
from gpemu.kernels import Locations
from gpemu.metrics import read_metric_csv


def tiny_plan(**overrides):
    cfg = {
        "name": "tiny",
        "kind": "grid",
        "grids": [6],
        "true_lengthscales": [30.0],
        "true_beta": 1.0,
        "family": "matern12",
        "mask": {"fraction": 0.5, "mode": "contiguous_rect"},
        "hyperpriors": {"lengthscale": {"dist": "lognormal", "mu": 3.0, "sd": 0.4},
                        "beta": {"dist": "normal", "mu": 0.0, "sd": 3.0}},
        "fixed_infer": {"variance": 1.0},
        "backends": [{"kind": "exact_gp"}, {"kind": "rff", "n_features": 64}],
        "reference": {"kind": "exact_gp"},
        "chain": {"n_warmup": 80, "n_draws": 120},
        "seeds": [1],
    }
    cfg.update(overrides)
    return ExperimentPlan.from_config(cfg)


def test_simulate_cell_deterministic():
    plan = tiny_plan()
    a = simulate_cell(plan, 6, 30.0, 3)
    b = simulate_cell(plan, 6, 30.0, 3)
    np.testing.assert_array_equal(a.y, b.y)
    np.testing.assert_array_equal(a.f_true, b.f_true)
    np.testing.assert_array_equal(a.observed_idx, b.observed_idx)
    assert 0.4 <= a.masked_idx.size / 36 <= 0.6


def test_plan_rejects_unknown_fields():
    with pytest.raises(ValueError, match="unknown plan fields"):
        ExperimentPlan.from_config({"name": "x", "bogus": 1})


def test_spatiotemporal_plan_refuses_rff(tmp_path):
    plan = tiny_plan(kind="spatiotemporal",
                     family="gneiting_st",
                     data_theta={"variance": 1.0, "a": 0.5, "alpha": 0.8, "b": 1.0, "nu": 1.0})
    with pytest.raises(UnsupportedBackendError, match="non-separable"):
        run_plan(plan, tmp_path)


def test_missing_checkpoint_fails_fast():
    plan = tiny_plan(backends=[{"kind": "surrogate", "checkpoint": "/nope/missing.ckpt"}])
    locs = Locations.grid2d(6)
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        make_backend(plan.backends[0], "matern12", locs, 1e-6)


def test_backend_labels():
    assert backend_label({"kind": "exact_gp"}) == "exact_gp"
    assert backend_label({"kind": "rff", "label": "rff512"}) == "rff512"
    assert backend_label({"kind": "surrogate", "checkpoint": "a/b/gmlp16.drvckpt"}) \
        == "surrogate_gmlp16"


@pytest.fixture(scope="module")
def bench_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    plan = tiny_plan()
    report = run_benchmark(plan, out, log=None)
    return plan, out, report


def test_bench_report_structure(bench_run):
    plan, out, report = bench_run
    assert len(report.rows) == 2  # one cell x two backends
    root = out / "tiny"
    assert (root / "report.csv").exists()
    assert (root / "report_timings.csv").exists()
    assert (root / "table.csv").exists()
    assert (root / "manifest.json").exists()
    cell = root / "cell_g6_l30_s1"
    assert (cell / "data.drvcell").exists()
    assert (cell / "chains" / "exact_gp.drvchn").exists()
    assert (cell / "chains" / "rff.drvchn").exists()
    assert (cell / "draws_exact_gp.csv").exists()
    assert (cell / "predictive_rff.csv").exists()


def test_bench_self_comparison_is_zero(bench_run):
    plan, out, report = bench_run
    rows = read_metric_csv(out / "tiny" / "report.csv")
    gp = next(r for r in rows if r["model"] == "exact_gp")
    assert float(gp["mse_yhat"]) == 0.0
    assert float(gp["wass_ell"]) == 0.0
    rff = next(r for r in rows if r["model"] == "rff")
    assert float(rff["wass_ell"]) > 0.0
    assert math.isfinite(float(rff["lpd"]))
    assert 0.0 <= float(rff["coverage80"]) <= 1.0


def test_bench_rerun_metrics_bytes_identical(bench_run, tmp_path):
    plan, out, _ = bench_run
    rerun_dir = tmp_path / "again"
    run_benchmark(tiny_plan(), rerun_dir, log=None)
    a = (out / "tiny" / "report.csv").read_bytes()
    b = (rerun_dir / "tiny" / "report.csv").read_bytes()
    assert a == b
    assert (out / "tiny" / "table.csv").read_bytes() == (rerun_dir / "tiny" / "table.csv").read_bytes()


# ---------------------------------------------------------------------------
# CLI


def test_cli_gen_deterministic(tmp_path):
    cfg = {
        "family": "matern12",
        "prior": {"lengthscale": {"dist": "lognormal", "mu": 3.0, "sd": 0.4}},
        "fixed": {"variance": 1.0},
        "locations": {"kind": "grid", "side": 4},
        "count": 5,
    }
    cfg_path = tmp_path / "gen.json"
    cfg_path.write_text(json.dumps(cfg))
    out1, out2 = tmp_path / "d1.drv", tmp_path / "d2.drv"
    assert main(["gen", "--config", str(cfg_path), "--seed", "7", "--out", str(out1)]) == 0
    assert main(["gen", "--config", str(cfg_path), "--seed", "7", "--out", str(out2)]) == 0
    assert out1.read_bytes() == out2.read_bytes()


def test_cli_dry_run_prints_config(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"count": 3}))
    rc = main(["gen", "--config", str(cfg_path), "--seed", "1", "--dry-run"])
    assert rc == 0
    out = capsys.readouterr().out
    assert json.loads(out)["count"] == 3


def test_cli_malformed_config_exit_code(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["gen", "--config", str(bad), "--seed", "1"]) == 3


def test_cli_missing_file_exit_code():
    assert main(["bench", "--plan", "/does/not/exist.json", "--seed", "1"]) == 4


def test_cli_unknown_flag_exit_code():
    with pytest.raises(SystemExit) as exc:
        main(["gen", "--definitely-not-a-flag"])
    assert exc.value.code == 2


def test_cli_bench_and_report_roundtrip(tmp_path):
    plan_cfg = tiny_plan(name="cli_tiny", chain={"n_warmup": 40, "n_draws": 60},
                         backends=[{"kind": "exact_gp"}]).to_config()
    plan_path = tmp_path / "plan.json"
    plan_path.write_text(json.dumps(plan_cfg))
    out = tmp_path / "runs"
    assert main(["bench", "--plan", str(plan_path), "--out", str(out), "--seed", "1"]) == 0
    report_csv = out / "cli_tiny" / "report.csv"
    assert report_csv.exists()

    rep_cfg = tmp_path / "report.json"
    rep_cfg.write_text(json.dumps({"inputs": [str(report_csv)]}))
    tables = tmp_path / "tables"
    assert main(["report", "--config", str(rep_cfg), "--seed", "1", "--out", str(tables)]) == 0
    table = (tables / "table.csv").read_text().splitlines()
    assert table[0].startswith("metric,grid")
    assert any(row.startswith("wass_ell") for row in table)
