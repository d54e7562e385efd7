"""Figure rendering; deterministic for identical inputs."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
matplotlib.rcParams["svg.hashsalt"] = "resultplots"

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

KINDS = ("bars", "kde_panels", "map_panels", "scatter_ci")
FORMATS = ("png", "svg", "pdf")


class MissingColumnError(ValueError):
    pass


@dataclass
class FigureResult:
    path: Path
    kind: str
    data: dict = field(default_factory=dict)


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(r) for r in csv.DictReader(fh)]


def _require(rows: list[dict], cols, path) -> None:
    have = set(rows[0].keys()) if rows else set()
    missing = [c for c in cols if c not in have]
    if missing:
        raise MissingColumnError(f"{path}: missing column(s) {missing}")


def _column(rows, name) -> np.ndarray:
    return np.array([float(r[name]) for r in rows])


def _save(fig, out: Path) -> None:
    fmt = out.suffix.lstrip(".").lower()
    if fmt not in FORMATS:
        raise ValueError(f"unsupported output format {fmt!r} (use {FORMATS})")
    kwargs = {"metadata": {}} if fmt == "png" else {}
    if fmt == "svg":
        kwargs = {"metadata": {"Date": None}}
    fig.savefig(out, dpi=120, **kwargs)
    plt.close(fig)


def gaussian_kde(samples: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Gaussian KDE with Scott's bandwidth."""
    n = samples.size
    bw = samples.std(ddof=1) * n ** (-0.2)
    bw = max(bw, 1e-12)
    z = (grid[:, None] - samples[None, :]) / bw
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * bw * math.sqrt(2 * math.pi))


# ---------------------------------------------------------------------------
# figure kinds


def _render_bars(spec, out: Path) -> FigureResult:
    metrics = spec.get("metrics", ["mse_yhat", "wass_ell"])
    rows: list[dict] = []
    for path in spec["inputs"]:
        rows.extend(read_csv_rows(path))
    if not rows:
        raise ValueError("bars: no rows in input")
    _require(rows, ["model"] + metrics, spec["inputs"][0])
    models = sorted({r["model"] for r in rows})
    data: dict = {}
    fig, axes = plt.subplots(1, len(metrics), figsize=(4.2 * len(metrics), 3.4))
    if len(metrics) == 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        stats = {}
        for i, m in enumerate(models):
            vals = np.array([float(r[metric]) for r in rows if r["model"] == m])
            vals = vals[np.isfinite(vals)]
            mean = float(vals.mean())
            q10, q90 = (float(np.quantile(vals, q)) for q in (0.1, 0.9))
            stats[m] = {"mean": mean, "q10": q10, "q90": q90, "n": int(vals.size)}
            err = np.array([[mean - q10], [q90 - mean]])
            ax.bar(i, mean, yerr=np.abs(err), capsize=4, color=f"C{i}")
        ax.set_xticks(range(len(models)))
        ax.set_xticklabels(models, rotation=30, ha="right", fontsize=8)
        ax.set_title(metric)
        ax.set_yscale("log" if spec.get("log_scale", True) and
                      all(s["mean"] > 0 for s in stats.values()) else "linear")
        data[metric] = stats
    fig.tight_layout()
    _save(fig, out)
    return FigureResult(path=out, kind="bars", data=data)


def _render_kde_panels(spec, out: Path) -> FigureResult:
    inputs = spec["inputs"]
    labels = spec.get("labels") or [Path(p).stem.replace("draws_", "") for p in inputs]
    series: dict[str, dict[str, np.ndarray]] = {}
    params: list[str] = []
    skipped: list[str] = []
    for label, path in zip(labels, inputs):
        rows = read_csv_rows(path)
        if not rows:
            skipped.append(label)
            continue
        cols = spec.get("params") or list(rows[0].keys())
        for c in cols:
            if c not in rows[0]:
                raise MissingColumnError(f"{path}: missing column(s) ['{c}']")
            if c not in params:
                params.append(c)
        series[label] = {c: _column(rows, c) for c in cols}
    if not params:
        raise ValueError("kde_panels: no draws in any input")
    for label, cols in series.items():
        for c, v in cols.items():
            if v.size < 50:
                raise ValueError(f"kde_panels: need at least 50 draws, {label}/{c} has {v.size}")
    ncol = min(3, len(params))
    nrow = math.ceil(len(params) / ncol)
    fig, axes = plt.subplots(nrow, ncol, figsize=(3.6 * ncol, 2.8 * nrow), squeeze=False)
    data: dict = {"modes": {}, "skipped": skipped}
    for k, param in enumerate(params):
        ax = axes[k // ncol][k % ncol]
        for i, (label, cols) in enumerate(sorted(series.items())):
            if param not in cols:
                continue
            v = cols[param]
            lo, hi = v.min(), v.max()
            pad = 0.15 * (hi - lo if hi > lo else max(abs(lo), 1.0))
            grid = np.linspace(lo - pad, hi + pad, 257)
            dens = gaussian_kde(v, grid)
            ax.plot(grid, dens, label=label, color=f"C{i}")
            data["modes"].setdefault(param, {})[label] = float(grid[np.argmax(dens)])
        ax.set_title(param, fontsize=9)
    for k in range(len(params), nrow * ncol):
        axes[k // ncol][k % ncol].axis("off")
    for label in skipped:
        axes[0][0].annotate(f"no draws: {label}", xy=(0.02, 0.95 - 0.07 * skipped.index(label)),
                            xycoords="axes fraction", fontsize=7, color="crimson")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    _save(fig, out)
    return FigureResult(path=out, kind="kde_panels", data=data)


MASK_COLOR = "#b0b0b0"


def _render_map_panels(spec, out: Path) -> FigureResult:
    path = spec["inputs"][0]
    rows = read_csv_rows(path)
    _require(rows, ["x", "y_coord", "y_true", "observed", "pred_mean", "pred_sd"], path)
    if "t" in rows[0] and spec.get("time") is not None:
        rows = [r for r in rows if float(r["t"]) == float(spec["time"])]
    xs, ys = _column(rows, "x"), _column(rows, "y_coord")
    nx, ny = np.unique(xs).size, np.unique(ys).size
    if nx * ny != len(rows):
        raise ValueError(f"map_panels: {len(rows)} sites do not fill a {ny}x{nx} grid")

    def grid_of(name):
        return _column(rows, name).reshape(ny, nx)

    y_true = grid_of("y_true")
    observed = grid_of("observed").astype(bool)
    pred_mean = grid_of("pred_mean")
    pred_sd = grid_of("pred_sd")
    y_obs = np.ma.masked_where(~observed, y_true)

    fig, axes = plt.subplots(1, 4, figsize=(13, 3.2))
    cmap = plt.get_cmap("viridis").copy()
    cmap.set_bad(MASK_COLOR)
    panels = [("observed y", y_obs, cmap), ("true y", y_true, cmap),
              ("posterior mean", pred_mean, cmap), ("posterior sd", pred_sd, cmap)]
    for ax, (title, img, cm) in zip(axes, panels):
        im = ax.imshow(img, origin="lower", cmap=cm)
        ax.set_title(title, fontsize=9)
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, shrink=0.85)
    fig.tight_layout()
    _save(fig, out)
    return FigureResult(path=out, kind="map_panels",
                        data={"n_masked": int((~observed).sum()), "shape": [ny, nx]})


def _render_scatter_ci(spec, out: Path) -> FigureResult:
    if len(spec["inputs"]) != 2:
        raise ValueError("scatter_ci needs exactly two predictive CSVs")
    rows_a = read_csv_rows(spec["inputs"][0])
    rows_b = read_csv_rows(spec["inputs"][1])
    for rows, path in ((rows_a, spec["inputs"][0]), (rows_b, spec["inputs"][1])):
        _require(rows, ["site", "pred_mean", "q10", "q90"], path)
    if len(rows_a) != len(rows_b):
        raise ValueError("scatter_ci inputs cover different site counts")
    n_pick = int(spec.get("n_sites", min(100, len(rows_a))))
    rng = np.random.default_rng(int(spec.get("pick_seed", 0)))
    pick = np.sort(rng.choice(len(rows_a), size=n_pick, replace=False))
    ax_mean = _column(rows_a, "pred_mean")[pick]
    bx_mean = _column(rows_b, "pred_mean")[pick]
    a_lo, a_hi = _column(rows_a, "q10")[pick], _column(rows_a, "q90")[pick]
    b_lo, b_hi = _column(rows_b, "q10")[pick], _column(rows_b, "q90")[pick]

    fig, ax = plt.subplots(figsize=(4.2, 4.2))
    ax.errorbar(ax_mean, bx_mean,
                xerr=np.vstack([ax_mean - a_lo, a_hi - ax_mean]),
                yerr=np.vstack([bx_mean - b_lo, b_hi - bx_mean]),
                fmt="o", ms=3, lw=0.6, alpha=0.7, color="C0")
    lo = min(ax_mean.min(), bx_mean.min())
    hi = max(ax_mean.max(), bx_mean.max())
    ax.plot([lo, hi], [lo, hi], "k--", lw=0.8)
    slope, intercept = np.polyfit(ax_mean, bx_mean, 1)
    ax.plot([lo, hi], [slope * lo + intercept, slope * hi + intercept], "k-", lw=1.0)
    ax.set_xlabel(spec.get("xlabel", Path(spec["inputs"][0]).stem))
    ax.set_ylabel(spec.get("ylabel", Path(spec["inputs"][1]).stem))
    fig.tight_layout()
    _save(fig, out)
    return FigureResult(path=out, kind="scatter_ci",
                        data={"slope": float(slope), "intercept": float(intercept),
                              "n_sites": n_pick})


_RENDERERS = {"bars": _render_bars, "kde_panels": _render_kde_panels,
              "map_panels": _render_map_panels, "scatter_ci": _render_scatter_ci}


def render(spec: dict) -> FigureResult:
    """Render one figure from its spec dict (see README for the schema)."""
    kind = spec.get("kind")
    if kind not in _RENDERERS:
        raise ValueError(f"unknown figure kind {kind!r} (choose from {KINDS})")
    inputs = spec.get("inputs")
    if not inputs:
        raise ValueError("figure spec needs non-empty 'inputs'")
    for p in inputs:
        if not Path(p).exists():
            raise FileNotFoundError(f"figure input not found: {p}")
    out = Path(spec.get("out", f"{kind}.png"))
    out.parent.mkdir(parents=True, exist_ok=True)
    return _RENDERERS[kind](spec, out)


def render_spec_file(path) -> list[FigureResult]:
    """Render every figure named in a spec file (single dict or list)."""
    with open(path) as fh:
        spec = json.load(fh)
    specs = spec if isinstance(spec, list) else [spec]
    return [render(s) for s in specs]
