"""Benchmark statistics: predictive MSE, 1-Wasserstein, ESS, LPD, coverage."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from .inference import loglik_matrix, posterior_predictive


def mse(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def wasserstein1(x, y) -> float:
    """Empirical 1-Wasserstein distance between two sample sets.

    Equal sizes pair sorted samples directly; otherwise both quantile
    functions are evaluated on a common midpoint grid with linear
    interpolation.
    """
    x, y = np.sort(np.asarray(x, float)), np.sort(np.asarray(y, float))
    if x.size == 0 or y.size == 0:
        raise ValueError("empty sample set")
    if x.size == y.size:
        return float(np.mean(np.abs(x - y)))
    m = max(x.size, y.size)
    q = (np.arange(m) + 0.5) / m
    qx = np.quantile(x, q, method="linear")
    qy = np.quantile(y, q, method="linear")
    return float(np.mean(np.abs(qx - qy)))


def autocorrelations(x: np.ndarray) -> np.ndarray:
    """Normalized autocorrelations via FFT, lags 0..n-1."""
    x = np.asarray(x, float)
    n = x.size
    xc = x - x.mean()
    size = 1
    while size < 2 * n:
        size <<= 1
    f = np.fft.rfft(xc, size)
    acov = np.fft.irfft(f * np.conjugate(f), size)[:n].real
    acov /= np.arange(n, 0, -1)
    if acov[0] == 0:
        return np.ones(n)
    return acov / acov[0]


def integrated_autocorr(x: np.ndarray) -> tuple[float, int]:
    """Geyer initial-monotone-positive-sequence estimate of 2*sum(rho)+1.

    Returns (tau, cut) where ``cut`` is the index of the first non-positive
    lag pair.
    """
    rho = autocorrelations(x)
    n = rho.size
    tau = -1.0
    prev = math.inf
    cut = 0
    for m in range(n // 2):
        pair = rho[2 * m] + (rho[2 * m + 1] if 2 * m + 1 < n else 0.0)
        if pair <= 1e-12:
            break
        pair = min(pair, prev)  # enforce monotone decrease
        prev = pair
        tau += 2.0 * pair
        cut = m + 1
    return max(tau, 1e-6), cut


def ess(chain) -> float:
    """Effective sample size with Geyer truncation of the autocorrelations."""
    x = np.asarray(chain, float)
    if x.size < 4:
        raise ValueError("need at least 4 samples")
    if x.var() == 0.0:
        warnings.warn("degenerate (constant) chain; reporting ESS = n", stacklevel=2)
        return float(x.size)
    tau, _ = integrated_autocorr(x)
    return float(x.size / tau)


def log_mean_exp(ll: np.ndarray, axis=0) -> np.ndarray:
    """Stabilized log of the mean of exponentials along ``axis``."""
    shift = np.max(ll, axis=axis, keepdims=True)
    out = np.squeeze(shift, axis=axis) + np.log(
        np.mean(np.exp(ll - shift), axis=axis))
    return out


def lpd(chain, model, heldout_idx) -> float:
    """Mean over held-out sites of log mean-over-draws predictive density."""
    idx = np.asarray(heldout_idx, dtype=int)
    if idx.size == 0:
        raise ValueError("held-out index set is empty")
    ll = loglik_matrix(model, chain, idx)  # (n_draws, n_idx)
    return float(np.mean(log_mean_exp(ll, axis=0)))


def coverage(chain, model, heldout_idx, level: float = 0.8, seed: int = 0) -> float:
    """Fraction of held-out y inside the central predictive interval."""
    idx = np.asarray(heldout_idx, dtype=int)
    if idx.size == 0:
        raise ValueError("held-out index set is empty")
    if level >= 1.0:
        return 1.0
    summ = posterior_predictive(model, chain, seed=seed)
    reps = summ.y_rep[:, idx]
    lo = np.quantile(reps, (1.0 - level) / 2.0, axis=0)
    hi = np.quantile(reps, (1.0 + level) / 2.0, axis=0)
    y = model.y[idx]
    return float(np.mean((y >= lo - 1e-9) & (y <= hi + 1e-9)))


# ---------------------------------------------------------------------------
# report containers


METRIC_FIELDS = ("mse_yhat", "wass_ell", "ess_ell", "lpd", "coverage80")
TIMING_FIELDS = ("infer_time_s", "warmup_time_s", "ess_per_sec", "train_time_s")


@dataclass
class MetricRow:
    model: str
    grid: str
    ell_true: float
    seed: int
    mse_yhat: float = math.nan
    wass_ell: float = math.nan
    ess_ell: float = math.nan
    lpd: float = math.nan
    coverage80: float = math.nan
    infer_time_s: float = math.nan
    warmup_time_s: float = math.nan
    ess_per_sec: float = math.nan
    train_time_s: float = math.nan


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)

    def add(self, row: MetricRow) -> None:
        self.rows.append(row)

    def sorted_rows(self) -> list:
        return sorted(self.rows, key=lambda r: (r.grid, r.ell_true, r.seed, r.model))

    def write(self, out_dir, stem: str = "report") -> dict:
        """Write metrics (deterministic) and timings (wall-clock) CSVs + JSON."""
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        keys = ("model", "grid", "ell_true", "seed")
        metrics_path = out / f"{stem}.csv"
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(keys) + list(METRIC_FIELDS))
            for r in self.sorted_rows():
                w.writerow([r.model, r.grid, repr(float(r.ell_true)), r.seed]
                           + [repr(float(getattr(r, k))) for k in METRIC_FIELDS])
        timings_path = out / f"{stem}_timings.csv"
        with open(timings_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(keys) + list(TIMING_FIELDS))
            for r in self.sorted_rows():
                w.writerow([r.model, r.grid, repr(float(r.ell_true)), r.seed]
                           + [repr(float(getattr(r, k))) for k in TIMING_FIELDS])
        json_path = out / f"{stem}.json"
        with open(json_path, "w") as fh:
            json.dump([asdict(r) for r in self.sorted_rows()], fh, sort_keys=True, indent=1)
        return {"metrics": metrics_path, "timings": timings_path, "json": json_path}


def read_metric_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [dict(row) for row in csv.DictReader(fh)]


def pivot_table(rows: list[dict], value_fields=METRIC_FIELDS) -> list[dict]:
    """Aggregate rows into (metric, grid) x model mean/stderr cells."""
    models = sorted({r["model"] for r in rows})
    grids = sorted({r["grid"] for r in rows})
    table = []
    for metric in value_fields:
        for grid in grids:
            entry = {"metric": metric, "grid": grid}
            for m in models:
                vals = [float(r[metric]) for r in rows
                        if r["model"] == m and r["grid"] == grid
                        and r.get(metric) not in (None, "", "nan")]
                vals = [v for v in vals if not math.isnan(v)]
                if vals:
                    mean = float(np.mean(vals))
                    sem = float(np.std(vals, ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else 0.0
                    entry[f"{m}_mean"] = mean
                    entry[f"{m}_se"] = sem
            table.append(entry)
    return table


def write_pivot_csv(path, table: list[dict]) -> None:
    cols: list[str] = ["metric", "grid"]
    for row in table:
        for k in row:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            out = []
            for c in cols:
                v = row.get(c, "")
                out.append(repr(float(v)) if isinstance(v, float) else v)
            w.writerow(out)
