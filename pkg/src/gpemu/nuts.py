"""No-U-Turn sampler with dual-averaging step size and diagonal mass adaptation.

Multinomial trajectory sampling over doubling trees (capped depth), Stan-style
adaptation windows during warmup, divergence flagging at a 1000-nat energy
error. The target is anything exposing ``dim`` and ``logp_grad(x)``.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

DIVERGENCE_NATS = 1000.0


@dataclass
class NUTSConfig:
    n_warmup: int
    n_draws: int
    seed: int = 0
    target_accept: float = 0.8
    max_depth: int = 10
    init_buffer: int = 75
    term_buffer: int = 50
    base_window: int = 25

    def __post_init__(self):
        if self.n_warmup < 1 or self.n_draws < 1:
            raise ValueError("need at least one warmup and one retained draw")


@dataclass
class RawChain:
    """Unconstrained draws plus per-draw diagnostics."""

    draws: np.ndarray            # (n_draws, dim)
    divergent: np.ndarray        # bool per draw
    tree_depth: np.ndarray
    accept_stat: np.ndarray
    energy: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    inv_mass: np.ndarray
    warmup_s: float
    sampling_s: float
    warning: str | None = None


class _DualAverage:
    def __init__(self, eps0: float, delta: float, gamma=0.05, t0=10.0, kappa=0.75):
        self.mu = math.log(10.0 * eps0)
        self.log_eps = math.log(eps0)
        self.log_eps_bar = 0.0
        self.hbar = 0.0
        self.m = 0
        self.delta, self.gamma, self.t0, self.kappa = delta, gamma, t0, kappa

    def update(self, alpha: float) -> float:
        self.m += 1
        frac = 1.0 / (self.m + self.t0)
        self.hbar = (1.0 - frac) * self.hbar + frac * (self.delta - alpha)
        self.log_eps = self.mu - math.sqrt(self.m) / self.gamma * self.hbar
        w = self.m ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted(self) -> float:
        return math.exp(self.log_eps_bar)


class _Welford:
    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.count - 1)
        # Stan's shrinkage toward unity keeps early estimates usable
        w = self.count / (self.count + 5.0)
        return w * var + (1.0 - w) * 1e-3


def leapfrog(target, q, p, grad, eps, inv_mass):
    p_half = p + 0.5 * eps * grad
    q_new = q + eps * (inv_mass * p_half)
    logp_new, grad_new = target.logp_grad(q_new)
    p_new = p_half + 0.5 * eps * grad_new
    return q_new, p_new, logp_new, grad_new


def _kinetic(p, inv_mass) -> float:
    return 0.5 * float(np.dot(p, inv_mass * p))


def _find_reasonable_eps(target, q, logp, grad, rng, inv_mass, mass_sd) -> float:
    eps = 1.0
    p = rng.standard_normal(q.size) * mass_sd
    h0 = -logp + _kinetic(p, inv_mass)
    _, p1, logp1, _ = leapfrog(target, q, p, grad, eps, inv_mass)
    h1 = -logp1 + _kinetic(p1, inv_mass) if math.isfinite(logp1) else math.inf
    # shrink first if the unit step explodes
    ratio = math.exp(min(0.0, h0 - h1)) if math.isfinite(h1) else 0.0
    direction = 1.0 if ratio > 0.5 else -1.0
    for _ in range(60):
        eps *= 2.0**direction
        _, p1, logp1, _ = leapfrog(target, q, p, grad, eps, inv_mass)
        h1 = -logp1 + _kinetic(p1, inv_mass) if math.isfinite(logp1) else math.inf
        ratio = math.exp(min(0.0, h0 - h1)) if math.isfinite(h1) else 0.0
        if (direction > 0 and ratio <= 0.5) or (direction < 0 and ratio >= 0.5):
            break
        if eps < 1e-10 or eps > 1e7:
            break
    return max(eps, 1e-10)


class _TreeStats:
    __slots__ = ("alpha_sum", "n_alpha", "divergences", "n_leapfrog")

    def __init__(self):
        self.alpha_sum = 0.0
        self.n_alpha = 0
        self.divergences = 0
        self.n_leapfrog = 0


def _uturn(q_minus, p_minus, q_plus, p_plus, inv_mass) -> bool:
    dq = q_plus - q_minus
    return (np.dot(dq, inv_mass * p_minus) < 0.0) or (np.dot(dq, inv_mass * p_plus) < 0.0)


def _build_tree(target, q, p, grad, logp, direction, depth, eps, inv_mass, h0, rng, stats):
    """Returns (q-, p-, grad-, logp-, q+, p+, grad+, logp+, q_prop, logp_prop,
    grad_prop, logw, ok)."""
    if depth == 0:
        q1, p1, logp1, grad1 = leapfrog(target, q, p, grad, direction * eps, inv_mass)
        stats.n_leapfrog += 1
        if math.isfinite(logp1):
            h1 = -logp1 + _kinetic(p1, inv_mass)
            dh = h1 - h0
        else:
            dh = math.inf
        divergent = not math.isfinite(dh) or dh > DIVERGENCE_NATS
        alpha = math.exp(min(0.0, -dh)) if math.isfinite(dh) else 0.0
        stats.alpha_sum += alpha
        stats.n_alpha += 1
        if divergent:
            stats.divergences += 1
            return (q1, p1, grad1, logp1) * 2 + (q1, logp1, grad1, -math.inf, False)
        return (q1, p1, grad1, logp1) * 2 + (q1, logp1, grad1, -dh, True)

    out = _build_tree(target, q, p, grad, logp, direction, depth - 1, eps, inv_mass, h0, rng, stats)
    (qm, pm, gm, lm, qp, pp, gp, lp, q_prop, logp_prop, grad_prop, logw, ok) = out
    if not ok:
        return out
    if direction < 0:
        out2 = _build_tree(target, qm, pm, gm, lm, direction, depth - 1, eps, inv_mass, h0, rng, stats)
        (qm, pm, gm, lm, _, _, _, _, q2, logp2, grad2, logw2, ok2) = out2
    else:
        out2 = _build_tree(target, qp, pp, gp, lp, direction, depth - 1, eps, inv_mass, h0, rng, stats)
        (_, _, _, _, qp, pp, gp, lp, q2, logp2, grad2, logw2, ok2) = out2
    total = np.logaddexp(logw, logw2)
    if ok2 and math.isfinite(logw2):
        if math.log(rng.uniform()) < logw2 - total:
            q_prop, logp_prop, grad_prop = q2, logp2, grad2
    ok = ok2 and not _uturn(qm, pm, qp, pp, inv_mass)
    return (qm, pm, gm, lm, qp, pp, gp, lp, q_prop, logp_prop, grad_prop, total, ok)


def _adapt_schedule(n_warmup: int, cfg: NUTSConfig):
    """(start, end) variance-estimation windows, Stan style."""
    if n_warmup < 20:
        return []
    init, term, base = cfg.init_buffer, cfg.term_buffer, cfg.base_window
    if init + term + base > n_warmup:
        init = max(1, int(0.15 * n_warmup))
        term = max(1, int(0.10 * n_warmup))
        base = n_warmup - init - term
    windows = []
    start = init
    size = base
    while start + size < n_warmup - term:
        nxt = start + size
        if nxt + 2 * size >= n_warmup - term:
            nxt = n_warmup - term
        windows.append((start, nxt))
        start = nxt
        size *= 2
    if not windows:
        windows.append((init, n_warmup - term))
    return windows


def nuts(target, cfg: NUTSConfig, x0: np.ndarray | None = None) -> RawChain:
    """Run one chain; deterministic given (target, cfg, x0)."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(23,)))
    dim = target.dim
    if x0 is None:
        x0 = target.init_state(rng) if hasattr(target, "init_state") else rng.standard_normal(dim)
    q = np.asarray(x0, dtype=np.float64).copy()
    logp, grad = target.logp_grad(q)
    if not math.isfinite(logp):
        raise ValueError("initial state has non-finite log density")

    inv_mass = np.ones(dim)
    mass_sd = np.ones(dim)
    eps = _find_reasonable_eps(target, q, logp, grad, rng, inv_mass, mass_sd)
    dual = _DualAverage(eps, cfg.target_accept)
    windows = _adapt_schedule(cfg.n_warmup, cfg)
    welford = _Welford(dim)
    win_idx = 0

    draws = np.empty((cfg.n_draws, dim))
    divergent = np.zeros(cfg.n_draws, dtype=bool)
    tree_depth = np.zeros(cfg.n_draws, dtype=int)
    accept_stat = np.zeros(cfg.n_draws)
    energy = np.zeros(cfg.n_draws)
    n_leapfrog = np.zeros(cfg.n_draws, dtype=int)

    t_start = time.perf_counter()
    warmup_s = 0.0

    for it in range(cfg.n_warmup + cfg.n_draws):
        warm = it < cfg.n_warmup
        p0 = rng.standard_normal(dim) * mass_sd
        h0 = -logp + _kinetic(p0, inv_mass)
        qm = qp = q
        pm = pp = p0
        gm = gp = grad
        lm = lp = logp
        prop_q, prop_logp, prop_grad = q, logp, grad
        logw_total = 0.0
        stats = _TreeStats()
        depth = 0
        while depth < cfg.max_depth:
            direction = 1.0 if rng.uniform() < 0.5 else -1.0
            if direction < 0:
                (qm, pm, gm, lm, _, _, _, _, q2, logp2, grad2, logw2, ok) = _build_tree(
                    target, qm, pm, gm, lm, direction, depth, eps, inv_mass, h0, rng, stats)
            else:
                (_, _, _, _, qp, pp, gp, lp, q2, logp2, grad2, logw2, ok) = _build_tree(
                    target, qp, pp, gp, lp, direction, depth, eps, inv_mass, h0, rng, stats)
            if not ok:
                break
            # biased progressive sampling favors the fresh subtree
            if math.isfinite(logw2) and math.log(rng.uniform()) < logw2 - logw_total:
                prop_q, prop_logp, prop_grad = q2, logp2, grad2
            logw_total = np.logaddexp(logw_total, logw2)
            depth += 1
            if _uturn(qm, pm, qp, pp, inv_mass):
                break
        q, logp, grad = prop_q, prop_logp, prop_grad
        alpha_mean = stats.alpha_sum / max(stats.n_alpha, 1)

        if warm:
            eps = dual.update(alpha_mean)
            if windows and win_idx < len(windows):
                start, end = windows[win_idx]
                if start <= it < end:
                    welford.push(q)
                if it == end - 1:
                    inv_mass = welford.variance()
                    mass_sd = 1.0 / np.sqrt(inv_mass)
                    welford = _Welford(dim)
                    win_idx += 1
                    eps = _find_reasonable_eps(target, q, logp, grad, rng, inv_mass, mass_sd)
                    dual = _DualAverage(eps, cfg.target_accept)
            if it == cfg.n_warmup - 1:
                eps = dual.adapted
                warmup_s = time.perf_counter() - t_start
        else:
            i = it - cfg.n_warmup
            draws[i] = q
            divergent[i] = stats.divergences > 0
            tree_depth[i] = depth
            accept_stat[i] = alpha_mean
            energy[i] = -logp
            n_leapfrog[i] = stats.n_leapfrog

    sampling_s = time.perf_counter() - t_start - warmup_s
    warning = None
    frac_div = float(divergent.mean())
    if frac_div > 0.5:
        warning = (f"{frac_div:.0%} of retained draws were divergent; "
                   "the posterior geometry is not being explored reliably")
        warnings.warn(warning, stacklevel=2)
    return RawChain(draws=draws, divergent=divergent, tree_depth=tree_depth,
                    accept_stat=accept_stat, energy=energy, n_leapfrog=n_leapfrog,
                    step_size=eps, inv_mass=inv_mass, warmup_s=warmup_s,
                    sampling_s=sampling_s, warning=warning)


# ---------------------------------------------------------------------------
# model-level sampling


@dataclass
class ChainResult:
    """Constrained posterior draws plus sampler diagnostics for one chain."""

    draws: dict                     # name -> (n,) scalars; "z", "f" -> (n, k)
    divergent: np.ndarray
    tree_depth: np.ndarray
    accept_stat: np.ndarray
    energy: np.ndarray
    n_leapfrog: np.ndarray
    step_size: float
    warmup_s: float
    sampling_s: float
    seed: int
    warning: str | None = None

    @property
    def n_draws(self) -> int:
        return self.draws["f"].shape[0]

    @property
    def n_divergent(self) -> int:
        return int(self.divergent.sum())


def nuts_sample(model, backend, n_warmup: int, n_draws: int, seed: int,
                target_accept: float = 0.8, max_depth: int = 10) -> ChainResult:
    """Sample one chain for a latent-field model and recover field draws."""
    from .inference import Posterior

    post = Posterior(model, backend)
    cfg = NUTSConfig(n_warmup=n_warmup, n_draws=n_draws, seed=seed,
                     target_accept=target_accept, max_depth=max_depth)
    raw = nuts(post, cfg)

    draws: dict = {}
    for i, name in enumerate(post.scalar_names):
        col = raw.draws[:, i]
        sup = model.hyperpriors[name].support
        if sup.kind == "real":
            draws[name] = col.copy()
        elif sup.kind == "positive":
            draws[name] = np.exp(col)
        else:
            draws[name] = sup.lo + (sup.hi - sup.lo) / (1.0 + np.exp(-col))
    draws["z"] = raw.draws[:, post.n_scalars:].copy()
    f = np.empty((n_draws, model.locs.n_sites))
    for i in range(n_draws):
        f[i] = post.field_values(raw.draws[i])
    draws["f"] = f

    return ChainResult(draws=draws, divergent=raw.divergent, tree_depth=raw.tree_depth,
                       accept_stat=raw.accept_stat, energy=raw.energy,
                       n_leapfrog=raw.n_leapfrog, step_size=raw.step_size,
                       warmup_s=raw.warmup_s, sampling_s=raw.sampling_s,
                       seed=seed, warning=raw.warning)


def save_chain(path, chain: ChainResult, manifest_extra: dict | None = None) -> None:
    from .fileformats import CHAIN_MAGIC, write_blocks

    manifest = {
        "seed": chain.seed,
        "n_draws": chain.n_draws,
        "n_divergent": chain.n_divergent,
        "step_size": chain.step_size,
        "warmup_s": chain.warmup_s,
        "sampling_s": chain.sampling_s,
        "warning": chain.warning,
        "scalar_names": [k for k, v in chain.draws.items() if np.ndim(v) == 1],
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    blocks = {f"draw.{k}": np.asarray(v) for k, v in chain.draws.items()}
    blocks["diag.divergent"] = chain.divergent.astype(np.float64)
    blocks["diag.tree_depth"] = chain.tree_depth.astype(np.float64)
    blocks["diag.accept_stat"] = chain.accept_stat
    blocks["diag.energy"] = chain.energy
    blocks["diag.n_leapfrog"] = chain.n_leapfrog.astype(np.float64)
    write_blocks(path, CHAIN_MAGIC, manifest, blocks)


def load_chain(path) -> tuple[ChainResult, dict]:
    from .fileformats import CHAIN_MAGIC, read_blocks

    manifest, blocks = read_blocks(path, CHAIN_MAGIC)
    draws = {k[len("draw."):]: v for k, v in blocks.items() if k.startswith("draw.")}
    chain = ChainResult(
        draws=draws,
        divergent=blocks["diag.divergent"].astype(bool),
        tree_depth=blocks["diag.tree_depth"].astype(int),
        accept_stat=blocks["diag.accept_stat"],
        energy=blocks["diag.energy"],
        n_leapfrog=blocks["diag.n_leapfrog"].astype(int),
        step_size=float(manifest["step_size"]),
        warmup_s=float(manifest["warmup_s"]),
        sampling_s=float(manifest["sampling_s"]),
        seed=int(manifest["seed"]),
        warning=manifest.get("warning"),
    )
    return chain, manifest
