"""Surrogate training: optimizers, LR schedule, streaming supervision batches.

Supervision comes from a rotating pool of hyperparameter draws with cached
Cholesky factors. Each step picks one pool slot and pairs it with a batch of
fresh whitened draws, so the factorization cost is amortized while the z
stream never repeats; slots are refreshed on a fixed schedule keyed to the
step index, which keeps the whole stream a pure function of (seed, step) and
makes checkpoint/resume exact.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, backward
from .kernels import KernelSpec, Locations
from .sampling import DEFAULT_JITTER, ThetaPrior, chol_factor
from .surrogates import PriorCVAE, Surrogate, save_checkpoint

OPTIMIZERS = ("adamw", "adam", "yogi")


@dataclass
class TrainConfig:
    steps: int = 200_000
    batch_size: int = 32
    max_lr: float = 1e-3
    warmup_steps: int = 1000
    min_lr_frac: float = 0.01
    grad_clip_norm: float = 3.0
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    seed: int = 0
    sigma_vae: float = 1.0
    pool_slots: int = 128
    pool_refresh: int = 8
    checkpoint_every: int = 0
    trace_every: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be at least 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.max_lr <= 0:
            raise ValueError("max_lr must be positive")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup into cosine decay down to max_lr * min_lr_frac."""
    if cfg.steps <= cfg.warmup_steps:
        warm = max(1, cfg.steps // 10)
    else:
        warm = cfg.warmup_steps
    min_lr = cfg.max_lr * cfg.min_lr_frac
    if step < warm:
        return min_lr + (cfg.max_lr - min_lr) * (step + 1) / warm
    span = max(1, cfg.steps - warm)
    t = min(1.0, (step - warm) / span)
    return min_lr + 0.5 * (cfg.max_lr - min_lr) * (1.0 + math.cos(math.pi * t))


# ---------------------------------------------------------------------------
# optimizers


class _MomentOpt:
    """Shared Adam-family state over a named parameter dict."""

    def __init__(self, params: dict[str, np.ndarray], beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def state_blocks(self) -> dict[str, np.ndarray]:
        out = {"opt.step": np.array(float(self.step_count))}
        for k in self.m:
            out[f"opt.m.{k}"] = self.m[k]
            out[f"opt.v.{k}"] = self.v[k]
        return out

    def load_state_blocks(self, blocks: dict[str, np.ndarray]) -> None:
        self.step_count = int(blocks["opt.step"])
        for k in self.m:
            self.m[k] = blocks[f"opt.m.{k}"].copy()
            self.v[k] = blocks[f"opt.v.{k}"].copy()


class Adam(_MomentOpt):
    weight_decay_mode = "none"

    def update(self, params, grads, lr, weight_decay=0.0):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            if self.weight_decay_mode == "decoupled" and weight_decay:
                params[k] *= 1.0 - lr * weight_decay
            denom = np.sqrt(v / c2)
            denom += self.eps
            params[k] -= (lr / c1) * m / denom


class AdamW(Adam):
    weight_decay_mode = "decoupled"


class Yogi(_MomentOpt):
    """Sign-based second-moment control; published defaults."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-3):
        super().__init__(params, beta1, beta2, eps)

    def update(self, params, grads, lr, weight_decay=0.0):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for k, g in grads.items():
            g2 = g * g
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v -= (1 - b2) * np.sign(v - g2) * g2
            denom = np.sqrt(np.maximum(v, 0) / c2)
            denom += self.eps
            params[k] -= (lr / c1) * m / denom


def make_optimizer(name: str, params: dict[str, np.ndarray]):
    return {"adam": Adam, "adamw": AdamW, "yogi": Yogi}[name](params)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict, float]:
    """Scale the whole gradient dict so its global L2 norm is at most max_norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def clip_and_step(optimizer, params, grads, lr, cfg: TrainConfig) -> float:
    """Clip to the configured global norm, then apply one optimizer update."""
    grads, norm = clip_gradients(grads, cfg.grad_clip_norm)
    optimizer.update(params, grads, lr, weight_decay=cfg.weight_decay)
    return norm


# ---------------------------------------------------------------------------
# supervision stream


@dataclass
class TrainBatch:
    theta: dict[str, float]
    z: np.ndarray  # (B, N)
    f: np.ndarray  # (B, N)
    locs: Locations | None = None
    ids: np.ndarray | None = None
    seed: int = 0


class FieldStream:
    """Deterministic per-step supervision batches from a rotating factor pool.

    ``locs_sampler`` may return a fixed grid (grid-bound models) or draw a new
    location set per slot (variable-location training).
    """

    def __init__(self, prior: ThetaPrior, family: str, locs_sampler, cfg: TrainConfig,
                 jitter: float = DEFAULT_JITTER):
        self.prior = prior
        self.family = family
        self.locs_sampler = locs_sampler
        self.cfg = cfg
        self.jitter = jitter
        self._slots: dict[int, tuple[int, dict, np.ndarray, Locations]] = {}

    def _slot_generation(self, slot: int, step: int) -> int:
        # refresh event k fires at step k * pool_refresh and touches slot
        # k % pool_slots; generation counts events seen by this slot so far
        cfg = self.cfg
        events = step // cfg.pool_refresh
        if events < slot:
            return 0
        return (events - slot) // cfg.pool_slots

    def _slot(self, slot: int, step: int):
        gen = self._slot_generation(slot, step)
        cached = self._slots.get(slot)
        if cached is not None and cached[0] == gen:
            return cached
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=self.cfg.seed, spawn_key=(1, slot, gen)))
        locs = self.locs_sampler(rng)
        theta = self.prior.sample(rng)
        spec = KernelSpec(family=self.family, spatial_dim=locs.dim, **theta)
        low = chol_factor(spec, locs, self.jitter)
        entry = (gen, theta, low, locs)
        self._slots[slot] = entry
        return entry

    def batch(self, step: int) -> TrainBatch:
        cfg = self.cfg
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2, step)))
        slot = int(rng.integers(0, cfg.pool_slots))
        _, theta, low, locs = self._slot(slot, step)
        z = rng.standard_normal((cfg.batch_size, low.shape[0]))
        f = z @ low.T
        ids = np.arange(low.shape[0])
        return TrainBatch(theta=theta, z=z, f=f, locs=locs, ids=ids, seed=step)


def fixed_locs_sampler(locs: Locations):
    return lambda rng: locs


def random_locs_sampler(sizes, extent: float = 100.0, dim: int = 2):
    sizes = list(sizes)

    def sample(rng):
        n = int(sizes[int(rng.integers(0, len(sizes)))])
        return Locations(rng.uniform(0.0, extent, size=(n, dim)))

    return sample


# ---------------------------------------------------------------------------
# training loops


@dataclass
class TrainResult:
    trace: list = field(default_factory=list)  # (step, loss, lr, grad_norm)
    train_seconds: float = 0.0
    final_loss: float = float("nan")


def _forward_loss(model: Surrogate, pt, batch: TrainBatch):
    kw = {}
    if model.arch == "transformer":
        kw = {"locs": batch.locs, "ids": batch.ids}
    pred = model.forward(pt, batch.z, batch.theta, **kw)
    err = ad.sub(pred, batch.f)
    return ad.tmean(ad.mul(err, err))


def kl_standard_normal(mu, sigma):
    """KL(N(mu, sigma) || N(0, 1)) summed over all entries."""
    return ad.mul(0.5, ad.tsum(ad.sub(ad.add(ad.mul(mu, mu), ad.mul(sigma, sigma)),
                                      ad.add(1.0, ad.mul(2.0, ad.log(sigma))))))


def _cvae_loss(model: PriorCVAE, pt, batch: TrainBatch, eps: np.ndarray, sigma_vae: float):
    mu, sigma = model.encode(pt, batch.f, batch.theta)
    zhat = ad.add(mu, ad.mul(sigma, eps))
    fhat = model.decode(pt, zhat, batch.theta)
    err = ad.sub(fhat, batch.f)
    recon = ad.tsum(ad.mul(err, err)) / (sigma_vae**2)
    return ad.div(ad.add(recon, kl_standard_normal(mu, sigma)), float(batch.z.shape[0]))


def train_surrogate(model: Surrogate, stream: FieldStream, cfg: TrainConfig,
                    trace_path=None, checkpoint_path=None, log=None,
                    start_step: int = 0, stop_step: int | None = None,
                    optimizer=None) -> TrainResult:
    """MSE training for decoder surrogates; CVAE variant adds the KL term.

    Pass ``start_step`` plus the restored ``optimizer`` to resume a run; the
    batch stream is a pure function of (seed, step), so resumption is exact.
    ``stop_step`` pauses early without altering the learning-rate schedule.
    """
    opt = optimizer or make_optimizer(cfg.optimizer, model.params)
    result = TrainResult()
    is_cvae = isinstance(model, PriorCVAE)
    t0 = time.perf_counter()
    for step in range(start_step, stop_step or cfg.steps):
        batch = stream.batch(step)
        tape = Tape()
        pt = model.lift_params(tape)
        if is_cvae:
            eps_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=cfg.seed, spawn_key=(3, step)))
            eps = eps_rng.standard_normal((batch.z.shape[0], model.latent_dim))
            loss = _cvae_loss(model, pt, batch, eps, cfg.sigma_vae)
        else:
            loss = _forward_loss(model, pt, batch)
        loss_val = float(loss.data)
        if not math.isfinite(loss_val):
            raise RuntimeError(
                f"non-finite loss at step {step} (batch seed {batch.seed}); aborting")
        grads_obj = backward(tape, loss)
        grads = {k: grads_obj.wrt(t) for k, t in pt.items()}
        lr = lr_at(cfg, step)
        gnorm = clip_and_step(opt, model.params, grads, lr, cfg)
        if step % cfg.trace_every == 0 or step == cfg.steps - 1:
            result.trace.append((step, loss_val, lr, gnorm))
        if log is not None and (step % max(1, cfg.steps // 20) == 0 or step == cfg.steps - 1):
            log(f"step {step}/{cfg.steps} loss {loss_val:.6f} lr {lr:.2e}")
        if checkpoint_path and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(model, checkpoint_path,
                            train_info={"steps_done": step + 1, "config": _cfg_dict(cfg)},
                            extra_blocks=opt.state_blocks())
    result.train_seconds = time.perf_counter() - t0
    result.final_loss = result.trace[-1][1] if result.trace else float("nan")
    if trace_path:
        write_trace(trace_path, result.trace)
    return result


def _cfg_dict(cfg: TrainConfig) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "lr", "grad_norm"])
        for row in trace:
            w.writerow([row[0], repr(float(row[1])), repr(float(row[2])), repr(float(row[3]))])


def heldout_mse(model: Surrogate, tuples, locs: Locations | None = None,
                cvae_seed: int = 1234) -> float:
    """Reconstruction MSE on held-out supervision tuples.

    Decoder surrogates are scored on ``model(theta, z)`` against f. The CVAE
    is scored the same way it trains: encode, sample the latent, decode.
    """
    pt = {k: v for k, v in model.const_params().items()}
    errs = []
    rng = np.random.default_rng(np.random.SeedSequence(cvae_seed))
    for rec in tuples:
        if isinstance(model, PriorCVAE):
            mu, sigma = model.encode(pt, rec.f, rec.theta)
            eps = rng.standard_normal(model.latent_dim)
            zhat = mu.data[0] + sigma.data[0] * eps
            fhat = model.decode(pt, zhat, rec.theta).data
        else:
            kw = {"locs": locs, "ids": np.arange(rec.z.size)} if model.arch == "transformer" else {}
            fhat = model.forward(pt, rec.z, rec.theta, **kw).data
        errs.append(float(np.mean((fhat - rec.f) ** 2)))
    return float(np.mean(errs))
