"""Probabilistic models over latent GP fields with swappable prior backends.

A ``ProbModel`` couples a count likelihood (Poisson or Binomial) with a
latent field prior expressed in whitened form: every backend maps standard
normal latents plus kernel hyperparameters to field values, so the sampler
always works on an unconstrained, well-scaled state vector

    [transformed kernel params..., beta, latent block]

Backends: exact Cholesky GP, a trained decoder surrogate, random Fourier
features, and inducing-point projection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from . import autodiff as ad
from .autodiff import CholeskyError, Tape, Tensor, backward
from .kernels import PARAM_ORDER, Locations, cross_kernel, kernel_matrix
from .sampling import DEFAULT_JITTER
from .surrogates import Surrogate

LIKELIHOODS = ("poisson", "binomial")


class UnsupportedBackendError(ValueError):
    """Raised when a prior backend cannot represent the requested kernel."""


@dataclass
class ProbModel:
    """Observation model plus priors; the backend supplies the field prior."""

    likelihood: str
    family: str
    locs: Locations
    y: np.ndarray
    observed_idx: np.ndarray
    hyperpriors: dict  # name -> distribution; includes "beta"
    fixed: dict = field(default_factory=dict)
    trials: np.ndarray | None = None
    jitter: float = DEFAULT_JITTER

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.float64)
        self.observed_idx = np.asarray(self.observed_idx, dtype=int)
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")
        if np.any(self.y < 0) or np.any(self.y != np.floor(self.y)):
            raise ValueError("observations must be nonnegative integers")
        if self.likelihood == "binomial":
            if self.trials is None:
                raise ValueError("binomial likelihood needs per-site trials")
            self.trials = np.asarray(self.trials, dtype=np.float64)
            if np.any(self.y > self.trials):
                raise ValueError("binomial counts cannot exceed trials")
        n = self.locs.n_sites
        if self.y.size != n:
            raise ValueError("y length must match the site count")
        if self.observed_idx.size and (self.observed_idx.min() < 0 or self.observed_idx.max() >= n):
            raise ValueError("observation mask indices out of range")

    @property
    def sampled_names(self) -> list[str]:
        kernel = [k for k in PARAM_ORDER if k in self.hyperpriors]
        return kernel + (["beta"] if "beta" in self.hyperpriors else [])


# ---------------------------------------------------------------------------
# prior backends


class ExactGPBackend:
    """Whitened exact GP: f = chol(K(theta)) z."""

    kind = "exact_gp"

    def __init__(self, family: str, locs: Locations, jitter: float = DEFAULT_JITTER):
        self.family = family
        self.locs = locs
        self.jitter = jitter

    @property
    def n_latent(self) -> int:
        return self.locs.n_sites

    def field(self, theta_t: dict, z: Tensor) -> Tensor:
        k = kernel_matrix(self.family, theta_t, self.locs, self.jitter)
        return ad.matmul(ad.cholesky(k), z)

    def describe(self) -> dict:
        return {"kind": self.kind, "family": self.family, "jitter": self.jitter}


class SurrogateBackend:
    """Trained decoder standing in for the exact prior map."""

    kind = "surrogate"

    def __init__(self, model: Surrogate, locs: Locations, ids: np.ndarray | None = None,
                 label: str | None = None):
        self.model = model
        self.locs = locs
        self.ids = np.arange(locs.n_sites) if ids is None else np.asarray(ids)
        self.label = label or f"surrogate_{model.arch}"
        if model.arch == "transformer":
            if locs.n_sites > model.max_locations:
                raise ValueError("location count exceeds the surrogate's maximum")
        elif model.arch == "cvae":
            self._n_latent = model.latent_dim
        if model.arch != "cvae":
            self._n_latent = locs.n_sites

    @property
    def n_latent(self) -> int:
        return self._n_latent

    def field(self, theta_t: dict, z: Tensor) -> Tensor:
        pt = self.model.const_params()
        if self.model.arch == "transformer":
            return self.model.forward(pt, z, theta_t, locs=self.locs, ids=self.ids)
        return self.model.forward(pt, z, theta_t)

    def describe(self) -> dict:
        return {"kind": self.kind, "arch": self.model.arch, "label": self.label}


class RFFBackend:
    """Random Fourier features for shift-invariant kernels.

    Base frequencies are drawn once from the unit-lengthscale spectral
    density and rescaled by 1/lengthscale at evaluation, so the lengthscale
    stays inferable. The latent block holds the feature weights.
    """

    kind = "rff"

    _SPECTRAL_DF = {"matern12": 1.0, "matern32": 3.0, "matern52": 5.0}

    def __init__(self, family: str, locs: Locations, n_features: int, seed: int = 0):
        if family == "gneiting_st":
            raise UnsupportedBackendError(
                "random Fourier features require a shift-invariant spatial kernel; "
                "the non-separable space-time kernel is not supported")
        if family not in self._SPECTRAL_DF and family != "rbf":
            raise UnsupportedBackendError(f"no spectral sampler for family {family!r}")
        if n_features % 2 != 0:
            raise ValueError("n_features must be even")
        self.family = family
        self.locs = locs
        self.n_features = n_features
        self.seed = seed
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(11,)))
        d = locs.dim
        eta = rng.standard_normal((n_features, d))
        if family == "rbf":
            base = eta * math.sqrt(2.0)  # k(r) = exp(-r^2/l^2) has scale l/sqrt(2)
        else:
            df = self._SPECTRAL_DF[family]
            q = rng.chisquare(df, size=(n_features, 1))
            base = eta * np.sqrt(df / q)
        self.base_freqs = base
        self.phases = rng.uniform(0.0, 2.0 * math.pi, size=n_features)
        self._proj = locs.site_coords() @ base.T  # (n_sites, n_features), constant

    @property
    def n_latent(self) -> int:
        return self.n_features

    def field(self, theta_t: dict, z: Tensor) -> Tensor:
        ell = theta_t["lengthscale"]
        var = theta_t["variance"]
        phi = ad.cos(ad.add(ad.div(self._proj, ell), self.phases))
        scale = ad.power(ad.mul(var, 2.0 / self.n_features), 0.5)
        return ad.mul(scale, ad.matmul(phi, z))

    def describe(self) -> dict:
        return {"kind": self.kind, "family": self.family,
                "n_features": self.n_features, "seed": self.seed}


class InducingBackend:
    """Deterministic projection through inducing sites: f = K_fu K_uu^-1 u."""

    kind = "inducing"

    def __init__(self, family: str, locs: Locations, inducing: Locations,
                 jitter: float = DEFAULT_JITTER):
        if inducing.n_sites > locs.n_sites:
            raise ValueError("more inducing sites than data sites")
        self.family = family
        self.locs = locs
        self.inducing = inducing
        self.jitter = jitter

    @property
    def n_latent(self) -> int:
        return self.inducing.n_sites

    def field(self, theta_t: dict, z: Tensor) -> Tensor:
        jitter = self.jitter
        for _ in range(4):
            try:
                k_uu = kernel_matrix(self.family, theta_t, self.inducing, jitter)
                low = ad.cholesky(k_uu)
                break
            except CholeskyError:
                jitter *= 10.0
        else:
            raise CholeskyError(-1, float("nan"))
        k_fu = cross_kernel(self.family, theta_t,
                            self.locs.site_coords(), self.inducing.site_coords(),
                            self.locs.site_times(), self.inducing.site_times())
        # u = L z  ->  K_fu K_uu^-1 u = K_fu L^-T z
        return ad.matmul(k_fu, ad.triangular_solve(low, z, trans=True))

    def describe(self) -> dict:
        return {"kind": self.kind, "family": self.family,
                "n_inducing": self.inducing.n_sites, "jitter": self.jitter}


def default_inducing_count(n_sites: int) -> int:
    return max(1, round(n_sites ** (2.0 / 3.0)))


def subset_inducing(locs: Locations, m: int, seed: int = 0) -> Locations:
    """Seeded uniform subset of the spatial sites used as inducing locations."""
    if locs.times is not None:
        raise UnsupportedBackendError("inducing subsets are drawn over spatial sites only")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(13,)))
    coords = locs.site_coords()
    idx = np.sort(rng.choice(coords.shape[0], size=min(m, coords.shape[0]), replace=False))
    return Locations(coords[idx])


# ---------------------------------------------------------------------------
# unconstraining transforms


def _transform(dist, u: Tensor) -> tuple[Tensor, Tensor]:
    """Map an unconstrained scalar to the prior's support; returns (x, logJ)."""
    sup = dist.support
    if sup.kind == "real":
        return u, ad.mul(u, 0.0)
    if sup.kind == "positive":
        return ad.exp(u), u
    width = sup.hi - sup.lo
    s = ad.sigmoid(u)
    x = ad.add(sup.lo, ad.mul(width, s))
    logj = ad.sub(math.log(width), ad.add(ad.softplus(u), ad.softplus(ad.neg(u))))
    return x, logj


def transform_inverse(dist, x: float) -> float:
    sup = dist.support
    if sup.kind == "real":
        return float(x)
    if sup.kind == "positive":
        return math.log(x)
    frac = (x - sup.lo) / (sup.hi - sup.lo)
    frac = min(max(frac, 1e-9), 1 - 1e-9)
    return math.log(frac / (1.0 - frac))


# ---------------------------------------------------------------------------
# joint density


class Posterior:
    """Differentiable unconstrained log joint for one model/backend pair."""

    def __init__(self, model: ProbModel, backend):
        self.model = model
        self.backend = backend
        self.scalar_names = model.sampled_names
        self.n_scalars = len(self.scalar_names)
        self.dim = self.n_scalars + backend.n_latent
        y = model.y[model.observed_idx]
        self._y_obs = y
        if model.likelihood == "poisson":
            self._ll_const = float(-gammaln(y + 1.0).sum())
        else:
            n = model.trials[model.observed_idx]
            self._ll_const = float(
                (gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)).sum())
            self._n_obs = n

    def _build(self, x: np.ndarray, tape: Tape):
        state = tape.leaf(x)
        logp = Tensor(self._ll_const)
        theta_t: dict = dict(self.model.fixed)
        for i, name in enumerate(self.scalar_names):
            u = ad.take(state, i)
            dist = self.model.hyperpriors[name]
            val, logj = _transform(dist, u)
            logp = ad.add(logp, ad.add(dist.log_pdf_t(val), logj))
            if name != "beta":
                theta_t[name] = val
        z = ad.take(state, slice(self.n_scalars, None))
        logp = ad.add(logp, ad.mul(-0.5, ad.tsum(ad.mul(z, z))))
        f = self.backend.field(theta_t, z)
        beta = ad.take(state, self.scalar_names.index("beta")) if "beta" in self.scalar_names \
            else Tensor(0.0)
        eta = ad.add(ad.take(f, self.model.observed_idx), beta)
        y = self._y_obs
        if self.model.likelihood == "poisson":
            ll = ad.sub(ad.tsum(ad.mul(y, eta)), ad.tsum(ad.exp(eta)))
        else:
            ll = ad.neg(ad.add(ad.tsum(ad.mul(y, ad.softplus(ad.neg(eta)))),
                               ad.tsum(ad.mul(self._n_obs - y, ad.softplus(eta)))))
        return state, ad.add(logp, ll), f

    def logp_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        tape = Tape()
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                state, logp, _ = self._build(x, tape)
            except CholeskyError:
                return -math.inf, np.zeros_like(x)
            val = float(logp.data)
            if not math.isfinite(val):
                return -math.inf, np.zeros_like(x)
            grad = backward(tape, logp).wrt(state)
        if not np.all(np.isfinite(grad)):
            return -math.inf, np.zeros_like(x)
        return val, grad

    def logp(self, x: np.ndarray) -> float:
        tape = Tape()
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                _, logp, _ = self._build(x, tape)
            except CholeskyError:
                return -math.inf
        return float(logp.data)

    def constrain(self, x: np.ndarray) -> dict:
        out = {}
        for i, name in enumerate(self.scalar_names):
            dist = self.model.hyperpriors[name]
            sup = dist.support
            u = float(x[i])
            if sup.kind == "real":
                out[name] = u
            elif sup.kind == "positive":
                out[name] = math.exp(u)
            else:
                out[name] = sup.lo + (sup.hi - sup.lo) / (1.0 + math.exp(-u))
        return out

    def latent(self, x: np.ndarray) -> np.ndarray:
        return x[self.n_scalars:]

    def field_values(self, x: np.ndarray) -> np.ndarray:
        """Recompute field values for one draw (no gradients)."""
        scalars = self.constrain(x)
        theta = dict(self.model.fixed)
        theta.update({k: v for k, v in scalars.items() if k != "beta"})
        with np.errstate(over="ignore", invalid="ignore"):
            f = self.backend.field(theta, Tensor(self.latent(x)))
        return f.data

    def init_state(self, rng) -> np.ndarray:
        x = np.empty(self.dim)
        for i, name in enumerate(self.scalar_names):
            dist = self.model.hyperpriors[name]
            x[i] = transform_inverse(dist, dist.typical()) + 0.1 * rng.standard_normal()
        x[self.n_scalars:] = 0.1 * rng.standard_normal(self.backend.n_latent)
        return x


def log_joint(model: ProbModel, backend, state: np.ndarray) -> tuple[float, np.ndarray]:
    """Unconstrained log joint and its gradient at one state vector."""
    return Posterior(model, backend).logp_grad(state)


# ---------------------------------------------------------------------------
# posterior predictive


@dataclass
class PredictiveSummary:
    y_mean: np.ndarray       # posterior mean of E[y | draw], per site
    y_rep_mean: np.ndarray   # mean of simulated replicates
    y_rep_sd: np.ndarray
    y_rep: np.ndarray | None  # (n_draws, n_sites) simulated replicates


def predictive_rate(model: ProbModel, f_draws: np.ndarray, beta_draws: np.ndarray) -> np.ndarray:
    """Per-draw, per-site mean of y given the latent state."""
    eta = f_draws + beta_draws[:, None]
    with np.errstate(over="ignore"):
        if model.likelihood == "poisson":
            return np.exp(eta)
        p = 1.0 / (1.0 + np.exp(-eta))
        return model.trials[None, :] * p


def posterior_predictive(model: ProbModel, chain, seed: int = 0,
                         keep_draws: bool = True) -> PredictiveSummary:
    """Simulate observations for every retained draw at all sites."""
    f_draws = chain.draws["f"]
    beta_draws = chain.draws.get("beta", np.zeros(f_draws.shape[0]))
    rate = predictive_rate(model, f_draws, beta_draws)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(17,)))
    if model.likelihood == "poisson":
        y_rep = rng.poisson(np.minimum(rate, 1e12)).astype(np.float64)
    else:
        eta = f_draws + beta_draws[:, None]
        p = 1.0 / (1.0 + np.exp(-eta))
        y_rep = rng.binomial(model.trials[None, :].astype(int), p).astype(np.float64)
    return PredictiveSummary(
        y_mean=rate.mean(axis=0),
        y_rep_mean=y_rep.mean(axis=0),
        y_rep_sd=y_rep.std(axis=0),
        y_rep=y_rep if keep_draws else None,
    )


def loglik_matrix(model: ProbModel, chain, idx: np.ndarray) -> np.ndarray:
    """log p(y_i | draw) for each retained draw and each site in idx."""
    f_draws = chain.draws["f"][:, idx]
    beta_draws = chain.draws.get("beta", np.zeros(chain.draws["f"].shape[0]))
    eta = f_draws + beta_draws[:, None]
    y = model.y[idx][None, :]
    if model.likelihood == "poisson":
        with np.errstate(over="ignore"):
            return y * eta - np.exp(eta) - gammaln(y + 1.0)
    n = model.trials[idx][None, :]
    const = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
    return const - y * np.logaddexp(0.0, -eta) - (n - y) * np.logaddexp(0.0, eta)
