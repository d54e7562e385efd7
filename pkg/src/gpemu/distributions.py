"""Prior distributions for kernel hyperparameters and regression scalars.

Each distribution can draw samples, evaluate its log density on plain floats,
and evaluate it on live tensors so log densities are differentiable inside
the joint. ``support`` drives the unconstraining bijection used by the
sampler: positive parameters move through log space, interval parameters
through a scaled logistic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln, gammaln

from . import autodiff as ad

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Support:
    kind: str  # real | positive | interval
    lo: float = -math.inf
    hi: float = math.inf

    def contains(self, x: float) -> bool:
        if self.kind == "real":
            return math.isfinite(x)
        if self.kind == "positive":
            return x > 0
        return self.lo < x < self.hi


REAL = Support("real")
POSITIVE = Support("positive", 0.0)


class Normal:
    def __init__(self, mu: float, sd: float):
        if sd <= 0:
            raise ValueError("sd must be positive")
        self.mu, self.sd = float(mu), float(sd)
        self.support = REAL

    def sample(self, rng) -> float:
        return float(rng.normal(self.mu, self.sd))

    def log_pdf(self, x: float) -> float:
        z = (x - self.mu) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * _LOG_2PI

    def log_pdf_t(self, x):
        z = ad.div(ad.sub(x, self.mu), self.sd)
        return ad.sub(ad.mul(-0.5, ad.mul(z, z)), math.log(self.sd) + 0.5 * _LOG_2PI)

    def typical(self) -> float:
        return self.mu

    def config(self) -> dict:
        return {"dist": "normal", "mu": self.mu, "sd": self.sd}


class LogNormal:
    """log(x) ~ Normal(mu, sd)."""

    def __init__(self, mu: float, sd: float):
        if sd <= 0:
            raise ValueError("sd must be positive")
        self.mu, self.sd = float(mu), float(sd)
        self.support = POSITIVE

    def sample(self, rng) -> float:
        return float(math.exp(rng.normal(self.mu, self.sd)))

    def log_pdf(self, x: float) -> float:
        lx = math.log(x)
        z = (lx - self.mu) / self.sd
        return -0.5 * z * z - lx - math.log(self.sd) - 0.5 * _LOG_2PI

    def log_pdf_t(self, x):
        lx = ad.log(x)
        z = ad.div(ad.sub(lx, self.mu), self.sd)
        const = math.log(self.sd) + 0.5 * _LOG_2PI
        return ad.sub(ad.sub(ad.mul(-0.5, ad.mul(z, z)), lx), const)

    def typical(self) -> float:
        return math.exp(self.mu)

    def config(self) -> dict:
        return {"dist": "lognormal", "mu": self.mu, "sd": self.sd}


class Gamma:
    """Shape/rate parameterization; mean is shape / rate."""

    def __init__(self, shape: float, rate: float):
        if shape <= 0 or rate <= 0:
            raise ValueError("shape and rate must be positive")
        self.shape, self.rate = float(shape), float(rate)
        self.support = POSITIVE

    def sample(self, rng) -> float:
        return float(rng.gamma(self.shape, 1.0 / self.rate))

    def log_pdf(self, x: float) -> float:
        return (
            self.shape * math.log(self.rate)
            - gammaln(self.shape)
            + (self.shape - 1.0) * math.log(x)
            - self.rate * x
        )

    def log_pdf_t(self, x):
        const = self.shape * math.log(self.rate) - float(gammaln(self.shape))
        return ad.add(ad.sub(ad.mul(self.shape - 1.0, ad.log(x)), ad.mul(self.rate, x)), const)

    def typical(self) -> float:
        return self.shape / self.rate

    def config(self) -> dict:
        return {"dist": "gamma", "shape": self.shape, "rate": self.rate}


class Beta:
    def __init__(self, a: float, b: float):
        if a <= 0 or b <= 0:
            raise ValueError("a and b must be positive")
        self.a, self.b = float(a), float(b)
        self.support = Support("interval", 0.0, 1.0)

    def sample(self, rng) -> float:
        return float(rng.beta(self.a, self.b))

    def log_pdf(self, x: float) -> float:
        return (self.a - 1.0) * math.log(x) + (self.b - 1.0) * math.log1p(-x) - betaln(self.a, self.b)

    def log_pdf_t(self, x):
        t1 = ad.mul(self.a - 1.0, ad.log(x))
        t2 = ad.mul(self.b - 1.0, ad.log(ad.sub(1.0, x)))
        return ad.sub(ad.add(t1, t2), float(betaln(self.a, self.b)))

    def typical(self) -> float:
        return self.a / (self.a + self.b)

    def config(self) -> dict:
        return {"dist": "beta", "a": self.a, "b": self.b}


class Uniform:
    def __init__(self, lo: float, hi: float):
        if not hi > lo:
            raise ValueError("need hi > lo")
        self.lo, self.hi = float(lo), float(hi)
        self.support = Support("interval", self.lo, self.hi)

    def sample(self, rng) -> float:
        return float(rng.uniform(self.lo, self.hi))

    def log_pdf(self, x: float) -> float:
        return -math.log(self.hi - self.lo)

    def log_pdf_t(self, x):
        return ad.add(ad.mul(x, 0.0), -math.log(self.hi - self.lo))

    def typical(self) -> float:
        return 0.5 * (self.lo + self.hi)

    def config(self) -> dict:
        return {"dist": "uniform", "lo": self.lo, "hi": self.hi}


class LogScaleBeta:
    """Beta draw mapped onto (lo, hi) through log space: x = lo * (hi/lo)^v."""

    def __init__(self, a: float, b: float, lo: float, hi: float):
        if a <= 0 or b <= 0:
            raise ValueError("a and b must be positive")
        if not 0 < lo < hi:
            raise ValueError("need 0 < lo < hi")
        self.a, self.b = float(a), float(b)
        self.lo, self.hi = float(lo), float(hi)
        self._span = math.log(hi / lo)
        self.support = Support("interval", self.lo, self.hi)

    def sample(self, rng) -> float:
        return float(self.lo * (self.hi / self.lo) ** rng.beta(self.a, self.b))

    def log_pdf(self, x: float) -> float:
        v = math.log(x / self.lo) / self._span
        base = (self.a - 1.0) * math.log(v) + (self.b - 1.0) * math.log1p(-v) - betaln(self.a, self.b)
        return base - math.log(x) - math.log(self._span)

    def log_pdf_t(self, x):
        v = ad.div(ad.sub(ad.log(x), math.log(self.lo)), self._span)
        t1 = ad.mul(self.a - 1.0, ad.log(v))
        t2 = ad.mul(self.b - 1.0, ad.log(ad.sub(1.0, v)))
        const = float(betaln(self.a, self.b)) + math.log(self._span)
        return ad.sub(ad.sub(ad.add(t1, t2), ad.log(x)), const)

    def typical(self) -> float:
        return self.lo * (self.hi / self.lo) ** (self.a / (self.a + self.b))

    def config(self) -> dict:
        return {"dist": "logscale_beta", "a": self.a, "b": self.b, "lo": self.lo, "hi": self.hi}


_FACTORIES = {
    "normal": lambda c: Normal(c["mu"], c["sd"]),
    "lognormal": lambda c: LogNormal(c["mu"], c["sd"]),
    "gamma": lambda c: Gamma(c["shape"], c["rate"]),
    "beta": lambda c: Beta(c["a"], c["b"]),
    "uniform": lambda c: Uniform(c["lo"], c["hi"]),
    "logscale_beta": lambda c: LogScaleBeta(c["a"], c["b"], c["lo"], c["hi"]),
}


def from_config(cfg: dict):
    """Build a distribution from its JSON-able description."""
    kind = cfg.get("dist")
    if kind not in _FACTORIES:
        raise ValueError(f"unknown distribution {kind!r}")
    return _FACTORIES[kind](cfg)


def priors_from_config(cfg: dict) -> dict:
    return {name: from_config(c) for name, c in cfg.items()}


def priors_to_config(priors: dict) -> dict:
    return {name: d.config() for name, d in priors.items()}
