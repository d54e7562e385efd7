"""Covariance kernels and dense covariance-matrix construction.

Supported families: Matern-1/2, -3/2, -5/2, a squared-exponential ("rbf"),
and a non-separable space-time kernel. The squared exponential here is
``variance * exp(-r^2 / lengthscale^2)`` (no 1/2 factor), matching the
spatial factor of the space-time kernel at zero temporal lag.

Matrices are built from constant distance tables and live hyperparameter
tensors, so they are differentiable with respect to the hyperparameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FAMILIES = ("matern12", "matern32", "matern52", "rbf", "gneiting_st")

# canonical hyperparameter ordering used for packing/conditioning
PARAM_ORDER = ("lengthscale", "variance", "a", "alpha", "b", "nu")

GNEITING_EXTRAS = ("a", "alpha", "b", "nu")


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family plus hyperparameters.

    ``a``, ``alpha``, ``b``, ``nu`` and ``spatial_dim`` only apply to the
    space-time family; ``alpha`` and ``b`` live in (0, 1].
    """

    family: str
    lengthscale: float
    variance: float = 1.0
    a: float | None = None
    alpha: float | None = None
    b: float | None = None
    nu: float | None = None
    spatial_dim: int = 2

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown kernel family {self.family!r}")
        if not self.lengthscale > 0:
            raise ValueError(f"lengthscale must be positive, got {self.lengthscale}")
        if not self.variance > 0:
            raise ValueError(f"variance must be positive, got {self.variance}")
        if self.family == "gneiting_st":
            for name in GNEITING_EXTRAS:
                if getattr(self, name) is None:
                    raise ValueError(f"gneiting_st requires parameter {name!r}")
            if not self.a > 0:
                raise ValueError(f"a must be positive, got {self.a}")
            if not 0 < self.alpha <= 1:
                raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
            if not 0 < self.b <= 1:
                raise ValueError(f"b must lie in (0, 1], got {self.b}")
            if not self.nu > 0:
                raise ValueError(f"nu must be positive, got {self.nu}")

    def theta(self) -> dict[str, float]:
        """Hyperparameters as a name -> value mapping (set fields only)."""
        out = {"lengthscale": self.lengthscale, "variance": self.variance}
        if self.family == "gneiting_st":
            for name in GNEITING_EXTRAS:
                out[name] = getattr(self, name)
        return out

    def with_theta(self, theta: dict[str, float]) -> "KernelSpec":
        merged = self.theta() | dict(theta)
        return KernelSpec(family=self.family, spatial_dim=self.spatial_dim, **merged)


@dataclass(frozen=True)
class Locations:
    """Evaluation sites: spatial coordinates plus an optional time grid.

    With ``times`` set, the effective site list is the product grid in
    time-major order (all spatial sites at t0, then t1, ...).
    """

    coords: np.ndarray
    times: np.ndarray | None = None

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim == 1:
            c = c[:, None]
        object.__setattr__(self, "coords", c)
        if self.times is not None:
            object.__setattr__(self, "times", np.asarray(self.times, dtype=np.float64))
        if c.shape[0] < 1:
            raise ValueError("need at least one location")

    @property
    def n_spatial(self) -> int:
        return self.coords.shape[0]

    @property
    def n_times(self) -> int:
        return 1 if self.times is None else len(self.times)

    @property
    def n_sites(self) -> int:
        return self.n_spatial * self.n_times

    @property
    def dim(self) -> int:
        return self.coords.shape[1]

    def site_coords(self) -> np.ndarray:
        """Spatial coordinates per site, tiled across time steps."""
        if self.times is None:
            return self.coords
        return np.tile(self.coords, (self.n_times, 1))

    def site_times(self) -> np.ndarray | None:
        if self.times is None:
            return None
        return np.repeat(self.times, self.n_spatial)

    @staticmethod
    def grid2d(side: int, extent: float = 100.0) -> "Locations":
        """Regular side x side grid over [0, extent]^2, row-major."""
        axis = np.linspace(0.0, extent, side)
        yy, xx = np.meshgrid(axis, axis, indexing="ij")
        return Locations(np.column_stack([xx.ravel(), yy.ravel()]))

    @staticmethod
    def random(n: int, seed: int, dim: int = 2, extent: float = 100.0) -> "Locations":
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        return Locations(rng.uniform(0.0, extent, size=(n, dim)))

    def with_times(self, times) -> "Locations":
        return Locations(self.coords, np.asarray(times, dtype=np.float64))


def _pairwise_sqdist(x: np.ndarray) -> np.ndarray:
    """Exact-symmetric squared distances via per-dimension differences."""
    n, d = x.shape
    out = np.zeros((n, n))
    for k in range(d):
        diff = x[:, k][:, None] - x[:, k][None, :]
        out += diff * diff
    return out


def _theta_value(theta, name: str, spec_default=None):
    if name in theta:
        return theta[name]
    if spec_default is not None:
        return spec_default
    raise KeyError(f"kernel parameter {name!r} missing")


def kernel_matrix(
    family: str,
    theta: dict,
    locs: Locations,
    jitter: float = 0.0,
) -> Tensor:
    """Covariance matrix over all sites; theta values may be live tensors.

    The distance tables are constants, so gradients flow only into the
    hyperparameters. ``jitter`` adds ``jitter * I``.
    """
    if jitter < 0:
        raise ValueError("jitter must be nonnegative")
    coords = locs.site_coords()
    n = coords.shape[0]
    dsq = _pairwise_sqdist(coords)
    if jitter == 0.0 and n > 1:
        off = dsq + np.eye(n)
        if family != "gneiting_st" and off.min() == 0.0:
            raise ValueError("duplicate locations require a positive jitter")

    ell = theta["lengthscale"]
    var = theta["variance"]

    if family == "matern12":
        r = np.sqrt(dsq)
        k = ad.mul(var, ad.exp(ad.neg(ad.div(r, ell))))
    elif family == "matern32":
        r = math.sqrt(3.0) * np.sqrt(dsq)
        u = ad.div(r, ell)
        k = ad.mul(var, ad.mul(ad.add(1.0, u), ad.exp(ad.neg(u))))
    elif family == "matern52":
        r = math.sqrt(5.0) * np.sqrt(dsq)
        u = ad.div(r, ell)
        poly = ad.add(ad.add(1.0, u), ad.div(ad.mul(u, u), 3.0))
        k = ad.mul(var, ad.mul(poly, ad.exp(ad.neg(u))))
    elif family == "rbf":
        k = ad.mul(var, ad.exp(ad.neg(ad.div(dsq, ad.mul(ell, ell)))))
    elif family == "gneiting_st":
        times = locs.site_times()
        if times is None:
            raise ValueError("gneiting_st requires spatiotemporal locations")
        if jitter == 0.0 and n > 1:
            same = (dsq + (np.abs(times[:, None] - times[None, :]) > 0)) == 0
            np.fill_diagonal(same, False)
            if same.any():
                raise ValueError("duplicate locations require a positive jitter")
        a = theta["a"]
        alpha = theta["alpha"]
        b = theta["b"]
        nu = theta["nu"]
        d = float(locs.dim)
        dt_abs = np.abs(times[:, None] - times[None, :])
        pos = dt_abs > 0
        dt_safe = np.where(pos, dt_abs, 1.0)
        # |dt|^(2 alpha) with an exact zero at dt == 0 so gradients stay finite
        dt_pow = ad.mul(pos.astype(float), ad.exp(ad.mul(ad.mul(2.0, alpha), ad.log(ad.div(dt_safe, nu)))))
        grow = ad.add(ad.mul(a, dt_pow), 1.0)  # a*dt^(2a) + 1, >= 1
        prefac = ad.exp(ad.mul(-0.5 * d, ad.log(grow)))
        denom = ad.mul(ad.mul(ell, ell), ad.exp(ad.mul(b, ad.log(grow))))
        k = ad.mul(var, ad.mul(prefac, ad.exp(ad.neg(ad.div(dsq, denom)))))
    else:
        raise ValueError(f"unknown kernel family {family!r}")

    if jitter > 0.0:
        k = ad.add(k, jitter * np.eye(n))
    return k if isinstance(k, Tensor) else Tensor(k)


def materialize(spec: KernelSpec, locs: Locations, jitter: float = 1e-6) -> Tensor:
    """Dense covariance matrix for a fully specified kernel."""
    return kernel_matrix(spec.family, spec.theta(), locs, jitter)


def kernel_value(spec: KernelSpec, x, xp) -> float:
    """Scalar covariance between two points.

    For the space-time family, points are ``(coords, t)`` pairs.
    """
    ell, var = spec.lengthscale, spec.variance
    if spec.family == "gneiting_st":
        (sx, tx), (sy, ty) = x, xp
        dsq = float(((np.atleast_1d(sx) - np.atleast_1d(sy)) ** 2).sum())
        dt = abs(float(tx) - float(ty)) / spec.nu
        grow = spec.a * dt ** (2 * spec.alpha) + 1.0 if dt > 0 else 1.0
        d = float(np.atleast_1d(sx).size)
        return float(var * grow ** (-d / 2.0) * math.exp(-dsq / (ell**2 * grow**spec.b)))
    dsq = float(((np.atleast_1d(x) - np.atleast_1d(xp)) ** 2).sum())
    r = math.sqrt(dsq)
    if spec.family == "matern12":
        return float(var * math.exp(-r / ell))
    if spec.family == "matern32":
        u = math.sqrt(3.0) * r / ell
        return float(var * (1.0 + u) * math.exp(-u))
    if spec.family == "matern52":
        u = math.sqrt(5.0) * r / ell
        return float(var * (1.0 + u + u * u / 3.0) * math.exp(-u))
    return float(var * math.exp(-dsq / ell**2))  # rbf


def cross_kernel(
    family: str,
    theta: dict,
    coords_a: np.ndarray,
    coords_b: np.ndarray,
    times_a: np.ndarray | None = None,
    times_b: np.ndarray | None = None,
) -> Tensor:
    """Rectangular covariance block between two site sets."""
    n, m = coords_a.shape[0], coords_b.shape[0]
    dsq = np.zeros((n, m))
    for k in range(coords_a.shape[1]):
        diff = coords_a[:, k][:, None] - coords_b[:, k][None, :]
        dsq += diff * diff
    ell = theta["lengthscale"]
    var = theta["variance"]
    if family == "matern12":
        r = np.sqrt(dsq)
        return ad.mul(var, ad.exp(ad.neg(ad.div(r, ell))))
    if family == "matern32":
        r = math.sqrt(3.0) * np.sqrt(dsq)
        u = ad.div(r, ell)
        return ad.mul(var, ad.mul(ad.add(1.0, u), ad.exp(ad.neg(u))))
    if family == "matern52":
        r = math.sqrt(5.0) * np.sqrt(dsq)
        u = ad.div(r, ell)
        poly = ad.add(ad.add(1.0, u), ad.div(ad.mul(u, u), 3.0))
        return ad.mul(var, ad.mul(poly, ad.exp(ad.neg(u))))
    if family == "rbf":
        return ad.mul(var, ad.exp(ad.neg(ad.div(dsq, ad.mul(ell, ell)))))
    if family == "gneiting_st":
        if times_a is None or times_b is None:
            raise ValueError("gneiting_st cross blocks need site times")
        d = float(coords_a.shape[1])
        dt_abs = np.abs(times_a[:, None] - times_b[None, :])
        pos = dt_abs > 0
        dt_safe = np.where(pos, dt_abs, 1.0)
        dt_pow = ad.mul(pos.astype(float),
                        ad.exp(ad.mul(ad.mul(2.0, theta["alpha"]),
                                      ad.log(ad.div(dt_safe, theta["nu"])))))
        grow = ad.add(ad.mul(theta["a"], dt_pow), 1.0)
        prefac = ad.exp(ad.mul(-0.5 * d, ad.log(grow)))
        denom = ad.mul(ad.mul(ell, ell), ad.exp(ad.mul(theta["b"], ad.log(grow))))
        return ad.mul(var, ad.mul(prefac, ad.exp(ad.neg(ad.div(dsq, denom)))))
    raise ValueError(f"cross_kernel does not support family {family!r}")
