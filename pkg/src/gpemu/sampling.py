"""Exact GP prior draws, supervision-tuple generation and observation masks."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kernels import KernelSpec, Locations, materialize

DEFAULT_JITTER = 1e-6


@dataclass
class TrainTuple:
    """One supervision record: hyperparameters, whitened draw, field values."""

    theta: dict[str, float]
    z: np.ndarray
    f: np.ndarray
    seed: int = 0


@dataclass(frozen=True)
class ThetaPrior:
    """Sampler over kernel hyperparameters: free priors plus fixed values."""

    dists: dict
    fixed: dict = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return sorted(self.dists)

    def sample(self, rng) -> dict[str, float]:
        out = {k: d.sample(rng) for k, d in self.dists.items()}
        out.update(self.fixed)
        return out


def sample_prior(spec: KernelSpec, locs: Locations, z, mu=None, jitter: float = DEFAULT_JITTER):
    """Field draw ``f = mu + L z`` with ``L`` the covariance Cholesky factor.

    Accepts tensors for ``z`` (and live hyperparameters through
    ``prior_field``), so the draw is differentiable.
    """
    n = locs.n_sites
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.size != n:
        raise ValueError(f"z has {zt.size} entries for {n} sites")
    k = materialize(spec, locs, jitter)
    low = ad.cholesky(k)
    f = ad.matmul(low, zt)
    if mu is not None:
        f = ad.add(f, mu)
    return f


def prior_field(family: str, theta: dict, locs: Locations, z, jitter: float = DEFAULT_JITTER):
    """Like ``sample_prior`` but with live hyperparameter tensors."""
    from .kernels import kernel_matrix

    k = kernel_matrix(family, theta, locs, jitter)
    low = ad.cholesky(k)
    return ad.matmul(low, z if isinstance(z, Tensor) else Tensor(z))


def chol_factor(spec: KernelSpec, locs: Locations, jitter: float = DEFAULT_JITTER) -> np.ndarray:
    """Plain numpy Cholesky factor of the materialized covariance."""
    return ad.cholesky(materialize(spec, locs, jitter)).data


def tuple_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Splittable per-record seed so generation order never matters."""
    return np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))


def make_tuple(
    prior: ThetaPrior,
    family: str,
    locs: Locations,
    master_seed: int,
    index: int,
    jitter: float = DEFAULT_JITTER,
) -> TrainTuple:
    rng = np.random.default_rng(tuple_seed(master_seed, index))
    theta = prior.sample(rng)
    spec = KernelSpec(family=family, spatial_dim=locs.dim, **theta)
    low = chol_factor(spec, locs, jitter)
    z = rng.standard_normal(locs.n_sites)
    return TrainTuple(theta=theta, z=z, f=low @ z, seed=index)


def gen_dataset(
    prior: ThetaPrior,
    family: str,
    locs: Locations,
    count: int,
    seed: int,
    jitter: float = DEFAULT_JITTER,
):
    """Yield ``count`` supervision tuples, reproducible per (seed, index)."""
    if count < 1:
        raise ValueError("count must be at least 1")
    for i in range(count):
        yield make_tuple(prior, family, locs, seed, i, jitter)


# ---------------------------------------------------------------------------
# observation masks


@dataclass(frozen=True)
class MaskSpec:
    """Masked-fraction target, mask shape and seed.

    ``drop_times`` removes whole time slices on spatiotemporal grids, on top
    of the spatial mask replicated at every step.
    """

    fraction: float
    mode: str = "contiguous_rect"
    seed: int = 0
    drop_times: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.fraction < 1.0:
            raise ValueError(f"fraction must lie in [0, 1), got {self.fraction}")
        if self.mode not in ("contiguous_rect", "random_uniform"):
            raise ValueError(f"unknown mask mode {self.mode!r}")


def _best_rectangle(ny: int, nx: int, target: int) -> tuple[int, int]:
    """Axis-aligned rectangle whose area is closest to ``target`` cells."""
    best = (1, 1)
    best_err = abs(1 - target)
    for h in range(ny, 0, -1):
        for w in {min(nx, max(1, round(target / h))), min(nx, max(1, target // h))}:
            err = abs(h * w - target)
            if err < best_err or (err == best_err and h > best[0]):
                best, best_err = (h, w), err
    return best


def apply_mask(y, mask: MaskSpec, grid_shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Split site indices into (observed, masked) per the mask spec.

    ``grid_shape`` is (ny, nx) for spatial grids or (T, ny, nx) for
    spatiotemporal ones; contiguous masking requires it.
    """
    n = int(np.asarray(y).size) if not isinstance(y, int) else y
    rng = np.random.default_rng(np.random.SeedSequence(entropy=mask.seed, spawn_key=(77,)))
    if mask.fraction == 0.0 and not mask.drop_times:
        return np.arange(n), np.array([], dtype=int)

    if mask.mode == "random_uniform":
        m = int(round(mask.fraction * n))
        masked = np.sort(rng.choice(n, size=m, replace=False))
    else:
        if grid_shape is None:
            raise ValueError("contiguous masking requires a grid shape")
        if len(grid_shape) == 3:
            nt, ny, nx = grid_shape
        else:
            nt, (ny, nx) = 1, grid_shape
        if nt * ny * nx != n:
            raise ValueError(f"grid shape {grid_shape} does not cover {n} sites")
        target = int(round(mask.fraction * ny * nx))
        h, w = _best_rectangle(ny, nx, target)
        if abs(h * w - target) > 0:
            warnings.warn(
                f"mask fraction {mask.fraction} not realizable as a rectangle on "
                f"{ny}x{nx}; using {h}x{w}",
                stacklevel=2,
            )
        r0 = int(rng.integers(0, ny - h + 1))
        c0 = int(rng.integers(0, nx - w + 1))
        spatial = np.zeros((ny, nx), dtype=bool)
        spatial[r0 : r0 + h, c0 : c0 + w] = True
        flat = np.tile(spatial.ravel(), nt)
        masked = np.flatnonzero(flat)

    if mask.drop_times:
        if grid_shape is None or len(grid_shape) != 3:
            raise ValueError("drop_times requires a (T, ny, nx) grid shape")
        nt, ny, nx = grid_shape
        per = ny * nx
        extra = np.concatenate([np.arange(t * per, (t + 1) * per) for t in mask.drop_times])
        masked = np.unique(np.concatenate([masked, extra]))

    observed = np.setdiff1d(np.arange(n), masked)
    return observed, masked
