import numpy as np
import pytest

from gpemu import autodiff as ad
from gpemu.autodiff import Tape, Tensor, backward
from gpemu.distributions import LogNormal
from gpemu.fileformats import read_dataset, write_dataset
from gpemu.kernels import KernelSpec, Locations
from gpemu.sampling import (
    MaskSpec,
    ThetaPrior,
    apply_mask,
    chol_factor,
    gen_dataset,
    make_tuple,
    sample_prior,
)

M12 = lambda ell: KernelSpec("matern12", lengthscale=ell, variance=1.0)


def lognormal_prior():
    return ThetaPrior(dists={"lengthscale": LogNormal(3.0, 0.4)}, fixed={"variance": 1.0})


def test_zero_z_returns_mean():
    locs = Locations.grid2d(4)
    mu = np.linspace(-1, 1, 16)
    f = sample_prior(M12(10.0), locs, np.zeros(16), mu=mu)
    np.testing.assert_allclose(f.data, mu, atol=1e-12)


def test_single_site_scales_by_sqrt_variance():
    locs = Locations(np.array([[0.0, 0.0]]))
    f = sample_prior(M12(5.0), locs, np.array([2.0]), jitter=1e-6)
    assert f.data[0] == pytest.approx(2.0 * np.sqrt(1.0 + 1e-6))


def test_draw_differentiable_in_z():
    locs = Locations.grid2d(3)
    tape = Tape()
    z = tape.leaf(np.random.default_rng(0).standard_normal(9))
    f = sample_prior(M12(20.0), locs, z)
    g = backward(tape, ad.tsum(f)).wrt(z)
    low = chol_factor(M12(20.0), locs)
    np.testing.assert_allclose(g, low.T @ np.ones(9), atol=1e-10)


def test_empirical_site_variance_large_grid():
    locs = Locations.grid2d(64)
    low = chol_factor(M12(10.0), locs)
    rng = np.random.default_rng(1234)
    draws = rng.standard_normal((1000, low.shape[0])) @ low.T
    site_var = draws.var(axis=0)
    assert site_var.min() > 0.85 and site_var.max() < 1.15


def test_long_lengthscale_limit_nearly_constant():
    locs = Locations.grid2d(16)
    low = chol_factor(M12(1e6), locs)
    rng = np.random.default_rng(3)
    f = low @ rng.standard_normal(256)
    assert f.std() < 0.01 * abs(f.mean())


def test_whitening_roundtrip():
    locs = Locations.grid2d(8)
    spec = M12(25.0)
    low = chol_factor(spec, locs)
    rng = np.random.default_rng(7)
    z = rng.standard_normal(64)
    f = low @ z
    z_back = ad.triangular_solve(Tensor(low), Tensor(f)).data
    np.testing.assert_allclose(z_back, z, atol=1e-8)


def test_two_point_sample_covariance():
    pts = Locations(np.array([[0.0, 0.0], [7.0, 0.0]]))
    spec = M12(12.0)
    low = chol_factor(spec, pts, jitter=0.0)
    rng = np.random.default_rng(11)
    draws = rng.standard_normal((20000, 2)) @ low.T
    expect = np.exp(-7.0 / 12.0)
    got = np.cov(draws.T)[0, 1]
    se = (1.0 + expect**2) ** 0.5 / np.sqrt(20000)
    assert abs(got - expect) < 3 * se


def test_tuple_invariant_and_determinism():
    locs = Locations.grid2d(5)
    prior = lognormal_prior()
    t1 = make_tuple(prior, "matern12", locs, master_seed=99, index=4)
    t2 = make_tuple(prior, "matern12", locs, master_seed=99, index=4)
    assert t1.theta == t2.theta
    np.testing.assert_array_equal(t1.z, t2.z)
    np.testing.assert_array_equal(t1.f, t2.f)
    spec = KernelSpec("matern12", **t1.theta)
    low = chol_factor(spec, locs)
    np.testing.assert_allclose(t1.f, low @ t1.z, rtol=1e-12, atol=1e-12)


def test_generation_order_independent():
    locs = Locations.grid2d(4)
    prior = lognormal_prior()
    forward = [make_tuple(prior, "matern12", locs, 5, i) for i in range(6)]
    shuffled = [make_tuple(prior, "matern12", locs, 5, i) for i in (3, 0, 5, 1, 4, 2)]
    by_index = {t.seed: t for t in shuffled}
    for t in forward:
        np.testing.assert_array_equal(t.f, by_index[t.seed].f)


def test_lengthscale_prior_mean_of_log():
    prior = lognormal_prior()
    rng = np.random.default_rng(2)
    draws = np.array([prior.sample(rng)["lengthscale"] for _ in range(10000)])
    assert abs(np.log(draws).mean() - 3.0) < 0.02


def test_dataset_roundtrip_and_determinism(tmp_path):
    locs = Locations.grid2d(4)
    prior = lognormal_prior()
    header = {"family": "matern12", "n": 16, "count": 3, "seed": 21}

    p1, p2 = tmp_path / "a.drv", tmp_path / "b.drv"
    write_dataset(p1, header, gen_dataset(prior, "matern12", locs, 3, seed=21))
    write_dataset(p2, header, gen_dataset(prior, "matern12", locs, 3, seed=21))
    assert p1.read_bytes() == p2.read_bytes()

    header_back, records = read_dataset(p1)
    assert header_back["family"] == "matern12"
    assert len(records) == 3
    ref = make_tuple(prior, "matern12", locs, 21, 1)
    np.testing.assert_array_equal(records[1].f, ref.f)
    assert records[1].theta == pytest.approx(ref.theta)


# ---------------------------------------------------------------------------
# masks


def test_mask_zero_fraction():
    obs, masked = apply_mask(np.zeros(30), MaskSpec(fraction=0.0, seed=1), grid_shape=(5, 6))
    assert masked.size == 0 and obs.size == 30


def test_mask_half_grid_exact_rectangle():
    obs, masked = apply_mask(np.zeros(256), MaskSpec(fraction=0.5, seed=3), grid_shape=(16, 16))
    assert masked.size == 128
    rows, cols = np.unravel_index(masked, (16, 16))
    assert rows.max() - rows.min() + 1 == 16
    assert cols.max() - cols.min() + 1 == 8
    # fully filled rectangle
    assert masked.size == (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)


def test_mask_random_uniform_count():
    obs, masked = apply_mask(np.zeros(1000), MaskSpec(fraction=0.3, mode="random_uniform", seed=4))
    assert abs(masked.size - 300) <= 15
    assert np.intersect1d(obs, masked).size == 0


def test_mask_spatiotemporal_replication_and_dropped_slices():
    spec = MaskSpec(fraction=0.5, seed=5, drop_times=(2, 3))
    obs, masked = apply_mask(np.zeros(8 * 8 * 5), spec, grid_shape=(5, 8, 8))
    per = 64
    m = np.zeros(320, dtype=bool)
    m[masked] = True
    grid = m.reshape(5, per)
    # slices 2 and 3 fully masked
    assert grid[2].all() and grid[3].all()
    # same spatial pattern at every other time step
    np.testing.assert_array_equal(grid[0], grid[1])
    np.testing.assert_array_equal(grid[0], grid[4])
    assert grid[0].sum() == 32


def test_mask_fraction_validation():
    with pytest.raises(ValueError, match="fraction"):
        MaskSpec(fraction=1.0)


def test_unrealizable_fraction_warns():
    with pytest.warns(UserWarning, match="not realizable"):
        apply_mask(np.zeros(9), MaskSpec(fraction=0.55, seed=0), grid_shape=(3, 3))
