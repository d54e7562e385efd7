import numpy as np
import pytest

from gpemu import autodiff as ad
from gpemu.autodiff import Tape, Tensor, backward
from gpemu.distributions import LogNormal, Uniform
from gpemu.kernels import Locations
from gpemu.sampling import ThetaPrior
from gpemu.surrogates import (
    GMLPSurrogate,
    MLPSurrogate,
    PriorCVAE,
    ThetaCodec,
    TransformerSurrogate,
    load_checkpoint,
    save_checkpoint,
)

from gradcheck import directional_check


@pytest.fixture(scope="module")
def codec():
    prior = ThetaPrior(dists={"lengthscale": LogNormal(3.0, 0.4)}, fixed={"variance": 1.0})
    return ThetaCodec.from_prior(prior)


THETA = {"lengthscale": 20.0, "variance": 1.0}


def test_mlp_zero_weights_zero_output(codec):
    m = MLPSurrogate(16, codec, seed=0)
    for k in m.params:
        m.params[k] = np.zeros_like(m.params[k])
    out = m.predict(THETA, np.random.default_rng(0).standard_normal(16))
    np.testing.assert_array_equal(out, np.zeros(16))


def test_mlp_shapes(codec):
    m = MLPSurrogate(256, codec, seed=0)
    assert m.hidden == 256  # no bottleneck by default
    out = m.predict(THETA, np.zeros(256))
    assert out.shape == (256,)
    out2 = m.predict(THETA, np.zeros((5, 256)))
    assert out2.shape == (5, 256)


def _gmlp_reference(model, z, theta):
    """Independent numpy re-implementation of the gated-MLP forward."""
    p = model.params
    k = len(model.codec.keys)
    feats = (np.log([theta[key] for key in model.codec.keys]) - model.codec.shift) / model.codec.scale
    n = model.n_sites

    def ln(x, g, b):
        m = x.mean(-1, keepdims=True)
        v = x.var(-1, keepdims=True)
        return (x - m) / np.sqrt(v + 1e-6) * g + b

    def gelu(x):
        c = np.sqrt(2 / np.pi)
        return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))

    tok = np.concatenate([z[:, None], np.tile(feats, (n, 1))], axis=1)
    x = tok @ p["win"] + p["bin"]
    for i in range(model.n_blocks):
        xn = ln(x, p[f"blk{i}_ln_g"], p[f"blk{i}_ln_b"])
        z1 = gelu(xn @ p[f"blk{i}_u1"] + p[f"blk{i}_bu1"])
        z2 = gelu(xn @ p[f"blk{i}_u2"] + p[f"blk{i}_bu2"])
        z2 = ln(z2, p[f"blk{i}_gln_g"], p[f"blk{i}_gln_b"])
        gate = p[f"blk{i}_wtok"] @ z2 + p[f"blk{i}_btok"]
        x = x + (z1 * gate) @ p[f"blk{i}_v"] + p[f"blk{i}_bv"]
    xn = ln(x, p["lnf_g"], p["lnf_b"])
    return xn @ p["wout"] + p["bout"]


def test_gmlp_matches_numpy_reference(codec):
    m = GMLPSurrogate(12, codec, channels=8, expansion=2, n_blocks=2, seed=3)
    rng = np.random.default_rng(5)
    for k in m.params:  # break the near-zero init so the test has teeth
        m.params[k] = rng.standard_normal(m.params[k].shape) * 0.3
    z = rng.standard_normal(12)
    got = m.predict(THETA, z)
    want = _gmlp_reference(m, z, THETA)
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gmlp_zero_mixer_gate_is_identity(codec):
    """W = 0, b = 1 in the gate passes the first half straight through."""
    m = GMLPSurrogate(10, codec, channels=8, expansion=2, n_blocks=1, seed=1)
    m.params["blk0_wtok"] = np.zeros((10, 10))
    m.params["blk0_btok"] = np.ones((10, 1))
    rng = np.random.default_rng(2)
    z = rng.standard_normal(10)
    got = m.predict(THETA, z)

    # reference with the gate output replaced by z1 itself
    p = m.params
    feats = (np.log([THETA[k] for k in m.codec.keys]) - m.codec.shift) / m.codec.scale

    def ln(x, g, b):
        mm = x.mean(-1, keepdims=True)
        v = x.var(-1, keepdims=True)
        return (x - mm) / np.sqrt(v + 1e-6) * g + b

    def gelu(x):
        c = np.sqrt(2 / np.pi)
        return 0.5 * x * (1 + np.tanh(c * (x + 0.044715 * x**3)))

    tok = np.concatenate([z[:, None], np.tile(feats, (10, 1))], axis=1)
    x = tok @ p["win"] + p["bin"]
    xn = ln(x, p["blk0_ln_g"], p["blk0_ln_b"])
    z1 = gelu(xn @ p["blk0_u1"] + p["blk0_bu1"])
    x = x + z1 @ p["blk0_v"] + p["blk0_bv"]
    want = ln(x, p["lnf_g"], p["lnf_b"]) @ p["wout"] + p["bout"]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_gmlp_rejects_odd_gate_width(codec):
    with pytest.raises(ValueError, match="even"):
        GMLPSurrogate(8, codec, channels=3, expansion=1)


def test_gmlp_shapes(codec):
    m = GMLPSurrogate(64, codec, channels=16, seed=0)
    assert m.predict(THETA, np.zeros((3, 64))).shape == (3, 64)


# ---------------------------------------------------------------------------
# transformer


def tf_model(codec, family="matern12", **kw):
    kw.setdefault("embed_dim", 16)
    kw.setdefault("n_heads", 2)
    kw.setdefault("n_layers", 2)
    return TransformerSurrogate(32, codec, family, {"variance": 1.0}, seed=4, **kw)


def test_transformer_zero_alpha_ignores_kernel(codec):
    rng = np.random.default_rng(8)
    locs = Locations(rng.uniform(0, 100, size=(10, 2)))
    z = rng.standard_normal(10)
    m1 = tf_model(codec, family="matern12")
    m2 = tf_model(codec, family="rbf")  # different bias matrix, same params
    m2.params = {k: v.copy() for k, v in m1.params.items()}
    m2.buffers = {k: v.copy() for k, v in m1.buffers.items()}
    # alpha is zero at init, so the kernel bias must not matter
    np.testing.assert_allclose(m1.predict(THETA, z, locs=locs), m2.predict(THETA, z, locs=locs),
                               atol=1e-12)


def test_transformer_constant_bias_shift_invariance(codec):
    rng = np.random.default_rng(9)
    locs = Locations(rng.uniform(0, 100, size=(8, 2)))
    z = rng.standard_normal(8)
    m = tf_model(codec)
    for i in range(m.n_layers):
        m.params[f"l{i}_alpha"] = rng.uniform(0.5, 1.5, m.n_heads)
    base = m.predict(THETA, z, locs=locs, kernel_bias=np.zeros((8, 8)))
    shifted = m.predict(THETA, z, locs=locs, kernel_bias=3.7 * np.ones((8, 8)))
    np.testing.assert_allclose(base, shifted, atol=1e-10)


def test_transformer_permutation_equivariance(codec):
    rng = np.random.default_rng(10)
    n = 12
    locs = Locations(rng.uniform(0, 100, size=(n, 2)))
    z = rng.standard_normal(n)
    ids = np.arange(n)
    m = tf_model(codec)
    for i in range(m.n_layers):
        m.params[f"l{i}_alpha"] = rng.uniform(0.5, 1.5, m.n_heads)
    out = m.predict(THETA, z, locs=locs, ids=ids)
    perm = rng.permutation(n)
    out_p = m.predict(THETA, z[perm], locs=Locations(locs.coords[perm]), ids=ids[perm])
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_transformer_respects_max_locations(codec):
    m = tf_model(codec)
    locs = Locations(np.random.default_rng(0).uniform(0, 100, size=(33, 2)))
    with pytest.raises(ValueError, match="maximum"):
        m.predict(THETA, np.zeros(33), locs=locs)


def test_transformer_rejects_duplicate_ids(codec):
    m = tf_model(codec)
    locs = Locations(np.random.default_rng(0).uniform(0, 100, size=(4, 2)))
    with pytest.raises(ValueError, match="unique"):
        m.predict(THETA, np.zeros(4), locs=locs, ids=np.array([0, 1, 1, 2]))


def test_transformer_variable_sizes_one_checkpoint(codec):
    m = tf_model(codec)
    rng = np.random.default_rng(11)
    for n in (4, 9, 17):
        locs = Locations(rng.uniform(0, 100, size=(n, 2)))
        assert m.predict(THETA, rng.standard_normal(n), locs=locs).shape == (n,)


# ---------------------------------------------------------------------------
# CVAE


def test_cvae_decode_zero_weights(codec):
    m = PriorCVAE(12, codec, latent_dim=6, seed=0)
    for k in ("dw1", "db1", "dw2", "db2"):
        m.params[k] = np.zeros_like(m.params[k])
    out = m.decode(m.const_params(), np.ones(6), THETA)
    np.testing.assert_array_equal(out.data, np.zeros(12))


def test_cvae_encoder_sigma_positive(codec):
    m = PriorCVAE(12, codec, latent_dim=6, seed=0)
    rng = np.random.default_rng(1)
    for _ in range(20):
        _, sigma = m.encode(m.const_params(), rng.standard_normal(12) * 5, THETA)
        assert (sigma.data > 0).all()


def test_cvae_latent_dim_contract(codec):
    with pytest.raises(ValueError, match="latent"):
        PriorCVAE(8, codec, latent_dim=9)


# ---------------------------------------------------------------------------
# checkpoints and gradients


def test_checkpoint_roundtrip(tmp_path, codec):
    m = GMLPSurrogate(9, codec, channels=8, seed=2)
    locs = Locations.grid2d(3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(m, path, train_info={"steps": 10, "final_loss": 0.5}, locs=locs)
    m2, manifest, locs2, _ = load_checkpoint(path)
    assert manifest["config"]["arch"] == "gmlp"
    assert manifest["train_info"]["steps"] == 10
    for k in m.params:
        np.testing.assert_array_equal(m.params[k], m2.params[k])
    np.testing.assert_array_equal(locs.coords, locs2.coords)


def test_checkpoint_roundtrip_transformer(tmp_path, codec):
    m = tf_model(codec)
    path = tmp_path / "tf.ckpt"
    save_checkpoint(m, path)
    m2, manifest, _, _ = load_checkpoint(path)
    np.testing.assert_array_equal(m.buffers["rff_w"], m2.buffers["rff_w"])
    rng = np.random.default_rng(3)
    locs = Locations(rng.uniform(0, 100, size=(6, 2)))
    z = rng.standard_normal(6)
    np.testing.assert_array_equal(m.predict(THETA, z, locs=locs), m2.predict(THETA, z, locs=locs))


def _param_gradcheck(model, make_loss, rng, n_checks=3):
    keys = sorted(model.params)
    shapes = [model.params[k].shape for k in keys]

    def build(*leaves):
        pt = dict(zip(keys, leaves))
        return make_loss(pt)

    inputs = [model.params[k] for k in keys]
    return directional_check(build, inputs, rng, n_dirs=n_checks)


@pytest.mark.parametrize("arch", ["mlp", "gmlp", "transformer", "cvae"])
def test_surrogate_param_gradients(arch, codec):
    rng = np.random.default_rng(17)
    n = 4
    locs = Locations(rng.uniform(0, 100, size=(n, 2)))
    z = rng.standard_normal(n)
    f = rng.standard_normal(n)
    theta = {"lengthscale": 15.0, "variance": 1.0}

    if arch == "mlp":
        model = MLPSurrogate(n, codec, hidden=8, seed=5)
        loss = lambda pt: ad.tmean(ad.power(ad.sub(model.forward(pt, z, theta), f), 2.0))
    elif arch == "gmlp":
        model = GMLPSurrogate(n, codec, channels=8, expansion=2, n_blocks=2, seed=5)
        loss = lambda pt: ad.tmean(ad.power(ad.sub(model.forward(pt, z, theta), f), 2.0))
    elif arch == "transformer":
        model = TransformerSurrogate(8, codec, "matern12", {"variance": 1.0},
                                     embed_dim=8, n_heads=2, n_layers=2, seed=5)
        for i in range(2):
            model.params[f"l{i}_alpha"] = rng.uniform(0.3, 1.0, 2)
        loss = lambda pt: ad.tmean(
            ad.power(ad.sub(model.forward(pt, z, theta, locs=locs), f), 2.0))
    else:
        model = PriorCVAE(n, codec, latent_dim=3, hidden=8, seed=5)
        eps = rng.standard_normal(3)

        def loss(pt):
            mu, sigma = model.encode(pt, f, theta)
            zh = ad.add(mu, ad.mul(sigma, eps))
            fh = model.decode(pt, zh, theta)
            return ad.tmean(ad.power(ad.sub(fh, f), 2.0))

    worst = _param_gradcheck(model, loss, rng)
    assert worst < 1e-4, f"{arch}: {worst:.2e}"


def test_surrogate_input_gradients(codec):
    # gradients w.r.t. z and lengthscale flow for MCMC use
    rng = np.random.default_rng(23)
    n = 6
    locs = Locations(rng.uniform(0, 100, size=(n, 2)))
    model = TransformerSurrogate(8, codec, "matern12", {"variance": 1.0},
                                 embed_dim=8, n_heads=2, n_layers=1, seed=6)
    model.params["l0_alpha"] = np.array([0.7, 0.4])
    w = rng.standard_normal(n)

    def build(z, ell):
        pt = model.const_params()
        out = model.forward(pt, z, {"lengthscale": ell, "variance": 1.0}, locs=locs)
        return ad.tsum(ad.mul(out, w))

    worst = directional_check(build, [rng.standard_normal(n), np.array(20.0)], rng, n_dirs=4)
    assert worst < 1e-4
