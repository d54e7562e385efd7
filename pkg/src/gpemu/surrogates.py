"""Decoder networks mapping (hyperparameters, whitened draw) to field values.

Four architectures share one calling convention: ``forward(pt, z, theta, ...)``
where ``pt`` is the parameter dict lifted onto a tape (trainable) or passed as
constants (frozen, e.g. inside MCMC), ``z`` is a (B, N) tensor of whitened
draws, and ``theta`` maps hyperparameter names to floats or live scalars.

Hyperparameters are conditioned in log space, standardized against the
training prior, because every supported prior is positive-valued and
log-scaled priors dominate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .fileformats import CHECKPOINT_MAGIC, read_blocks, write_blocks
from .kernels import Locations, kernel_matrix

ARCHS = ("mlp", "gmlp", "transformer", "cvae")


@dataclass(frozen=True)
class ThetaCodec:
    """Log-standardizing featurizer for conditioning hyperparameters."""

    keys: tuple[str, ...]
    shift: np.ndarray
    scale: np.ndarray

    @staticmethod
    def from_prior(prior, n_probe: int = 512, seed: int = 1) -> "ThetaCodec":
        keys = tuple(prior.names)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(101,)))
        probe = np.log([[prior.sample(rng)[k] for k in keys] for _ in range(n_probe)])
        shift = probe.mean(axis=0)
        scale = np.maximum(probe.std(axis=0), 1e-6)
        return ThetaCodec(keys=keys, shift=shift, scale=scale)

    def feats(self, theta: dict) -> Tensor:
        """Feature vector of shape (k,); differentiable for live entries."""
        parts = []
        for i, k in enumerate(self.keys):
            v = theta[k]
            x = ad.div(ad.sub(ad.log(v if isinstance(v, Tensor) else Tensor(v)), self.shift[i]),
                       self.scale[i])
            parts.append(ad.reshape(x, (1,)))
        return ad.concat(parts, axis=0)

    def config(self) -> dict:
        return {"keys": list(self.keys), "shift": self.shift.tolist(), "scale": self.scale.tolist()}

    @staticmethod
    def from_config(cfg: dict) -> "ThetaCodec":
        return ThetaCodec(tuple(cfg["keys"]), np.asarray(cfg["shift"]), np.asarray(cfg["scale"]))


def _uniform(rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


def _as_batch(z) -> tuple[Tensor, bool]:
    zt = z if isinstance(z, Tensor) else Tensor(z)
    if zt.ndim == 1:
        return ad.reshape(zt, (1, zt.size)), True
    return zt, False


class Surrogate:
    """Shared parameter plumbing for all decoder variants."""

    arch: str = ""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def lift_params(self, tape) -> dict[str, Tensor]:
        return {k: tape.leaf(v) for k, v in self.params.items()}

    def const_params(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.params.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())

    def predict(self, theta: dict, z: np.ndarray, **kw) -> np.ndarray:
        """Numpy-in/numpy-out forward with frozen parameters."""
        out = self.forward(self.const_params(), z, theta, **kw)
        return out.data

    # subclasses: forward(pt, z, theta, **kw) and config()/describe()


class MLPSurrogate(Surrogate):
    """Two dense layers with ReLU, no bottleneck; input is [z, theta feats]."""

    arch = "mlp"

    def __init__(self, n_sites: int, codec: ThetaCodec, hidden: int | None = None, seed: int = 0):
        super().__init__()
        self.n_sites = n_sites
        self.codec = codec
        self.hidden = hidden or n_sites
        k = len(codec.keys)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7,)))
        self.params = {
            "w1": _uniform(rng, (n_sites + k, self.hidden), n_sites + k),
            "b1": np.zeros(self.hidden),
            "w2": _uniform(rng, (self.hidden, n_sites), self.hidden),
            "b2": np.zeros(n_sites),
        }

    def forward(self, pt, z, theta) -> Tensor:
        zb, single = _as_batch(z)
        b = zb.shape[0]
        if zb.shape[1] != self.n_sites:
            raise ValueError(f"expected {self.n_sites} sites, got {zb.shape[1]}")
        feats = self.codec.feats(theta)
        fb = ad.broadcast_to(ad.reshape(feats, (1, len(self.codec.keys))), (b, len(self.codec.keys)))
        x = ad.concat([zb, fb], axis=1)
        h = ad.relu(ad.add(ad.matmul(x, pt["w1"]), pt["b1"]))
        out = ad.add(ad.matmul(h, pt["w2"]), pt["b2"])
        return ad.reshape(out, (self.n_sites,)) if single else out

    def config(self) -> dict:
        return {"arch": self.arch, "n_sites": self.n_sites, "hidden": self.hidden,
                "codec": self.codec.config()}


class GMLPSurrogate(Surrogate):
    """Gated MLP over location tokens.

    Channels are split in half inside each gate; one half is projected along
    the token axis by a full (N, N) matrix and multiplies the other half, so
    the network can express location mixing like a Cholesky factor row.
    """

    arch = "gmlp"

    def __init__(self, n_sites: int, codec: ThetaCodec, channels: int = 48,
                 expansion: int = 2, n_blocks: int = 2, seed: int = 0):
        super().__init__()
        hid = channels * expansion
        if hid % 2 != 0:
            raise ValueError(f"gate hidden width must be even, got {hid}")
        self.n_sites = n_sites
        self.codec = codec
        self.channels = channels
        self.hidden = hid
        self.n_blocks = n_blocks
        k = len(codec.keys)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(8,)))
        g = hid // 2
        p = {
            "win": _uniform(rng, (1 + k, channels), 1 + k),
            "bin": np.zeros(channels),
            "wout": _uniform(rng, (channels,), channels),
            "bout": np.zeros(()),
            "lnf_g": np.ones(channels),
            "lnf_b": np.zeros(channels),
        }
        for i in range(n_blocks):
            p[f"blk{i}_ln_g"] = np.ones(channels)
            p[f"blk{i}_ln_b"] = np.zeros(channels)
            # channel projection stored as the two halves of the gate split
            p[f"blk{i}_u1"] = _uniform(rng, (channels, g), channels)
            p[f"blk{i}_bu1"] = np.zeros(g)
            p[f"blk{i}_u2"] = _uniform(rng, (channels, g), channels)
            p[f"blk{i}_bu2"] = np.zeros(g)
            p[f"blk{i}_gln_g"] = np.ones(g)
            p[f"blk{i}_gln_b"] = np.zeros(g)
            # near-zero token mixer with unit gate bias: block starts as identity
            p[f"blk{i}_wtok"] = 1e-3 * rng.standard_normal((n_sites, n_sites))
            p[f"blk{i}_btok"] = np.ones((n_sites, 1))
            p[f"blk{i}_v"] = _uniform(rng, (g, channels), g)
            p[f"blk{i}_bv"] = np.zeros(channels)
        self.params = p

    def forward(self, pt, z, theta) -> Tensor:
        zb, single = _as_batch(z)
        b, n = zb.shape
        if n != self.n_sites:
            raise ValueError(f"expected {self.n_sites} sites, got {n}")
        k = len(self.codec.keys)
        feats = self.codec.feats(theta)
        fb = ad.broadcast_to(ad.reshape(feats, (1, 1, k)), (b, n, k))
        tok = ad.concat([ad.reshape(zb, (b, n, 1)), fb], axis=2)
        x = ad.add(ad.matmul(tok, pt["win"]), pt["bin"])
        for i in range(self.n_blocks):
            xn = ad.layer_norm(x, pt[f"blk{i}_ln_g"], pt[f"blk{i}_ln_b"])
            z1 = ad.gelu(ad.add(ad.matmul(xn, pt[f"blk{i}_u1"]), pt[f"blk{i}_bu1"]))
            z2 = ad.gelu(ad.add(ad.matmul(xn, pt[f"blk{i}_u2"]), pt[f"blk{i}_bu2"]))
            z2 = ad.layer_norm(z2, pt[f"blk{i}_gln_g"], pt[f"blk{i}_gln_b"])
            gate = ad.add(ad.matmul(pt[f"blk{i}_wtok"], z2), pt[f"blk{i}_btok"])
            mixed = ad.matmul(ad.mul(z1, gate), pt[f"blk{i}_v"])
            x = ad.add(x, ad.add(mixed, pt[f"blk{i}_bv"]))
        xn = ad.layer_norm(x, pt["lnf_g"], pt["lnf_b"])
        out = ad.add(ad.matmul(xn, pt["wout"]), pt["bout"])
        return ad.reshape(out, (n,)) if single else out

    def config(self) -> dict:
        return {"arch": self.arch, "n_sites": self.n_sites, "channels": self.channels,
                "expansion": self.hidden // self.channels, "n_blocks": self.n_blocks,
                "codec": self.codec.config()}


class TransformerSurrogate(Surrogate):
    """Attention decoder for variable location sets.

    Per-token input sums a whitened-draw embedding, random-feature positional
    encodings of the coordinates, a learned per-index embedding and the
    hyperparameter embedding. Attention logits carry an additive covariance
    bias with one learnable strength per head; the covariance is rebuilt on
    every forward pass so hyperparameter gradients flow through it.
    """

    arch = "transformer"

    def __init__(self, max_locations: int, codec: ThetaCodec, family: str,
                 fixed_theta: dict | None = None, embed_dim: int = 32, n_heads: int = 2,
                 n_layers: int = 2, ffn_mult: int = 2, rff_dim: int = 64,
                 rff_ell0: float = 10.0, seed: int = 0):
        super().__init__()
        if embed_dim % n_heads != 0:
            raise ValueError("embed_dim must divide by n_heads")
        self.max_locations = max_locations
        self.codec = codec
        self.family = family
        self.fixed_theta = dict(fixed_theta or {})
        self.embed_dim = embed_dim
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_mult = ffn_mult
        self.rff_dim = rff_dim
        self.rff_ell0 = rff_ell0
        d = embed_dim
        k = len(codec.keys)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(9,)))
        self.buffers = {
            "rff_w": rng.normal(0.0, 1.0 / rff_ell0, size=(2, rff_dim)),
            "rff_b": rng.uniform(0.0, 2.0 * math.pi, size=rff_dim),
        }
        p = {
            "w_z": _uniform(rng, (1, d), 1),
            "w_pos": _uniform(rng, (rff_dim, d), rff_dim),
            "w_th": _uniform(rng, (k, d), max(k, 1)),
            "id_table": 0.02 * rng.standard_normal((max_locations, d)),
            "b_in": np.zeros(d),
            "lnf_g": np.ones(d),
            "lnf_b": np.zeros(d),
            "wout": _uniform(rng, (d,), d),
            "bout": np.zeros(()),
        }
        m = ffn_mult * d
        for i in range(n_layers):
            p[f"l{i}_ln1_g"] = np.ones(d)
            p[f"l{i}_ln1_b"] = np.zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                p[f"l{i}_{nm}"] = _uniform(rng, (d, d), d)
            p[f"l{i}_alpha"] = np.zeros(n_heads)
            p[f"l{i}_ln2_g"] = np.ones(d)
            p[f"l{i}_ln2_b"] = np.zeros(d)
            p[f"l{i}_w1"] = _uniform(rng, (d, m), d)
            p[f"l{i}_b1"] = np.zeros(m)
            p[f"l{i}_w2"] = _uniform(rng, (m, d), m)
            p[f"l{i}_b2"] = np.zeros(d)
        self.params = p

    def pos_features(self, coords: np.ndarray) -> np.ndarray:
        return np.cos(coords @ self.buffers["rff_w"] + self.buffers["rff_b"])

    def forward(self, pt, z, theta, *, locs: Locations, ids: np.ndarray | None = None,
                kernel_bias=None) -> Tensor:
        zb, single = _as_batch(z)
        b, n = zb.shape
        if n > self.max_locations:
            raise ValueError(f"{n} locations exceed the model maximum {self.max_locations}")
        if locs.n_sites != n:
            raise ValueError("z length does not match the location count")
        if ids is None:
            ids = np.arange(n)
        ids = np.asarray(ids)
        if len(np.unique(ids)) != n or ids.max() >= self.max_locations:
            raise ValueError("location ids must be unique and below max_locations")
        d, h = self.embed_dim, self.n_heads
        dk = d // h
        feats = self.codec.feats(theta)

        pos = Tensor(self.pos_features(locs.site_coords()))
        tok = ad.matmul(ad.reshape(zb, (b, n, 1)), pt["w_z"])
        tok = ad.add(tok, ad.matmul(pos, pt["w_pos"]))
        tok = ad.add(tok, ad.take(pt["id_table"], ids))
        th = ad.matmul(ad.reshape(feats, (1, len(self.codec.keys))), pt["w_th"])
        x = ad.add(ad.add(tok, th), pt["b_in"])

        if kernel_bias is not None:  # injection point for tests / cached bias
            kb = kernel_bias if isinstance(kernel_bias, Tensor) else Tensor(kernel_bias)
        else:
            merged = dict(self.fixed_theta)
            for key in self.codec.keys:
                merged[key] = theta[key]
            merged.setdefault("variance", 1.0)
            kb = kernel_matrix(self.family, merged, locs, jitter=0.0)

        for i in range(self.n_layers):
            xn = ad.layer_norm(x, pt[f"l{i}_ln1_g"], pt[f"l{i}_ln1_b"])
            q = ad.swapaxes(ad.reshape(ad.matmul(xn, pt[f"l{i}_wq"]), (b, n, h, dk)), 1, 2)
            kk = ad.swapaxes(ad.reshape(ad.matmul(xn, pt[f"l{i}_wk"]), (b, n, h, dk)), 1, 2)
            v = ad.swapaxes(ad.reshape(ad.matmul(xn, pt[f"l{i}_wv"]), (b, n, h, dk)), 1, 2)
            scores = ad.div(ad.matmul(q, ad.swapaxes(kk, 2, 3)), math.sqrt(dk))
            bias = ad.mul(ad.reshape(pt[f"l{i}_alpha"], (h, 1, 1)), kb)
            att = ad.softmax_lastdim(ad.add(scores, bias))
            ctx = ad.reshape(ad.swapaxes(ad.matmul(att, v), 1, 2), (b, n, d))
            x = ad.add(x, ad.matmul(ctx, pt[f"l{i}_wo"]))
            xn2 = ad.layer_norm(x, pt[f"l{i}_ln2_g"], pt[f"l{i}_ln2_b"])
            ff = ad.matmul(ad.gelu(ad.add(ad.matmul(xn2, pt[f"l{i}_w1"]), pt[f"l{i}_b1"])),
                           pt[f"l{i}_w2"])
            x = ad.add(x, ad.add(ff, pt[f"l{i}_b2"]))

        xn = ad.layer_norm(x, pt["lnf_g"], pt["lnf_b"])
        out = ad.add(ad.matmul(xn, pt["wout"]), pt["bout"])
        return ad.reshape(out, (n,)) if single else out

    def config(self) -> dict:
        return {"arch": self.arch, "max_locations": self.max_locations, "family": self.family,
                "fixed_theta": self.fixed_theta, "embed_dim": self.embed_dim,
                "n_heads": self.n_heads, "n_layers": self.n_layers, "ffn_mult": self.ffn_mult,
                "rff_dim": self.rff_dim, "rff_ell0": self.rff_ell0,
                "codec": self.codec.config()}


class PriorCVAE(Surrogate):
    """Conditional VAE baseline: MLP encoder and decoder around a latent draw."""

    arch = "cvae"

    def __init__(self, n_sites: int, codec: ThetaCodec, latent_dim: int | None = None,
                 hidden: int | None = None, seed: int = 0):
        super().__init__()
        self.n_sites = n_sites
        self.codec = codec
        self.latent_dim = latent_dim or n_sites
        if self.latent_dim > n_sites:
            raise ValueError("latent dimension cannot exceed the site count")
        self.hidden = hidden or n_sites
        k = len(codec.keys)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(10,)))
        self.params = {
            "ew1": _uniform(rng, (n_sites + k, self.hidden), n_sites + k),
            "eb1": np.zeros(self.hidden),
            "ew_mu": _uniform(rng, (self.hidden, self.latent_dim), self.hidden),
            "eb_mu": np.zeros(self.latent_dim),
            "ew_sig": _uniform(rng, (self.hidden, self.latent_dim), self.hidden),
            "eb_sig": np.zeros(self.latent_dim),
            "dw1": _uniform(rng, (self.latent_dim + k, self.hidden), self.latent_dim + k),
            "db1": np.zeros(self.hidden),
            "dw2": _uniform(rng, (self.hidden, n_sites), self.hidden),
            "db2": np.zeros(n_sites),
        }

    def _feats_batch(self, theta, b: int) -> Tensor:
        k = len(self.codec.keys)
        feats = self.codec.feats(theta)
        return ad.broadcast_to(ad.reshape(feats, (1, k)), (b, k))

    def encode(self, pt, f, theta) -> tuple[Tensor, Tensor]:
        fb, _ = _as_batch(f)
        x = ad.concat([fb, self._feats_batch(theta, fb.shape[0])], axis=1)
        h = ad.relu(ad.add(ad.matmul(x, pt["ew1"]), pt["eb1"]))
        mu = ad.add(ad.matmul(h, pt["ew_mu"]), pt["eb_mu"])
        sigma = ad.softplus(ad.add(ad.matmul(h, pt["ew_sig"]), pt["eb_sig"]))
        return mu, sigma

    def decode(self, pt, z, theta) -> Tensor:
        zb, single = _as_batch(z)
        if zb.shape[1] != self.latent_dim:
            raise ValueError(f"expected latent dimension {self.latent_dim}, got {zb.shape[1]}")
        x = ad.concat([zb, self._feats_batch(theta, zb.shape[0])], axis=1)
        h = ad.relu(ad.add(ad.matmul(x, pt["dw1"]), pt["db1"]))
        out = ad.add(ad.matmul(h, pt["dw2"]), pt["db2"])
        return ad.reshape(out, (self.n_sites,)) if single else out

    # drop-in prior use: decode a standard-normal latent
    def forward(self, pt, z, theta) -> Tensor:
        return self.decode(pt, z, theta)

    def config(self) -> dict:
        return {"arch": self.arch, "n_sites": self.n_sites, "latent_dim": self.latent_dim,
                "hidden": self.hidden, "codec": self.codec.config()}


def build_surrogate(cfg: dict, seed: int = 0) -> Surrogate:
    codec = ThetaCodec.from_config(cfg["codec"])
    arch = cfg["arch"]
    if arch == "mlp":
        return MLPSurrogate(cfg["n_sites"], codec, hidden=cfg.get("hidden"), seed=seed)
    if arch == "gmlp":
        return GMLPSurrogate(cfg["n_sites"], codec, channels=cfg.get("channels", 48),
                             expansion=cfg.get("expansion", 2),
                             n_blocks=cfg.get("n_blocks", 2), seed=seed)
    if arch == "transformer":
        return TransformerSurrogate(
            cfg["max_locations"], codec, cfg["family"], cfg.get("fixed_theta"),
            embed_dim=cfg.get("embed_dim", 32), n_heads=cfg.get("n_heads", 2),
            n_layers=cfg.get("n_layers", 2), ffn_mult=cfg.get("ffn_mult", 2),
            rff_dim=cfg.get("rff_dim", 64), rff_ell0=cfg.get("rff_ell0", 10.0), seed=seed)
    if arch == "cvae":
        return PriorCVAE(cfg["n_sites"], codec, latent_dim=cfg.get("latent_dim"),
                         hidden=cfg.get("hidden"), seed=seed)
    raise ValueError(f"unknown architecture {arch!r}")


def save_checkpoint(model: Surrogate, path, train_info: dict | None = None,
                    locs: Locations | None = None, extra_blocks: dict | None = None) -> None:
    manifest = {
        "config": model.config(),
        "train_info": train_info or {},
    }
    blocks = {f"param.{k}": v for k, v in model.params.items()}
    blocks.update({f"buffer.{k}": v for k, v in model.buffers.items()})
    if locs is not None:
        blocks["locs.coords"] = locs.coords
        manifest["has_locs"] = True
        if locs.times is not None:
            blocks["locs.times"] = locs.times
    if extra_blocks:
        blocks.update(extra_blocks)
    write_blocks(path, CHECKPOINT_MAGIC, manifest, blocks)


def load_checkpoint(path):
    """Returns (model, manifest, locs-or-None, extra block dict)."""
    manifest, blocks = read_blocks(path, CHECKPOINT_MAGIC)
    model = build_surrogate(manifest["config"])
    for k in list(model.params):
        model.params[k] = blocks[f"param.{k}"]
    for k in list(model.buffers):
        model.buffers[k] = blocks[f"buffer.{k}"]
    locs = None
    if manifest.get("has_locs"):
        times = blocks.get("locs.times")
        locs = Locations(blocks["locs.coords"], times)
    extras = {k: v for k, v in blocks.items()
              if not k.startswith(("param.", "buffer.", "locs."))}
    return model, manifest, locs, extras
