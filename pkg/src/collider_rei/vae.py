"""Conditional VAE baseline and the identification-regularized VAE.

Both models encode ``(x, y_c)`` into a diagonal Gaussian over ``z`` and
decode ``z`` alone under a unit-variance Gaussian likelihood. They differ in
the regularizer:

* ``vae``: ``KL(q(z | x, y_c) || N(0, I))``;
* ``rei``: ``KL(q(z | x, y_c) || E_{y_-c}[p(z | y)])``, the conditional prior
  averaged over the marginal of the other factors. ``p(z | y)`` is a learned
  MLP (``PriorNet``) and the mixture KL is estimated by Monte Carlo with
  ``S`` resampled rows of the training factors.

The training loss averages the objective over every factor index ``c``.
Objectives follow the maximization convention: ``total = reconstruction -
lambda * regularizer``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import EmptyDataset, EmptySampler, ShapeMismatch

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
LOG_2PI = math.log(2.0 * math.pi)
MODES = ("vae", "rei", "rei-noise")
CONFIG_KEYS = ("lam", "mc_samples", "latent_dim", "widths", "lr", "batch_size", "z_draws",
               "epochs", "factor_index", "eval_samples")


@dataclass
class ReiConfig:
    lam: float = 1.0
    mc_samples: int = 1000
    latent_dim: Optional[int] = None  # None: same size as the observation
    widths: tuple = (64, 64)
    lr: float = 1e-4
    batch_size: int = 64
    z_draws: int = 1
    epochs: int = 10
    factor_index: Optional[int] = None  # None: average over every factor index
    eval_samples: int = 100

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.lam >= 0:
            raise ValueError(f"lam must be nonnegative, got {self.lam}")
        if self.mc_samples < 1 or self.z_draws < 1 or self.eval_samples < 1:
            raise ValueError("mc_samples, z_draws and eval_samples must be >= 1")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size must be >= 1, epochs >= 0 and lr > 0")
        if self.latent_dim is not None and self.latent_dim < 1:
            raise ValueError(f"latent_dim must be >= 1, got {self.latent_dim}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, obj: dict) -> "ReiConfig":
        unknown = set(obj) - set(CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class GaussianParams:
    mean: Tensor
    log_var: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]


@dataclass
class ElboBreakdown:
    """Batch-averaged objective terms as scalar Tensors."""

    reconstruction: Tensor
    regularizer: Tensor
    total: Tensor

    def floats(self) -> dict:
        return {"reconstruction": self.reconstruction.item(), "regularizer": self.regularizer.item(),
                "total": self.total.item()}


# ---------------------------------------------------------------------------
# networks


class MLP:
    """Fully connected relu network; the output layer is linear."""

    def __init__(self, sizes, rng: np.random.Generator, name: str = "mlp"):
        self.sizes = [int(s) for s in sizes]
        self.name = name
        self.params = []
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            w = rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b))
            self.params += [Tensor(w, True, f"{name}.w{k}"), Tensor(np.zeros(b), True, f"{name}.b{k}")]

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def __call__(self, h) -> Tensor:
        h = ad.as_tensor(h)
        if h.shape[-1] != self.in_dim:
            raise ShapeMismatch(f"{self.name} expects input width {self.in_dim}, got {h.shape}")
        lead = h.shape[:-1]
        h = ad.reshape(h, (-1, self.in_dim))
        n_layers = len(self.params) // 2
        for k in range(n_layers):
            h = ad.matmul(h, self.params[2 * k]) + self.params[2 * k + 1]
            if k < n_layers - 1:
                h = ad.relu(h)
        return ad.reshape(h, lead + (self.out_dim,))

    def zero_(self):
        for p in self.params:
            p.data = np.zeros_like(p.data)


class GaussianNet(MLP):
    """MLP whose output is split into mean and clamped log-variance halves."""

    def __init__(self, in_dim: int, latent_dim: int, widths, rng, name: str):
        super().__init__([in_dim, *widths, 2 * latent_dim], rng, name)
        self.latent_dim = latent_dim

    def gaussian(self, h) -> GaussianParams:
        out = self(h)
        d = self.latent_dim
        return GaussianParams(out[..., :d], ad.clip(out[..., d:], LOG_VAR_MIN, LOG_VAR_MAX))


class EncoderNet(GaussianNet):
    """q(z | x, y_c); input is x with the scalar y_c appended."""

    def __init__(self, obs_dim, latent_dim, widths, rng):
        super().__init__(obs_dim + 1, latent_dim, widths, rng, "enc")


class PriorNet(GaussianNet):
    """p(z | y) from the full factor vector (plus the nuisance when it is observed)."""

    def __init__(self, in_dim, latent_dim, widths, rng):
        super().__init__(in_dim, latent_dim, widths, rng, "prior")


class DecoderNet(MLP):
    def __init__(self, latent_dim, obs_dim, widths, rng):
        super().__init__([latent_dim, *widths, obs_dim], rng, "dec")


# ---------------------------------------------------------------------------
# building blocks


def encode(enc: EncoderNet, x, y_c) -> GaussianParams:
    """Gaussian parameters of q(z | x, y_c) for one row or a batch."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=float)
    single = xd.ndim == 1
    xb = xd.reshape(1, -1) if single else xd
    if xb.shape[1] + 1 != enc.in_dim:
        raise ShapeMismatch(f"encoder expects x of width {enc.in_dim - 1}, got {xb.shape[1]}")
    yc = np.asarray(y_c, dtype=float)
    if yc.size not in (1, xb.shape[0]):
        raise ShapeMismatch(f"y_c must be a scalar or have {xb.shape[0]} entries, got {yc.shape}")
    col = np.broadcast_to(yc.reshape(-1, 1), (xb.shape[0], 1))
    p = enc.gaussian(np.hstack([xb, col]))
    if single:
        return GaussianParams(p.mean[0], p.log_var[0])
    return p


def reparameterize(p: GaussianParams, noise) -> Tensor:
    noise = ad.as_tensor(noise)
    if noise.shape[-1] != p.dim:
        raise ShapeMismatch(f"noise width {noise.shape[-1]} does not match latent dim {p.dim}")
    return p.mean + ad.exp(p.log_var * 0.5) * noise


def gaussian_log_prob(z, p: GaussianParams) -> Tensor:
    """log N(z; mean, diag(exp(log_var))) summed over the last axis."""
    z = ad.as_tensor(z)
    if z.shape[-1] != p.dim:
        raise ShapeMismatch(f"z width {z.shape[-1]} does not match latent dim {p.dim}")
    quad = ad.square(z - p.mean) / ad.exp(p.log_var)
    return (ad.sum_(quad + p.log_var, axis=-1) + p.dim * LOG_2PI) * -0.5


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> Tensor:
    """Closed-form KL(q || p) for diagonal Gaussians, summed over the last axis."""
    if q.mean.shape[-1] != p.mean.shape[-1]:
        raise ShapeMismatch(f"latent dims differ: {q.mean.shape} vs {p.mean.shape}")
    ratio = ad.exp(q.log_var - p.log_var)
    quad = ad.square(q.mean - p.mean) / ad.exp(p.log_var)
    return ad.sum_(ratio + quad - 1.0 + p.log_var - q.log_var, axis=-1) * 0.5


def standard_normal(shape) -> GaussianParams:
    return GaussianParams(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))


def reconstruction_log_lik(dec: DecoderNet, x, z) -> Tensor:
    """Unit-variance Gaussian log-likelihood of each row of ``x`` given ``z``."""
    x = ad.as_tensor(x)
    mu = dec(z)
    m = x.shape[-1]
    return (ad.sum_(ad.square(x - mu), axis=-1) + m * LOG_2PI) * -0.5


def elbo_standard(enc: EncoderNet, dec: DecoderNet, x, noise, y_c=None, lam: float = 1.0) -> ElboBreakdown:
    """ELBO against a standard-normal prior; ``y_c`` defaults to 0 for an unconditioned encoder."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    q = encode(enc, x, 0.0 if y_c is None else y_c)
    z = reparameterize(q, noise)
    rec = ad.mean(reconstruction_log_lik(dec, x, z))
    reg = ad.mean(gaussian_kl(q, standard_normal(q.mean.shape)))
    return ElboBreakdown(rec, reg, rec - reg * lam)


class FactorSampler:
    """Draws replacement rows for the other factors from the training marginal."""

    def __init__(self, pool, rng):
        self.pool = np.asarray(pool, dtype=float)
        if self.pool.ndim != 2 or self.pool.shape[0] == 0:
            raise EmptySampler("factor sampler needs a nonempty (N, n) pool")
        self.rng = np.random.default_rng(rng)

    @property
    def width(self) -> int:
        return self.pool.shape[1]

    def draw(self, s: int, b: int) -> np.ndarray:
        return self.pool[self.rng.integers(0, self.pool.shape[0], size=(s, b))]


def _prior_inputs(y: np.ndarray, c: int, draws) -> np.ndarray:
    """(S, B, P) prior-net inputs: resampled rows with column ``c`` set to each example's y_c."""
    if isinstance(draws, FactorSampler):
        raise TypeError("pass drawn rows, not a sampler")
    draws = np.array(draws, dtype=float)
    if draws.ndim != 3 or draws.shape[1] != y.shape[0]:
        raise ShapeMismatch(f"factor draws must be (S, {y.shape[0]}, P), got {draws.shape}")
    if draws.shape[0] == 0:
        raise EmptySampler("no factor draws")
    draws[:, :, c] = y[None, :, c]
    return draws


def mixture_log_density(prior_net: PriorNet, z: Tensor, prior_in: np.ndarray) -> Tensor:
    """log (1/S) sum_s N(z; prior_net(prior_in[s])) for each row of ``z``."""
    s = prior_in.shape[0]
    comp = prior_net.gaussian(prior_in)  # (S, B, d)
    return ad.logsumexp(gaussian_log_prob(z, comp), axis=0) - math.log(s)


def rei_regularizer(enc: EncoderNet, prior_net: PriorNet, x, y, c: int, factor_sampler, s: int,
                    noise, q: Optional[GaussianParams] = None) -> Tensor:
    """Monte Carlo estimate of KL(q(z | x, y_c) || E_{y_-c}[p(z | y)]) averaged over the batch.

    ``y`` holds the prior-net inputs of each example (factors, then the
    nuisance when observed). ``factor_sampler`` is a :class:`FactorSampler` or
    an already drawn ``(S, B, P)`` array. ``noise`` is ``(B, d)`` for one
    z-draw or ``(Z, B, d)`` for ``Z`` draws per example.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if y.shape[0] != x.shape[0] or y.shape[1] != prior_net.in_dim:
        raise ShapeMismatch(f"y must be ({x.shape[0]}, {prior_net.in_dim}), got {y.shape}")
    if not 0 <= c < y.shape[1]:
        raise ShapeMismatch(f"factor index {c} out of range")
    if s < 1:
        raise EmptySampler("S must be >= 1")
    if isinstance(factor_sampler, FactorSampler):
        if factor_sampler.width != y.shape[1]:
            raise ShapeMismatch("sampler rows and y have different widths")
        draws = factor_sampler.draw(s, x.shape[0])
    else:
        draws = factor_sampler
    prior_in = _prior_inputs(y, c, draws)
    if q is None:
        q = encode(enc, x, y[:, c])
    noise = np.asarray(noise, dtype=float)
    if noise.ndim == 2:
        noise = noise[None]
    comp = prior_net.gaussian(prior_in)
    terms = []
    for eps in noise:
        z = reparameterize(q, eps)
        log_m = ad.logsumexp(gaussian_log_prob(z, comp), axis=0) - math.log(prior_in.shape[0])
        terms.append(gaussian_log_prob(z, q) - log_m)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.mean(total) * (1.0 / len(terms))


def elbo_rei(enc: EncoderNet, dec: DecoderNet, prior_net: PriorNet, x, y, c: int, cfg: ReiConfig,
             noise, factor_sampler) -> ElboBreakdown:
    """Objective for one factor index ``c``; the decoder sees ``z`` only."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    q = encode(enc, x, y[:, c])
    noise = np.asarray(noise, dtype=float)
    first = noise if noise.ndim == 2 else noise[0]
    rec = ad.mean(reconstruction_log_lik(dec, x, reparameterize(q, first)))
    reg = rei_regularizer(enc, prior_net, x, y, c, factor_sampler, cfg.mc_samples, noise, q=q)
    return ElboBreakdown(rec, reg, rec - reg * cfg.lam)


# ---------------------------------------------------------------------------
# model bundle


@dataclass
class ReiModel:
    mode: str
    cfg: ReiConfig
    obs_dim: int
    n_factors: int
    enc: EncoderNet
    dec: DecoderNet
    prior: Optional[PriorNet]
    seed: int = 0
    epoch: int = 0

    @property
    def latent_dim(self) -> int:
        return self.enc.latent_dim

    @property
    def prior_width(self) -> int:
        return self.n_factors + (self.obs_dim if self.mode == "rei-noise" else 0)

    @classmethod
    def create(cls, mode: str, obs_dim: int, n_factors: int, cfg: ReiConfig, seed: int) -> "ReiModel":
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        rng = np.random.default_rng(seed)
        d = cfg.latent_dim or obs_dim
        enc = EncoderNet(obs_dim, d, cfg.widths, rng)
        dec = DecoderNet(d, obs_dim, cfg.widths, rng)
        prior = None
        if mode != "vae":
            prior = PriorNet(n_factors + (obs_dim if mode == "rei-noise" else 0), d, cfg.widths, rng)
        return cls(mode, cfg, obs_dim, n_factors, enc, dec, prior, seed)

    def nets(self) -> list:
        return [n for n in (self.enc, self.dec, self.prior) if n is not None]

    def params(self) -> list:
        return [p for n in self.nets() for p in n.params]

    def named_arrays(self) -> dict:
        return {p.name: p.data for p in self.params()}

    def load_arrays(self, named: dict):
        for p in self.params():
            if named[p.name].shape != p.shape:
                raise ShapeMismatch(f"{p.name}: checkpoint shape {named[p.name].shape} != {p.shape}")
            p.data = np.array(named[p.name], dtype=float)

    def manifest(self) -> dict:
        return {"mode": self.mode, "config": self.cfg.to_dict(), "obs_dim": self.obs_dim,
                "n_factors": self.n_factors, "latent_dim": self.latent_dim, "seed": self.seed,
                "epoch": self.epoch, "params": "params.bin", "loss_trace": "loss_trace.csv"}

    def save(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        ad.save_checkpoint(out / "params.bin", self.named_arrays(), seed=self.seed,
                           extra={"mode": self.mode, "epoch": self.epoch})
        (out / "manifest.json").write_text(json.dumps(self.manifest(), sort_keys=True, indent=2) + "\n",
                                           encoding="utf-8")
        return out

    @classmethod
    def load(cls, path) -> "ReiModel":
        base = Path(path)
        man = json.loads((base / "manifest.json").read_text(encoding="utf-8"))
        cfg = ReiConfig.from_dict(man["config"])
        model = cls.create(man["mode"], man["obs_dim"], man["n_factors"], cfg, man["seed"])
        named, _ = ad.load_checkpoint(base / man["params"])
        model.load_arrays(named)
        model.epoch = man["epoch"]
        return model


def _prior_rows(model: ReiModel, y: np.ndarray, u: Optional[np.ndarray]) -> np.ndarray:
    if model.mode == "rei-noise":
        if u is None:
            raise ShapeMismatch("rei-noise mode needs the exported nuisance u")
        return np.hstack([y, u])
    return y


def batch_objective(model: ReiModel, x, y, noise, draws=None, u=None, factors=None) -> ElboBreakdown:
    """Objective averaged over the factor indices in ``factors`` (all by default).

    Rows for every index are stacked into one pass: ``noise`` is
    ``(len(factors), B, d)`` and ``draws`` is ``(len(factors), S, B, P)``.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    b = x.shape[0]
    cs = list(range(model.n_factors)) if factors is None else list(factors)
    k = len(cs)
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (k, b, model.latent_dim):
        raise ShapeMismatch(f"noise must be {(k, b, model.latent_dim)}, got {noise.shape}")
    x_all = np.tile(x, (k, 1))
    yc_all = np.concatenate([y[:, c] for c in cs])
    q = encode(model.enc, x_all, yc_all)
    z = reparameterize(q, noise.reshape(k * b, -1))
    rec = ad.mean(reconstruction_log_lik(model.dec, x_all, z))
    if model.mode == "vae":
        reg = ad.mean(gaussian_kl(q, standard_normal(q.mean.shape)))
    else:
        rows = _prior_rows(model, y, u)
        draws = np.asarray(draws, dtype=float)
        s = draws.shape[1]
        prior_in = np.concatenate([_prior_inputs(rows, c, draws[i]) for i, c in enumerate(cs)], axis=1)
        log_m = mixture_log_density(model.prior, z, prior_in)
        reg = ad.mean(gaussian_log_prob(z, q) - log_m)
    return ElboBreakdown(rec, reg, rec - reg * model.cfg.lam)


# ---------------------------------------------------------------------------
# training and representation


def train(model: ReiModel, x, y, seed: int, u=None, epochs: Optional[int] = None,
          out_dir=None, log=None) -> tuple:
    """Adam on the negated objective. Returns ``(model, trace)``; trace rows are per-epoch means."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise EmptyDataset("cannot train on an empty dataset")
    cfg = model.cfg
    if cfg.batch_size > n:
        raise ValueError(f"batch size {cfg.batch_size} exceeds dataset size {n}")
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng([seed, 1])
    rows = _prior_rows(model, y, u) if model.mode != "vae" else None
    sampler = FactorSampler(rows, rng) if rows is not None else None
    opt = ad.Adam(model.params(), lr=cfg.lr)
    cs = [cfg.factor_index] if cfg.factor_index is not None else list(range(model.n_factors))
    trace = []
    n_batches = n // cfg.batch_size
    for _ in range(epochs):
        order = rng.permutation(n)
        sums = np.zeros(3)
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size:(bi + 1) * cfg.batch_size]
            noise = rng.standard_normal((len(cs), len(idx), model.latent_dim))
            draws = None
            if sampler is not None:
                draws = np.stack([sampler.draw(cfg.mc_samples, len(idx)) for _ in cs])
            obj = batch_objective(model, x[idx], y[idx], noise, draws, None if u is None else u[idx], cs)
            opt.zero_grad()
            ad.backward(-obj.total)
            opt.step()
            f = obj.floats()
            sums += (f["reconstruction"], f["regularizer"], f["total"])
        model.epoch += 1
        row = {"epoch": model.epoch, **dict(zip(("reconstruction", "regularizer", "total"), sums / max(n_batches, 1)))}
        trace.append(row)
        if log is not None:
            log(row)
    if out_dir is not None:
        model.save(out_dir)
        write_trace(trace, Path(out_dir) / "loss_trace.csv")
    return model, trace


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "reconstruction", "regularizer", "total"])
        for r in trace:
            w.writerow([r["epoch"]] + [repr(float(r[k])) for k in ("reconstruction", "regularizer", "total")])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        return [{"epoch": int(r["epoch"]), "reconstruction": float(r["reconstruction"]),
                 "regularizer": float(r["regularizer"]), "total": float(r["total"])}
                for r in csv.DictReader(fh)]


def represent(enc: EncoderNet, x, y_c, num_samples: int = 100, rng=None, noise=None) -> np.ndarray:
    """Average of ``num_samples`` reparameterized draws from q(z | x, y_c)."""
    if num_samples < 1:
        raise ShapeMismatch("num_samples must be >= 1")
    q = encode(enc, x, y_c)
    mean, std = q.mean.data, np.exp(0.5 * q.log_var.data)
    if noise is None:
        noise = np.random.default_rng(rng).standard_normal((num_samples,) + mean.shape)
    noise = np.asarray(noise, dtype=float).reshape((num_samples,) + mean.shape)
    return mean + std * noise.mean(axis=0)


def embed(model: ReiModel, x, y, num_samples: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Representation used for evaluation: ``represent`` averaged over conditioning indices c."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    L = model.cfg.eval_samples if num_samples is None else num_samples
    rng = np.random.default_rng([seed, 2])
    out = np.zeros((x.shape[0], model.latent_dim))
    for c in range(model.n_factors):
        out += represent(model.enc, x, y[:, c], L, rng)
    return out / model.n_factors
