"""Vanilla GAN training on 2-D data with the non-saturating generator loss."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import nnet
from .nnet import AdamState, Mlp
from .worlds import MixtureSpec, Provenance, SampleBatch, UndefinedInputError, as_points, high_quality_fraction
from .worlds import sample as sample_world

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
GENERATE_CHUNK = 65536


class ConfigError(ValueError):
    """Raised for invalid experiment or training configuration."""


@dataclass(frozen=True)
class LatentPrior:
    kind: str = "normal"
    dim: int = 2
    low: float = -1.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("normal", "uniform"):
            raise ConfigError(f"unknown prior kind {self.kind!r}")
        if self.dim < 1:
            raise ConfigError("latent dimension must be at least 1")
        if self.kind == "uniform" and not self.low < self.high:
            raise ConfigError("uniform prior needs low < high")

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "normal":
            return rng.standard_normal((n, self.dim))
        return rng.uniform(self.low, self.high, size=(n, self.dim))


@dataclass
class TrainConfig:
    steps: int = 20000
    batch_size: int = 256
    d_steps: int = 1
    lr: float = 1e-3
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    hidden: int = 64
    depth: int = 4
    log_every: int = 500
    lr_final: float | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        for name in ("batch_size", "d_steps", "hidden", "depth", "log_every"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if not self.lr > 0 or (self.lr_final is not None and not self.lr_final > 0):
            raise ConfigError("learning rate must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass
class GanModel:
    generator: Mlp
    discriminator: Mlp
    prior: LatentPrior = field(default_factory=LatentPrior)
    history: list = field(default_factory=list)
    g_state: AdamState | None = None
    d_state: AdamState | None = None

    def __post_init__(self):
        if self.generator.in_dim != self.prior.dim:
            raise nnet.ShapeError("generator input must match the latent dimension")
        if self.discriminator.out_dim != 1 or self.discriminator.in_dim != self.generator.out_dim:
            raise nnet.ShapeError("discriminator must map samples to a single logit")

    def copy(self) -> "GanModel":
        return GanModel(
            self.generator.copy(), self.discriminator.copy(), self.prior, list(self.history),
            self.g_state.copy() if self.g_state else None,
            self.d_state.copy() if self.d_state else None,
        )

    def logits(self, x) -> np.ndarray:
        pts = as_points(x)
        return nnet.forward(self.discriminator, pts)[:, 0]


def init_model(config: TrainConfig, prior: LatentPrior | None = None, data_dim: int = 2) -> GanModel:
    prior = prior or LatentPrior()
    hidden = [config.hidden] * (config.depth - 1)
    g = nnet.init_mlp([prior.dim, *hidden, data_dim], "relu", seed=config.seed * 2 + 1)
    d = nnet.init_mlp([data_dim, *hidden, 1], "relu", seed=config.seed * 2 + 2)
    return GanModel(g, d, prior)


def _clamped_probs(logits):
    p = nnet.sigmoid(logits)
    inside = (p > PROB_CLAMP) & (p < 1 - PROB_CLAMP)
    return np.clip(p, PROB_CLAMP, 1 - PROB_CLAMP), inside


def _check_batch(x, what):
    if len(x) == 0:
        raise UndefinedInputError(f"{what} batch is empty")


def d_loss(model: GanModel, real, fake) -> float:
    """``-mean log D(x_real) - mean log(1 - D(x_fake))``."""
    return d_loss_grad(model, real, fake)[0]


def d_loss_grad(model: GanModel, real, fake):
    real, fake = as_points(real), as_points(fake)
    _check_batch(real, "real")
    _check_batch(fake, "fake")
    n_r, n_f = len(real), len(fake)
    out, cache = nnet.forward_cache(model.discriminator, np.vstack([real, fake]))
    p, inside = _clamped_probs(out[:, 0])
    loss = -np.mean(np.log(p[:n_r])) - np.mean(np.log1p(-p[n_r:]))
    # d/dlogit of -log(sigmoid) is -(1 - p); of -log(1 - sigmoid) is p; zero where clamped
    up = np.empty_like(p)
    up[:n_r] = -(1.0 - p[:n_r]) / n_r
    up[n_r:] = p[n_r:] / n_f
    up *= inside
    grads, _ = nnet.backward_cache(model.discriminator, cache, up[:, None])
    return float(loss), grads


def g_loss(model: GanModel, latents) -> float:
    """Non-saturating generator loss ``-mean log D(G(z))``."""
    return g_loss_grad(model, latents)[0]


def g_loss_grad(model: GanModel, latents):
    z = np.atleast_2d(np.asarray(latents, dtype=float))
    _check_batch(z, "latent")
    x, g_cache = nnet.forward_cache(model.generator, z)
    out, d_cache = nnet.forward_cache(model.discriminator, x)
    p, inside = _clamped_probs(out[:, 0])
    loss = -np.mean(np.log(p))
    up = (-(1.0 - p) / len(z) * inside)[:, None]
    _, gx = nnet.backward_cache(model.discriminator, d_cache, up)
    grads, _ = nnet.backward_cache(model.generator, g_cache, gx)
    return float(loss), grads


class _FixedBatchSource:
    """Shuffled epochs over a finite dataset."""

    def __init__(self, points, batch_size, rng):
        if len(points) < batch_size:
            raise ConfigError(f"dataset of {len(points)} samples is smaller than batch size {batch_size}")
        self.points, self.batch_size, self.rng = points, batch_size, rng
        self.order, self.pos = rng.permutation(len(points)), 0

    def next(self):
        if self.pos + self.batch_size > len(self.order):
            self.order, self.pos = self.rng.permutation(len(self.points)), 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return self.points[idx]


class _WorldSource:
    def __init__(self, world, batch_size, rng):
        self.world, self.batch_size, self.rng = world, batch_size, rng

    def next(self):
        comp = self.rng.choice(len(self.world.weights), size=self.batch_size, p=self.world.weights)
        noise = self.rng.standard_normal((self.batch_size, self.world.dim))
        return self.world.means[comp] + self.world.sigma * noise


def train(source, config: TrainConfig, init: GanModel | None = None, prior: LatentPrior | None = None,
          keep_optimizer: bool = True, callback: Callable[[int, GanModel], None] | None = None,
          probe_world: MixtureSpec | None = None) -> GanModel:
    """Alternating D/G Adam training.

    ``source`` is a :class:`MixtureSpec` (fresh draws every step) or a finite
    dataset (``SampleBatch`` or array, shuffled epochs). ``init`` continues
    from an existing model; its optimizer state is reused when
    ``keep_optimizer`` is set. ``callback(step, model)`` fires every
    ``config.log_every`` steps and after the final step.
    """
    rng = np.random.default_rng([config.seed, 7919])
    if isinstance(source, MixtureSpec):
        data = _WorldSource(source, config.batch_size, rng)
        probe_world = probe_world or source
    else:
        data = _FixedBatchSource(as_points(source), config.batch_size, rng)

    if init is None:
        model = init_model(config, prior)
    else:
        model = init.copy()
        if not keep_optimizer:
            model.g_state = model.d_state = None
    if model.g_state is None:
        model.g_state = AdamState.for_params(model.generator, config.lr, config.beta1, config.beta2, config.eps)
    if model.d_state is None:
        model.d_state = AdamState.for_params(model.discriminator, config.lr, config.beta1, config.beta2,
                                             config.eps)
    start = model.history[-1][0] if model.history else 0

    bs = config.batch_size
    for step in range(1, config.steps + 1):
        if config.lr_final is not None:
            # linear decay from lr to lr_final over this run
            frac = (step - 1) / max(config.steps - 1, 1)
            model.g_state.lr = model.d_state.lr = config.lr + frac * (config.lr_final - config.lr)
        for _ in range(config.d_steps):
            real = data.next()
            fake = nnet.forward(model.generator, model.prior.sample(bs, rng))
            ld, grads = d_loss_grad(model, real, fake)
            nnet.adam_step(model.discriminator, grads, model.d_state)
        lg, grads = g_loss_grad(model, model.prior.sample(bs, rng))
        nnet.adam_step(model.generator, grads, model.g_state)

        if step % config.log_every == 0 or step == config.steps:
            model.history.append((start + step, ld, lg))
            if probe_world is not None and log.isEnabledFor(logging.INFO):
                probe = generate(model, 2000, seed=[config.seed, step])
                log.info("step %d  L_D %.4f  L_G %.4f  HQ %.4f", start + step, ld, lg,
                         high_quality_fraction(probe, probe_world))
            if callback is not None:
                callback(start + step, model)
    return model


def generate_from(model: GanModel, codes) -> SampleBatch:
    codes = np.asarray(codes, dtype=float)
    if codes.size == 0:
        return SampleBatch(np.empty((0, model.generator.out_dim)), Provenance.GENERATED)
    codes = np.atleast_2d(codes)
    if codes.shape[1] != model.prior.dim:
        raise nnet.ShapeError(f"latent codes need {model.prior.dim} entries, got {codes.shape[1]}")
    parts = [nnet.forward(model.generator, codes[i:i + GENERATE_CHUNK])
             for i in range(0, len(codes), GENERATE_CHUNK)]
    return SampleBatch(np.vstack(parts), Provenance.GENERATED)


def generate(model: GanModel, n: int, seed=None) -> SampleBatch:
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = np.random.default_rng(seed)
    return generate_from(model, model.prior.sample(n, rng))


def train_target(world: MixtureSpec, config: TrainConfig, corpus_size: int = 200_000,
                 prior: LatentPrior | None = None):
    """Train a target on a fixed corpus drawn from ``world``; returns ``(model, corpus)``."""
    corpus = sample_world(world, corpus_size, seed=[config.seed, 104729])
    return train(corpus, config, prior=prior, probe_world=world), corpus


def save_checkpoint(model: GanModel, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nnet.save_mlp(model.generator, directory / "generator.json")
    nnet.save_mlp(model.discriminator, directory / "discriminator.json")
    (directory / "prior.json").write_text(json.dumps(asdict(model.prior)))
    with open(directory / "history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "d_loss", "g_loss"])
        for step, ld, lg in model.history:
            writer.writerow([step, repr(float(ld)), repr(float(lg))])


def load_checkpoint(directory) -> GanModel:
    directory = Path(directory)
    prior = LatentPrior(**json.loads((directory / "prior.json").read_text()))
    history = []
    hist_path = directory / "history.csv"
    if hist_path.exists():
        with open(hist_path, newline="") as fh:
            for row in list(csv.reader(fh))[1:]:
                history.append((int(row[0]), float(row[1]), float(row[2])))
    return GanModel(nnet.load_mlp(directory / "generator.json"),
                    nnet.load_mlp(directory / "discriminator.json"), prior, history)
