"""ECGAN composition: encoder, latent projection, generator, discriminator, losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import Conv1dBlock, EmbeddingTable, Linear, LstmCell, Module, unroll_steps


@dataclass(frozen=True)
class ModelConfig:
    seq_len: int = 140
    latent_height: int = 100
    upsample: int = 4
    enc_layers: int = 1
    gen_hidden: int = 128
    gen_layers: int = 5
    disc_channels: tuple[int, ...] = (128, 64, 32)
    kernel_size: int = 6
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "disc_channels", tuple(int(c) for c in self.disc_channels))
        for name in ("seq_len", "latent_height", "upsample", "enc_layers", "gen_hidden",
                     "gen_layers", "kernel_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.disc_channels:
            raise ValueError("discriminator needs at least one conv block")

    @property
    def latent_width(self) -> int:
        return math.ceil(self.seq_len / self.upsample)

    @property
    def latent_shape(self) -> tuple[int, int]:
        return self.latent_height, self.latent_width

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_channels"] = list(self.disc_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**{**d, "disc_channels": tuple(d["disc_channels"])})


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng):
        h = cfg.latent_height
        self.layers = [LstmCell(1 if i == 0 else h, h, rng) for i in range(cfg.enc_layers)]


class Projection(Module):
    """Affine map applied per latent column: (batch, h, n') -> (batch, h, n')."""

    def __init__(self, cfg: ModelConfig, rng):
        h = cfg.latent_height
        bound = 1.0 / math.sqrt(h)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(h, h)), requires_grad=True)
        self.bias = Tensor(np.zeros((h, 1)), requires_grad=True)

    def __call__(self, x) -> Tensor:
        return ad.matmul(self.weight, x) + self.bias


class Generator(Module):
    def __init__(self, cfg: ModelConfig, rng):
        g = cfg.gen_hidden
        self.layers = [LstmCell(cfg.latent_height if i == 0 else g, g, rng)
                       for i in range(cfg.gen_layers)]
        self.label_embedding = EmbeddingTable(cfg.num_classes, g, rng)
        self.head = Linear(g, 1, rng)


class Discriminator(Module):
    """Conv blocks -> global average pool -> linear score, plus label term.

    Instance norm here is non-affine: under a weight-clipping window as narrow
    as 0.001 a clipped gamma/beta would shrink every block output below the
    normalisation epsilon and silence the critic.
    """

    def __init__(self, cfg: ModelConfig, rng):
        chans = (1,) + cfg.disc_channels
        self.blocks = [Conv1dBlock(a, b, rng, cfg.kernel_size, affine=False)
                       for a, b in zip(chans, chans[1:])]
        self.head = Linear(chans[-1], 1, rng)
        self.label_embedding = EmbeddingTable(cfg.num_classes, chans[-1], rng)
        bound = 1.0 / math.sqrt(chans[-1])
        self.label_weight = Tensor(rng.uniform(-bound, bound, size=(chans[-1], 1)),
                                   requires_grad=True)

    def features(self, x: Tensor) -> Tensor:
        h = x
        for block in self.blocks:
            h = block(h)
        return ad.global_avg_pool(h)


class ModelBundle(Module):
    """All ECGAN parameters.

    The SSL decoder *is* the generator: ``bundle.decoder is bundle.generator``.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.config = cfg
        self.encoder = Encoder(cfg, rng)
        self.projection = Projection(cfg, rng)
        self.generator = Generator(cfg, rng)
        self.discriminator = Discriminator(cfg, rng)

    @property
    def decoder(self) -> Generator:
        return self.generator

    def group(self, *names: str) -> dict[str, Tensor]:
        out = {}
        for name in names:
            out.update(getattr(self, name).named_parameters(name + "."))
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state(self, state) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {k}: stored shape {arr.shape} != {p.shape}")
            p.data[...] = arr


def _batch(x, n: int) -> Tensor:
    x = ad.as_tensor(x)
    if x.ndim == 1:
        x = ad.reshape(x, (1, x.shape[0]))
    if x.ndim != 2 or x.shape[1] != n:
        raise ShapeError(f"expected beats of length {n}, got shape {x.shape}")
    return x


def _labels(labels, batch: int, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 0:
        labels = np.full(batch, int(labels))
    if labels.shape != (batch,):
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.dtype.kind not in "iu" or labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"unknown label in {labels!r}")
    return labels.astype(np.int64)


def encode(bundle: ModelBundle, x) -> Tensor:
    """Latent matrix (batch, h, n') for beats ``x`` of shape (batch, n)."""
    cfg = bundle.config
    x = _batch(x, cfg.seq_len)
    batch = x.shape[0]
    layers = bundle.encoder.layers
    # first layer has input width 1: project the whole sequence in one matmul
    xw_all = layers[0].project(ad.reshape(x, (batch, cfg.seq_len, 1)))
    steps = [xw_all[:, t, :] for t in range(cfg.seq_len)]
    h = cfg.latent_height
    hs = Tensor(np.zeros((batch, h)))
    c = hs
    outs = []
    for xw in steps:
        hs, c = layers[0].step_projected(xw, hs, c)
        outs.append(hs)
    if len(layers) > 1:
        outs = unroll_steps(layers[1:], outs)
    picks = [outs[min((j + 1) * cfg.upsample - 1, cfg.seq_len - 1)] for j in range(cfg.latent_width)]
    cols = ad.concat([ad.reshape(p, (batch, h, 1)) for p in picks], axis=2)
    return bundle.projection(cols)


def project_noise(bundle: ModelBundle, z) -> Tensor:
    """Pass prior noise of shape (batch, h, n') through the latent projection."""
    z = ad.as_tensor(z)
    if z.shape[1:] != bundle.config.latent_shape:
        raise ShapeError(f"noise shape {z.shape[1:]} != latent shape {bundle.config.latent_shape}")
    return bundle.projection(z)


def sample_noise(cfg: ModelConfig, count: int, rng: np.random.Generator) -> np.ndarray:
    return rng.standard_normal((count,) + cfg.latent_shape)


def generate(bundle: ModelBundle, latent, labels=None) -> Tensor:
    """Decode latent (batch, h, n') into beats (batch, n), conditioned on labels.

    ``labels=None`` starts every generator layer from a zero hidden state.
    """
    cfg = bundle.config
    latent = ad.as_tensor(latent)
    if latent.ndim == 2:
        latent = ad.reshape(latent, (1,) + latent.shape)
    if latent.shape[1:] != cfg.latent_shape:
        raise ShapeError(f"latent shape {latent.shape[1:]} != {cfg.latent_shape}")
    batch = latent.shape[0]
    gen = bundle.generator
    if labels is None:
        h0 = Tensor(np.zeros((batch, cfg.gen_hidden)))
    else:
        h0 = ad.tanh(gen.label_embedding(_labels(labels, batch, cfg.num_classes)))
    cols = [latent[:, :, j] for j in range(cfg.latent_width)]
    steps = [cols[t // cfg.upsample] for t in range(cfg.seq_len)]
    outs = unroll_steps(gen.layers, steps, h0)
    g = cfg.gen_hidden
    seq = ad.concat([ad.reshape(o, (batch, 1, g)) for o in outs], axis=1)
    y = gen.head(seq)
    return ad.tanh(ad.reshape(y, (batch, cfg.seq_len)))


def reconstruct(bundle: ModelBundle, x, labels=None) -> Tensor:
    return generate(bundle, encode(bundle, x), labels)


def discriminate(bundle: ModelBundle, x, labels) -> Tensor:
    """Unbounded real score per beat, shape (batch,)."""
    cfg = bundle.config
    x = _batch(x, cfg.seq_len)
    batch = x.shape[0]
    labels = _labels(labels, batch, cfg.num_classes)
    disc = bundle.discriminator
    feats = disc.features(ad.reshape(x, (batch, 1, cfg.seq_len)))
    score = disc.head(feats) + ad.matmul(disc.label_embedding(labels), disc.label_weight)
    return ad.reshape(score, (batch,))


# ---------------------------------------------------------------- objectives

def ssl_loss(x, x_hat) -> Tensor:
    """Mean absolute reconstruction error over batch and time."""
    return ad.l1_loss(x_hat, x)


def generator_loss(scores_fake) -> Tensor:
    return -ad.mean(scores_fake)


def discriminator_loss(scores_real, scores_fake) -> Tensor:
    """Critic objective mean(real) - mean(fake); training maximises it."""
    return ad.mean(scores_real) - ad.mean(scores_fake)


def _two_class_logits(scores) -> Tensor:
    # [0, s] logits make softmax class 1 equal to sigmoid(s)
    s = ad.as_tensor(scores)
    s = ad.reshape(s, (s.size, 1))
    return ad.concat([Tensor(np.zeros(s.shape)), s], axis=1)


def standard_gan_losses(scores_real, scores_fake) -> tuple[Tensor, Tensor]:
    """Non-saturating generator loss and binary cross-entropy discriminator loss."""
    real = _two_class_logits(scores_real)
    fake = _two_class_logits(scores_fake)
    ones_r = np.ones(real.shape[0], dtype=np.int64)
    d_loss = (ad.softmax_cross_entropy(real, ones_r)
              + ad.softmax_cross_entropy(fake, np.zeros(fake.shape[0], dtype=np.int64)))
    g_loss = ad.softmax_cross_entropy(fake, np.ones(fake.shape[0], dtype=np.int64))
    return g_loss, d_loss


def awgn_perturb(x: np.ndarray, lam: float, rng: np.random.Generator | int) -> np.ndarray:
    """Add white Gaussian noise with variance lam**2 * sqrt(N), N the beat length."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    x = np.asarray(x, dtype=np.float64)
    if lam == 0:
        return x.copy()
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = x.shape[-1]
    return x + rng.normal(0.0, lam * n ** 0.25, size=x.shape)
