"""Two-phase ECGAN training: SSL reconstruction, then adversarial learning.

All randomness is drawn from per-epoch named streams, so a run resumed from
an epoch-boundary checkpoint follows exactly the same trajectory as an
uninterrupted one.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import BeatSet, EcgBeat
from .model import (ModelBundle, ModelConfig, discriminate, discriminator_loss, encode, generate,
                    generator_loss, project_noise, sample_noise, ssl_loss, standard_gan_losses,
                    awgn_perturb)
from .nn import Adam, Optimizer, RMSProp, clip_params
from .rng import stream

MODES = ("ecgan", "ecgan_lambda", "no_ssl", "standard_gan")
WGAN_MODES = ("ecgan", "ecgan_lambda", "no_ssl")
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(NumericError):
    pass


@dataclass(frozen=True)
class TrainingConfig:
    epochs_ssl: int = 50
    epochs_adv: int = 300
    batch_size: int = 32
    alpha_s: float = 1e-3
    alpha_g: float = 5e-5
    alpha_d: float = 5e-5
    clip_c: float = 0.001
    d_steps_per_g: int = 1
    mode: str = "ecgan"
    lam: float = 0.0
    seed: int = 0
    ssl_conditioned: bool = True
    unfreeze_latent: bool = False
    # standard_gan only: Adam learning rate and beta1 for both networks
    alpha_std: float = 2e-4
    beta1_std: float = 0.5

    def __post_init__(self):
        mode = self.mode.replace("-", "_")
        object.__setattr__(self, "mode", mode)
        if mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.clip_c <= 0:
            raise ValueError("clip_c must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.d_steps_per_g < 1:
            raise ValueError("d_steps_per_g must be at least 1")
        if self.epochs_ssl < 0 or self.epochs_adv < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        if mode in ("no_ssl", "standard_gan"):
            object.__setattr__(self, "epochs_ssl", 0)

    @property
    def wgan(self) -> bool:
        return self.mode in WGAN_MODES

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainingConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def build_bundle(model_config: ModelConfig, seed: int) -> ModelBundle:
    return ModelBundle(model_config, stream(seed, "init", "model"))


@dataclass
class Optimizers:
    ssl: Optimizer
    g: Optimizer
    d: Optimizer

    def as_dict(self) -> dict[str, Optimizer]:
        return {"ssl": self.ssl, "g": self.g, "d": self.d}


def ssl_params(bundle: ModelBundle) -> dict:
    return bundle.group("encoder", "projection", "generator")


def generator_params(bundle: ModelBundle, config: TrainingConfig) -> dict:
    if config.unfreeze_latent:
        return bundle.group("encoder", "projection", "generator")
    return bundle.group("generator")


def make_optimizers(bundle: ModelBundle, config: TrainingConfig) -> Optimizers:
    ssl = Adam(ssl_params(bundle), config.alpha_s)
    gp, dp = generator_params(bundle, config), bundle.group("discriminator")
    if config.wgan:
        return Optimizers(ssl, RMSProp(gp, config.alpha_g), RMSProp(dp, config.alpha_d))
    return Optimizers(ssl, Adam(gp, config.alpha_std, config.beta1_std),
                      Adam(dp, config.alpha_std, config.beta1_std))


def _batches(order: np.ndarray, size: int):
    for i in range(0, len(order), size):
        yield order[i:i + size]


def _check(value: float, what: str, epoch: int, step: int, limit: float = np.inf) -> None:
    if not np.isfinite(value) or abs(value) > limit:
        raise TrainingDiverged(f"{what} diverged ({value!r}) at epoch {epoch}, step {step}")


# ---------------------------------------------------------------- SSL phase

def run_ssl_phase(bundle: ModelBundle, dataset: BeatSet, config: TrainingConfig,
                  optimizer: Optimizer | None = None, start_epoch: int = 0,
                  on_epoch: Callable[[int, float], None] | None = None) -> list[float]:
    """L1 reconstruction through encoder, projection and generator.

    Discriminator parameters are never touched. For ``ecgan_lambda`` the
    encoder sees AWGN-perturbed beats while the target stays clean.
    Returns the mean loss of each epoch run.
    """
    if len(dataset) == 0:
        raise ValueError("SSL phase needs a non-empty dataset")
    optimizer = optimizer or make_optimizers(bundle, config).ssl
    curve = []
    for epoch in range(start_epoch, config.epochs_ssl):
        order = stream(config.seed, "shuffle", "ssl", epoch).permutation(len(dataset))
        noise = stream(config.seed, "noise", "ssl", epoch)
        total, seen = 0.0, 0
        for step, idx in enumerate(_batches(order, config.batch_size)):
            x = dataset.values[idx]
            inputs = awgn_perturb(x, config.lam, noise) if config.mode == "ecgan_lambda" else x
            labels = dataset.labels[idx] if config.ssl_conditioned else None
            bundle.zero_grad()
            loss = ssl_loss(x, generate(bundle, encode(bundle, inputs), labels))
            _check(loss.item(), "SSL loss", epoch + 1, step + 1)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(idx)
            seen += len(idx)
        curve.append(total / seen)
        if on_epoch:
            on_epoch(epoch + 1, curve[-1])
    bundle.zero_grad()
    return curve


# ---------------------------------------------------------------- adversarial phase

def _fake(bundle: ModelBundle, labels: np.ndarray, rng: np.random.Generator):
    z = sample_noise(bundle.config, len(labels), rng)
    return generate(bundle, project_noise(bundle, z), labels)


def run_adversarial_phase(bundle: ModelBundle, dataset: BeatSet, config: TrainingConfig,
                          optimizers: Optimizers | None = None, start_epoch: int = 0,
                          on_epoch: Callable[[int, float, float], None] | None = None,
                          on_d_step: Callable[[ModelBundle], None] | None = None
                          ) -> tuple[list[float], list[float]]:
    """Alternate ``d_steps_per_g`` critic updates with one generator update.

    Each critic update draws its own real batch; fake beats reuse the real
    batch's labels. In WGAN modes the critic is clipped to [-c, c] right after
    every update (``on_d_step`` observes the clipped state). Returns per-epoch
    means of L_G and L_D, where L_D is the critic objective being maximised
    (or the cross-entropy being minimised in ``standard_gan`` mode).
    """
    if len(dataset) == 0:
        raise ValueError("adversarial phase needs a non-empty dataset")
    optimizers = optimizers or make_optimizers(bundle, config)
    d_params = bundle.group("discriminator")
    g_curve, d_curve = [], []
    for epoch in range(start_epoch, config.epochs_adv):
        order = stream(config.seed, "shuffle", "adv", epoch).permutation(len(dataset))
        noise = stream(config.seed, "noise", "adv", epoch)
        g_sum = d_sum = 0.0
        g_n = d_n = 0
        batches = list(_batches(order, config.batch_size))
        for step in range(0, len(batches), config.d_steps_per_g):
            group = batches[step:step + config.d_steps_per_g]
            for k, idx in enumerate(group):
                x, y = dataset.values[idx], dataset.labels[idx]
                with ad.no_grad():
                    fake = _fake(bundle, y, noise).data
                bundle.zero_grad()
                real_s = discriminate(bundle, x, y)
                fake_s = discriminate(bundle, fake, y)
                if config.wgan:
                    l_d = discriminator_loss(real_s, fake_s)
                    objective = -l_d
                else:
                    l_d = standard_gan_losses(real_s, fake_s)[1]
                    objective = l_d
                _check(l_d.item(), "discriminator loss", epoch + 1, step + k + 1, DIVERGENCE_LIMIT)
                objective.backward()
                optimizers.d.step()
                if config.wgan:
                    clip_params(d_params, config.clip_c)
                if on_d_step:
                    on_d_step(bundle)
                d_sum += l_d.item()
                d_n += 1
            y = dataset.labels[group[-1]]
            bundle.zero_grad()
            scores = discriminate(bundle, _fake(bundle, y, noise), y)
            l_g = generator_loss(scores) if config.wgan else standard_gan_losses(scores, scores)[0]
            _check(l_g.item(), "generator loss", epoch + 1, g_n + 1)
            l_g.backward()
            optimizers.g.step()
            g_sum += l_g.item()
            g_n += 1
        g_curve.append(g_sum / g_n)
        d_curve.append(d_sum / d_n)
        if on_epoch:
            on_epoch(epoch + 1, g_curve[-1], d_curve[-1])
    bundle.zero_grad()
    return g_curve, d_curve


# ---------------------------------------------------------------- sampling

def sample_array(bundle: ModelBundle, count: int, label: int, seed: int) -> np.ndarray:
    """``count`` generated beats of class index ``label`` as a (count, n) array."""
    n = bundle.config.seq_len
    if count < 0:
        raise ValueError("count must be non-negative")
    if count == 0:
        return np.zeros((0, n))
    rng = stream(seed, "sample", int(label))
    with ad.no_grad():
        return _fake(bundle, np.full(count, int(label)), rng).data.copy()


def sample(bundle: ModelBundle, count: int, label: int | str, seed: int,
           classes: tuple[str, ...] = ("N", "V"), source: str = "generated") -> list[EcgBeat]:
    index = classes.index(label) if isinstance(label, str) else int(label)
    if not 0 <= index < bundle.config.num_classes:
        raise ValueError(f"unknown label {label!r}")
    values = sample_array(bundle, count, index, seed)
    return [EcgBeat(v, classes[index], source) for v in values]


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ECGN"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    phase: str
    epoch: int
    model_config: dict
    training_config: dict
    params: dict[str, np.ndarray]
    optimizers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Checkpoint):
            return NotImplemented
        return (self._meta() == other._meta()
                and _blocks_equal(self._blocks(), other._blocks()))

    def _meta(self) -> dict:
        return {"manifest": self.manifest, "phase": self.phase, "epoch": self.epoch,
                "model_config": self.model_config, "training_config": self.training_config,
                "optimizers": sorted(self.optimizers)}

    def _blocks(self) -> dict[str, np.ndarray]:
        out = {f"model/{k}": v for k, v in self.params.items()}
        for name, state in self.optimizers.items():
            out.update({f"opt/{name}/{k}": v for k, v in state.items()})
        return out


def _blocks_equal(a: dict, b: dict) -> bool:
    if set(a) != set(b):
        return False
    return all(np.asarray(a[k]).shape == np.asarray(b[k]).shape
               and np.asarray(a[k], dtype="<f8").tobytes() == np.asarray(b[k], dtype="<f8").tobytes()
               for k in a)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    if ckpt.phase not in ("init", "ssl", "adversarial"):
        raise CheckpointError(f"unknown phase {ckpt.phase!r}")
    header = json.dumps(ckpt._meta(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [MAGIC, struct.pack("<II", VERSION, len(header)), header]
    blocks = ckpt._blocks()
    out.append(struct.pack("<I", len(blocks)))
    for key in sorted(blocks):
        arr = np.ascontiguousarray(blocks[key], dtype="<f8")
        kb = key.encode("utf-8")
        out.append(struct.pack("<I", len(kb)) + kb)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(struct.pack("<Q", arr.size) + arr.tobytes())
    return b"".join(out)


def parse_checkpoint(raw: bytes) -> Checkpoint:
    pos = 0

    def take(k: int) -> bytes:
        nonlocal pos
        if pos + k > len(raw):
            raise CheckpointError(f"truncated checkpoint: needed {k} bytes at offset {pos}")
        chunk = raw[pos:pos + k]
        pos += k
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError("not an ECGN checkpoint (bad magic bytes)")
    version, hlen = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    try:
        meta = json.loads(take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    (nblocks,) = struct.unpack("<I", take(4))
    params: dict[str, np.ndarray] = {}
    opts: dict[str, dict[str, np.ndarray]] = {name: {} for name in meta["optimizers"]}
    for _ in range(nblocks):
        (klen,) = struct.unpack("<I", take(4))
        key = take(klen).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (count,) = struct.unpack("<Q", take(8))
        if count != int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"block {key}: count {count} does not match shape {shape}")
        arr = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        kind, _, rest = key.partition("/")
        if kind == "model":
            params[rest] = arr
        elif kind == "opt":
            name, _, sub = rest.partition("/")
            opts.setdefault(name, {})[sub] = arr
        else:
            raise CheckpointError(f"unknown block {key!r}")
    if pos != len(raw):
        raise CheckpointError(f"{len(raw) - pos} trailing bytes after last block")
    return Checkpoint(meta["manifest"], meta["phase"], meta["epoch"], meta["model_config"],
                      meta["training_config"], params, opts)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def make_checkpoint(bundle: ModelBundle, config: TrainingConfig, optimizers: Optimizers,
                    phase: str, epoch: int, manifest: dict | None = None) -> Checkpoint:
    return Checkpoint(
        manifest=manifest or {},
        phase=phase,
        epoch=epoch,
        model_config=bundle.config.to_dict(),
        training_config=config.to_dict(),
        params=bundle.state(),
        optimizers={k: {kk: np.array(vv) for kk, vv in o.state_dict().items()}
                    for k, o in optimizers.as_dict().items()},
    )


def restore(ckpt: Checkpoint, config: TrainingConfig | None = None
            ) -> tuple[ModelBundle, TrainingConfig, Optimizers]:
    config = config or TrainingConfig.from_dict(ckpt.training_config)
    mcfg = ModelConfig.from_dict(ckpt.model_config)
    bundle = ModelBundle(mcfg, stream(config.seed, "init", "model"))
    bundle.load_state(ckpt.params)
    opts = make_optimizers(bundle, config)
    for name, opt in opts.as_dict().items():
        if name in ckpt.optimizers:
            opt.load_state_dict(ckpt.optimizers[name])
    return bundle, config, opts


# ---------------------------------------------------------------- full run

@dataclass
class TrainingResult:
    bundle: ModelBundle
    ssl_curve: list[float]
    g_curve: list[float]
    d_curve: list[float]
    checkpoints: list[Path] = field(default_factory=list)


def train(dataset: BeatSet, model_config: ModelConfig, config: TrainingConfig,
          out_dir=None, manifest: dict | None = None, checkpoint_every: int = 0,
          resume: Checkpoint | None = None,
          on_d_step: Callable[[ModelBundle], None] | None = None) -> TrainingResult:
    """Both phases end to end, optionally writing checkpoints into ``out_dir``.

    A checkpoint is written every ``checkpoint_every`` epochs of each phase
    (0 disables periodic ones) plus one at the end as ``final.ckpt``.
    ``resume`` continues after the epoch stored in the checkpoint.
    """
    out = Path(out_dir) if out_dir is not None else None
    written: list[Path] = []
    if resume is not None:
        bundle, _, opts = restore(resume, config)
        phase, done = resume.phase, resume.epoch
    else:
        bundle = build_bundle(model_config, config.seed)
        opts = make_optimizers(bundle, config)
        phase, done = "init", 0

    def save(tag: str, epoch: int, name: str | None = None):
        if out is None:
            return
        path = out / (name or f"{tag}-{epoch:04d}.ckpt")
        save_checkpoint(path, make_checkpoint(bundle, config, opts, tag, epoch, manifest))
        written.append(path)

    def ssl_hook(epoch, _loss):
        if checkpoint_every and epoch % checkpoint_every == 0:
            save("ssl", epoch)

    def adv_hook(epoch, _g, _d):
        if checkpoint_every and epoch % checkpoint_every == 0:
            save("adversarial", epoch)

    ssl_start = done if phase == "ssl" else (0 if phase == "init" else config.epochs_ssl)
    ssl_curve = run_ssl_phase(bundle, dataset, config, opts.ssl, ssl_start, ssl_hook)
    adv_start = done if phase == "adversarial" else 0
    g_curve, d_curve = run_adversarial_phase(bundle, dataset, config, opts, adv_start,
                                             adv_hook, on_d_step)
    final_phase = "adversarial" if config.epochs_adv else ("ssl" if config.epochs_ssl else "init")
    final_epoch = config.epochs_adv if config.epochs_adv else config.epochs_ssl
    save(final_phase, final_epoch, "final.ckpt")
    return TrainingResult(bundle, ssl_curve, g_curve, d_curve, written)


def write_curves(path, ssl_curve, g_curve, d_curve, ssl_offset: int = 0, adv_offset: int | None = None) -> None:
    """Loss CSV ``epoch,g_loss,d_loss,ssl_loss``; adversarial epochs follow the SSL ones."""
    adv_offset = ssl_offset + len(ssl_curve) if adv_offset is None else adv_offset
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "g_loss", "d_loss", "ssl_loss"])
        for i, v in enumerate(ssl_curve):
            w.writerow([ssl_offset + i + 1, "", "", repr(float(v))])
        for i, (g, d) in enumerate(zip(g_curve, d_curve)):
            w.writerow([adv_offset + i + 1, repr(float(g)), repr(float(d)), ""])


def with_overrides(config: TrainingConfig, **changes) -> TrainingConfig:
    return replace(config, **{k: v for k, v in changes.items() if v is not None})
