import numpy as np
import pytest

from ecgan import model as M
from ecgan import train as T
from ecgan.autodiff import NumericError
from ecgan.data import BeatSet
from ecgan.model import ModelConfig
from ecgan.synthetic import synthetic_beats
from ecgan.train import CheckpointError, TrainingConfig

TINY = ModelConfig(seq_len=16, latent_height=4, gen_hidden=8, gen_layers=1, disc_channels=(4, 4))


@pytest.fixture(scope="module")
def beats():
    return synthetic_beats(24, 16, 0)


def snapshot(bundle):
    return {k: p.data.copy() for k, p in bundle.named_parameters()}


def same(a, b):
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


# ---------------------------------------------------------------- config

def test_config_validation_and_modes():
    assert TrainingConfig(mode="no-ssl", epochs_ssl=9).epochs_ssl == 0
    assert TrainingConfig(mode="standard_gan", epochs_ssl=9).epochs_ssl == 0
    assert TrainingConfig().d_steps_per_g == 1
    for bad in ({"clip_c": 0.0}, {"batch_size": 0}, {"mode": "vae"}, {"epochs_ssl": -1}):
        with pytest.raises(ValueError):
            TrainingConfig(**bad)
    cfg = TrainingConfig(mode="ecgan_lambda", lam=0.1, seed=2**63)
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"nope": 1})


# ---------------------------------------------------------------- SSL phase

def test_ssl_zero_epochs_is_idle(beats):
    b = T.build_bundle(TINY, 0)
    before = snapshot(b)
    assert T.run_ssl_phase(b, beats, TrainingConfig(epochs_ssl=0)) == []
    assert same(before, snapshot(b))


def test_ssl_single_sample_overfits():
    # one step per epoch, so the default 1e-3 step size cannot travel far
    # enough in 200 steps; the oracle is about gradient flow, not the schedule
    one = synthetic_beats(2, 16, 1).subset([0])
    mc = ModelConfig(seq_len=16, latent_height=16, gen_hidden=32, gen_layers=2, disc_channels=(4, 4))
    b = T.build_bundle(mc, 0)
    curve = T.run_ssl_phase(b, one, TrainingConfig(epochs_ssl=200, batch_size=1, alpha_s=1e-2))
    assert len(curve) == 200
    assert curve[-1] < 0.05 * curve[0]


def test_ssl_deterministic(beats):
    cfg = TrainingConfig(epochs_ssl=3, seed=5, batch_size=8)
    a = T.run_ssl_phase(T.build_bundle(TINY, 5), beats, cfg)
    b = T.run_ssl_phase(T.build_bundle(TINY, 5), beats, cfg)
    assert a == b


def test_ssl_leaves_discriminator_untouched(beats):
    b = T.build_bundle(TINY, 0)
    disc = {k: v.data.copy() for k, v in b.group("discriminator").items()}
    enc = {k: v.data.copy() for k, v in b.group("encoder").items()}
    T.run_ssl_phase(b, beats, TrainingConfig(epochs_ssl=2, batch_size=8))
    assert same(disc, {k: v.data for k, v in b.group("discriminator").items()})
    assert not same(enc, {k: v.data for k, v in b.group("encoder").items()})


def test_ssl_lambda_mode_runs(beats):
    b = T.build_bundle(TINY, 0)
    curve = T.run_ssl_phase(b, beats, TrainingConfig(epochs_ssl=2, mode="ecgan_lambda", lam=0.05, batch_size=8))
    assert len(curve) == 2 and all(np.isfinite(curve))


def test_ssl_empty_dataset():
    empty = BeatSet(np.zeros((0, 16)), np.zeros(0, dtype=int), ("N", "V"))
    with pytest.raises(ValueError):
        T.run_ssl_phase(T.build_bundle(TINY, 0), empty, TrainingConfig(epochs_ssl=1))


# ---------------------------------------------------------------- adversarial phase

def test_adversarial_zero_epochs_is_idle(beats):
    b = T.build_bundle(TINY, 0)
    before = snapshot(b)
    assert T.run_adversarial_phase(b, beats, TrainingConfig(epochs_adv=0)) == ([], [])
    assert same(before, snapshot(b))


@pytest.mark.parametrize("d_steps", [1, 3])
def test_clip_after_every_discriminator_step(beats, d_steps):
    b = T.build_bundle(TINY, 0)
    seen = []

    def hook(bundle):
        seen.append(max(np.abs(p.data).max() for p in bundle.group("discriminator").values()))

    T.run_adversarial_phase(b, beats, TrainingConfig(epochs_adv=3, batch_size=8, d_steps_per_g=d_steps),
                            on_d_step=hook)
    assert len(seen) == 3 * 3
    assert max(seen) <= 0.001


def test_adversarial_keeps_encoder_and_projection_frozen(beats):
    b = T.build_bundle(TINY, 0)
    frozen = {k: v.data.copy() for k, v in b.group("encoder", "projection").items()}
    gen = {k: v.data.copy() for k, v in b.group("generator").items()}
    T.run_adversarial_phase(b, beats, TrainingConfig(epochs_adv=2, batch_size=8))
    assert same(frozen, {k: v.data for k, v in b.group("encoder", "projection").items()})
    assert not same(gen, {k: v.data for k, v in b.group("generator").items()})


def test_standard_gan_skips_clipping(beats):
    b = T.build_bundle(TINY, 0)
    g, d = T.run_adversarial_phase(b, beats, TrainingConfig(epochs_adv=2, mode="standard_gan", batch_size=8))
    assert len(g) == len(d) == 2
    assert max(np.abs(p.data).max() for p in b.group("discriminator").values()) > 0.001


def test_critic_estimate_rises_then_stabilises(beats):
    res = T.train(beats, TINY, TrainingConfig(epochs_ssl=5, epochs_adv=300, batch_size=16, seed=0))
    d = np.convolve(res.d_curve, np.ones(10) / 10, mode="valid")
    early, mid, late = d[0], d[40:60].mean(), d[-50:].mean()
    assert mid > early
    assert abs(late - mid) < 0.25 * abs(mid)


def test_divergence_names_epoch_and_step(beats, monkeypatch):
    monkeypatch.setattr(T, "DIVERGENCE_LIMIT", -1.0)
    with pytest.raises(NumericError, match=r"epoch 1.*step 1"):
        T.run_adversarial_phase(T.build_bundle(TINY, 0), beats, TrainingConfig(epochs_adv=1, batch_size=8))


# ---------------------------------------------------------------- sampling

def test_sample_examples():
    b = T.build_bundle(TINY, 0)
    assert T.sample(b, 0, "N", seed=1) == []
    a1 = T.sample(b, 4, "V", seed=1)
    a2 = T.sample(b, 4, 1, seed=1)
    assert len(a1) == 4 and a1[0].label == "V" and a1[0].values.shape == (16,)
    np.testing.assert_array_equal(np.stack([x.values for x in a1]), np.stack([x.values for x in a2]))
    assert T.sample_array(b, 30, 0, 0).shape == (30, 16)
    with pytest.raises(ValueError):
        T.sample(b, 1, "S", seed=0)


# ---------------------------------------------------------------- checkpoints

@pytest.fixture(scope="module")
def trained(beats, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = TrainingConfig(epochs_ssl=3, epochs_adv=3, batch_size=8, seed=7)
    res = T.train(beats, TINY, cfg, out_dir=out, checkpoint_every=1, manifest={"tag": "x"})
    return out, cfg, res


def test_checkpoints_written(trained):
    out, _, res = trained
    names = sorted(p.name for p in res.checkpoints)
    assert "final.ckpt" in names and "ssl-0002.ckpt" in names and "adversarial-0003.ckpt" in names


def test_checkpoint_round_trip_bytes(trained):
    out, _, _ = trained
    raw = (out / "final.ckpt").read_bytes()
    ck = T.load_checkpoint(out / "final.ckpt")
    assert T.checkpoint_bytes(ck) == raw
    assert T.parse_checkpoint(raw) == ck
    assert raw[:4] == b"ECGN"
    assert ck.phase == "adversarial" and ck.epoch == 3 and ck.manifest == {"tag": "x"}


def test_checkpoint_errors(trained):
    out, _, _ = trained
    raw = (out / "final.ckpt").read_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        T.parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        T.parse_checkpoint(raw[:4] + (99).to_bytes(4, "little") + raw[8:])
    with pytest.raises(CheckpointError, match="truncated"):
        T.parse_checkpoint(raw[:-5])
    with pytest.raises(CheckpointError):
        T.parse_checkpoint(raw + b"\0")


@pytest.mark.parametrize("name", ["ssl-0002.ckpt", "adversarial-0001.ckpt"])
def test_resume_matches_uninterrupted_run(trained, beats, name):
    out, cfg, full = trained
    res = T.train(beats, TINY, cfg, resume=T.load_checkpoint(out / name))
    if name.startswith("ssl"):
        assert res.ssl_curve == full.ssl_curve[2:]
        assert res.g_curve == full.g_curve
    else:
        assert res.ssl_curve == []
        assert res.g_curve == full.g_curve[1:] and res.d_curve == full.d_curve[1:]
    assert same(snapshot(res.bundle), snapshot(full.bundle))


def test_full_run_deterministic(trained, beats):
    _, cfg, full = trained
    again = T.train(beats, TINY, cfg)
    assert again.ssl_curve == full.ssl_curve and again.d_curve == full.d_curve
    assert same(snapshot(again.bundle), snapshot(full.bundle))


def test_restore_rebuilds_bundle(trained):
    out, cfg, full = trained
    bundle, cfg2, _ = T.restore(T.load_checkpoint(out / "final.ckpt"))
    assert cfg2 == cfg
    assert same(snapshot(bundle), snapshot(full.bundle))


def test_curves_csv(tmp_path):
    T.write_curves(tmp_path / "c.csv", [0.5], [1.0], [2.0])
    assert (tmp_path / "c.csv").read_text().splitlines() == ["epoch,g_loss,d_loss,ssl_loss", "1,,,0.5", "2,1.0,2.0,"]


def test_awgn_used_only_in_lambda_mode(beats, monkeypatch):
    calls = []
    real = M.awgn_perturb
    monkeypatch.setattr(T, "awgn_perturb", lambda x, lam, seed: calls.append(lam) or real(x, lam, seed), raising=False)
    T.run_ssl_phase(T.build_bundle(TINY, 0), beats, TrainingConfig(epochs_ssl=1, batch_size=24))
    assert calls == []
    T.run_ssl_phase(T.build_bundle(TINY, 0), beats,
                    TrainingConfig(epochs_ssl=1, batch_size=24, mode="ecgan_lambda", lam=0.2))
    assert calls == [0.2]
