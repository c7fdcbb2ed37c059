"""Acceptance suite: one or more tests per numbered criterion.

The conftest prints a PASS/FAIL line per criterion at the end of the run.
Training-based criteria use a desk-scale profile (short beats, small nets,
short schedules) so the whole module runs in well under an hour on one core.
"""
import json
import time
from pathlib import Path

import numpy as np
import pytest

from ecgan import autodiff as ad
from ecgan import cli
from ecgan import data as D
from ecgan import eval as E
from ecgan import model as M
from ecgan import nn
from ecgan import train as T
from ecgan.autodiff import Graph, Tensor
from ecgan.eval import ClassifierConfig, FeatureStats
from ecgan.model import ModelConfig
from ecgan.synthetic import delineation_beat, noise_beats, synthetic_beats
from ecgan.train import TrainingConfig

criterion = pytest.mark.criterion

# desk profile shared by the training-based criteria
DESK_MODEL = ModelConfig(seq_len=48, latent_height=16, gen_hidden=32, gen_layers=2, disc_channels=(16, 16, 32))
DESK_CLASSIFIER = ClassifierConfig(channels=(16, 16, 32), epochs=20, learning_rate=1e-2)
DESK_SEEDS = range(5)
DESK_BEATS = 170
DESK_SSL_EPOCHS = 30
DESK_ADV_EPOCHS = 50


def detail(request, text):
    request.node.user_properties.append(("detail", text))


# ---------------------------------------------------------------- 1. gradients

def _projected(fn, shape_rng):
    """sum(fn(...) * P) for a fixed random P, so every output entry matters."""
    cache = {}

    def loss(**kw):
        out = fn(**kw)
        if "p" not in cache:
            cache["p"] = Tensor(shape_rng.normal(size=out.shape))
        return ad.sum_(out * cache["p"])
    return loss


def _gradient_cases(seed):
    rng = np.random.default_rng(seed)
    proj = np.random.default_rng(10_000 + seed)

    def param(*shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    cases = {}

    cell = nn.LstmCell(3, 4, rng)
    cases["lstm"] = (_projected(lambda x, h, c: ad.concat(list(nn.lstm_step(cell, x, h, c)), axis=1), proj),
                     {"x": param(2, 3), "h": param(2, 4), "c": param(2, 4)}, list(cell.parameters().values()))

    block = nn.Conv1dBlock(2, 3, rng)
    block.beta.data[...] = rng.normal(0.0, 0.3, size=block.beta.shape)
    cases["conv_block"] = (_projected(lambda x: block(x), proj), {"x": param(2, 2, 10)},
                           list(block.parameters().values()))

    critic_block = nn.Conv1dBlock(2, 3, rng, affine=False)
    cases["conv_block_non_affine"] = (_projected(lambda x: critic_block(x), proj), {"x": param(2, 2, 10)},
                                      list(critic_block.parameters().values()))

    lin = nn.Linear(5, 3, rng)
    lin.bias.data[...] = rng.normal(size=3)
    cases["linear"] = (_projected(lambda x: lin(x), proj), {"x": param(4, 5)}, list(lin.parameters().values()))

    emb = nn.EmbeddingTable(2, 4, rng)
    cases["label_embedding"] = (_projected(lambda: ad.tanh(emb([0, 1, 1])), proj), {}, [emb.rows])

    cases["global_avg_pool"] = (_projected(lambda x: nn.global_avg_pool(x), proj), {"x": param(2, 3, 7)}, [])

    target = rng.uniform(-1, 1, size=(3, 6))
    cases["ssl_l1"] = (lambda xh: M.ssl_loss(target, xh), {"xh": param(3, 6)}, [])
    cases["generator_loss"] = (lambda s: M.generator_loss(s), {"s": param(5)}, [])
    cases["critic_loss"] = (lambda r, f: M.discriminator_loss(r, f), {"r": param(5), "f": param(4)}, [])
    cases["std_gan_d"] = (lambda r, f: M.standard_gan_losses(r, f)[1], {"r": param(5), "f": param(5)}, [])
    cases["std_gan_g"] = (lambda r, f: M.standard_gan_losses(r, f)[0], {"r": param(5), "f": param(5)}, [])

    cfg = ModelConfig(seq_len=8, latent_height=2, gen_hidden=3, gen_layers=1, disc_channels=(3, 2))
    bundle = M.ModelBundle(cfg, rng)
    labels = np.array([0, 1])
    cases["critic_network"] = (_projected(lambda x: M.discriminate(bundle, x, labels), proj),
                               {"x": param(2, 8)}, list(bundle.group("discriminator").values()))
    return cases


@criterion(1, "gradient integrity (layers and losses, 20 seeds, rel err <= 1e-4, < 2 min)")
def test_c1_gradient_integrity(request):
    start = time.perf_counter()
    worst = {}
    for seed in range(20):
        for name, (fn, inputs, extra) in _gradient_cases(seed).items():
            wrt = [k for k in inputs] + extra
            err = ad.finite_diff_check(Graph(fn), inputs, wrt=wrt, epsilon=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - start
    top = max(worst, key=worst.get)
    detail(request, f"max rel err {worst[top]:.2e} ({top}), {len(worst)} cases x 20 seeds, {elapsed:.1f}s")
    assert all(v <= 1e-4 for v in worst.values()), worst
    assert elapsed < 120


# ---------------------------------------------------------------- 2. metric oracles

@criterion(2, "metric oracles (closed forms, zero on identity, IS bounds, < 1 min)")
def test_c2_metric_oracles(request):
    start = time.perf_counter()

    def st(mu, cov):
        return FeatureStats(np.array([mu], float), np.array([[cov]], float), 2)

    assert abs(E.fid(st(0, 1), st(1, 1)) - 1.0) <= 1e-8
    assert abs(E.fid(st(0, 4), st(0, 1)) - 1.0) <= 1e-8

    rng = np.random.default_rng(0)
    feats = rng.normal(size=(60, 8))
    stats = FeatureStats.from_features(feats)
    seq = rng.normal(size=40)
    identity = {
        "fid": E.fid(stats, stats),
        "mmd_linear": E.mmd(feats, feats, "linear"),
        "mmd_rbf": E.mmd(feats, feats, "rbf"),
        "wasserstein": E.projected_wasserstein(feats, feats),
        "dtw": E.dtw(seq, seq),
    }
    assert all(abs(v) <= 1e-8 for v in identity.values()), identity

    for _ in range(1000):
        k = int(rng.integers(2, 11))
        preds = rng.dirichlet(np.full(k, rng.uniform(0.05, 5.0)), size=int(rng.integers(1, 200)))
        score = E.inception_score(preds)
        assert 1.0 <= score <= k
    one_hot = np.array([[1.0, 0.0]] * 50 + [[0.0, 1.0]] * 50)
    assert E.inception_score(one_hot) == 2.0
    elapsed = time.perf_counter() - start
    detail(request, f"identity max {max(abs(v) for v in identity.values()):.1e}, {elapsed:.1f}s")
    assert elapsed < 60


# ---------------------------------------------------------------- 3. format 212

def _oracle_212(b0, b1, b2):
    s1 = b0 | ((b1 & 0x0F) << 8)
    s2 = b2 | ((b1 >> 4) << 8)
    return [s - 4096 if s & 0x800 else s for s in (s1, s2)]


@criterion(3, "WFDB format 212 decode oracle and bit-exact round trip")
def test_c3_format_212(request):
    rng = np.random.default_rng(212)
    groups = rng.integers(0, 256, size=(10_000, 3), dtype=np.uint8)
    decoded = D.decode_212(groups.tobytes())
    expected = [v for g in groups.tolist() for v in _oracle_212(*g)]
    assert decoded.tolist() == expected
    samples = rng.integers(-2048, 2048, size=20_000)
    packed = D.encode_212(samples)
    assert np.array_equal(D.decode_212(packed), samples)
    assert D.encode_212(D.decode_212(groups.tobytes())) == groups.tobytes()
    detail(request, "10^4 groups, 2x10^4 samples")


# ---------------------------------------------------------------- 4. clipping

@criterion(4, "clip invariant after every critic update in a 50-epoch toy run")
def test_c4_clipping(request):
    cfg = ModelConfig(seq_len=16, latent_height=4, gen_hidden=8, gen_layers=1, disc_channels=(4, 4))
    beats = synthetic_beats(24, 16, 0)
    seen = []

    def hook(bundle):
        seen.append(max(float(np.abs(p.data).max()) for p in bundle.group("discriminator").values()))

    T.train(beats, cfg, TrainingConfig(epochs_ssl=2, epochs_adv=50, batch_size=8, seed=0), on_d_step=hook)
    detail(request, f"{len(seen)} updates, max |theta_d| = {max(seen):.6g}")
    assert len(seen) == 50 * 3
    assert max(seen) <= 0.001


# ---------------------------------------------------------------- 5. SSL effectiveness

@criterion(5, "200 SSL epochs on 500 synthetic beats cut L1 by >= 80% (< 5 min)")
def test_c5_ssl_effectiveness(request):
    beats = synthetic_beats(500, 48, 5)
    model = ModelConfig(seq_len=48, latent_height=16, gen_hidden=32, gen_layers=1, disc_channels=(16, 16, 32))
    cfg = TrainingConfig(epochs_ssl=200, epochs_adv=0, batch_size=64, seed=0)
    start = time.perf_counter()
    bundle = T.build_bundle(model, 0)
    curve = T.run_ssl_phase(bundle, beats, cfg)
    elapsed = time.perf_counter() - start
    drop = 1.0 - curve[-1] / curve[0]
    detail(request, f"L1 {curve[0]:.4f} -> {curve[-1]:.4f} ({drop:.1%} drop), {elapsed:.0f}s")
    assert drop >= 0.8
    assert elapsed < 300


# ---------------------------------------------------------------- 6/7. ablation and collapse

def _desk_run(seed):
    split = D.make_splits(synthetic_beats(DESK_BEATS, DESK_MODEL.seq_len, 100 + seed), seed)[0]
    clf = E.train_classifier(split, seed, DESK_CLASSIFIER)
    real = split.generative_set
    real_stats = FeatureStats.from_features(E.extract_features(clf, real))
    out = {}
    for mode in ("ecgan", "no_ssl", "standard_gan"):
        cfg = TrainingConfig(epochs_ssl=DESK_SSL_EPOCHS, epochs_adv=DESK_ADV_EPOCHS, batch_size=32,
                             seed=seed, mode=mode)
        bundle = T.train(real, DESK_MODEL, cfg).bundle
        gen = np.concatenate([T.sample_array(bundle, len(real) // 2, k, seed) for k in (0, 1)])
        thirty = np.concatenate([T.sample_array(bundle, 15, k, seed + 1) for k in (0, 1)])
        out[mode] = {
            "is": E.inception_score(clf.predict_proba(gen)),
            "fid": E.fid(real_stats, FeatureStats.from_features(E.extract_features(clf, gen))),
            "collapse": E.dtw_matrix(thirty, real.values)[1],
        }
    return out


@pytest.fixture(scope="session")
def desk_runs():
    start = time.perf_counter()
    runs = {seed: _desk_run(seed) for seed in DESK_SEEDS}
    return runs, time.perf_counter() - start


@criterion(6, "ablation: ecgan beats no_ssl on FID and IS in >= 4 of 5 seeds (< 30 min)")
def test_c6_ablation_ordering(request, desk_runs):
    runs, elapsed = desk_runs
    wins = 0
    for seed, r in runs.items():
        win = r["ecgan"]["fid"] < r["no_ssl"]["fid"] and r["ecgan"]["is"] > r["no_ssl"]["is"]
        wins += win
        detail(request, f"s{seed} FID {r['ecgan']['fid']:.3f}/{r['no_ssl']['fid']:.3f} "
                        f"IS {r['ecgan']['is']:.3f}/{r['no_ssl']['is']:.3f}")
    detail(request, f"{wins}/5 seeds, {elapsed / 60:.1f} min")
    assert wins >= 4
    assert elapsed < 30 * 60


@criterion(7, "collapse score: 0 on identical beats; ecgan > standard_gan in >= 4 of 5 seeds")
def test_c7_collapse_identical_beats(request):
    beat = synthetic_beats(1, 48, 0).values
    _, score = E.dtw_matrix(np.repeat(beat, 30, axis=0))
    detail(request, f"identical beats {score}")
    assert score == 0.0


@criterion(7, "collapse score: 0 on identical beats; ecgan > standard_gan in >= 4 of 5 seeds")
def test_c7_collapse_ordering(request, desk_runs):
    runs, _ = desk_runs
    wins = sum(r["ecgan"]["collapse"] > r["standard_gan"]["collapse"] for r in runs.values())
    for seed, r in runs.items():
        detail(request, f"s{seed} {r['ecgan']['collapse']:.3f}/{r['standard_gan']['collapse']:.3f}")
    detail(request, f"{wins}/5 seeds")
    assert wins >= 4


# ---------------------------------------------------------------- 8. segments

@criterion(8, "segment delineation within 0.02 s over 100 synthetic beats")
def test_c8_segment_delineation(request):
    rng = np.random.default_rng(8)
    worst = dict.fromkeys(E.SEGMENTS, 0.0)
    for _ in range(100):
        beat, truth = delineation_beat(rng)
        got = E.segment_durations(beat, 250.0)
        for key in E.SEGMENTS:
            assert got[key] is not None, key
            worst[key] = max(worst[key], abs(got[key] - truth[key]))
    detail(request, ", ".join(f"{k} {v * 1000:.1f} ms" for k, v in worst.items()))
    assert max(worst.values()) <= 0.02


# ---------------------------------------------------------------- 9. determinism

PIPELINE = [
    ["synth", "--kind", "beats", "--count", "60", "--n", "32", "--seed", "3", "--out", "beats.csv"],
    ["prep", "--format", "csv", "--in", "beats.csv", "--n", "32", "--seed", "3", "--out", "data"],
    ["train", "--data", "data", "--seed", "3", "--epochs-ssl", "3", "--epochs-adv", "3", "--batch-size", "16",
     "--latent-height", "4", "--gen-hidden", "8", "--gen-layers", "1", "--disc-channels", "4,4", "--out", "run"],
    ["sample", "--checkpoint", "run/final.ckpt", "--count", "30", "--label", "all", "--seed", "3",
     "--out", "samples.csv"],
    ["eval", "--data", "data", "--generated", "samples.csv", "--classifier-channels", "4,4",
     "--classifier-epochs", "3", "--seed", "3", "--features-out", "features.csv", "--out", "report.json"],
]
MANIFESTS = ["beats.csv.manifest.json", "data/manifest.json", "run/manifest.json",
             "samples.csv.manifest.json", "report.json.manifest.json"]


def _outputs(root: Path):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.suffix in (".csv", ".json", ".ckpt")}


@criterion(9, "two pipeline runs from the same manifests give byte-identical outputs")
def test_c9_determinism(request, tmp_path, monkeypatch):
    # manifests embed a creation time; a pinned build epoch keeps them comparable
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "1700000000")
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    monkeypatch.chdir(first)
    for argv in PIPELINE:
        assert cli.main(argv) == 0, argv
    for manifest in MANIFESTS:
        assert cli.main(["rerun", str(first / manifest), "--workdir", str(second)]) == 0, manifest
    a, b = _outputs(first), _outputs(second)
    differing = [k for k in a if a[k] != b.get(k)]
    detail(request, f"{len(a)} files compared, {len(differing)} differ")
    assert a.keys() == b.keys()
    assert not differing, differing
    report = json.loads(a["report.json"])
    assert np.isfinite(report["fid"])


# ---------------------------------------------------------------- 10. functionality

@criterion(10, "augmentation controls: held-out real within 0.02 of baseline, noise never +0.005")
def test_c10_functionality_controls(request):
    n = DESK_MODEL.seq_len
    for seed in range(3):
        split = D.make_splits(synthetic_beats(600, n, 300 + seed), seed)[0]
        held_out = synthetic_beats(200, n, 900 + seed)
        rows = E.functionality_assessment(
            split, {"held_out_real": held_out, "noise": lambda c, k, s: noise_beats(c, n, s)},
            seed, count=len(split.classifier_train) // 4, config=DESK_CLASSIFIER)
        acc = {r["source"]: r["accuracy"] for r in rows}
        detail(request, f"s{seed} base {acc['original']:.3f} real {acc['held_out_real']:.3f} "
                        f"noise {acc['noise']:.3f}")
        assert abs(acc["held_out_real"] - acc["original"]) <= 0.02
        assert acc["noise"] - acc["original"] <= 0.005
