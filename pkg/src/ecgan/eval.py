"""Sample-quality evaluation in the feature space of an arrhythmia classifier.

Metrics: inception score, Fréchet distance, kernel MMD (linear / RBF),
1-D Wasserstein distance on the leading principal feature, DTW diversity,
ECG segment durations and the augmentation-based functionality protocol.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numba
import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .data import BeatSet, DatasetSplit
from .nn import Adam, Conv1dBlock, Linear, Module
from .rng import stream

SEGMENTS = ("QT", "QRS", "PR", "ST")


# ---------------------------------------------------------------- classifier C

@dataclass(frozen=True)
class ClassifierConfig:
    channels: tuple[int, ...] = (128, 64, 32)
    kernel_size: int = 6
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 3e-3


class Classifier(Module):
    """Discriminator-shaped conv stack with a softmax head."""

    def __init__(self, num_classes: int, rng: np.random.Generator,
                 config: ClassifierConfig = ClassifierConfig()):
        chans = (1,) + tuple(config.channels)
        self.config = config
        self.num_classes = num_classes
        self.blocks = [Conv1dBlock(a, b, rng, config.kernel_size) for a, b in zip(chans, chans[1:])]
        self.head = Linear(chans[-1], num_classes, rng)

    def features_tensor(self, x) -> Tensor:
        x = ad.as_tensor(x)
        h = ad.reshape(x, (x.shape[0], 1, x.shape[1]))
        for block in self.blocks:
            h = block(h)
        return ad.global_avg_pool(h)

    def logits(self, x) -> Tensor:
        return self.head(self.features_tensor(x))

    def _batched(self, x: np.ndarray, fn, chunk: int = 256) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        with ad.no_grad():
            parts = [fn(x[i:i + chunk]).data for i in range(0, len(x), chunk)]
        return np.concatenate(parts) if parts else np.zeros((0, 0))

    def predict_proba(self, x: np.ndarray) -> np.ndarray:
        return ad.softmax(self._batched(x, self.logits))

    def features(self, x: np.ndarray) -> np.ndarray:
        return self._batched(x, self.features_tensor)


def _log_loss(clf: Classifier, beats: BeatSet) -> float:
    p = clf.predict_proba(beats.values)[np.arange(len(beats)), beats.labels]
    return float(-np.log(np.clip(p, 1e-300, None)).mean())


def fit_classifier(train: BeatSet, tune: BeatSet | None, seed: int,
                   config: ClassifierConfig = ClassifierConfig()) -> Classifier:
    """Cross-entropy + Adam; the epoch with the lowest tune cross-entropy is kept.

    Cross-entropy rather than accuracy: on separable data accuracy saturates
    after an epoch or two and would freeze an under-confident model.
    """
    if len(train) == 0:
        raise ValueError("empty classifier training set")
    clf = Classifier(len(train.classes), stream(seed, "init", "classifier"), config)
    opt = Adam(clf.parameters(), config.learning_rate)
    best, best_state = np.inf, None
    for epoch in range(config.epochs):
        order = stream(seed, "shuffle", "classifier", epoch).permutation(len(train))
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            clf.zero_grad()
            loss = ad.softmax_cross_entropy(clf.logits(train.values[idx]), train.labels[idx])
            loss.backward()
            opt.step()
        score = _log_loss(clf, tune if tune is not None and len(tune) else train)
        if score < best:
            best = score
            best_state = {k: p.data.copy() for k, p in clf.named_parameters()}
    for k, p in clf.named_parameters():
        p.data[...] = best_state[k]
    return clf


def train_classifier(split: DatasetSplit, seed: int,
                     config: ClassifierConfig = ClassifierConfig()) -> Classifier:
    return fit_classifier(split.classifier_train, split.classifier_tune, seed, config)


def extract_features(classifier: Classifier, beats: BeatSet | np.ndarray) -> np.ndarray:
    """Global-average-pool activations, one row per beat."""
    values = beats.values if isinstance(beats, BeatSet) else beats
    return classifier.features(values)


# ---------------------------------------------------------------- distribution metrics

def inception_score(preds: np.ndarray) -> float:
    """exp(E_x KL(p(y|x) || p(y))) with natural logarithms."""
    p = np.asarray(preds, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("inception_score needs a non-empty (samples, classes) matrix")
    if (p < -1e-12).any() or not np.allclose(p.sum(axis=1), 1.0, atol=1e-6):
        raise ValueError("prediction rows must be probability vectors")
    p = np.clip(p, 0.0, None)
    marginal = p.mean(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(marginal)), 0.0)
    # the mean KL is a mutual information, so it lies in [0, log K];
    # clamping only removes summation roundoff at the ends
    mi = min(max(float(terms.sum(axis=1).mean()), 0.0), math.log(p.shape[1]))
    return math.exp(mi)


@dataclass
class FeatureStats:
    mu: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        d = self.mu.size
        if self.cov.shape != (d, d):
            raise ShapeError(f"covariance shape {self.cov.shape} does not match mean of size {d}")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        if np.linalg.eigvalsh(self.cov).min() < -1e-8:
            raise ValueError("covariance must be positive semi-definite")

    @classmethod
    def from_features(cls, features: np.ndarray) -> FeatureStats:
        f = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if f.shape[0] == 0:
            raise ValueError("no feature rows")
        cov = np.cov(f, rowvar=False) if f.shape[0] > 1 else np.zeros((f.shape[1], f.shape[1]))
        return cls(f.mean(axis=0), np.atleast_2d(cov), f.shape[0])


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def fid(stats_r: FeatureStats, stats_g: FeatureStats, squared_mean: bool = True) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    Tr((C_r C_g)^1/2) is evaluated as Tr((C_r^1/2 C_g C_r^1/2)^1/2) through
    symmetric eigendecompositions. ``squared_mean=False`` uses the plain norm
    of the mean difference instead of its square.
    """
    if stats_r.mu.shape != stats_g.mu.shape:
        raise ShapeError(f"feature dimensions differ: {stats_r.mu.size} vs {stats_g.mu.size}")
    diff = stats_r.mu - stats_g.mu
    mean_term = float(diff @ diff) if squared_mean else float(np.linalg.norm(diff))
    s = _psd_sqrt(stats_r.cov)
    inner = s @ stats_g.cov @ s
    eig = np.clip(np.linalg.eigvalsh((inner + inner.T) / 2), 0.0, None)
    trace = np.trace(stats_r.cov) + np.trace(stats_g.cov) - 2.0 * np.sqrt(eig).sum()
    return max(0.0, mean_term + float(trace))


def median_heuristic(features: np.ndarray) -> float:
    f = np.atleast_2d(np.asarray(features, dtype=np.float64))
    sq = (f * f).sum(axis=1)
    d2 = np.clip(sq[:, None] + sq[None, :] - 2 * f @ f.T, 0.0, None)
    iu = np.triu_indices(len(f), k=1)
    med = float(np.median(np.sqrt(d2[iu]))) if iu[0].size else 0.0
    return med if med > 0 else 1.0


def _kernel(a: np.ndarray, b: np.ndarray, kind: str, sigma: float) -> np.ndarray:
    if kind == "linear":
        return a @ b.T
    if kind == "rbf":
        d2 = (a * a).sum(1)[:, None] + (b * b).sum(1)[None, :] - 2 * a @ b.T
        return np.exp(-np.clip(d2, 0.0, None) / (2 * sigma * sigma))
    raise ValueError(f"unknown kernel {kind!r}")


def mmd(features_r: np.ndarray, features_g: np.ndarray, kernel: str = "linear",
        sigma: float | None = None) -> float:
    """Biased (V-statistic) estimate of squared MMD."""
    r = np.atleast_2d(np.asarray(features_r, dtype=np.float64))
    g = np.atleast_2d(np.asarray(features_g, dtype=np.float64))
    if r.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("mmd needs non-empty sample sets")
    if r.shape[1] != g.shape[1]:
        raise ShapeError(f"feature dimensions differ: {r.shape[1]} vs {g.shape[1]}")
    if kernel == "rbf" and sigma is None:
        sigma = median_heuristic(r)
    krr = _kernel(r, r, kernel, sigma).mean()
    kgg = _kernel(g, g, kernel, sigma).mean()
    krg = _kernel(r, g, kernel, sigma).mean()
    return float(krr - 2 * krg + kgg)


def wasserstein_1d(values_r, values_g) -> float:
    """W1 between two empirical scalar distributions via their quantile functions.

    Equal-size samples compare sorted values directly; otherwise both quantile
    functions are linearly interpolated onto a common grid of max(n_r, n_g)
    mid-point levels.
    """
    r = np.sort(np.asarray(values_r, dtype=np.float64).ravel())
    g = np.sort(np.asarray(values_g, dtype=np.float64).ravel())
    if r.size == 0 or g.size == 0:
        raise ValueError("wasserstein_1d needs non-empty samples")
    if r.size == g.size:
        return float(np.abs(r - g).mean())
    m = max(r.size, g.size)
    u = (np.arange(m) + 0.5) / m

    def q(s):
        return np.interp(u, (np.arange(s.size) + 0.5) / s.size, s)

    return float(np.abs(q(r) - q(g)).mean())


def leading_component(features_r: np.ndarray, features_g: np.ndarray) -> np.ndarray:
    pooled = np.vstack([features_r, features_g])
    centred = pooled - pooled.mean(axis=0)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    v = vt[0]
    return v if v[np.argmax(np.abs(v))] >= 0 else -v


def projected_wasserstein(features_r: np.ndarray, features_g: np.ndarray) -> float:
    """W1 between both sets projected on the first principal axis of the pool."""
    r = np.atleast_2d(features_r)
    g = np.atleast_2d(features_g)
    v = leading_component(r, g)
    return wasserstein_1d(r @ v, g @ v)


# ---------------------------------------------------------------- DTW

@numba.njit(cache=False)
def _dtw_cost(a, b):
    n, m = a.shape[0], b.shape[0]
    prev = np.full(m + 1, np.inf)
    cur = np.full(m + 1, np.inf)
    prev[0] = 0.0
    for i in range(1, n + 1):
        cur[0] = np.inf
        for j in range(1, m + 1):
            d = a[i - 1] - b[j - 1]
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = d * d + best
        prev, cur = cur, prev
    return prev[m]


def dtw(a, b) -> float:
    """Unconstrained DTW with squared local cost; returns sqrt of the path cost."""
    a = np.ascontiguousarray(a, dtype=np.float64).ravel()
    b = np.ascontiguousarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("dtw needs non-empty sequences")
    return math.sqrt(_dtw_cost(a, b))


def dtw_matrix(samples, reference=None) -> tuple[np.ndarray, float]:
    """Pairwise DTW matrix and a collapse score.

    The score is the median off-diagonal DTW distance divided by the median
    beat energy (L2 norm); values near 0 indicate near-identical samples.
    Energy is taken from ``reference`` beats (typically the real set) when
    given, otherwise from the samples themselves.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    k = len(x)
    mat = np.zeros((k, k))
    for i in range(k):
        for j in range(i + 1, k):
            mat[i, j] = mat[j, i] = dtw(x[i], x[j])
    return mat, collapse_score(mat, x if reference is None else reference)


def collapse_score(mat: np.ndarray, samples: np.ndarray) -> float:
    """Median off-diagonal distance over the median L2 norm of ``samples``.

    Normalising by the generated beats alone is scale free, so a generator
    that shrinks every output towards the same flat line still looks
    diverse; passing real beats as ``samples`` fixes the scale.
    """
    iu = np.triu_indices(len(mat), k=1)
    if not iu[0].size:
        return 0.0
    spread = float(np.median(mat[iu]))
    if spread == 0.0:
        return 0.0
    energy = float(np.median(np.linalg.norm(np.atleast_2d(samples), axis=1)))
    return spread / energy if energy > 0 else math.inf


# ---------------------------------------------------------------- segments

def _walk_edge(slope: np.ndarray, start: int, direction: int, search: int,
               bound: int) -> float | None:
    """Edge of the wave flank next to ``start``.

    Finds the steepest sample within ``search`` samples of ``start`` in
    ``direction``, then keeps walking until |slope| drops below 10% of that
    peak; returns the interpolated crossing (or ``bound`` if never crossed).
    """
    n = slope.size
    lo, hi = (start, min(n - 1, start + search, bound)) if direction > 0 else \
        (max(0, start - search, bound), start)
    if hi <= lo:
        return None
    mag = np.abs(slope)
    peak_i = lo + int(np.argmax(mag[lo:hi + 1]))
    peak = mag[peak_i]
    if peak <= 0:
        return None
    level = 0.1 * peak
    i = peak_i
    stop = min(n - 1, bound) if direction > 0 else max(0, bound)
    while i != stop:
        j = i + direction
        if mag[j] < level:
            # linear interpolation of the crossing between i and j
            frac = (mag[i] - level) / (mag[i] - mag[j])
            return i + direction * frac
        i = j
    return None if stop in (0, n - 1) and mag[stop] >= level else float(stop)


def _interior_extremum(x: np.ndarray, lo: int, hi: int, kind: str) -> int | None:
    lo, hi = max(0, lo), min(x.size - 1, hi)
    if hi - lo < 2:
        return None
    seg = x[lo:hi + 1]
    i = int(np.argmax(seg) if kind == "max" else np.argmin(seg))
    if i in (0, len(seg) - 1):
        return None
    return lo + i


def delineate(beat, sampling_rate: float) -> dict[str, float | None]:
    """Fiducial points (in samples) of a single beat; missing ones are None."""
    x = np.asarray(beat, dtype=np.float64).ravel()
    pts: dict[str, float | None] = dict.fromkeys(
        ("R", "Q", "S", "T", "P", "Q_on", "S_off", "T_on", "T_off", "P_on"))
    if x.size < 5 or np.ptp(x) <= 1e-9 * max(1e-300, np.abs(x).max()):
        return pts
    fs = sampling_rate

    def ms(sec):
        return max(1, int(round(sec * fs)))

    slope = np.gradient(x)
    r = int(np.argmax(x))
    pts["R"] = r
    q = _interior_extremum(x, r - ms(0.08), r, "min")
    s = _interior_extremum(x, r, r + ms(0.08), "min")
    pts["Q"], pts["S"] = q, s
    if q is not None:
        pts["Q_on"] = _walk_edge(slope, q, -1, ms(0.08), 0)
    if s is not None:
        pts["S_off"] = _walk_edge(slope, s, +1, ms(0.08), x.size - 1)
    if s is not None:
        t = _interior_extremum(x, s + ms(0.04), s + ms(0.4), "max")
        pts["T"] = t
        if t is not None:
            floor = int(math.ceil(pts["S_off"])) if pts["S_off"] is not None else s
            pts["T_on"] = _walk_edge(slope, t, -1, ms(0.2), floor)
            pts["T_off"] = _walk_edge(slope, t, +1, ms(0.2), x.size - 1)
    if q is not None:
        p = _interior_extremum(x, q - ms(0.3), q - ms(0.04), "max")
        pts["P"] = p
        if p is not None:
            pts["P_on"] = _walk_edge(slope, p, -1, ms(0.15), 0)
    return pts


def segment_durations(beat, sampling_rate: float) -> dict[str, float | None]:
    """QT, QRS, PR and ST durations in seconds; None marks an absent segment."""
    p = delineate(beat, sampling_rate)

    def span(a, b):
        if p[a] is None or p[b] is None:
            return None
        return (p[b] - p[a]) / sampling_rate

    return {
        "QT": span("Q_on", "T_off"),
        "QRS": span("Q_on", "S_off"),
        "PR": span("P_on", "Q_on"),
        "ST": span("S_off", "T_on"),
    }


def segment_summary(beats: BeatSet, sampling_rate: float) -> dict[str, dict[str, dict[str, float | int | None]]]:
    out = {}
    for ci, name in enumerate(beats.classes):
        rows = [segment_durations(v, sampling_rate) for v in beats.values[beats.labels == ci]]
        out[name] = {}
        for seg in SEGMENTS:
            vals = np.array([r[seg] for r in rows if r[seg] is not None])
            out[name][seg] = {
                "mean": float(vals.mean()) if vals.size else None,
                "std": float(vals.std()) if vals.size else None,
                "count": int(vals.size),
            }
    return out


# ---------------------------------------------------------------- functionality

def classification_metrics(y_true: np.ndarray, y_pred: np.ndarray, positive: int = 1) -> dict[str, float]:
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    tp = int(((y_pred == positive) & (y_true == positive)).sum())
    tn = int(((y_pred != positive) & (y_true != positive)).sum())
    fp = int(((y_pred == positive) & (y_true != positive)).sum())
    fn = int(((y_pred != positive) & (y_true == positive)).sum())

    def ratio(a, b):
        return a / b if b else 0.0

    precision = ratio(tp, tp + fp)
    sensitivity = ratio(tp, tp + fn)
    return {
        "accuracy": ratio(tp + tn, len(y_true)),
        "specificity": ratio(tn, tn + fp),
        "sensitivity": sensitivity,
        "precision": precision,
        "f1": ratio(2 * precision * sensitivity, precision + sensitivity),
    }


SampleSource = Callable[[int, int, int], np.ndarray]


def _draw(source: BeatSet | SampleSource, count: int, classes: Sequence[str], seed: int) -> BeatSet:
    per = [count // len(classes) + (1 if i < count % len(classes) else 0) for i in range(len(classes))]
    values, labels = [], []
    for ci, k in enumerate(per):
        if k == 0:
            continue
        if isinstance(source, BeatSet):
            pool = source.values[source.labels == ci]
            if len(pool) < k:
                raise ValueError(f"source has only {len(pool)} beats of class {classes[ci]}")
            values.append(pool[:k])
        else:
            values.append(np.asarray(source(k, ci, seed), dtype=np.float64))
        labels.append(np.full(k, ci))
    return BeatSet(np.concatenate(values), np.concatenate(labels), tuple(classes))


def functionality_assessment(split: DatasetSplit, sources: Mapping[str, BeatSet | SampleSource],
                             seed: int, count: int | None = None,
                             config: ClassifierConfig = ClassifierConfig()) -> list[dict]:
    """Retrain C with a fixed number of balanced extra beats per source.

    Each source is either a labelled BeatSet or a callable
    ``(count, label_index, seed) -> (count, n) array``. The first row is the
    unaugmented baseline; all rows are scored on the untouched test set.
    """
    train, test = split.classifier_train, split.classifier_test
    classes = train.classes
    positive = classes.index("V") if "V" in classes else len(classes) - 1
    count = len(train) // 4 if count is None else count

    def evaluate(name, trainset):
        clf = fit_classifier(trainset, split.classifier_tune, seed, config)
        pred = clf.predict_proba(test.values).argmax(axis=1)
        return {"source": name, **classification_metrics(test.labels, pred, positive)}

    rows = [evaluate("original", train)]
    for name, source in sources.items():
        extra = _draw(source, count, classes, seed)
        merged_v = np.concatenate([train.values, extra.values])
        merged_y = np.concatenate([train.labels, extra.labels])
        order = stream(seed, "augment", name).permutation(len(merged_y))
        rows.append(evaluate(name, BeatSet(merged_v[order], merged_y[order], classes)))
    return rows


# ---------------------------------------------------------------- report

def metric_report(model_tag: str, seed: int, classifier: Classifier, real: BeatSet,
                  generated: BeatSet, sampling_rate: float, rbf_sigma: float | None = None,
                  squared_mean: bool = True) -> dict:
    fr = extract_features(classifier, real)
    fg = extract_features(classifier, generated)
    _, collapse = dtw_matrix(generated.values[:30], real.values)
    return {
        "model_tag": model_tag,
        "seed": seed,
        "is": inception_score(classifier.predict_proba(generated.values)),
        "fid": fid(FeatureStats.from_features(fr), FeatureStats.from_features(fg), squared_mean),
        "mmd_linear": mmd(fr, fg, "linear"),
        "mmd_rbf": mmd(fr, fg, "rbf", rbf_sigma),
        "wasserstein": projected_wasserstein(fr, fg),
        "collapse_score": collapse,
        "segments": segment_summary(generated, sampling_rate),
        "segments_real": segment_summary(real, sampling_rate),
    }
