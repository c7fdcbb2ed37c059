"""Gaussian-bump ECG surrogates with known ground truth.

Used as the desk-scale stand-in for PhysioNet data: a two-class (N/V) beat
family, single beats with analytically placed waves for delineation checks,
and continuous multi-beat records for exercising the WFDB pipeline.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq

from .data import BeatSet, EcgRecord, normalize
from .rng import stream

CLASSES = ("N", "V")


def _slope_ratio(u: float) -> float:
    # |g'(u sigma)| / max|g'| for a unit Gaussian, minus the 10% level
    return u * np.exp(-(u * u - 1) / 2) - 0.1


# Half-width (in sigmas) at which a Gaussian wave's slope falls to 10% of its peak.
EDGE_SIGMAS = brentq(_slope_ratio, 1.0, 6.0)


@dataclass(frozen=True)
class Wave:
    center: float
    sigma: float
    amplitude: float

    def __call__(self, t: np.ndarray) -> np.ndarray:
        return self.amplitude * np.exp(-0.5 * ((t - self.center) / self.sigma) ** 2)

    @property
    def onset(self) -> float:
        return self.center - EDGE_SIGMAS * self.sigma

    @property
    def offset(self) -> float:
        return self.center + EDGE_SIGMAS * self.sigma


def _beat_waves(label: str, n: int, rng: np.random.Generator) -> list[Wave]:
    def j(v, spread):
        return v * rng.uniform(1 - spread, 1 + spread)

    def pos(frac):
        return (frac + rng.uniform(-0.015, 0.015)) * n

    def width(frac):
        return max(0.8, j(frac * n, 0.15))

    if label == "N":
        return [
            Wave(pos(0.30), width(0.035), j(0.15, 0.2)),
            Wave(pos(0.455), width(0.014), -j(0.12, 0.2)),
            Wave(0.5 * n, width(0.016), j(1.0, 0.1)),
            Wave(pos(0.545), width(0.014), -j(0.22, 0.2)),
            Wave(pos(0.76), width(0.055), j(0.32, 0.2)),
        ]
    if label == "V":
        return [
            Wave(0.5 * n, width(0.05), j(1.0, 0.1)),
            Wave(pos(0.60), width(0.045), -j(0.45, 0.2)),
            Wave(pos(0.80), width(0.07), -j(0.35, 0.2)),
        ]
    raise ValueError(f"unknown synthetic class {label!r}")


def synthetic_beats(count: int, n: int, seed: int, noise: float = 0.02) -> BeatSet:
    """Balanced two-class beat family, min-max normalised to [-1, 1]."""
    rng = stream(seed, "synth", "beats")
    t = np.arange(n, dtype=np.float64)
    labels = np.arange(count) % 2
    rng.shuffle(labels)
    values = np.empty((count, n))
    for i, y in enumerate(labels):
        sig = sum(w(t) for w in _beat_waves(CLASSES[y], n, rng))
        sig = sig + rng.uniform(-0.05, 0.05) * np.sin(2 * np.pi * t / n + rng.uniform(0, 2 * np.pi))
        sig = sig + rng.normal(0.0, noise, size=n)
        values[i] = normalize(sig)
    return BeatSet(values, labels, CLASSES, ["synthetic"] * count)


def noise_beats(count: int, n: int, seed: int) -> np.ndarray:
    """i.i.d. uniform noise in [-1, 1], a negative control for sample quality."""
    return stream(seed, "synth", "noise").uniform(-1.0, 1.0, size=(count, n))


def delineation_beat(rng: np.random.Generator, fs: float = 250.0, duration: float = 1.0,
                     amplitude: float = 1.0) -> tuple[np.ndarray, dict[str, float]]:
    """A normal beat with jittered P, Q, R, S, T waves and its segment truth.

    Wave edges are defined where a wave's own slope falls to 10% of its peak
    slope, which is what the delineator measures on well-separated waves.
    """
    r = 0.4 * duration
    p = Wave(r - rng.uniform(0.15, 0.19), rng.uniform(0.018, 0.026), rng.uniform(0.1, 0.2))
    q = Wave(r - rng.uniform(0.022, 0.028), rng.uniform(0.007, 0.009), -rng.uniform(0.1, 0.2))
    rw = Wave(r, rng.uniform(0.008, 0.011), 1.0)
    s = Wave(r + rng.uniform(0.022, 0.028), rng.uniform(0.007, 0.009), -rng.uniform(0.15, 0.3))
    tw = Wave(r + rng.uniform(0.26, 0.32), rng.uniform(0.035, 0.045), rng.uniform(0.25, 0.4))
    t = np.arange(int(round(duration * fs))) / fs
    beat = amplitude * sum(w(t) for w in (p, q, rw, s, tw))
    truth = {
        "QRS": s.offset - q.onset,
        "QT": tw.offset - q.onset,
        "PR": q.onset - p.onset,
        "ST": tw.onset - s.offset,
    }
    return beat, truth


def synthetic_record(seconds: float, fs: float, seed: int, v_every: int = 4,
                     heart_rate: float = 72.0) -> EcgRecord:
    """Continuous two-lead record with N beats and a PVC every ``v_every`` beats.

    Annotations carry MIT-BIH symbols ("N"/"V") at each R peak.
    """
    rng = stream(seed, "synth", "record")
    total = int(round(seconds * fs))
    t = np.arange(total) / fs
    sig = np.zeros(total)
    ann = []
    rr = 60.0 / heart_rate
    k = 0
    r = 0.5 * rr
    while r < seconds - 0.5 * rr:
        label = "V" if v_every and k % v_every == v_every - 1 else "N"
        span = rr * fs
        local = _beat_waves(label, 100, rng)
        for w in local:
            # waves are placed relative to a 100-sample beat centred at 50
            centre = r + (w.center - 50.0) / 100.0 * rr
            sig += Wave(centre * fs, w.sigma / 100.0 * span, w.amplitude)(np.arange(total))
        ann.append((int(round(r * fs)), label))
        r += rr * rng.uniform(0.92, 1.08)
        k += 1
    sig += 0.02 * np.sin(2 * np.pi * 0.3 * t) + rng.normal(0.0, 0.01, size=total)
    second = 0.6 * sig + rng.normal(0.0, 0.01, size=total)
    return EcgRecord(np.stack([sig, second]), fs, ["MLII", "V1"], ann, "synthetic")
