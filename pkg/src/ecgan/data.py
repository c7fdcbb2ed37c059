"""ECG ingestion and preprocessing.

Covers WFDB format-212 records with a CSV annotation sidecar, pre-segmented
CSV beat files, R-peak detection, beat extraction around R peaks, linear
resampling, N/V class filtering with undersampling, and the five randomised
hold-out splits.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .rng import stream

# AAMI EC57 beat classes from MIT-BIH annotation symbols
AAMI_CLASSES = {
    **dict.fromkeys("NLRej", "N"),
    **dict.fromkeys("AaJS", "S"),
    **dict.fromkeys("VE", "V"),
    "F": "F",
    **dict.fromkeys("/fQ", "Q"),
}
# ECG5000 label codes: 1 normal, 2 R-on-T PVC, 3 PVC, 4 SP, 5 unclassified
ECG5000_CLASSES = {"1": "N", "2": "V", "3": "V"}

KEEP_CLASSES = ("N", "V")
CLASSIFIER_FRACTION = 0.25
N_SPLITS = 5


class DataError(ValueError):
    pass


@dataclass
class EcgRecord:
    signals: np.ndarray            # (n_leads, n_samples), millivolts
    sampling_rate: float
    lead_names: list[str]
    annotations: list[tuple[int, str]] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.signals = np.atleast_2d(np.asarray(self.signals, dtype=np.float64))
        if self.sampling_rate <= 0:
            raise DataError("sampling rate must be positive")
        if len(self.lead_names) != self.signals.shape[0]:
            raise DataError("one lead name per signal row required")
        n = self.signals.shape[1]
        for idx, _ in self.annotations:
            if not 0 <= idx < n:
                raise DataError(f"annotation index {idx} outside record of {n} samples")


@dataclass
class EcgBeat:
    values: np.ndarray
    label: str
    source_record: str = ""


@dataclass
class BeatSet:
    """Array view over a list of beats: values (count, n), integer labels."""

    values: np.ndarray
    labels: np.ndarray
    classes: tuple[str, ...]
    sources: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] != len(self.labels):
            raise DataError(f"values {self.values.shape} do not match {len(self.labels)} labels")
        self.classes = tuple(self.classes)
        if not self.sources:
            self.sources = [""] * len(self.labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def from_beats(cls, beats: Sequence[EcgBeat], classes: Sequence[str] | None = None,
                   n: int | None = None) -> BeatSet:
        if classes is None:
            classes = sorted({b.label for b in beats})
        index = {c: i for i, c in enumerate(classes)}
        unknown = {b.label for b in beats} - set(index)
        if unknown:
            raise DataError(f"labels {sorted(unknown)} not in classes {list(classes)}")
        if beats:
            values = np.stack([b.values for b in beats])
        else:
            values = np.zeros((0, n or 0))
        return cls(values, np.array([index[b.label] for b in beats], dtype=np.int64),
                   tuple(classes), [b.source_record for b in beats])

    def to_beats(self) -> list[EcgBeat]:
        return [EcgBeat(v.copy(), self.classes[y], s)
                for v, y, s in zip(self.values, self.labels, self.sources)]

    def subset(self, idx) -> BeatSet:
        idx = np.asarray(idx, dtype=np.int64)
        return BeatSet(self.values[idx], self.labels[idx], self.classes,
                       [self.sources[i] for i in idx])

    def counts(self) -> dict[str, int]:
        return {c: int((self.labels == i).sum()) for i, c in enumerate(self.classes)}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.values).astype("<f8").tobytes())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(",".join(self.classes).encode())
        return h.hexdigest()


@dataclass
class DatasetSplit:
    generative_set: BeatSet
    classifier_train: BeatSet
    classifier_tune: BeatSet
    classifier_test: BeatSet
    seed: int
    split_index: int


# ---------------------------------------------------------------- WFDB

@dataclass
class SignalSpec:
    file_name: str
    fmt: str
    gain: float
    baseline: int
    units: str
    description: str


_GAIN_RE = re.compile(r"^([-+0-9.eE]+)(?:\(([-+0-9]+)\))?(?:/(\S+))?$")


def parse_header(text: str) -> tuple[str, int, float, int | None, list[SignalSpec]]:
    """Parse a WFDB ``.hea`` header; returns (name, n_sig, fs, n_samples, signals)."""
    lines = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataError("empty WFDB header")
    rec = lines[0].split()
    if len(rec) < 2:
        raise DataError(f"malformed record line: {lines[0]!r}")
    name = rec[0]
    try:
        n_sig = int(rec[1])
        fs = float(rec[2].split("/")[0]) if len(rec) > 2 else 250.0
        n_samples = int(rec[3]) if len(rec) > 3 else None
    except ValueError as exc:
        raise DataError(f"malformed record line: {lines[0]!r}") from exc
    specs = []
    for ln in lines[1:1 + n_sig]:
        parts = ln.split()
        if len(parts) < 2:
            raise DataError(f"malformed signal line: {ln!r}")
        fmt = parts[1].split("x")[0].split(":")[0].split("+")[0]
        gain, baseline, units = 200.0, 0, "mV"
        if len(parts) > 2:
            m = _GAIN_RE.match(parts[2])
            if not m:
                raise DataError(f"malformed gain field: {parts[2]!r}")
            gain = float(m.group(1)) or 200.0
            if m.group(2) is not None:
                baseline = int(m.group(2))
            elif len(parts) > 4:
                baseline = int(parts[4])  # defaults to ADC zero
            if m.group(3):
                units = m.group(3)
        desc = " ".join(parts[8:]) if len(parts) > 8 else f"sig{len(specs)}"
        specs.append(SignalSpec(parts[0], fmt, gain, baseline, units, desc))
    if len(specs) != n_sig:
        raise DataError(f"header declares {n_sig} signals but lists {len(specs)}")
    return name, n_sig, fs, n_samples, specs


def decode_212(data: bytes | np.ndarray) -> np.ndarray:
    """Unpack format-212 bytes into interleaved signed 12-bit samples."""
    b = np.frombuffer(bytes(data), dtype=np.uint8) if not isinstance(data, np.ndarray) else data
    if b.size % 3:
        raise DataError(f"format 212 stream truncated: {b.size} bytes is not a multiple of 3")
    g = b.reshape(-1, 3).astype(np.int32)
    s1 = g[:, 0] | ((g[:, 1] & 0x0F) << 8)
    s2 = g[:, 2] | ((g[:, 1] & 0xF0) << 4)
    out = np.stack([s1, s2], axis=1).reshape(-1)
    out[out > 2047] -= 4096
    return out


def encode_212(samples: Sequence[int] | np.ndarray) -> bytes:
    """Pack signed 12-bit samples (even count) into format-212 bytes."""
    s = np.asarray(samples, dtype=np.int64)
    if s.size % 2:
        raise DataError("format 212 packs samples in pairs")
    if s.size and (s.min() < -2048 or s.max() > 2047):
        raise DataError("sample outside the signed 12-bit range")
    u = (s & 0xFFF).reshape(-1, 2)
    out = np.empty((u.shape[0], 3), dtype=np.uint8)
    out[:, 0] = u[:, 0] & 0xFF
    out[:, 1] = ((u[:, 0] >> 8) & 0x0F) | ((u[:, 1] >> 4) & 0xF0)
    out[:, 2] = u[:, 1] & 0xFF
    return out.tobytes()


def parse_wfdb_212(header_bytes: bytes | str, signal_bytes: bytes,
                   annotations: Sequence[tuple[int, str]] = ()) -> EcgRecord:
    text = header_bytes.decode("ascii") if isinstance(header_bytes, bytes) else header_bytes
    name, n_sig, fs, n_samples, specs = parse_header(text)
    for sp in specs:
        if sp.fmt != "212":
            raise DataError(f"unsupported WFDB format {sp.fmt!r} (only 212)")
    if n_sig != 2:
        raise DataError(f"format 212 reader expects 2 signals, header declares {n_sig}")
    raw = decode_212(signal_bytes).reshape(-1, n_sig)
    if n_samples is not None and n_samples > 0:
        if raw.shape[0] < n_samples:
            raise DataError(f"signal truncated: {raw.shape[0]} of {n_samples} samples")
        raw = raw[:n_samples]
    gains = np.array([sp.gain for sp in specs])
    base = np.array([sp.baseline for sp in specs])
    phys = (raw - base) / gains
    return EcgRecord(phys.T.copy(), fs, [sp.description for sp in specs], list(annotations), name)


def read_annotation_csv(path: str | os.PathLike) -> list[tuple[int, str]]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or (lineno == 1 and row[0].strip().lower() in ("sample", "sample_index")):
                continue
            try:
                out.append((int(row[0]), row[1].strip()))
            except (ValueError, IndexError) as exc:
                raise DataError(f"{path}:{lineno}: expected sample_index,symbol") from exc
    return out


def read_wfdb_record(record: str | os.PathLike, annotations: str | os.PathLike | None = None) -> EcgRecord:
    """Read ``<record>.hea`` / its ``.dat`` and an optional ``(sample,symbol)`` CSV."""
    record = Path(record)
    hea = record.with_suffix(".hea") if record.suffix != ".hea" else record
    header = hea.read_text()
    _, _, _, _, specs = parse_header(header)
    dat = hea.parent / specs[0].file_name
    ann = read_annotation_csv(annotations) if annotations else []
    return parse_wfdb_212(header, dat.read_bytes(), ann)


def write_wfdb_record(record: str | os.PathLike, digital: np.ndarray, fs: float,
                      gains: Sequence[float] = (200.0, 200.0), baselines: Sequence[int] = (0, 0),
                      lead_names: Sequence[str] = ("MLII", "V1")) -> None:
    """Write a two-signal format-212 record (used to build fixtures)."""
    record = Path(record)
    digital = np.asarray(digital, dtype=np.int64)
    if digital.shape[0] != 2:
        raise DataError("expected (2, n_samples) digital samples")
    name = record.name
    n = digital.shape[1]
    lines = [f"{name} 2 {fs:g} {n}"]
    for g, b, lead in zip(gains, baselines, lead_names):
        lines.append(f"{name}.dat 212 {g:g}({b})/mV 12 0 0 0 0 {lead}")
    record.with_suffix(".hea").write_text("\n".join(lines) + "\n")
    record.with_suffix(".dat").write_bytes(encode_212(digital.T.reshape(-1)))


# ---------------------------------------------------------------- CSV beats

def normalize(values: np.ndarray) -> np.ndarray:
    """Per-beat min-max scaling to [-1, 1]; a flat beat maps to zeros."""
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-12:
        return np.zeros_like(v)
    return 2.0 * (v - lo) / (hi - lo) - 1.0


def load_csv_beats(path: str | os.PathLike, n: int | None = None, normalized: bool = True,
                   source: str | None = None) -> list[EcgBeat]:
    """Read ``label,v1,...,vn`` rows; an optional header row starts with ``label``."""
    beats: list[EcgBeat] = []
    src = source if source is not None else Path(path).stem
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or all(not c.strip() for c in row):
                continue
            if lineno == 1 and row[0].strip().lower() == "label":
                continue
            label = row[0].strip()
            if n is None:
                n = len(row) - 1
            if len(row) - 1 != n:
                raise DataError(f"{path}:{lineno}: expected {n} values, found {len(row) - 1}")
            try:
                vals = np.array([float(c) for c in row[1:]])
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric value ({exc})") from None
            if not np.isfinite(vals).all():
                raise DataError(f"{path}:{lineno}: non-finite value")
            beats.append(EcgBeat(normalize(vals) if normalized else vals, label, src))
    return beats


def write_csv_beats(path: str | os.PathLike, beats: BeatSet | Sequence[EcgBeat], n: int | None = None,
                    prefix: Sequence[tuple[str, str]] = ()) -> None:
    """Write beats with a header; ``prefix`` adds leading (column, value) pairs."""
    if isinstance(beats, BeatSet):
        n = beats.n if n is None else n
        beats = beats.to_beats()
    if n is None:
        n = len(beats[0].values) if beats else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c for c, _ in prefix] + ["label"] + [f"v{i + 1}" for i in range(n)])
        for b in beats:
            w.writerow([v for _, v in prefix] + [b.label] + [repr(float(v)) for v in b.values])


# ---------------------------------------------------------------- signal processing

def _moving_average(x: np.ndarray, width: int) -> np.ndarray:
    width = max(1, width)
    return np.convolve(x, np.ones(width) / width, mode="same")


def detect_r_peaks(signal, sampling_rate: float, threshold: float = 0.3,
                   refractory: float = 0.2) -> list[int]:
    """R-peak indices from thresholded derivative energy.

    The signal is low-passed over ~15 ms, its absolute first difference is
    smoothed over 150 ms (which keeps wide ventricular complexes at a level
    comparable to narrow ones), and regions above
    ``threshold`` times its 98th percentile mark QRS candidates, and the R
    peak is the sample of largest absolute deviation from the median within
    each region (+/- 50 ms). Candidates closer than ``refractory`` seconds to
    a stronger accepted peak are dropped.
    """
    x = np.asarray(signal, dtype=np.float64)
    if x.ndim != 1:
        raise DataError("detect_r_peaks expects a single lead")
    if x.size < 2 * sampling_rate:
        raise DataError("signal shorter than two seconds")
    smooth = _moving_average(x, max(1, int(round(0.015 * sampling_rate))))
    d = np.abs(np.diff(smooth, prepend=smooth[0]))
    energy = _moving_average(d, int(round(0.15 * sampling_rate)))
    ref = np.percentile(energy, 98)
    if ref <= 1e-12 * max(1.0, float(np.abs(x).max())):
        return []
    above = energy > threshold * ref
    edges = np.flatnonzero(np.diff(above.astype(np.int8)))
    starts = list(edges[~above[edges]] + 1)
    ends = list(edges[above[edges]] + 1)
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        ends.append(x.size)
    centred = np.abs(x - np.median(x))
    pad = int(round(0.05 * sampling_rate))
    cands = []
    for s, e in zip(starts, ends):
        lo, hi = max(0, s - pad), min(x.size, e + pad)
        cands.append(lo + int(np.argmax(centred[lo:hi])))
    gap = int(round(refractory * sampling_rate))
    peaks: list[int] = []
    for c in sorted(set(cands), key=lambda i: -centred[i]):
        if all(abs(c - p) >= gap for p in peaks):
            peaks.append(c)
    return sorted(peaks)


def interpolate(values: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample ``values`` onto ``length`` evenly spaced points."""
    v = np.asarray(values, dtype=np.float64)
    if length < 1:
        raise DataError("target length must be positive")
    if v.size == 1:
        return np.full(length, v[0])
    return np.interp(np.linspace(0, v.size - 1, length), np.arange(v.size), v)


def extract_beats(record: EcgRecord, r_peaks: Sequence[int], n: int, lead: int = 0,
                  label_tolerance: float = 0.15) -> list[EcgBeat]:
    """Cut one beat per interior R peak and resample it to ``n`` samples.

    The window is symmetric about R with half-width equal to the distance to
    the nearer RR midpoint, so R lands at index (n - 1) / 2. Labels come from
    the nearest annotation within ``label_tolerance`` seconds, mapped through
    AAMI classes; peaks without one are labelled ``"?"``.
    """
    peaks = np.asarray(sorted(r_peaks), dtype=np.int64)
    if peaks.size < 3:
        raise DataError("need at least 3 R peaks to extract beats")
    x = record.signals[lead]
    ann_idx = np.array([a[0] for a in record.annotations], dtype=np.int64)
    ann_sym = [a[1] for a in record.annotations]
    tol = label_tolerance * record.sampling_rate
    beats = []
    for prev, r, nxt in zip(peaks[:-2], peaks[1:-1], peaks[2:]):
        half = min((r - prev) / 2.0, (nxt - r) / 2.0)
        pos = np.linspace(r - half, r + half, n)
        vals = np.interp(pos, np.arange(x.size), x)
        label = "?"
        if ann_idx.size:
            k = int(np.argmin(np.abs(ann_idx - r)))
            if abs(ann_idx[k] - r) <= tol:
                sym = ann_sym[k]
                label = AAMI_CLASSES.get(sym, sym)
        beats.append(EcgBeat(normalize(vals), label, record.name))
    return beats


def resample(signal, from_hz: float = 360.0, to_hz: float = 125.0) -> np.ndarray:
    """Linear-interpolation resampling; output length round(len * to / from)."""
    x = np.asarray(signal, dtype=np.float64)
    m = int(round(x.size * to_hz / from_hz))
    if m < 1:
        raise DataError("signal too short to resample")
    t_out = np.arange(m) * (from_hz / to_hz)
    return np.interp(t_out, np.arange(x.size), x)


def resample_record(record: EcgRecord, to_hz: float) -> EcgRecord:
    ratio = to_hz / record.sampling_rate
    sig = np.stack([resample(s, record.sampling_rate, to_hz) for s in record.signals])
    m = sig.shape[1]
    ann = [(min(m - 1, int(round(i * ratio))), s) for i, s in record.annotations]
    return EcgRecord(sig, to_hz, list(record.lead_names), ann, record.name)


# ---------------------------------------------------------------- class handling

def map_labels(beats: Iterable[EcgBeat], mapping: dict[str, str]) -> list[EcgBeat]:
    """Relabel through ``mapping``; beats whose label is not mapped are dropped."""
    return [EcgBeat(b.values, mapping[b.label], b.source_record) for b in beats if b.label in mapping]


def filter_and_balance(beats: Sequence[EcgBeat], seed: int = 0,
                       keep: Sequence[str] = KEEP_CLASSES) -> list[EcgBeat]:
    """Keep ``keep`` classes and undersample every class to the minority count."""
    by_class = {c: [b for b in beats if b.label == c] for c in keep}
    present = [c for c in keep if by_class[c]]
    if len(present) < 2:
        raise DataError(f"need at least two of {list(keep)} to balance, found {present}")
    target = min(len(by_class[c]) for c in present)
    rng = stream(seed, "balance")
    out = []
    for c in present:
        group = by_class[c]
        idx = np.sort(rng.choice(len(group), size=target, replace=False))
        out.extend(group[i] for i in idx)
    return out


def classifier_count(total: int) -> int:
    return int(math.floor(CLASSIFIER_FRACTION * total + 0.5))


def make_splits(beats: BeatSet | Sequence[EcgBeat], seed: int, n_splits: int = N_SPLITS) -> list[DatasetSplit]:
    """Randomised hold-out splits.

    Each split reserves round(25%) of the beats for the classifier, halved into
    tune and test portions; the rest is the generative set, which also serves
    as the classifier's training data.
    """
    data = beats if isinstance(beats, BeatSet) else BeatSet.from_beats(beats)
    total = len(data)
    k = classifier_count(total)
    out = []
    for i in range(1, n_splits + 1):
        perm = stream(seed, "split", i).permutation(total)
        held, gen = perm[:k], np.sort(perm[k:])
        tune, test = np.sort(held[: k // 2]), np.sort(held[k // 2:])
        gen_set = data.subset(gen)
        out.append(DatasetSplit(gen_set, gen_set, data.subset(tune), data.subset(test), seed, i))
    return out


def dataset_manifest(split: DatasetSplit, source: str, sampling_rate: float | None = None) -> dict:
    gen = split.generative_set
    return {
        "source": source,
        "sampling_rate": sampling_rate,
        "n": gen.n,
        "classes": list(gen.classes),
        "counts": {
            "generative": gen.counts(),
            "classifier_tune": split.classifier_tune.counts(),
            "classifier_test": split.classifier_test.counts(),
        },
        "seed": split.seed,
        "split_index": split.split_index,
    }


def write_split(directory: str | os.PathLike, split: DatasetSplit, source: str,
                sampling_rate: float | None = None) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_csv_beats(d / "generative.csv", split.generative_set)
    write_csv_beats(d / "classifier_tune.csv", split.classifier_tune)
    write_csv_beats(d / "classifier_test.csv", split.classifier_test)
    (d / "dataset.json").write_text(json.dumps(dataset_manifest(split, source, sampling_rate), indent=2, sort_keys=True) + "\n")


def read_split_meta(directory: str | os.PathLike) -> dict:
    meta_path = Path(directory) / "dataset.json"
    if not meta_path.exists():
        raise DataError(f"{directory} is not a split directory (no dataset.json)")
    try:
        return json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{meta_path}: {exc}") from None


def read_split(directory: str | os.PathLike) -> DatasetSplit:
    d = Path(directory)
    meta = read_split_meta(d)
    classes = meta["classes"]

    def load(name):
        return BeatSet.from_beats(load_csv_beats(d / name, meta["n"], normalized=False), classes, meta["n"])

    gen = load("generative.csv")
    return DatasetSplit(gen, gen, load("classifier_tune.csv"), load("classifier_test.csv"),
                        meta["seed"], meta["split_index"])
