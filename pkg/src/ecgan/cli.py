"""Command-line entry point: synth, prep, train, sample, eval, rerun.

Every command validates its inputs before writing anything, then writes its
outputs plus a run manifest. Paths inside a manifest are stored as given on
the command line, so ``rerun --workdir DIR`` replays a command relative to
another directory. Exit codes: 0 success, 1 runtime/numeric failure, 2 usage
or input error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import eval as E
from . import synthetic as S
from . import train as T
from .autodiff import NumericError
from .model import ModelConfig

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- manifests

def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _dump_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_manifest(path, command: str, args: dict, config: dict | None = None,
                   inputs: list | None = None, dataset_hash: str | None = None,
                   provenance: dict | None = None) -> dict:
    manifest = {
        "artifact_version": __version__,
        "command": command,
        "args": args,
        "config": config or {},
        "seed": args.get("seed"),
        "dataset_hash": dataset_hash,
        "inputs": {str(p): _sha256(p) for p in (inputs or []) if Path(p).is_file()},
        "provenance": provenance or {},
        "timestamps": {"created": _timestamp()},
    }
    _dump_json(path, manifest)
    return manifest


def _cli_args(ns: argparse.Namespace) -> dict:
    return {k: v for k, v in sorted(vars(ns).items()) if k not in ("func",)}


# ---------------------------------------------------------------- helpers

def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} not found: {path}")
    return p


def _require_split(path) -> Path:
    p = Path(path)
    if not (p / "dataset.json").is_file():
        raise UsageError(f"dataset directory not found or incomplete: {path}")
    return p


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = _require_file(path, "config file")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise UsageError(f"{path}: top level must be an object")
    return cfg


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


LABEL_MAPS = {"none": None, "aami": D.AAMI_CLASSES, "ecg5000": D.ECG5000_CLASSES}


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    out = Path(args.out)
    if args.kind == "record":
        rec = S.synthetic_record(args.seconds, args.fs, args.seed)
        out.parent.mkdir(parents=True, exist_ok=True)
        digital = np.round(rec.signals * 200.0).astype(np.int64)
        D.write_wfdb_record(out, np.clip(digital, -2048, 2047), args.fs, lead_names=rec.lead_names)
        with open(out.with_suffix(".csv"), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "symbol"])
            w.writerows(rec.annotations)
        manifest_path = out.with_name(out.name + ".manifest.json")
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
        if args.kind == "beats":
            beats = S.synthetic_beats(args.count, args.n, args.seed)
        else:
            vals = S.noise_beats(args.count, args.n, args.seed)
            labels = np.arange(args.count) % 2
            beats = D.BeatSet(vals, labels, S.CLASSES)
        D.write_csv_beats(out, beats)
        manifest_path = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest_path, "synth", _cli_args(args))
    return EXIT_OK


# ---------------------------------------------------------------- prep

def cmd_prep(args) -> int:
    if args.format == "csv":
        if not args.inputs:
            raise UsageError("prep --format csv needs --in")
        paths = [_require_file(p, "input CSV") for p in args.inputs]
        n = args.n or 140
        beats = []
        for p in paths:
            for b in D.load_csv_beats(p):
                vals = b.values if len(b.values) == n else D.normalize(D.interpolate(b.values, n))
                beats.append(D.EcgBeat(vals, b.label, b.source_record))
        fs = args.fs if args.fs is not None else 125.0
        label_map = LABEL_MAPS[args.label_map or "none"]
    else:
        if not args.records:
            raise UsageError("prep --format wfdb needs --record")
        n = args.n or 187
        fs = args.fs if args.fs is not None else 125.0
        recs = []
        for r in args.records:
            hea = Path(r).with_suffix(".hea")
            _require_file(hea, "WFDB header")
            ann = Path(r).with_suffix(".csv")
            _require_file(ann, "annotation CSV")
            recs.append((r, ann))
        beats = []
        for r, ann in recs:
            rec = D.read_wfdb_record(r, ann)
            if rec.sampling_rate != fs:
                rec = D.resample_record(rec, fs)
            peaks = D.detect_r_peaks(rec.signals[0], rec.sampling_rate)
            beats.extend(D.extract_beats(rec, peaks, n))
        label_map = LABEL_MAPS[args.label_map or "none"]
        paths = [Path(r).with_suffix(".hea") for r, _ in recs] + [a for _, a in recs]
    if label_map is not None:
        beats = D.map_labels(beats, label_map)
    keep = tuple(args.classes.split(","))
    beats = D.filter_and_balance(beats, args.seed, keep) if args.balance else \
        [b for b in beats if b.label in keep]
    present = [c for c in keep if any(b.label == c for b in beats)]
    splits = D.make_splits(D.BeatSet.from_beats(beats, present, n), args.seed)
    if not 1 <= args.split_index <= len(splits):
        raise UsageError(f"--split-index must be in 1..{len(splits)}")
    split = splits[args.split_index - 1]
    out = Path(args.out)
    source = ",".join(str(p) for p in (args.inputs or args.records))
    D.write_split(out, split, source, fs)
    meta = D.read_split_meta(out)
    write_manifest(out / "manifest.json", "prep", _cli_args(args), {"dataset": meta},
                   inputs=paths, dataset_hash=split.generative_set.content_hash())
    print(json.dumps(meta["counts"], sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- train

TRAIN_FLAGS = ("mode", "seed", "epochs_ssl", "epochs_adv", "batch_size", "alpha_s", "alpha_g",
               "alpha_d", "clip_c", "d_steps_per_g", "lam", "ssl_conditioned", "unfreeze_latent")
MODEL_FLAGS = ("latent_height", "upsample", "enc_layers", "gen_hidden", "gen_layers",
               "disc_channels", "kernel_size")


def resolve_configs(args, n: int, num_classes: int) -> tuple[ModelConfig, T.TrainingConfig]:
    """flags > --config JSON > defaults, for both model and training fields."""
    file_cfg = _load_config(args.config)
    tfields = {f.name for f in dataclasses.fields(T.TrainingConfig)}
    mfields = {f.name for f in dataclasses.fields(ModelConfig)} - {"seq_len", "num_classes"}
    flat = dict(file_cfg.get("training", {}))
    model_part = dict(file_cfg.get("model", {}))
    for k, v in file_cfg.items():
        if k in ("training", "model"):
            continue
        if k == "lambda":
            k = "lam"
        if k in tfields:
            flat[k] = v
        elif k in mfields:
            model_part[k] = v
        else:
            raise UsageError(f"unknown config key {k!r}")
    unknown = (set(flat) - tfields) | (set(model_part) - mfields)
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)}")
    for k in TRAIN_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            flat[k] = v
    for k in MODEL_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            model_part[k] = v
    try:
        if "disc_channels" in model_part:
            model_part["disc_channels"] = tuple(model_part["disc_channels"])
        mcfg = ModelConfig(seq_len=n, num_classes=num_classes, **model_part)
        tcfg = T.TrainingConfig(**flat)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None
    return mcfg, tcfg


def cmd_train(args) -> int:
    data_dir = _require_split(args.data)
    resume = T.load_checkpoint(_require_file(args.resume, "checkpoint")) if args.resume else None
    split = D.read_split(data_dir)
    dataset = split.generative_set
    if len(dataset) == 0:
        raise UsageError(f"{data_dir}: empty generative set")
    mcfg, tcfg = resolve_configs(args, dataset.n, len(dataset.classes))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_manifest = {
        "classes": list(dataset.classes),
        "dataset_hash": dataset.content_hash(),
        "artifact_version": __version__,
    }
    result = T.train(dataset, mcfg, tcfg, out, ckpt_manifest, args.checkpoint_every, resume)
    ssl_offset = resume.epoch if resume is not None and resume.phase == "ssl" else 0
    adv_offset = tcfg.epochs_ssl + (resume.epoch if resume is not None and resume.phase == "adversarial" else 0)
    T.write_curves(out / "curves.csv", result.ssl_curve, result.g_curve, result.d_curve,
                   ssl_offset, adv_offset)
    write_manifest(out / "manifest.json", "train", _cli_args(args),
                   {"training": tcfg.to_dict(), "model": mcfg.to_dict()},
                   inputs=[data_dir / "dataset.json", data_dir / "generative.csv"],
                   dataset_hash=dataset.content_hash(),
                   provenance={"phase": "adversarial" if tcfg.epochs_adv else "ssl",
                               "epoch": tcfg.epochs_adv or tcfg.epochs_ssl,
                               "checkpoints": [p.name for p in result.checkpoints]})
    return EXIT_OK


# ---------------------------------------------------------------- sample

def _checkpoint_series(directory: Path) -> list[Path]:
    def order(p: Path):
        phase, _, epoch = p.stem.partition("-")
        return ({"ssl": 0, "adversarial": 1}.get(phase, 2), int(epoch) if epoch.isdigit() else 0)

    files = [p for p in directory.glob("*.ckpt") if p.name != "final.ckpt"]
    return sorted(files, key=order)


def _labels_for(label: str, classes: list[str]) -> list[int]:
    if label == "all":
        return list(range(len(classes)))
    if label not in classes:
        raise UsageError(f"unknown label {label!r}; checkpoint classes are {classes}")
    return [classes.index(label)]


def cmd_sample(args) -> int:
    if args.count < 0:
        raise UsageError("--count must be non-negative")
    if args.from_checkpoint_series:
        d = Path(args.from_checkpoint_series)
        if not d.is_dir():
            raise UsageError(f"checkpoint directory not found: {d}")
        paths = _checkpoint_series(d)
        if not paths:
            raise UsageError(f"no periodic checkpoints in {d}")
    else:
        if not args.checkpoint:
            raise UsageError("sample needs --checkpoint or --from-checkpoint-series")
        paths = [_require_file(args.checkpoint, "checkpoint")]
    ckpts = [(p, T.load_checkpoint(p)) for p in paths]
    rows: list[tuple[list, D.EcgBeat]] = []
    n = None
    for p, ck in ckpts:
        bundle, _, _ = T.restore(ck)
        classes = list(ck.manifest.get("classes", ["N", "V"]))
        n = bundle.config.seq_len
        for li in _labels_for(args.label, classes):
            for beat in T.sample(bundle, args.count, li, args.seed, tuple(classes)):
                rows.append(([p.name, ck.phase, str(ck.epoch)], beat))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    series = bool(args.from_checkpoint_series)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["checkpoint", "phase", "epoch"] if series else []) + ["label"]
                   + [f"v{i + 1}" for i in range(n)])
        for prefix, b in rows:
            w.writerow((prefix if series else []) + [b.label] + [repr(float(v)) for v in b.values])
    write_manifest(out.with_name(out.name + ".manifest.json"), "sample", _cli_args(args),
                   inputs=paths, provenance={"checkpoints": [
                       {"file": p.name, "phase": ck.phase, "epoch": ck.epoch} for p, ck in ckpts]})
    return EXIT_OK


# ---------------------------------------------------------------- eval

def _read_beats(path, n: int, classes: tuple[str, ...]) -> D.BeatSet:
    beats = D.load_csv_beats(_require_file(path, "beat CSV"), n, normalized=False)
    try:
        return D.BeatSet.from_beats(beats, classes, n)
    except D.DataError as exc:
        raise D.DataError(f"{path}: {exc}") from None


def cmd_eval(args) -> int:
    data_dir = _require_split(args.data)
    gen_path = _require_file(args.generated, "generated CSV")
    split = D.read_split(data_dir)
    meta = D.read_split_meta(data_dir)
    classes = split.generative_set.classes
    n = split.generative_set.n
    generated = _read_beats(gen_path, n, classes)
    real = _read_beats(args.real, n, classes) if args.real else split.generative_set
    if len(generated) == 0 or len(real) == 0:
        raise UsageError("eval needs non-empty real and generated sets")
    fs = args.fs or meta.get("sampling_rate") or 125.0
    ccfg = E.ClassifierConfig(channels=args.classifier_channels, epochs=args.classifier_epochs,
                              learning_rate=args.classifier_lr)
    clf = E.train_classifier(split, args.seed, ccfg)
    report = E.metric_report(args.tag, args.seed, clf, real, generated, fs,
                             squared_mean=not args.unsquared_fid)
    if args.functionality:
        report["functionality"] = E.functionality_assessment(
            split, {args.tag: generated}, args.seed, args.augment_count, ccfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    _dump_json(out, report)
    if args.features_out:
        fr, fg = E.extract_features(clf, real), E.extract_features(clf, generated)
        with open(args.features_out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["set", "label"] + [f"f{i + 1}" for i in range(fr.shape[1])])
            for name, bs, f in (("real", real, fr), ("generated", generated, fg)):
                for y, row in zip(bs.labels, f):
                    w.writerow([name, classes[y]] + [repr(float(v)) for v in row])
    write_manifest(out.with_name(out.name + ".manifest.json"), "eval", _cli_args(args),
                   {"classifier": dataclasses.asdict(ccfg)},
                   inputs=[data_dir / "dataset.json", gen_path],
                   dataset_hash=split.generative_set.content_hash())
    return EXIT_OK


# ---------------------------------------------------------------- rerun

@contextmanager
def _chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def cmd_rerun(args) -> int:
    manifest = json.loads(_require_file(args.manifest, "manifest").read_text())
    command = manifest.get("command")
    if command not in COMMANDS or command == "rerun":
        raise UsageError(f"manifest names unknown command {command!r}")
    stored = dict(manifest["args"])
    stored["command"] = command
    ns = argparse.Namespace(**stored, func=COMMANDS[command])
    workdir = Path(args.workdir) if args.workdir else Path.cwd()
    workdir.mkdir(parents=True, exist_ok=True)
    with _chdir(workdir):
        return ns.func(ns)


COMMANDS = {"synth": cmd_synth, "prep": cmd_prep, "train": cmd_train, "sample": cmd_sample,
            "eval": cmd_eval, "rerun": cmd_rerun}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ecgan", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic beats, noise beats or a WFDB record")
    s.add_argument("--kind", choices=("beats", "noise", "record"), default="beats")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=500)
    s.add_argument("--n", type=int, default=140)
    s.add_argument("--seconds", type=float, default=120.0)
    s.add_argument("--fs", type=float, default=360.0)
    s.add_argument("--seed", type=_seed, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prep", help="beat extraction, balancing and splits")
    s.add_argument("--format", choices=("csv", "wfdb"), required=True)
    s.add_argument("--in", dest="inputs", action="append", help="labelled beat CSV (repeatable)")
    s.add_argument("--record", dest="records", action="append",
                   help="WFDB record path without extension; annotations in <record>.csv")
    s.add_argument("--n", type=int, default=None, help="beat length (csv: 140, wfdb: 187)")
    s.add_argument("--fs", type=float, default=None, help="target sampling rate (default 125 Hz)")
    s.add_argument("--label-map", choices=sorted(LABEL_MAPS), default=None)
    s.add_argument("--classes", default="N,V")
    s.add_argument("--no-balance", dest="balance", action="store_false")
    s.add_argument("--split-index", type=int, default=1)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prep)

    s = sub.add_parser("train", help="SSL then adversarial training")
    s.add_argument("--data", required=True, help="split directory written by prep")
    s.add_argument("--out", required=True)
    s.add_argument("--config", default=None, help="JSON file with training/model options")
    s.add_argument("--mode", type=lambda v: v.replace("-", "_"), choices=T.MODES, default=None)
    s.add_argument("--seed", type=_seed, default=None)
    s.add_argument("--epochs-ssl", type=int, default=None)
    s.add_argument("--epochs-adv", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--alpha-s", type=float, default=None)
    s.add_argument("--alpha-g", type=float, default=None)
    s.add_argument("--alpha-d", type=float, default=None)
    s.add_argument("--clip-c", type=float, default=None)
    s.add_argument("--d-steps-per-g", type=int, default=None)
    s.add_argument("--lambda", dest="lam", type=float, default=None)
    s.add_argument("--no-ssl-conditioning", dest="ssl_conditioned", action="store_const",
                   const=False, default=None)
    s.add_argument("--unfreeze-latent", action="store_const", const=True, default=None)
    s.add_argument("--latent-height", type=int, default=None)
    s.add_argument("--upsample", type=int, default=None)
    s.add_argument("--enc-layers", type=int, default=None)
    s.add_argument("--gen-hidden", type=int, default=None)
    s.add_argument("--gen-layers", type=int, default=None)
    s.add_argument("--disc-channels", type=_int_list, default=None)
    s.add_argument("--kernel-size", type=int, default=None)
    s.add_argument("--checkpoint-every", type=int, default=0)
    s.add_argument("--resume", default=None, help="continue from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate beats from a checkpoint")
    s.add_argument("--checkpoint", default=None)
    s.add_argument("--from-checkpoint-series", default=None, metavar="DIR")
    s.add_argument("--count", type=int, default=30)
    s.add_argument("--label", default="all")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("eval", help="sample-quality report")
    s.add_argument("--data", required=True)
    s.add_argument("--generated", required=True)
    s.add_argument("--real", default=None, help="real beats CSV (default: the generative set)")
    s.add_argument("--out", required=True)
    s.add_argument("--tag", default="ecgan")
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--fs", type=float, default=None)
    s.add_argument("--classifier-channels", type=_int_list, default=(128, 64, 32))
    s.add_argument("--classifier-epochs", type=int, default=E.ClassifierConfig.epochs)
    s.add_argument("--classifier-lr", type=float, default=E.ClassifierConfig.learning_rate)
    s.add_argument("--unsquared-fid", action="store_true")
    s.add_argument("--functionality", action="store_true")
    s.add_argument("--augment-count", type=int, default=None)
    s.add_argument("--features-out", default=None)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("rerun", help="replay a command from its manifest")
    s.add_argument("manifest")
    s.add_argument("--workdir", default=None)
    s.set_defaults(func=cmd_rerun)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, D.DataError, T.CheckpointError, FileNotFoundError) as exc:
        print(f"ecgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, ArithmeticError) as exc:
        print(f"ecgan {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, KeyError) as exc:
        print(f"ecgan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except RuntimeError as exc:
        print(f"ecgan {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
