"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (e.g. a NaN loss).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff.checkpoint import atomic_write, load as load_arrays, save as save_arrays
from .encoder import EncoderConfig, SkeletonEncoder
from .errors import ConfigError, DataError, NumericError, SkelarError
from .har.backbones import BackboneConfig
from .har.dataset import load_sensor_dataset, save_sensor_dataset
from .har.synth import synth_imu_dataset, synth_skeleton_sequences
from .har.train import (TrainConfig, accuracy, few_shot_protocol, load_model, make_split, save_model,
                        stack_dataset, train_downstream, write_metrics)
from .matching import LabelBank, build_label_bank, write_heatmap_csv
from .pretrain import DropoutSchedule, Pretrainer, PretrainRun, truncate_metrics
from .skeleton import (JOINT_NAMES, NTU_JOINT_NAMES, load_corpus, prepare_sequence, read_json, read_ntu, save_corpus,
                       write_json, write_ntu)

log = logging.getLogger("skelar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

ENCODER_PRESETS = {"default": EncoderConfig, "small": EncoderConfig.small,
                   "tiny": lambda: EncoderConfig.tiny(frames=150)}
NTU_NAME = re.compile(r"P(\d{3}).*A(\d{3})")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _out_dir(args) -> Path:
    out = args.out or os.environ.get("SKELAR_OUT")
    if not out:
        raise UsageError("--out is required (or set SKELAR_OUT)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _settings(args, defaults, **flags) -> dict:
    file_layer = cfgmod.load_file(args.config) if args.config else {}
    flags["seed"] = args.seed
    return cfgmod.resolve(defaults, file_layer, flags, cfgmod.parse_overrides(args.overrides))


def _snapshot(out: Path, command: str, settings: dict) -> None:
    text = f"# resolved settings for '{command}'\n" + cfgmod.format_config(settings)
    atomic_write(out / "config.resolved.txt", text.encode("utf-8"))


def _write_json(path: Path, doc) -> None:
    atomic_write(path, (json.dumps(doc, indent=2, sort_keys=True) + "\n").encode("utf-8"))


# --------------------------------------------------------------------------
# commands


def _as_ntu25(seq):
    """Add the four NTU finger joints, placed on the matching hand."""
    hands = [JOINT_NAMES.index(n) for n in ("hand_left", "hand_left", "hand_right", "hand_right")]
    return replace(seq, coords=np.concatenate([seq.coords, seq.coords[hands]]), joints=NTU_JOINT_NAMES)


def cmd_synth_skeletons(args) -> int:
    out = _out_dir(args)
    s = _settings(args, cfgmod.SYNTH_DEFAULTS)
    seqs = synth_skeleton_sequences(s["activities"], s["subjects"], s["windows"] * 150, s["seed"],
                                    s["noise"], s["subject_offset"])
    names = sorted({q.activity_label for q in seqs}, key=[q.activity_label for q in seqs].index)
    for q in seqs:
        if args.format == "ntu":
            a = names.index(q.activity_label) + 1
            write_ntu(out / f"S001C001P{int(q.subject_id[1:]):03d}R001A{a:03d}.skeleton", _as_ntu25(q))
        else:
            write_json(out / f"{q.activity_label}_{q.subject_id}.json", q)
    _snapshot(out, "synth-skeletons", s)
    print(f"wrote {len(seqs)} sequences to {out}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    s = _settings(args, cfgmod.PREPARE_DEFAULTS, format=args.format)
    if s["format"] not in ("ntu", "json"):
        raise ConfigError(f"format must be ntu or json, got {s['format']!r}")
    suffix = ".skeleton" if s["format"] == "ntu" else ".json"
    inputs = []
    for item in args.inputs:
        p = Path(item)
        inputs.extend(sorted(p.glob(f"*{suffix}")) if p.is_dir() else [p])
    if not inputs:
        raise DataError("no inputs")
    out = _out_dir(args)
    samples, failed = [], 0
    for path in inputs:
        try:
            seq = read_ntu(path) if s["format"] == "ntu" else read_json(path)
        except (DataError, OSError) as exc:
            failed += 1
            log.warning("skipping %s: %s", path, exc)
            continue
        if s["format"] == "ntu":
            m = NTU_NAME.search(path.name)
            if m:
                seq.subject_id, seq.activity_label = f"P{m.group(1)}", f"A{m.group(2)}"
        seq.source = path.name
        samples.extend(prepare_sequence(seq))
    if failed == len(inputs):
        raise DataError(f"all {failed} inputs failed to parse")
    save_corpus(out / "corpus.sklr", samples)
    _snapshot(out, "prepare", s)
    print(f"{len(samples)} windows from {len(inputs) - failed} files ({failed} skipped) -> {out / 'corpus.sklr'}")
    return EXIT_OK


def _pretrain_run(s) -> PretrainRun:
    if s["encoder"] not in ENCODER_PRESETS:
        raise ConfigError(f"encoder must be one of {', '.join(ENCODER_PRESETS)}")
    return PretrainRun(epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"], m=s["m_bins"], seed=s["seed"],
                       objective=s["objective"], signed=s["signed_angles"],
                       schedule=DropoutSchedule(cfgmod.parse_schedule(s["schedule"])),
                       encoder=ENCODER_PRESETS[s["encoder"]]())


def cmd_pretrain(args) -> int:
    s = _settings(args, cfgmod.PRETRAIN_DEFAULTS, epochs=args.epochs, objective=args.objective,
                  m_bins=args.m_bins, signed_angles=True if args.signed_angles else None)
    corpus = load_corpus(args.corpus)
    out = _out_dir(args)
    ckpt, metrics = out / "pretrain.sklr", out / "metrics.csv"
    run = _pretrain_run(s)
    if args.resume and ckpt.exists():
        trainer = Pretrainer.load(ckpt)
        if trainer.run.objective != run.objective or trainer.run.seed != run.seed or trainer.run.m != run.m:
            raise ConfigError("checkpoint was trained with a different objective, seed or m")
        trainer.run.epochs = run.epochs
        truncate_metrics(metrics, trainer.epoch)
        log.info("resuming from epoch %d", trainer.epoch)
    else:
        trainer = Pretrainer(run)
        if metrics.exists():
            metrics.unlink()
    _snapshot(out, "pretrain", s)
    trainer.fit(corpus, run.epochs, checkpoint=str(ckpt), metrics_path=str(metrics),
                checkpoint_every=s["checkpoint_every"])
    last = trainer.history[-1] if trainer.history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f}")
    return EXIT_OK


def _group_by_activity(samples, shots: int, seed: int) -> dict:
    groups: dict = {}
    for smp in samples:
        if not smp.activity_label:
            raise DataError(f"sample from {smp.source!r} has no activity label")
        groups.setdefault(smp.activity_label, []).append(smp)
    rng = np.random.default_rng([seed, 5])
    picked = {}
    for name, group in groups.items():
        order = rng.permutation(len(group))
        picked[name] = [group[i] for i in order[:shots]]
    return picked


def cmd_embed_labels(args) -> int:
    s = _settings(args, cfgmod.EMBED_DEFAULTS, shots=args.shots)
    if s["shots"] < 1:
        raise ConfigError("shots must be at least 1")
    encoder = SkeletonEncoder.from_arrays(load_arrays(args.checkpoint))
    bank = build_label_bank(_group_by_activity(load_corpus(args.corpus), s["shots"], s["seed"]), encoder)
    out = _out_dir(args)
    bank.save(out / "bank.sklr")
    _snapshot(out, "embed-labels", s)
    print(f"label bank with {len(bank)} activities -> {out / 'bank.sklr'}")
    return EXIT_OK


def cmd_synth_imu(args) -> int:
    s = _settings(args, cfgmod.IMU_DEFAULTS)
    corpus = load_corpus(args.corpus)
    labels = []
    for smp in corpus:
        if smp.activity_label not in labels:
            labels.append(smp.activity_label)
    data = synth_imu_dataset(corpus, labels, noise=s["noise"], seed=s["seed"])
    out = _out_dir(args)
    save_sensor_dataset(out, data, labels, make_split(len(data), s["seed"]))
    _snapshot(out, "synth-imu", s)
    print(f"{len(data)} sensor samples, {len(labels)} labels -> {out}")
    return EXIT_OK


def _train_config(s) -> TrainConfig:
    return TrainConfig(epochs=s["epochs"], lr=s["lr"], batch_size=s["batch_size"], seed=s["seed"],
                       provider=s["provider"], match_mode=s["match_mode"],
                       backbone=BackboneConfig(s["backbone"], d=s["d"], width=s["width"]))


def cmd_train(args) -> int:
    s = _settings(args, cfgmod.TRAIN_DEFAULTS, epochs=args.epochs, provider=args.provider,
                  backbone=args.backbone, shots=args.shots)
    tc = _train_config(s)
    samples, labels, split = load_sensor_dataset(args.data)
    bank = None
    if tc.provider == "skeleton":
        if not args.bank:
            raise ConfigError("--bank is required for the skeleton provider")
        bank = LabelBank.load(args.bank)
    out = _out_dir(args)
    _snapshot(out, "train", s)
    if s["shots"] > 0:
        res = few_shot_protocol(samples, labels, tc, shots=s["shots"], seeds=tuple(range(s["seeds"])), bank=bank)
        summary = res.summary()
        summary.update({"shots": s["shots"], "seed": s["seed"], "split_hashes": res.split_hashes})
        _write_json(out / "summary.json", summary)
        print(f"{s['shots']}-shot accuracy {res.mean:.4f} +/- {res.std:.4f}")
        return EXIT_OK
    result = train_downstream(samples, labels, tc, bank=bank, split=split)
    save_model(out / "model.sklr", result, tc)
    write_metrics(out / "metrics.csv", result.metrics)
    _write_json(out / "summary.json", {
        "provider": tc.provider, "backbone": tc.backbone.family, "seed": tc.seed,
        "test_accuracy": result.test_accuracy, "best_epoch": result.best_epoch, "split_hash": result.split_hash,
        "mean_acc": result.test_accuracy, "std_acc": 0.0, "per_seed": [result.test_accuracy],
    })
    if tc.provider == "skeleton" and tc.match_mode == "attention":
        write_heatmap_csv(out / "heatmap.csv", result.model.bank, result.model.head)
    print(f"test accuracy {result.test_accuracy:.4f} (best epoch {result.best_epoch})")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    s = _settings(args, {"seed": 0})
    samples, labels, split = load_sensor_dataset(args.data)
    model, tc = load_model(args.model, labels)
    x, y = stack_dataset(samples)
    idx = split.test if split is not None else make_split(len(y), tc.seed).test
    acc = accuracy(model, x[idx], y[idx])
    out = _out_dir(args)
    _snapshot(out, "evaluate", s)
    _write_json(out / "evaluation.json", {"provider": tc.provider, "backbone": tc.backbone.family,
                                          "test_accuracy": acc, "seed": tc.seed, "samples": int(len(idx))})
    print(f"test accuracy {acc:.4f} on {len(idx)} samples")
    return EXIT_OK


def cmd_export(args) -> int:
    s = _settings(args, {"seed": 0})
    arrays = load_arrays(args.checkpoint)
    keep = {k: v for k, v in arrays.items() if k.startswith(("encoder/", "meta/encoder/"))}
    if not keep:
        raise DataError(f"{args.checkpoint}: no encoder parameters")
    SkeletonEncoder.from_arrays(keep)    # validates shapes
    out = _out_dir(args)
    save_arrays(out / "encoder.sklr", keep)
    _write_json(out / "encoder.json", {k: list(v.shape) for k, v in keep.items()})
    _snapshot(out, "export", s)
    print(f"exported {len(keep)} arrays -> {out / 'encoder.sklr'}")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value settings file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (default: $SKELAR_OUT)")
    common.add_argument("overrides", nargs="*", metavar="key=value", help="setting overrides")

    parser = _Parser(prog="skelar", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth-skeletons", parents=[common], help="write synthetic skeleton recordings")
    p.add_argument("--format", choices=("json", "ntu"), default="json")
    p.set_defaults(fn=cmd_synth_skeletons)

    p = sub.add_parser("prepare", parents=[common], help="parse, remap, resample and window recordings")
    p.add_argument("--inputs", nargs="+", required=True, help="files or directories")
    p.add_argument("--format", choices=("ntu", "json"))
    p.set_defaults(fn=cmd_prepare)

    p = sub.add_parser("pretrain", parents=[common], help="self-supervised encoder pretraining")
    p.add_argument("--corpus", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--objective", choices=("coarse", "fine", "coordinate"))
    p.add_argument("--m-bins", type=int, dest="m_bins")
    p.add_argument("--signed-angles", action="store_true", dest="signed_angles")
    p.add_argument("--resume", action="store_true", help="continue from <out>/pretrain.sklr")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("embed-labels", parents=[common], help="build a label bank from labelled skeletons")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--shots", type=int)
    p.set_defaults(fn=cmd_embed_labels)

    p = sub.add_parser("synth-imu", parents=[common], help="derive a virtual IMU dataset from a skeleton corpus")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_synth_imu)

    p = sub.add_parser("train", parents=[common], help="train a downstream sensor classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--bank")
    p.add_argument("--epochs", type=int)
    p.add_argument("--provider", choices=("skeleton", "one-hot", "random"))
    p.add_argument("--backbone", choices=("resnet", "transformer"))
    p.add_argument("--shots", type=int, help="few-shot protocol with this many samples per class")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", parents=[common], help="test accuracy of a saved model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("export", parents=[common], help="extract encoder weights from a pretraining checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(fn=cmd_export)
    return parser


def main(argv=None) -> int:
    try:
        # overrides may follow option flags, which argparse cannot interleave on its own
        args, extra = build_parser().parse_known_args(argv)
        bad = [tok for tok in extra if tok.startswith("-") or "=" not in tok]
        if bad:
            raise UsageError(f"unrecognized arguments: {' '.join(bad)}")
        args.overrides = list(args.overrides) + extra
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SkelarError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
