"""Command-line entry point: train, eval, gradcheck, inspect, synth.

Every subcommand accepts ``--config FILE`` with ``key=value`` lines (keys are
flag names, dashes or underscores, ``#`` starts a comment). Flags given on the
command line override values from the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence


from . import gradchecks
from .data import PROFILES, frames_for, read_dataset, split_dataset, synth_gesture_dataset, write_dataset
from .model import (Checkpoint, CheckpointError, VariantError, count_parameters, load_checkpoint,
                    parse_variant, save_checkpoint, Spikeformer)
from .neurons import NeuronMode
from .training import TrainConfig, evaluate, fit

log = logging.getLogger("spikeformer")


class ConfigError(ValueError):
    pass


def read_config(path: str) -> dict[str, str]:
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def _int_list(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _image_size(text: str) -> tuple[int, int]:
    parts = [int(v) for v in text.lower().split("x")]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected HxW or a single size, got {text!r}")
    return parts[0], parts[1]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spikeformer", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    tr = sub.add_parser("train", help="train a model and write a checkpoint")
    tr.add_argument("--config")
    tr.add_argument("--variant", default="Spikeformer-2/3x1x2")
    tr.add_argument("--dataset", required=True, help="dataset directory or 'synthetic'")
    tr.add_argument("--profile", default="gesture", choices=sorted(PROFILES))
    tr.add_argument("--timesteps", type=int, default=8)
    tr.add_argument("--epochs", type=int, default=15)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--optimizer", default="adam", choices=("adam", "sgd"))
    tr.add_argument("--lr", type=float, default=2e-3)
    tr.add_argument("--weight-decay", type=float, default=1.5e-4)
    tr.add_argument("--batch-size", type=int, default=16)
    tr.add_argument("--warmup", type=int, default=2, help="warmup epochs")
    tr.add_argument("--schedule", default="constant", choices=("constant", "step", "cosine"))
    tr.add_argument("--step-period", type=int, default=192)
    tr.add_argument("--lr-min", type=float, default=0.0)
    tr.add_argument("--lr-milestones", type=_int_list, default=())
    tr.add_argument("--droppath", type=float, default=0.1)
    tr.add_argument("--neuron", default="PLIF", choices=[m.value for m in NeuronMode])
    tr.add_argument("--classes", type=int, default=4, help="synthetic dataset only")
    tr.add_argument("--samples", type=int, default=70, help="synthetic samples per class")
    tr.add_argument("--size", type=_image_size, default=(32, 32), help="synthetic sensor size")
    tr.add_argument("--test-fraction", type=float, default=2 / 7, help="synthetic held-out fraction")
    tr.add_argument("--report", help="JSON-lines report path (default: <out>.jsonl)")
    tr.add_argument("--plot", help="training-curve image path (default: <out>.png)")
    tr.add_argument("--no-plot", action="store_true")

    ev = sub.add_parser("eval", help="top-1 accuracy of a checkpoint on a dataset split")
    ev.add_argument("--config")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--split", default="test")

    gc = sub.add_parser("gradcheck", help="finite-difference check of the surrogate gradients")
    gc.add_argument("--config")
    gc.add_argument("--module", default="all", choices=sorted(gradchecks.CHECKS) + ["all"])

    ins = sub.add_parser("inspect", help="print a parsed variant with token and parameter counts")
    ins.add_argument("--config")
    ins.add_argument("--variant", required=True)
    ins.add_argument("--classes", type=int, default=10)
    ins.add_argument("--timesteps", type=int, default=4)
    ins.add_argument("--channels", type=int, default=2)
    ins.add_argument("--image-size", type=_image_size)

    sy = sub.add_parser("synth", help="write a synthetic event-gesture dataset")
    sy.add_argument("--config")
    sy.add_argument("--classes", type=int, default=4)
    sy.add_argument("--samples", type=int, default=70, help="samples per class")
    sy.add_argument("--seed", type=int, default=0)
    sy.add_argument("--out", required=True)
    sy.add_argument("--size", type=_image_size, default=(32, 32))
    sy.add_argument("--test-fraction", type=float, default=2 / 7)
    return parser


def parse_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    command = next((a for a in argv if a in COMMANDS), None)
    if known.config and command is not None:
        values = read_config(known.config)
        subparser = _subparser(parser, command)
        actions = {a.dest: a for a in subparser._actions}
        unknown = sorted(set(values) - set(actions) - {"config"})
        if unknown:
            raise ConfigError(f"{known.config}: unknown keys for '{command}': {', '.join(unknown)}")
        for key, value in values.items():
            action = actions[key]
            if action.choices is not None and value not in action.choices:
                raise ConfigError(f"{known.config}: {key}={value} not one of {sorted(action.choices)}")
            if isinstance(action, argparse._StoreTrueAction):
                values[key] = value.lower() in ("1", "true", "yes", "on")
            action.required = False
        # string defaults go through each option's type conversion
        subparser.set_defaults(**values)
    return parser.parse_args(argv)


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _load_splits(args) -> tuple[list, list]:
    if args.dataset == "synthetic":
        streams = synth_gesture_dataset(args.seed, args.classes, args.samples, geometry=args.size)
        return split_dataset(streams, args.test_fraction, args.seed)
    root = Path(args.dataset)
    train = read_dataset(root, "train")
    test = read_dataset(root, "test") if (root / "test").is_dir() else []
    return train, test


def cmd_train(args) -> int:
    train_streams, test_streams = _load_splits(args)
    if not train_streams:
        raise ValueError(f"dataset {args.dataset} has no training samples")
    height, width = train_streams[0].height, train_streams[0].width
    classes = max(s.label for s in train_streams + test_streams) + 1
    spec = parse_variant(args.variant, num_classes=classes, timesteps=args.timesteps,
                         image_size=(height, width), neuron_mode=args.neuron)
    profile = PROFILES[args.profile]
    config = TrainConfig(optimizer=args.optimizer, base_lr=args.lr, weight_decay=args.weight_decay,
                         batch_size=args.batch_size, epochs=args.epochs, warmup_epochs=args.warmup,
                         schedule=args.schedule, step_period=args.step_period, lr_min=args.lr_min,
                         lr_milestones=args.lr_milestones, label_smoothing=profile.label_smoothing,
                         droppath_rate=args.droppath, seed=args.seed)
    train = frames_for(train_streams, args.timesteps)
    test = frames_for(test_streams, args.timesteps) if test_streams else None
    model = Spikeformer(spec, seed=args.seed)
    log.info("%s: %d parameters, %d train / %d test samples", spec.name, count_parameters(model),
             len(train[1]), 0 if test is None else len(test[1]))

    out = Path(args.out)
    report_path = Path(args.report) if args.report else out.with_name(out.name + ".jsonl")
    with report_path.open("w") as sink:
        def emit(rec):
            line = json.dumps(rec.__dict__, sort_keys=True)
            print(line, flush=True)
            sink.write(line + "\n")
            sink.flush()

        report, optimizer = fit(model, train, config, test=test, augment_cfg=profile, on_epoch=emit)
    save_checkpoint(Checkpoint.from_model(model, optimizer, epoch=config.epochs, seed=args.seed), out)
    if not args.no_plot:
        from .plotting import plot_report
        plot_path = Path(args.plot) if args.plot else out.with_name(out.name + ".png")
        plot_report(report, plot_path, title=f"{spec.name}, T={args.timesteps}")
        log.info("curves written to %s", plot_path)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    model = ckpt.to_model()
    streams = read_dataset(args.dataset, args.split)
    if not streams:
        raise ValueError(f"split {args.split!r} of {args.dataset} is empty")
    frames, labels = frames_for(streams, ckpt.spec.timesteps)
    acc = evaluate(model, frames, labels)
    print(json.dumps({"accuracy": acc, "samples": len(labels), "split": args.split, "model": ckpt.spec.name}))
    return 0


def cmd_gradcheck(args) -> int:
    names = None if args.module == "all" else [args.module]
    ok = True
    for result in gradchecks.run(names):
        status = "PASS" if result.passed else "FAIL"
        print(f"{result.name:<12} max_rel_err={result.error:.3e} tol={result.tolerance:.0e} {status}")
        ok &= result.passed
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    spec = parse_variant(args.variant, num_classes=args.classes, timesteps=args.timesteps,
                         input_channels=args.channels, image_size=args.image_size)
    for key, value in spec.to_metadata().items():
        print(f"{key}={value}")
    print(f"tokens={spec.num_tokens}")
    print(f"parameters={count_parameters(spec)}")
    return 0


def cmd_synth(args) -> int:
    streams = synth_gesture_dataset(args.seed, args.classes, args.samples, geometry=args.size)
    train, test = split_dataset(streams, args.test_fraction, args.seed)
    write_dataset(args.out, "train", train)
    if test:
        write_dataset(args.out, "test", test)
    print(json.dumps({"out": str(args.out), "train": len(train), "test": len(test), "classes": args.classes}))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "inspect": cmd_inspect, "synth": cmd_synth}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = parse_args(argv)
    except (ConfigError, OSError) as exc:
        print(f"spikeformer: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (VariantError, CheckpointError, ValueError, OSError) as exc:
        print(f"spikeformer {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
