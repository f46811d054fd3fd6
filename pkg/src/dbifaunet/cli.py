"""Command-line entry point: train, eval, predict, generate-phantoms, ingest."""

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import yaml

from . import data, trainer
from .errors import CheckpointError, ConfigError, DivergenceError, PairingError, ValidationError


def _bool(text):
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


def _ratios(text):
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad ratios {text!r}") from exc
    if len(values) != 3:
        raise argparse.ArgumentTypeError("ratios need three comma-separated values")
    return values


def read_config(path):
    """Flat key-value mapping from a YAML or JSON file."""
    text = Path(path).read_text()
    flat = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if flat is None:
        return {}
    if not isinstance(flat, dict) or any(isinstance(v, dict) for v in flat.values()):
        raise ConfigError("config", f"{path} must be a flat key-value document")
    return flat


def _add_config_flags(p):
    """One ``--field`` flag per train/network/loss config field."""
    for name, owner in trainer.config_fields().items():
        f = next(f for f in dataclasses.fields(owner) if f.name == name)
        kind = type(f.default) if f.default is not None else str
        kind = _bool if kind is bool else kind
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="dbifaunet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on a sample store")
    p.add_argument("--config", help="YAML or JSON file of config fields")
    p.add_argument("--manifest", help="sample store manifest.json (or set 'manifest' in the config)")
    p.add_argument("--out", help="run directory")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--json", dest="json_out")

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("generate-phantoms", aliases=["generate"], help="write a synthetic sample store")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--blur", type=float, default=2.0)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--images-per-patient", type=int, default=5)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))

    p = sub.add_parser("ingest", help="pair, normalize and split exported images")
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", type=_ratios, default=(0.8, 0.1, 0.1))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patient-pattern", default=r"^([^_]+)_",
                   help="regex whose first group is the patient id (default: stem prefix before '_')")
    return parser


def cmd_train(args):
    flat = read_config(args.config) if args.config else {}
    manifest = args.manifest or flat.pop("manifest", None)
    out = args.out or flat.pop("out", None) or "runs/latest"
    flat.pop("manifest", None)
    flat.pop("out", None)
    for name in trainer.config_fields():
        value = getattr(args, name)
        if value is not None:
            flat[name] = value
    if manifest is None:
        raise ConfigError("manifest", "no manifest given (--manifest or config key)")
    cfg, net, loss = trainer.split_config(flat)
    record = trainer.train(cfg, manifest, net, out, loss, resume=args.resume)
    summary = {"out": str(out), "parameter_count": record.parameter_count,
               "best_epoch": record.best_epoch, "best_val_dice": record.best_val_dice}
    if record.test:
        summary["test"] = record.test["percent"]
    print(json.dumps(summary, indent=2))


def cmd_eval(args):
    rep = trainer.evaluate(args.checkpoint, args.split, args.manifest)
    text = rep.to_json(indent=2, sort_keys=True)
    if args.json_out:
        Path(args.json_out).write_text(text + "\n")
    print(json.dumps({"split": args.split, **rep.as_percent()}))


def cmd_predict(args):
    mask, overlay = trainer.predict(args.checkpoint, args.input, args.out)
    print(json.dumps({"mask": str(mask), "overlay": str(overlay)}))


def cmd_generate(args):
    path = data.generate_store(args.count, args.size, args.seed, args.out,
                               images_per_patient=args.images_per_patient, ratios=args.ratios,
                               blur_radius=args.blur, noise_std=args.noise)
    print(path)


def cmd_ingest(args):
    print(data.ingest(args.images, args.masks, args.out, args.ratios, args.seed, args.patient_pattern))


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "generate-phantoms": cmd_generate, "generate": cmd_generate, "ingest": cmd_ingest}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    trainer.configure_determinism()
    try:
        COMMANDS[args.command](args)
    except (ConfigError, ValidationError, PairingError, CheckpointError, DivergenceError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
