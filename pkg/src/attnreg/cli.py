"""Command-line entry points.

Subcommands: synth (write a dataset of synthetic pairs), train, ablate,
register (apply a checkpoint to one pair), eval (score a checkpoint on a
dataset), and visualize (render PNGs of a saved field).

Run configuration comes from an optional JSON file mirroring TrainConfig,
with individual flags taking precedence over the file.  Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for runtime failures.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from attnreg.checkpoint import load_checkpoint
from attnreg.fieldops import load_field, save_field
from attnreg.losses import LossWeights
from attnreg.metrics import STAGES
from attnreg.networks import AblationFlags, NetworkConfig
from attnreg.synth import SynthConfig, generate_pair, pair_seed
from attnreg.training import (
    TrainConfig,
    _evaluate_pairs,
    _write_eval_csv,
    register,
    run_ablation,
    train,
)
from attnreg.viz import write_visualizations
from attnreg.volume import load_mask, load_volume, save_mask, save_volume


class ConfigError(ValueError):
    """Bad usage or configuration; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage problems become ConfigError, not exit(2)
        raise ConfigError(message)


_NESTED = {
    "weights": LossWeights,
    "flags": AblationFlags,
    "network": NetworkConfig,
    "synth": SynthConfig,
}


def _coerce_value(value):
    return tuple(value) if isinstance(value, list) else value


def build_config(data: dict) -> TrainConfig:
    """TrainConfig from a plain dict; reports every bad key in one error."""
    errors: list[str] = []
    kwargs = {}
    top_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in data.items():
        if key not in top_fields:
            errors.append(f"unknown config key: {key}")
            continue
        if key in _NESTED:
            sub_cls = _NESTED[key]
            if isinstance(value, sub_cls):
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                errors.append(f"config key {key} must be an object")
                continue
            sub_fields = {f.name for f in dataclasses.fields(sub_cls)}
            sub_kwargs = {}
            for sk, sv in value.items():
                if sk not in sub_fields:
                    errors.append(f"unknown config key: {key}.{sk}")
                    continue
                sub_kwargs[sk] = _coerce_value(sv)
            try:
                kwargs[key] = sub_cls(**sub_kwargs)
            except (TypeError, ValueError) as e:
                errors.append(f"config key {key}: {e}")
        else:
            kwargs[key] = _coerce_value(value)
    if errors:
        raise ConfigError("\n".join(errors))
    try:
        config = TrainConfig(**kwargs)
        config.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return config


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ConfigError(f"dims must look like 32x32x16, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as e:
        raise ConfigError(f"dims must look like 32x32x16, got {text!r}") from e
    return dims


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    """Merge defaults, the optional --config file, and explicit flags."""
    data: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    overrides = {
        "dims": _parse_dims(args.dims) if getattr(args, "dims", None) else None,
        "batch_size": getattr(args, "batch_size", None),
        "learning_rate": getattr(args, "learning_rate", None),
        "max_steps": getattr(args, "max_steps", None),
        "seed": getattr(args, "seed", None),
        "train_pairs": getattr(args, "train_pairs", None),
        "eval_pairs": getattr(args, "eval_pairs", None),
        "use_masks": getattr(args, "masks", None),
        "deterministic": getattr(args, "deterministic", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
    }
    data.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(data)


def _add_common(parser: argparse.ArgumentParser, with_train_flags: bool = True) -> None:
    parser.add_argument("--config", help="JSON file mirroring the run configuration")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="force deterministic kernels",
    )
    if with_train_flags:
        parser.add_argument("--dims", help="grid size as NXxNYxNZ, e.g. 32x32x16")
        parser.add_argument("--batch-size", type=int)
        parser.add_argument("--learning-rate", type=float)
        parser.add_argument("--max-steps", type=int)
        parser.add_argument("--train-pairs", type=int)
        parser.add_argument("--eval-pairs", type=int)
        parser.add_argument("--checkpoint-every", type=int)
        parser.add_argument(
            "--masks",
            action=argparse.BooleanOptionalAction,
            default=None,
            help="use segmentation overlap terms during training",
        )


def cmd_synth(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(args.count):
        seed = pair_seed(config.seed, i)
        pair = generate_pair(seed, config.dims, config.synth)
        stem = f"pair_{i:04d}"
        save_volume(pair.fixed, out / f"{stem}_fixed")
        save_volume(pair.moving, out / f"{stem}_moving")
        save_mask(pair.fixed_mask, out / f"{stem}_fixed_mask")
        save_mask(pair.moving_mask, out / f"{stem}_moving_mask")
        save_field(pair.ground_truth_field, out / f"{stem}_gt", spacing=pair.fixed.spacing)
        entries.append(
            {
                "id": i,
                "seed": seed,
                "fixed": f"{stem}_fixed.json",
                "moving": f"{stem}_moving.json",
                "fixed_mask": f"{stem}_fixed_mask.json",
                "moving_mask": f"{stem}_moving_mask.json",
                "gt_field": f"{stem}_gt.json",
            }
        )
    index = {
        "count": args.count,
        "dims": list(config.dims),
        "seed": config.seed,
        "pairs": entries,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    print(f"wrote {args.count} pairs to {out}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    manifest = train(config, args.out)
    for stage, agg in manifest.eval.items():
        print(f"{stage}: dice={agg['dice']:.4f} assd_mm={agg['assd_mm']:.4f}")
    print(f"artifacts in {args.out}")
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    results = run_ablation(config, args.out)
    for manifest in results:
        agg = manifest.eval["final"]
        print(f"{manifest.label}: dice={agg['dice']:.4f} assd_mm={agg['assd_mm']:.4f}")
    print(f"table in {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_register(args: argparse.Namespace) -> int:
    files = register(
        args.fixed,
        args.moving,
        args.checkpoint,
        args.out,
        fixed_mask_path=args.fixed_mask,
        moving_mask_path=args.moving_mask,
    )
    for name, rel in sorted(files.items()):
        print(f"{name}: {Path(args.out) / rel}")
    return 0


@dataclass(frozen=True)
class _LoadedPair:
    fixed: object
    moving: object
    fixed_mask: object
    moving_mask: object


def cmd_eval(args: argparse.Namespace) -> int:
    bundle = load_checkpoint(args.checkpoint)
    data_dir = Path(args.data)
    index_path = data_dir / "index.json"
    if not index_path.is_file():
        raise ConfigError(f"dataset index not found: {index_path}")
    index = json.loads(index_path.read_text())
    pairs = [
        _LoadedPair(
            fixed=load_volume(data_dir / entry["fixed"]),
            moving=load_volume(data_dir / entry["moving"]),
            fixed_mask=load_mask(data_dir / entry["fixed_mask"]),
            moving_mask=load_mask(data_dir / entry["moving_mask"]),
        )
        for entry in index["pairs"]
    ]
    rows, aggregates = _evaluate_pairs(bundle.model, pairs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_eval_csv(out / "eval.csv", rows)
    agg_lines = ["stage,dice,prec,rec,assd_mm,jac_nonpos_count,jac_nonpos_percent"]
    for stage in STAGES:
        agg = aggregates[stage]
        jc = repr(agg["jac_nonpos_count"]) if "jac_nonpos_count" in agg else ""
        jp = repr(agg["jac_nonpos_percent"]) if "jac_nonpos_percent" in agg else ""
        agg_lines.append(
            f"{stage},{agg['dice']!r},{agg['prec']!r},{agg['rec']!r},{agg['assd_mm']!r},{jc},{jp}"
        )
    (out / "aggregate.csv").write_text("\n".join(agg_lines) + "\n")
    for stage in STAGES:
        agg = aggregates[stage]
        print(f"{stage}: dice={agg['dice']:.4f} assd_mm={agg['assd_mm']:.4f}")
    return 0


def cmd_visualize(args: argparse.Namespace) -> int:
    field = load_field(args.field)
    volumes = []
    for label, path in (
        ("m", args.moving),
        ("f", args.fixed),
        ("m_a", args.affine_warped),
        ("m_d", args.deform_warped),
    ):
        if path:
            volumes.append((label, load_volume(path)))
    written = write_visualizations(field, args.out, volumes or None, upscale=args.upscale)
    for p in written:
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="attnreg", description="attention-based 3D volume registration")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="write a dataset of synthetic pairs")
    _add_common(p)
    p.add_argument("--count", type=int, default=20, help="number of pairs")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="train all four module variants")
    _add_common(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("register", help="apply a checkpoint to one volume pair")
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fixed-mask")
    p.add_argument("--moving-mask")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("eval", help="score a checkpoint on a saved dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="directory written by synth")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("visualize", help="render PNGs for a saved field")
    p.add_argument("--field", required=True, help="field header (.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--moving")
    p.add_argument("--fixed")
    p.add_argument("--affine-warped")
    p.add_argument("--deform-warped")
    p.add_argument("--upscale", type=int, default=4)
    p.set_defaults(func=cmd_visualize)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any runtime failure maps to exit code 2
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
