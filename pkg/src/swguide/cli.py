"""Command-line interface: dataset generation, calibration, training,
sweeps, and checkpoint evaluation.

Every command echoes its full effective configuration to stdout before
any result line, so a printed run is reproducible from its own output.
Train-style commands accept a flat ``key=value`` config file plus
per-field flags; flags override file keys, and unknown keys are errors.
"""

from __future__ import annotations

import argparse
import multiprocessing
import os
import sys
from dataclasses import fields, replace

import numpy as np

from .calibration import solve_temperature
from .data import (
    SyntheticSpec,
    logit_matrix,
    make_benchmark,
    read_array_file,
    read_dataset,
    write_array_file,
    write_dataset,
    write_metrics,
    write_predictions,
)
from .errors import ConfigInvalidError, GuidanceError
from .model import params_from_named
from .trainer import RunResult, TrainConfig, evaluate, run, run_v2

_CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_config_value(name: str, raw: str):
    if name not in _CONFIG_FIELDS:
        raise ConfigInvalidError(f"unknown config key {name!r}")
    if name == "tau":
        return None if raw.lower() == "none" else float(raw)
    default = _CONFIG_FIELDS[name].default
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition("=")
            if not sep:
                raise ConfigInvalidError(
                    f"{path}: line {line_number} is not key=value: {line!r}"
                )
            values[key.strip()] = _parse_config_value(key.strip(), raw.strip())
    return values


def config_to_lines(config: TrainConfig) -> list[str]:
    lines = []
    for f in fields(TrainConfig):
        value = getattr(config, f.name)
        lines.append(f"{f.name}={'none' if value is None else value}")
    return lines


def _add_train_config_flags(parser: argparse.ArgumentParser):
    for f in fields(TrainConfig):
        parser.add_argument(
            f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar="V"
        )


def build_train_config(args: argparse.Namespace) -> TrainConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    for name in _CONFIG_FIELDS:
        raw = getattr(args, name, None)
        if raw is not None:
            values[name] = _parse_config_value(name, str(raw))
    return TrainConfig(**values)


def _echo_config(config: TrainConfig):
    print("# config")
    for line in config_to_lines(config):
        print(line)


def summary_line(result: RunResult) -> str:
    return (
        f"scheme={result.scheme} seed={result.seed} "
        f"accuracy={result.accuracy!r} T={result.temperature!r} "
        f"fraction={result.fraction!r}"
    )


def write_run_artifacts(out_dir, config: TrainConfig, result: RunResult):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as handle:
        handle.write("\n".join(config_to_lines(config)) + "\n")
    write_metrics(os.path.join(out_dir, "metrics.txt"), result.metrics)
    write_array_file(
        os.path.join(out_dir, "checkpoint.txt"), result.params.named_arrays()
    )
    write_predictions(
        os.path.join(out_dir, "predictions.txt"),
        result.prediction_ids,
        result.prediction_probs,
    )
    with open(os.path.join(out_dir, "summary.txt"), "w", encoding="utf-8") as handle:
        handle.write(summary_line(result) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_gen(args) -> int:
    spec = SyntheticSpec.standard(
        seed=args.seed,
        n_classes=args.classes,
        feature_dim=args.feature_dim,
        per_class=args.per_class,
        mean_scale=args.mean_scale,
        class_std=args.class_std,
        shift_magnitude=args.shift,
        rotation=args.rotation,
        noise_scale=args.noise,
        class_angle=args.class_angle,
        oracle_sharpness=args.oracle_sharpness,
    )
    source, target = make_benchmark(spec)
    write_dataset(args.out_source, source)
    write_dataset(args.out_target, target)
    oracle = float(
        (target.zeroshot.argmax(axis=1) == target.labels).mean()
    )
    print("# config")
    print(
        f"seed={args.seed} classes={args.classes} feature_dim={args.feature_dim} "
        f"per_class={args.per_class} mean_scale={args.mean_scale} "
        f"class_std={args.class_std} shift={args.shift} rotation={args.rotation} "
        f"noise={args.noise} class_angle={args.class_angle} "
        f"oracle_sharpness={args.oracle_sharpness}"
    )
    print("# result")
    print(f"source={args.out_source} n={len(source)}")
    print(f"target={args.out_target} n={len(target)}")
    print(f"target_oracle_accuracy={oracle!r}")
    return 0


def _cmd_calibrate(args) -> int:
    source = read_dataset(args.source)
    target = read_dataset(args.target)
    result = solve_temperature(logit_matrix(source), logit_matrix(target), args.tau)
    print(f"T={result.temperature:.6f}")
    print(f"achieved_mean={result.achieved_mean:.6f}")
    print(f"iterations={result.iterations}")
    return 0


def _cmd_train(args) -> int:
    config = build_train_config(args)
    source = read_dataset(args.source)
    target = read_dataset(args.target)
    _echo_config(config)
    if config.scheme == "v2" and args.out:
        os.makedirs(args.out, exist_ok=True)
        result = run_v2(
            config,
            source,
            target,
            predictions_path=os.path.join(args.out, "predictions_run1.txt"),
        )
    else:
        result = run(config, source, target)
    if args.out:
        write_run_artifacts(args.out, config, result)
    print("# result")
    print(summary_line(result))
    return 0


def _run_one(task) -> tuple[str, float]:
    """Worker for sweep commands: one (label, config, paths) training run."""
    label, config, source_path, target_path, out_dir = task
    source = read_dataset(source_path)
    target = read_dataset(target_path)
    if config.scheme == "v2" and out_dir:
        os.makedirs(out_dir, exist_ok=True)
        result = run_v2(
            config,
            source,
            target,
            predictions_path=os.path.join(out_dir, "predictions_run1.txt"),
        )
    else:
        result = run(config, source, target)
    if out_dir:
        write_run_artifacts(out_dir, config, result)
    return label, result.accuracy


def _run_sweep(tasks, jobs: int) -> list[tuple[str, float]]:
    if jobs > 1:
        with multiprocessing.Pool(jobs) as pool:
            return pool.map(_run_one, tasks)
    return [_run_one(task) for task in tasks]


def _parse_seeds(raw: str) -> list[int]:
    return [int(s) for s in raw.split(",") if s != ""]


def _sweep_table(pairs, key: str) -> list[str]:
    """Mean accuracy per swept value, in the order the values were given."""
    by_value: dict[str, list[float]] = {}
    for label, accuracy in pairs:
        by_value.setdefault(label, []).append(accuracy)
    lines = []
    for label, accs in by_value.items():
        lines.append(
            f"{key}={label} accuracy={float(np.mean(accs))!r} n_seeds={len(accs)}"
        )
    return lines


def _cmd_sweep_expansion(args) -> int:
    config = build_train_config(args)
    fractions = [float(v) for v in args.fractions.split(",") if v != ""]
    seeds = _parse_seeds(args.seeds)
    _echo_config(config)
    tasks = []
    for fraction in fractions:
        for seed in seeds:
            cfg = replace(config, scheme="v1", expansion_fraction=fraction, seed=seed)
            out_dir = (
                os.path.join(args.out, f"fraction_{fraction}", f"seed_{seed}")
                if args.out
                else None
            )
            tasks.append((str(fraction), cfg, args.source, args.target, out_dir))
    pairs = _run_sweep(tasks, args.jobs)
    print("# result")
    lines = _sweep_table(pairs, "fraction")
    for line in lines:
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")
    return 0


def _cmd_sweep_tau(args) -> int:
    config = build_train_config(args)
    taus = [v.strip() for v in args.taus.split(",") if v != ""]
    seeds = _parse_seeds(args.seeds)
    _echo_config(config)
    tasks = []
    for tau_raw in taus:
        tau = None if tau_raw.lower() == "none" else float(tau_raw)
        for seed in seeds:
            cfg = replace(config, tau=tau, seed=seed)
            out_dir = (
                os.path.join(args.out, f"tau_{tau_raw}", f"seed_{seed}")
                if args.out
                else None
            )
            tasks.append((tau_raw, cfg, args.source, args.target, out_dir))
    pairs = _run_sweep(tasks, args.jobs)
    print("# result")
    lines = _sweep_table(pairs, "tau")
    for line in lines:
        print(line)
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "table.txt"), "w", encoding="utf-8") as handle:
            handle.write("\n".join(lines) + "\n")
    return 0


def _cmd_eval(args) -> int:
    params = params_from_named(read_array_file(args.checkpoint))
    dataset = read_dataset(args.dataset)
    accuracy = evaluate(params, dataset)
    print(f"accuracy={accuracy!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swguide",
        description="Strong-weak guidance experiments on synthetic domain shifts.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic source/target pair")
    gen.add_argument("--out-source", required=True)
    gen.add_argument("--out-target", required=True)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--classes", type=int, default=5)
    gen.add_argument("--feature-dim", type=int, default=20)
    gen.add_argument("--per-class", type=int, default=40)
    gen.add_argument("--mean-scale", type=float, default=3.0)
    gen.add_argument("--class-std", type=float, default=1.0)
    gen.add_argument("--shift", type=float, default=1.5)
    gen.add_argument("--rotation", type=float, default=0.3)
    gen.add_argument("--noise", type=float, default=0.8)
    gen.add_argument("--class-angle", type=float, default=1.3)
    gen.add_argument("--oracle-sharpness", type=float, default=0.1)
    gen.set_defaults(func=_cmd_gen)

    cal = sub.add_parser("calibrate", help="solve the soft-label temperature")
    cal.add_argument("--source", required=True)
    cal.add_argument("--target", required=True)
    cal.add_argument("--tau", type=float, default=0.9)
    cal.set_defaults(func=_cmd_calibrate)

    train = sub.add_parser("train", help="run one training scheme end to end")
    train.add_argument("--source", required=True)
    train.add_argument("--target", required=True)
    train.add_argument("--config", default=None, help="key=value config file")
    train.add_argument("--out", default=None, help="artifact directory")
    _add_train_config_flags(train)
    train.set_defaults(func=_cmd_train)

    swe = sub.add_parser("sweep-expansion", help="accuracy per expansion fraction")
    swe.add_argument("--source", required=True)
    swe.add_argument("--target", required=True)
    swe.add_argument("--config", default=None)
    swe.add_argument("--out", default=None)
    swe.add_argument("--fractions", required=True, help="comma-separated fractions")
    swe.add_argument("--seeds", default="0", help="comma-separated seeds")
    swe.add_argument("--jobs", type=int, default=1)
    _add_train_config_flags(swe)
    swe.set_defaults(func=_cmd_sweep_expansion)

    swt = sub.add_parser("sweep-tau", help="accuracy per calibration target")
    swt.add_argument("--source", required=True)
    swt.add_argument("--target", required=True)
    swt.add_argument("--config", default=None)
    swt.add_argument("--out", default=None)
    swt.add_argument("--taus", required=True, help="comma-separated taus, 'none' allowed")
    swt.add_argument("--seeds", default="0", help="comma-separated seeds")
    swt.add_argument("--jobs", type=int, default=1)
    _add_train_config_flags(swt)
    swt.set_defaults(func=_cmd_sweep_tau)

    ev = sub.add_parser("eval", help="accuracy of a checkpoint on a labeled dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GuidanceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
