"""Command line entry point: ``sparse-ssl {train,evaluate,sweep-mu,report}``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import experiment as ex
from .evaluation import MODES
from .networks import NetworkTriplet
from .trainer import ConfigurationError, TrainConfig, read_config_file

# keys that steer the command rather than the training configuration
CLI_KEYS = ("dataset", "out", "mode", "force", "mus", "seeds", "checkpoint", "split")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--dataset", help="path to a MedMNIST-style .npz archive, or 'toy'")
    p.add_argument("--out", help="output directory (default: runs)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--mu", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any training setting, e.g. --set lr=1e-4 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparse-ssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration and score the test split")
    _add_common(p)
    p.add_argument("--shots", type=int, choices=(5, 10, 20, 50))
    p.add_argument("--mode", choices=MODES, help="inference mode used for checkpoint selection")
    p.add_argument("--force", action="store_true", default=None,
                   help="overwrite a finished run with the same configuration")

    p = sub.add_parser("evaluate", help="score a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True,
                   help="run directory or directory holding generator/discriminator/classifier.pt")
    p.add_argument("--mode", choices=MODES, help="default: both modes")
    p.add_argument("--split", choices=("val", "test"), default=None)
    p.add_argument("--shots", type=int)

    p = sub.add_parser("sweep-mu", help="validation accuracy over mu values and shot settings")
    _add_common(p)
    p.add_argument("--mus", type=int, nargs="+")
    p.add_argument("--shots", type=int, nargs="+")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--force", action="store_true", default=None)

    p = sub.add_parser("report", help="aggregate results.csv files into summary tables")
    p.add_argument("--out", default="runs", help="root directory holding finished runs")
    p.add_argument("--mu", type=int, help="only include runs with this mu")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _listify(value):
    if value is None or isinstance(value, (list, tuple)):
        return value
    return [int(v) for v in str(value).replace(",", " ").split()]


def resolve_settings(args) -> tuple[dict, TrainConfig]:
    """Merge config file, dataset preset and flags (flags win)."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    settings = {k: file_values.pop(k) for k in CLI_KEYS if k in file_values}
    if args.command == "sweep-mu" and "shots" in file_values:
        settings["shots_list"] = _listify(file_values.pop("shots"))
    for key in CLI_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            settings[key] = flag
    settings.setdefault("dataset", "toy")
    settings.setdefault("out", "runs")
    settings["force"] = str(settings.get("force", False)).lower() in ("1", "true", "yes", "on")

    values: dict = dict(ex.TOY_PRESET) if settings["dataset"] == "toy" else {}
    values.update(file_values)
    for key in ("seed", "epochs", "mu", "resolution"):
        if getattr(args, key, None) is not None:
            values[key] = getattr(args, key)
    shots = getattr(args, "shots", None)
    if isinstance(shots, int):
        values["shots"] = shots
    elif shots:
        settings["shots_list"] = shots
    if settings.get("mode") and args.command in ("train", "sweep-mu"):
        values["val_mode"] = settings["mode"]
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return settings, TrainConfig.from_mapping(values)


def _print_results(results) -> None:
    for r in results:
        per_class = " ".join(f"{a:.3f}" for a in r.per_class)
        print(f"{r.dataset}\t{r.shots}-shot\tseed {r.seed}\t{r.mode}\t{r.split}\t"
              f"macro {r.macro:.4f}\t[{per_class}]")


def cmd_train(args) -> int:
    settings, config = resolve_settings(args)
    archive = ex.resolve_dataset(settings["dataset"], config.seed)
    results, trainer = ex.run_experiment(config, archive, settings["out"], force=settings["force"])
    print(f"run directory: {trainer.run_dir}")
    _print_results(results)
    return 0


def cmd_evaluate(args) -> int:
    settings, config = resolve_settings(args)
    ckpt = Path(settings["checkpoint"])
    if (ckpt / "checkpoints" / "best").is_dir():
        ckpt = ckpt / "checkpoints" / "best"
    networks = NetworkTriplet.load(ckpt)
    archive = ex.resolve_dataset(settings["dataset"], config.seed)
    config = config.replace(resolution=networks.spec.resolution)
    modes = (settings["mode"],) if settings.get("mode") else MODES
    results = ex.evaluate_run(networks, archive, config, settings.get("split") or "test", modes)
    _print_results(results)
    return 0


def cmd_sweep(args) -> int:
    settings, config = resolve_settings(args)
    mus = _listify(settings.get("mus")) or ex.DEFAULT_MUS
    shots = settings.get("shots_list") or ex.DEFAULT_SHOTS
    seeds = _listify(settings.get("seeds")) or (config.seed,)
    archive = ex.resolve_dataset(settings["dataset"], config.seed)
    rows = ex.sweep_mu(config, archive, settings["out"], mus=mus, shots=shots, seeds=seeds,
                       force=settings["force"])
    print(ex.format_table(ex.sweep_table(rows)))
    print(f"plot: {Path(settings['out']) / 'sweep.png'}")
    return 0


def cmd_report(args) -> int:
    tables = ex.report(args.out, mu=args.mu)
    for name, table in tables.items():
        print(f"== {name}")
        print(ex.format_table(table))
    return 0


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "sweep-mu": cmd_sweep, "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ValueError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
