"""Experiment plumbing: single runs with final test evaluation, mu sweeps and
summary report tables."""

from __future__ import annotations

import csv
import logging
from collections import defaultdict
from pathlib import Path

import numpy as np

from .data import DatasetArchive, load_archive, make_toy_archive, to_model_range
from .evaluation import MODES, EvalResult, evaluate
from .trainer import Trainer, TrainConfig

log = logging.getLogger(__name__)

RESULT_FIELDS = ("dataset", "shots", "seed", "mu", "mode", "split", "macro", "per_class")
DEFAULT_MUS = (0, 1, 10, 25, 50, 100)
DEFAULT_SHOTS = (5, 10, 20, 50)
MODE_LABELS = {"sparse": "SPARSE", "sparse-ens": "SPARSE_ens"}

# desk-scale settings for the 32 x 32 toy archive; anything not listed keeps
# the full-scale default
TOY_PRESET = {"epochs": 100, "resolution": 32, "g_depth": 3, "g_width": 16, "d_depth": 3,
              "d_width": 16, "c_width": 16, "c_blocks": 3, "sup_batch": 4}


class RunExistsError(FileExistsError):
    pass


def resolve_dataset(name_or_path: str, seed: int = 0) -> DatasetArchive:
    """``toy`` builds the synthetic shapes archive; anything else is an .npz path."""
    if name_or_path == "toy":
        return make_toy_archive(seed=1000 + seed)
    return load_archive(name_or_path)


def run_dir_for(out, dataset: str, config: TrainConfig) -> Path:
    return Path(out) / dataset / f"shots{config.shots}_mu{config.mu}_seed{config.seed}"


def _stored_fingerprint(run_dir: Path) -> str | None:
    path = run_dir / "config.txt"
    if not path.exists():
        return None
    for line in path.read_text().splitlines():
        if line.startswith("# fingerprint = "):
            return line.split("=", 1)[1].strip()
    return None


def write_results(results, path, mu: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESULT_FIELDS, extrasaction="ignore")
        w.writeheader()
        for r in results:
            w.writerow({**r.to_row(), "mu": mu})


def read_results(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["shots"] = int(row["shots"])
        row["seed"] = int(row["seed"])
        row["mu"] = int(row["mu"])
        row["macro"] = float(row["macro"])
    return rows


def evaluate_run(networks, archive: DatasetArchive, config: TrainConfig, split: str = "test",
                 modes=MODES) -> list[EvalResult]:
    x = to_model_range(archive.images[split], config.resolution)
    meta = {"dataset": archive.name, "shots": config.shots, "seed": config.seed, "split": split}
    return [evaluate(networks, x, archive.labels[split], mode, **meta) for mode in modes]


def _clear_logs(run_dir: Path) -> None:
    # logs are appended to, so a fresh run must not inherit a stale one
    for name in ("losses.csv", "pseudo_labels.csv", "metrics.csv", "results.csv"):
        (run_dir / name).unlink(missing_ok=True)


def run_experiment(config: TrainConfig, archive: DatasetArchive, out, force: bool = False):
    """Train, reload the best checkpoint and score the test split in both modes.

    Refuses to overwrite a finished run with the same configuration unless
    ``force`` is set. Returns (results, trainer).
    """
    run_dir = run_dir_for(out, archive.name, config)
    fingerprint = config.fingerprint(archive.name)
    if (run_dir / "results.csv").exists() and _stored_fingerprint(run_dir) == fingerprint and not force:
        raise RunExistsError(f"{run_dir} already holds a finished run with this configuration; "
                             "pass --force to overwrite")
    _clear_logs(run_dir)
    trainer = Trainer(config, archive, run_dir)
    trainer.fit()
    # the test split is read here and nowhere else
    results = evaluate_run(trainer.load_best(), archive, config)
    write_results(results, run_dir / "results.csv", config.mu)
    for r in results:
        log.info("%s %d-shot seed %d %s: %.4f", r.dataset, r.shots, r.seed, r.mode, r.macro)
    return results, trainer


def sweep_mu(config: TrainConfig, archive: DatasetArchive, out, mus=DEFAULT_MUS,
             shots=DEFAULT_SHOTS, seeds=None, force: bool = False) -> list[dict]:
    """One run per (mu, shots, seed); scored by best validation accuracy.

    Writes ``sweep.csv`` (one row per run), ``sweep_table.csv`` (mean over
    seeds, one row per mu) and ``sweep.png``.
    """
    out = Path(out)
    seeds = (config.seed,) if seeds is None else tuple(seeds)
    rows = []
    for mu in mus:
        for n in shots:
            for seed in seeds:
                cfg = config.replace(mu=mu, shots=n, seed=seed)
                run_dir = run_dir_for(out, archive.name, cfg)
                if (run_dir / "metrics.csv").exists() and not force and \
                        _stored_fingerprint(run_dir) == cfg.fingerprint(archive.name):
                    raise RunExistsError(f"{run_dir} exists; pass --force to overwrite")
                _clear_logs(run_dir)
                trainer = Trainer(cfg, archive, run_dir)
                trainer.fit()
                rows.append({"dataset": archive.name, "mu": mu, "shots": n, "seed": seed,
                             "val_macro": trainer.record.best_metric,
                             "best_epoch": trainer.record.best_epoch})
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    table = sweep_table(rows)
    write_table(table, out / "sweep_table.csv")
    plot_sweep(rows, out / "sweep.png")
    return rows


def sweep_table(rows) -> list[list[str]]:
    """Mean validation accuracy (%) per mu (rows) and shot setting (columns)."""
    acc = defaultdict(list)
    for r in rows:
        acc[(r["mu"], r["shots"])].append(r["val_macro"])
    mus = sorted({m for m, _ in acc})
    shots = sorted({s for _, s in acc})
    table = [["mu"] + [f"{s}-shot" for s in shots]]
    for m in mus:
        table.append([str(m)] + [f"{100 * np.mean(acc[(m, s)]):.2f}" if (m, s) in acc else ""
                                 for s in shots])
    return table


def plot_sweep(rows, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    acc = defaultdict(list)
    for r in rows:
        acc[(r["mu"], r["shots"])].append(r["val_macro"])
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for m in sorted({m for m, _ in acc}):
        shots = sorted(s for mm, s in acc if mm == m)
        ax.plot(shots, [100 * np.mean(acc[(m, s)]) for s in shots], marker="o", label=f"mu={m}")
    ax.set_xlabel("shots per class")
    ax.set_ylabel("validation accuracy per class (%)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def collect_results(root) -> list[dict]:
    rows = []
    for path in sorted(Path(root).rglob("results.csv")):
        rows += read_results(path)
    return rows


def summary_table(rows) -> list[list[str]]:
    """Modes x shot settings; each cell is the mean over datasets of the
    per-dataset mean (over seeds) macro accuracy, in percent."""
    per_ds = defaultdict(list)
    for r in rows:
        per_ds[(r["mode"], r["shots"], r["dataset"])].append(r["macro"])
    shots = sorted({s for _, s, _ in per_ds})
    table = [["Model"] + [f"{s}-shot" for s in shots]]
    for mode in MODES:
        cells = []
        for s in shots:
            vals = [np.mean(v) for (m, ss, _), v in per_ds.items() if m == mode and ss == s]
            cells.append(f"{100 * np.mean(vals):.2f}" if vals else "")
        if any(cells):
            table.append([MODE_LABELS[mode]] + cells)
    return table


def dataset_table(rows, shots: int) -> list[list[str]]:
    """Datasets x modes at one shot setting, mean over seeds, as fractions."""
    per_ds = defaultdict(list)
    for r in rows:
        if r["shots"] == shots:
            per_ds[(r["dataset"], r["mode"])].append(r["macro"])
    datasets = sorted({d for d, _ in per_ds})
    table = [["Dataset"] + [MODE_LABELS[m] for m in MODES]]
    for d in datasets:
        table.append([d] + [f"{np.mean(per_ds[(d, m)]):.3f}" if (d, m) in per_ds else ""
                            for m in MODES])
    return table


def write_table(table, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, delimiter=delimiter).writerows(table)


def format_table(table) -> str:
    widths = [max(len(row[i]) for row in table) for i in range(len(table[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in table)


def report(root, out=None, mu: int | None = None) -> dict[str, list[list[str]]]:
    """Aggregate every results.csv under ``root`` (optionally one mu only) into
    the summary and per-shot tables."""
    rows = [r for r in collect_results(root) if mu is None or r["mu"] == mu]
    if not rows:
        raise FileNotFoundError(f"no results.csv found under {root}")
    tables = {"summary": summary_table(rows)}
    for s in sorted({r["shots"] for r in rows}):
        tables[f"{s}shot"] = dataset_table(rows, s)
    out = Path(out or root)
    out.mkdir(parents=True, exist_ok=True)
    for name, table in tables.items():
        write_table(table, out / f"report_{name}.csv")
    return tables
