"""Three-phase schedule: supervised epoch every epoch, pseudo-labelling +
translation + synthetic classifier step every ``mu`` epochs."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import pseudo_label as pl
from .data import DatasetArchive, FewShotSplit, augment_batch, build_fewshot_split, to_model_range
from .evaluation import evaluate
from .networks import ArchSpec, NetworkTriplet
from .sup_losses import LossWeights, mixup_batch, supervised_total
from .translation import (GanWeights, SkipPhase, TranslationBatch, discriminator_step,
                          generator_step, sample_target_classes, save_translation_grid,
                          synthetic_classifier_step)

log = logging.getLogger(__name__)

RUN_DIR_ENV = "SPARSE_SSL_RUN_DIR"
DEVICE_ENV = "SPARSE_SSL_DEVICE"

# sub-seed stream ids
_SPLIT, _INIT, _SUP, _UNS, _GP = range(5)


class ConfigurationError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 1000
    lr: float = 2e-4
    weight_decay: float = 1e-4
    mu: int = 10
    seed: int = 0
    shots: int = 5
    sup_batch: int = 16
    uns_batch: int = 32
    uns_passes: int = 1  # passes over the unlabeled pool per unsupervised phase
    resolution: int = 128
    critic_steps: int = 1
    val_mode: str = "sparse-ens"
    device: str = "cpu"
    # architecture
    g_depth: int = 4
    g_width: int = 32
    d_depth: int = 4
    d_width: int = 32
    c_width: int = 32
    c_blocks: int = 3
    # supervised objective
    w_mutual: float = 0.1
    w_entropy: float = 0.01
    w_mixup: float = 0.5
    w_kl: float = 0.5
    temperature: float = 2.0
    mix_alpha: float = 0.2
    literal_distance_sign: bool = False
    # translation objective
    w_rec: float = 10.0
    w_cls: float = 1.0
    w_gp: float = 10.0
    # ensemble
    ens_alpha: float = 0.6
    ens_beta: float = 0.99
    ens_rho: float = 0.75
    # bookkeeping
    save_last: bool = True
    grid_every: int = 0  # dump a translation grid every n unsupervised phases, 0 = never

    def __post_init__(self):
        if self.mu < 0:
            raise ConfigurationError("mu must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.uns_passes < 1 or self.sup_batch < 1 or self.uns_batch < 1:
            raise ConfigurationError("batch sizes and uns_passes must be >= 1")
        if self.val_mode not in ("sparse", "sparse-ens"):
            raise ConfigurationError(f"unknown validation mode {self.val_mode!r}")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(mutual=self.w_mutual, entropy=self.w_entropy, mixup=self.w_mixup,
                           kl=self.w_kl, temperature=self.temperature, mix_alpha=self.mix_alpha,
                           literal_distance_sign=self.literal_distance_sign)

    @property
    def gan_weights(self) -> GanWeights:
        return GanWeights(rec=self.w_rec, cls=self.w_cls, gp=self.w_gp)

    def new_ensemble_state(self) -> pl.EnsembleState:
        return pl.EnsembleState(alpha=self.ens_alpha, beta=self.ens_beta, rho=self.ens_rho,
                                temperature=self.temperature)

    def arch(self, num_classes: int, in_channels: int) -> ArchSpec:
        return ArchSpec(num_classes=num_classes, in_channels=in_channels,
                        resolution=self.resolution, g_depth=self.g_depth, g_width=self.g_width,
                        d_depth=self.d_depth, d_width=self.d_width, c_width=self.c_width,
                        c_blocks=self.c_blocks)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_mapping(cls, values: dict) -> TrainConfig:
        """Build from (possibly string-valued) key/value pairs; unknown keys are rejected."""
        known = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, type(known[key].default))
        return cls(**kwargs)

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def fingerprint(self, extra: str = "") -> str:
        items = sorted(self.to_dict().items())
        text = ";".join(f"{k}={v}" for k, v in items if k != "device") + extra
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _coerce(raw, kind):
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        if raw.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if raw.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def read_config_file(path) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def write_config_file(config: TrainConfig, path, extra: dict | None = None) -> None:
    lines = [f"{k} = {v}" for k, v in config.to_dict().items()]
    lines += [f"# {k} = {v}" for k, v in (extra or {}).items()]
    Path(path).write_text("\n".join(lines) + "\n")


def should_run_unsupervised(epoch: int, mu: int) -> bool:
    """`epoch` is 1-based; mu = 0 disables the unsupervised phase."""
    return mu > 0 and epoch % mu == 0


def count_unsupervised_phases(epochs: int, mu: int) -> int:
    return sum(should_run_unsupervised(e, mu) for e in range(1, epochs + 1))


def _rng(seed: int, stream: int, epoch: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, epoch])


def _torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2 ** 62)))


def make_optimizers(networks: NetworkTriplet, lr: float, weight_decay: float) -> dict:
    return {name: torch.optim.AdamW(getattr(networks, name).parameters(), lr=lr,
                                    weight_decay=weight_decay)
            for name in ("generator", "discriminator", "classifier")}


def supervised_logits(networks: NetworkTriplet, x: torch.Tensor) -> list[torch.Tensor]:
    """Class logits from (generator bottleneck head, discriminator, classifier)."""
    return [networks.generator.encoder_classify(x), networks.discriminator(x)[1],
            networks.classifier(x)]


def run_supervised_epoch(networks: NetworkTriplet, images: torch.Tensor, onehot: torch.Tensor,
                         weights: LossWeights, optimizers: dict, rng: np.random.Generator,
                         batch_size: int = 16) -> list[dict]:
    """One pass over the labeled set; one joint step of all three networks per batch."""
    n = len(images)
    if n == 0:
        raise ConfigurationError("labeled set is empty")
    networks.train()
    order = torch.from_numpy(rng.permutation(n))
    records = []
    for step, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        x = augment_batch(images[idx], rng)
        y = onehot[idx]
        mixed, mixed_y, _, _ = mixup_batch(x, y, weights.mix_alpha, rng)
        # norms are per-sample, so clean and mixed batches can share a forward pass
        both = supervised_logits(networks, torch.cat([x, mixed]))
        b = len(x)
        total, parts = supervised_total([l[:b] for l in both], y, [l[b:] for l in both],
                                        mixed_y, weights)
        for opt in optimizers.values():
            opt.zero_grad(set_to_none=True)
        total.backward()
        for opt in optimizers.values():
            opt.step()
        parts["step"] = step
        records.append(parts)
    return records


@torch.no_grad()
def _score_logits(networks: NetworkTriplet, x: torch.Tensor):
    networks.eval()
    _, d_logits = networks.discriminator(x)
    c_logits = networks.classifier(x)
    networks.train()
    return d_logits.double().cpu().numpy(), c_logits.double().cpu().numpy()


def run_unsupervised_phase(networks: NetworkTriplet, pool_ids: np.ndarray, pool_images: torch.Tensor,
                           state: pl.EnsembleState, config: TrainConfig, optimizers: dict,
                           rng: np.random.Generator, gp_generator: torch.Generator,
                           truth_lookup=None, grid_path=None) -> dict:
    """Score, select and translate batch by batch; returns a phase summary.

    `truth_lookup` maps pool ids to hidden labels and is used only to report
    pseudo-label accuracy.
    """
    summary = {"batches": 0, "skipped_batches": 0, "selected": 0, "scored": 0,
               "tau_mean": float("nan"), "pl_correct": 0, "d_loss": float("nan"),
               "g_loss": float("nan"), "c_syn_loss": float("nan")}
    n = len(pool_ids)
    if n == 0:
        summary["skipped"] = True
        return summary
    k = networks.spec.num_classes
    gan_w = config.gan_weights
    taus, d_losses, g_losses, c_losses = [], [], [], []
    batches = [order[start:start + config.uns_batch]
               for order in (rng.permutation(n) for _ in range(config.uns_passes))
               for start in range(0, n, config.uns_batch)]
    for idx in batches:
        ids = pool_ids[idx]
        x = pool_images[torch.from_numpy(idx)]
        d_logits, c_logits = _score_logits(networks, x)
        pseudo = pl.score_batch(state, ids, d_logits, c_logits)
        summary["batches"] += 1
        summary["scored"] += len(ids)
        taus.append(pseudo.threshold)
        if len(pseudo) == 0:
            summary["skipped_batches"] += 1
            continue
        summary["selected"] += len(pseudo)
        if truth_lookup is not None:
            truth = truth_lookup(pseudo.selected_ids)
            summary["pl_correct"] += int((pseudo.pseudo_labels.argmax(1) == truth).sum())

        real = x[torch.from_numpy(pseudo.selected_index)]
        dtype = real.dtype
        z_source = torch.from_numpy(pseudo.pseudo_labels).to(dtype)
        z_target = torch.from_numpy(sample_target_classes(len(real), k, rng)).to(dtype)
        try:
            batch = TranslationBatch(real=real, z_source=z_source, z_target=z_target)
        except SkipPhase:
            continue
        for _ in range(config.critic_steps):
            d_parts = discriminator_step(networks.generator, networks.discriminator, batch,
                                         optimizers["discriminator"], gan_w, generator=gp_generator)
        g_parts = generator_step(networks.generator, networks.discriminator, batch,
                                 optimizers["generator"], gan_w)
        z_syn = torch.from_numpy(sample_target_classes(len(real), k, rng)).to(dtype)
        c_loss = synthetic_classifier_step(networks.generator, networks.classifier, real, z_syn,
                                           optimizers["classifier"])
        d_losses.append(d_parts["total"])
        g_losses.append(g_parts["total"])
        c_losses.append(c_loss)
        if grid_path is not None and len(d_losses) == 1:
            with torch.no_grad():
                fake = networks.generator(real, z_target)
                save_translation_grid(real, fake, networks.generator(fake, z_source), grid_path)

    summary["skipped"] = summary["selected"] == 0
    if taus:
        summary["tau_mean"] = float(np.mean(taus))
    if d_losses:
        summary.update(d_loss=float(np.mean(d_losses)), g_loss=float(np.mean(g_losses)),
                       c_syn_loss=float(np.mean(c_losses)))
    return summary


@dataclass
class CheckpointRecord:
    epoch: int = 0
    best_metric: float = -math.inf
    best_epoch: int = 0
    fingerprint: str = ""
    path: str | None = None
    writes: list[int] = field(default_factory=list)


def checkpoint_if_best(networks: NetworkTriplet, state: pl.EnsembleState, metric: float,
                       record: CheckpointRecord, epoch: int, directory=None) -> CheckpointRecord:
    """Persist networks + EMA store when `metric` strictly beats the stored best."""
    record.epoch = epoch
    if not metric > record.best_metric:
        return record
    record.best_metric = float(metric)
    record.best_epoch = epoch
    record.writes.append(epoch)
    if directory is not None:
        directory = Path(directory)
        networks.save(directory)
        torch.save({"epoch": epoch, "metric": float(metric), "fingerprint": record.fingerprint,
                    "ensemble": state.state_dict()}, directory / "state.pt")
        record.path = str(directory)
    return record


@dataclass
class TrainResult:
    record: CheckpointRecord
    history: list[dict]
    networks: NetworkTriplet
    state: pl.EnsembleState
    split: FewShotSplit
    run_dir: Path | None


HISTORY_FIELDS = ("epoch", "sup_loss", "val_macro", "unsupervised", "selected", "scored",
                  "tau_mean", "pl_accuracy", "d_loss", "g_loss", "c_syn_loss", "seconds")


class Trainer:
    """Owns all mutable training state for one run."""

    def __init__(self, config: TrainConfig, archive: DatasetArchive, run_dir=None):
        self.config = config
        self.archive = archive
        self.device = torch.device(os.environ.get(DEVICE_ENV, config.device))
        if run_dir is None and os.environ.get(RUN_DIR_ENV):
            run_dir = os.environ[RUN_DIR_ENV]
        self.run_dir = Path(run_dir) if run_dir is not None else None

        self.split = build_fewshot_split(archive, config.shots, config.seed)
        res = config.resolution
        dev = self.device
        self.labeled_x = to_model_range(self.split.labeled_images, res).to(dev)
        self.labeled_y = torch.from_numpy(self.split.labeled_onehot).to(dev)
        self.pool_ids = self.split.unlabeled_ids
        self.pool_x = to_model_range(self.split.unlabeled_images, res).to(dev)
        self.val_x = to_model_range(archive.images["val"], res).to(dev)
        self.val_y = archive.labels["val"]

        spec = config.arch(archive.num_classes, archive.image_shape[-1])
        init_seed = int(_rng(config.seed, _INIT).integers(2 ** 31))
        self.networks = NetworkTriplet.build(spec, seed=init_seed).to(dev)
        self.optimizers = make_optimizers(self.networks, config.lr, config.weight_decay)
        self.state = config.new_ensemble_state()
        self.record = CheckpointRecord(fingerprint=config.fingerprint(archive.name))
        self.history: list[dict] = []
        self.epoch = 0
        self.unsupervised_phases = 0
        self._best_state = None

    # -- persistence -------------------------------------------------------

    @property
    def best_dir(self):
        return self.run_dir / "checkpoints" / "best" if self.run_dir else None

    @property
    def last_path(self):
        return self.run_dir / "checkpoints" / "last.pt" if self.run_dir else None

    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "networks": self.networks.state_dict(),
            "optimizers": {k: o.state_dict() for k, o in self.optimizers.items()},
            "ensemble": self.state.state_dict(),
            "record": dataclasses.asdict(self.record),
            "history": self.history,
            "unsupervised_phases": self.unsupervised_phases,
            "fingerprint": self.record.fingerprint,
        }

    def load_state_dict(self, blob: dict) -> None:
        if blob["fingerprint"] != self.record.fingerprint:
            raise ConfigurationError("checkpoint was produced by a different configuration")
        self.epoch = blob["epoch"]
        self.networks.load_state_dict(blob["networks"])
        for k, o in self.optimizers.items():
            o.load_state_dict(blob["optimizers"][k])
        self.state = pl.EnsembleState.from_state_dict(blob["ensemble"])
        self.record = CheckpointRecord(**blob["record"])
        self.history = list(blob["history"])
        self.unsupervised_phases = blob["unsupervised_phases"]

    def save_last(self, path=None) -> None:
        path = Path(path or self.last_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        torch.save(self.state_dict(), tmp)
        tmp.replace(path)

    def resume(self, path=None) -> None:
        self.load_state_dict(torch.load(path or self.last_path, weights_only=False))
        if self.run_dir is not None:
            self._truncate_logs()

    # -- logs ----------------------------------------------------------------

    def _prepare_run_dir(self) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_config_file(self.config, self.run_dir / "config.txt",
                          {"dataset": self.archive.name, "fingerprint": self.record.fingerprint})
        self.split.write_manifest(self.run_dir / "split_manifest.tsv")

    def _append(self, name: str, header, rows) -> None:
        path = self.run_dir / name
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(header)
            w.writerows(rows)

    def _truncate_logs(self) -> None:
        for name in ("losses.csv", "pseudo_labels.csv"):
            path = self.run_dir / name
            if not path.exists():
                continue
            with open(path, newline="") as fh:
                rows = list(csv.reader(fh))
            keep = [rows[0]] + [r for r in rows[1:] if int(r[0]) <= self.epoch]
            with open(path, "w", newline="") as fh:
                csv.writer(fh).writerows(keep)

    def _write_history(self) -> None:
        with open(self.run_dir / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.history)

    # -- loop --------------------------------------------------------------

    def validate(self) -> float:
        return evaluate(self.networks, self.val_x, self.val_y, self.config.val_mode,
                        split="val").macro

    def run_epoch(self) -> dict:
        cfg = self.config
        self.epoch += 1
        epoch = self.epoch
        t0 = time.perf_counter()
        steps = run_supervised_epoch(self.networks, self.labeled_x, self.labeled_y,
                                     cfg.loss_weights, self.optimizers,
                                     _rng(cfg.seed, _SUP, epoch), cfg.sup_batch)
        row = {"epoch": epoch, "sup_loss": float(np.mean([s["total"] for s in steps])),
               "unsupervised": 0}
        if self.run_dir is not None:
            self._append("losses.csv",
                         ("epoch", "step", "prototype", "mutual", "entropy", "mixup", "total"),
                         [(epoch, s["step"], s["prototype"], s["mutual"], s["entropy"],
                           s["mixup"], s["total"]) for s in steps])

        if should_run_unsupervised(epoch, cfg.mu):
            self.unsupervised_phases += 1
            self.state.epoch = epoch
            grid = None
            if (self.run_dir is not None and cfg.grid_every
                    and self.unsupervised_phases % cfg.grid_every == 0):
                grid = self.run_dir / "grids" / f"epoch{epoch:05d}.png"
            uns_rng = _rng(cfg.seed, _UNS, epoch)
            summary = run_unsupervised_phase(
                self.networks, self.pool_ids, self.pool_x, self.state, cfg, self.optimizers,
                uns_rng, _torch_gen(_rng(cfg.seed, _GP, epoch)),
                truth_lookup=self.split.diagnostic_truth, grid_path=grid)
            pl_acc = summary["pl_correct"] / summary["selected"] if summary["selected"] else float("nan")
            row.update(unsupervised=1, selected=summary["selected"], scored=summary["scored"],
                       tau_mean=summary["tau_mean"], pl_accuracy=pl_acc,
                       d_loss=summary["d_loss"], g_loss=summary["g_loss"],
                       c_syn_loss=summary["c_syn_loss"])
            if summary["skipped"]:
                log.info("epoch %d: no pseudo-labels selected, phase skipped", epoch)
            if self.run_dir is not None:
                self._append("pseudo_labels.csv", ("epoch", "tau", "selected", "accuracy"),
                             [(epoch, summary["tau_mean"], summary["selected"], pl_acc)])

        metric = self.validate()
        row["val_macro"] = metric
        row["seconds"] = time.perf_counter() - t0
        self.record = checkpoint_if_best(self.networks, self.state, metric, self.record, epoch,
                                         self.best_dir)
        if self.record.best_epoch == epoch:
            self._best_state = {k: v.detach().clone() for k, v in self.networks.state_dict().items()}
        self.history.append(row)
        if self.run_dir is not None:
            self._write_history()
            if cfg.save_last:
                self.save_last()
        log.debug("epoch %d: %s", epoch, row)
        return row

    def fit(self, until: int | None = None) -> TrainResult:
        until = self.config.epochs if until is None else min(until, self.config.epochs)
        if self.run_dir is not None and self.epoch == 0:
            self._prepare_run_dir()
        while self.epoch < until:
            self.run_epoch()
        return TrainResult(record=self.record, history=self.history, networks=self.networks,
                           state=self.state, split=self.split, run_dir=self.run_dir)

    def load_best(self) -> NetworkTriplet:
        """Networks as they were at the best validation epoch."""
        if self.best_dir is not None and (self.best_dir / "classifier.pt").exists():
            return NetworkTriplet.load(self.best_dir).to(self.device)
        if self._best_state is None:
            return self.networks
        best = NetworkTriplet(self.networks.spec).to(self.device)
        best.load_state_dict(self._best_state)
        return best


def train(config: TrainConfig, archive: DatasetArchive, run_dir=None) -> TrainResult:
    return Trainer(config, archive, run_dir).fit()
