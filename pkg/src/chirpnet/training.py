"""Epoch loop: ADAM with cosine-restart learning rates, validation
monitoring, early stopping, and periodic snapshot checkpoints.

Epochs are reported 1-based; epoch e trains at cosine_lr(e - 1), so the
first epoch runs at the base rate and snapshots taken every
``snapshot_every`` epochs land exactly on restart boundaries.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .dataset import AugmentConfig, CorpusIndex, LabeledSample, make_batches
from .inference import mlrap
from .model import Model, count_params, save_checkpoint
from .nn import (
    LrSchedule,
    adam_step,
    cosine_lr,
    softmax,
    softmax_cross_entropy,
    zero_grads,
)


class DivergenceError(Exception):
    """Raised when a training loss stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 16
    seed: int = 0
    early_stop_patience: int = 5
    snapshot_every: int = 10
    val_fraction: float = 0.05
    augment: bool = True
    base_lr: float = 0.001
    cycle_epochs: int = 10

    def __post_init__(self) -> None:
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")

    def schedule(self) -> LrSchedule:
        return LrSchedule(base_lr=self.base_lr, cycle_epochs=self.cycle_epochs)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float
    val_acc: float
    val_mlrap: float
    snapshot_path: str = ""


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_checkpoint: str = ""
    snapshot_paths: list[str] = field(default_factory=list)
    stopped_early: bool = False

    def save_csv(self, path: Path | str) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["epoch", "lr", "train_loss", "val_loss", "val_acc",
                 "val_mlrap", "snapshot_path"]
            )
            for r in self.records:
                w.writerow(
                    [r.epoch, repr(r.lr), repr(r.train_loss), repr(r.val_loss),
                     repr(r.val_acc), repr(r.val_mlrap), r.snapshot_path]
                )


def evaluate(
    model: Model, samples: Sequence[LabeledSample], batch_size: int = 16
) -> tuple[float, float, float]:
    """Infer-mode (mean loss, top-1 accuracy, MLRAP) over labeled samples.

    MLRAP label sets are foreground plus background ids; loss and accuracy
    use the foreground only.
    """
    if len(samples) == 0:
        raise ValueError("labeled set must be non-empty")
    losses = []
    correct = 0
    scores = []
    label_sets = []
    for start in range(0, len(samples), batch_size):
        part = samples[start : start + batch_size]
        x = np.stack([s.spectrogram for s in part])[:, None, :, :].astype(np.float32)
        labels = np.array([s.foreground for s in part], dtype=np.int64)
        logits = model.forward(x, train=False)
        probs = softmax(logits)
        loss, _, _ = softmax_cross_entropy(logits, labels)
        losses.append(float(loss) * len(part))
        correct += int(np.sum(np.argmax(probs, axis=1) == labels))
        for s, row in zip(part, probs):
            scores.append(row)
            label_sets.append((s.foreground,) + tuple(sorted(s.background)))
    mean_loss = float(sum(losses) / len(samples))
    acc = correct / len(samples)
    return mean_loss, acc, mlrap(scores, label_sets)


def _index_to_samples(
    index: CorpusIndex, cache: dict
) -> list[LabeledSample]:
    from .spectrogram import load_bspc

    out = []
    for path, cid in index.samples:
        spec = cache.get(path)
        if spec is None:
            spec = load_bspc(path)
            cache[path] = spec
        out.append(LabeledSample(spectrogram=spec, foreground=cid))
    return out


def train(
    model: Model,
    train_index: CorpusIndex,
    val_index: CorpusIndex,
    cfg: TrainConfig,
    out_dir: Path | str,
    noise_pool: Sequence[np.ndarray] = (),
    aug_cfg: AugmentConfig = AugmentConfig(),
    lr_fn: Callable[[int], float] | None = None,
    log: Callable[[str], None] = print,
) -> TrainReport:
    """Run the training loop and write checkpoints under ``out_dir``.

    ``lr_fn`` overrides the cosine schedule (it receives the 0-based epoch
    index); the default is cosine_lr over cfg.schedule(). Early stopping
    watches validation loss and is disabled when the validation set is
    empty. Raises DivergenceError on a non-finite loss.
    """
    if len(train_index.samples) == 0:
        raise ValueError("training set must be non-empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sched = cfg.schedule()
    if lr_fn is None:
        lr_fn = lambda e: cosine_lr(e, sched)  # noqa: E731
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    params = model.params()
    cache: dict = {}
    val_samples = _index_to_samples(val_index, cache) if val_index.samples else []

    report = TrainReport()
    best_val = np.inf
    bad_epochs = 0
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_fn(epoch - 1)
        t0 = time.perf_counter()
        loss_sum = 0.0
        n_seen = 0
        for x, labels in make_batches(
            train_index, cfg.batch_size, rng,
            augment_on=cfg.augment, noise_pool=noise_pool,
            aug_cfg=aug_cfg, cache=cache,
        ):
            zero_grads(params)
            logits = model.forward(x, train=True)
            loss, _, dlogits = softmax_cross_entropy(logits, labels)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite training loss at epoch {epoch}"
                )
            model.backward(dlogits)
            step += 1
            adam_step(params, lr, t=step)
            loss_sum += float(loss) * x.shape[0]
            n_seen += x.shape[0]
        train_loss = loss_sum / n_seen

        if val_samples:
            val_loss, val_acc, val_mlrap = evaluate(
                model, val_samples, cfg.batch_size
            )
        else:
            val_loss, val_acc, val_mlrap = float("nan"), float("nan"), float("nan")

        rec = EpochRecord(
            epoch=epoch, lr=lr, train_loss=train_loss,
            val_loss=val_loss, val_acc=val_acc, val_mlrap=val_mlrap,
        )
        if epoch % cfg.snapshot_every == 0:
            snap = out_dir / f"snapshot_{epoch:03d}.bclf"
            save_checkpoint(model, snap, epoch=epoch)
            rec.snapshot_path = str(snap)
            report.snapshot_paths.append(str(snap))
        report.records.append(rec)
        log(
            f"epoch {epoch:3d}  lr {lr:.6f}  train_loss {train_loss:.4f}  "
            f"val_loss {val_loss:.4f}  val_acc {val_acc:.4f}  "
            f"val_mlrap {val_mlrap:.4f}  ({time.perf_counter() - t0:.1f}s)"
        )

        if val_samples:
            if val_loss < best_val:
                best_val = val_loss
                report.best_epoch = epoch
                report.best_checkpoint = str(out_dir / "best.bclf")
                save_checkpoint(model, report.best_checkpoint, epoch=epoch)
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= cfg.early_stop_patience:
                    report.stopped_early = True
                    log(
                        f"early stop at epoch {epoch}: no val-loss "
                        f"improvement for {bad_epochs} epochs"
                    )
                    break
    if not val_samples:
        report.best_epoch = report.records[-1].epoch
        report.best_checkpoint = str(out_dir / "best.bclf")
        save_checkpoint(model, report.best_checkpoint, epoch=report.best_epoch)
    report.save_csv(out_dir / "train_report.csv")
    return report


def initial_loss_sanity(model: Model, x: np.ndarray, labels: np.ndarray) -> float:
    """Loss the first training batch would see; callers compare against ln(n).

    Uses batch statistics (infer mode on a fresh model feeds logits through
    the placeholder running estimates, which can sit far from ln(n)). The
    running stats the forward pass touches are restored afterwards.
    """
    stats = [(p, p.value.copy()) for p in model.params() if not p.trainable]
    logits = model.forward(x, train=True)
    for p, v in stats:
        p.value[:] = v
    loss, _, _ = softmax_cross_entropy(logits, labels)
    return float(loss)


def describe(model: Model) -> str:
    total = count_params(model)
    trainable = count_params(model, trainable_only=True)
    return (
        f"{model.config.n_classes} classes, multiplier "
        f"{model.config.filter_multiplier}, {total} parameters "
        f"({trainable} trainable)"
    )
