"""Mini-batch training plus evaluation with a VQA-style soft-accuracy report."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .model import BGNModel, predict
from .optim import AdamaxState, NumericError, Schedule, adamax_step, lr_at_epoch
from .synth import SceneRecord, to_batch


@dataclass
class EvalReport:
    overall: float
    per_hop: dict[str, float]
    per_length: dict[str, float]
    count: int
    variant: str
    L: int
    bucket_counts: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        lines = [f"variant={self.variant} L={self.L} records={self.count} overall={self.overall:.4f}"]
        for key, value in sorted(self.per_hop.items()):
            lines.append(f"  hop {key:>2}: {value:.4f}  (n={self.bucket_counts['hop'][key]})")
        for key, value in sorted(self.per_length.items(), key=lambda kv: int(kv[0])):
            lines.append(f"  len {key:>2}: {value:.4f}  (n={self.bucket_counts['length'][key]})")
        return "\n".join(lines)


def epoch_order(count: int, seed: int, epoch: int) -> np.ndarray:
    """Record order for one epoch; depends only on (seed, epoch)."""
    return np.random.default_rng([seed, epoch, 7]).permutation(count)


def run_epoch(
    model: BGNModel,
    records: Sequence[SceneRecord],
    answers: Sequence[str],
    state: AdamaxState,
    lr: float,
    epoch: int,
    seed: int,
    batch_size: int,
) -> float:
    """One pass of Adamax over shuffled mini-batches; returns the mean batch loss."""
    rng = np.random.default_rng([seed, epoch, 11])
    order = epoch_order(len(records), seed, epoch)
    losses = []
    for start in range(0, len(order), batch_size):
        batch = to_batch([records[i] for i in order[start : start + batch_size]], answers)
        model.zero_grad()
        loss, _ = model.loss(batch, train=True, rng=rng)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at epoch {epoch}, batch starting {start}")
        ad.backward(loss)
        grads = {name: p.grad for name, p in model.params.items()}
        adamax_step(model.params, grads, state, lr)
        losses.append(value)
    return float(np.mean(losses))


def predict_records(model: BGNModel, records: Sequence[SceneRecord], answers: Sequence[str], batch_size: int = 256):
    preds, targets = [], []
    for start in range(0, len(records), batch_size):
        batch = to_batch(records[start : start + batch_size], answers)
        scores, _ = model.forward(batch, train=False)
        preds.append(np.atleast_1d(predict(scores)))
        targets.append(batch["targets"])
    return np.concatenate(preds), np.concatenate(targets)


def soft_scores(preds: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-record score: the soft target value of the predicted answer."""
    return targets[np.arange(len(preds)), preds]


def build_report(scores: np.ndarray, records: Sequence[SceneRecord], variant: str, L: int) -> EvalReport:
    buckets: dict[str, dict[str, list[float]]] = {"hop": defaultdict(list), "length": defaultdict(list)}
    for s, r in zip(scores, records):
        buckets["hop"][str(r.hops)].append(float(s))
        buckets["length"][str(r.length)].append(float(s))
    mean = lambda xs: float(np.mean(xs)) if xs else 0.0  # noqa: E731
    return EvalReport(
        overall=mean(list(scores)),
        per_hop={k: mean(v) for k, v in buckets["hop"].items()},
        per_length={k: mean(v) for k, v in buckets["length"].items()},
        count=len(records),
        variant=variant,
        L=L,
        bucket_counts={b: {k: len(v) for k, v in d.items()} for b, d in buckets.items()},
    )


def evaluate(model: BGNModel, records: Sequence[SceneRecord], answers: Sequence[str]) -> tuple[EvalReport, np.ndarray]:
    preds, targets = predict_records(model, records, answers)
    report = build_report(soft_scores(preds, targets), records, model.cfg.variant, model.cfg.L)
    return report, preds


def train(
    model: BGNModel,
    train_records: Sequence[SceneRecord],
    val_records: Sequence[SceneRecord],
    answers: Sequence[str],
    schedule: Schedule,
    epochs: int,
    batch_size: int,
    seed: int,
    state: AdamaxState | None = None,
    start_epoch: int = 1,
    on_epoch: Callable[[dict, BGNModel, AdamaxState], None] | None = None,
) -> tuple[AdamaxState, list[dict]]:
    """Epochs ``start_epoch..epochs``; ``on_epoch`` sees each log entry as it lands."""
    state = state or AdamaxState()
    history = []
    for epoch in range(start_epoch, epochs + 1):
        lr = lr_at_epoch(epoch, schedule)
        loss = run_epoch(model, train_records, answers, state, lr, epoch, seed, batch_size)
        report, _ = evaluate(model, val_records, answers) if val_records else (None, None)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss,
            "val_accuracy": None if report is None else report.overall,
            "val_per_hop": None if report is None else report.per_hop,
        }
        history.append(entry)
        if on_epoch is not None:
            on_epoch(entry, model, state)
    return state, history
