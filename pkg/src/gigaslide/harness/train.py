"""Training loop, prediction and evaluation for slide classifiers."""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..autograd import AdamW, NonFiniteGradientError, Tensor, WarmupStepDecay, make_optimizer, no_grad
from ..autograd import functional as F
from .artifacts import save_model
from .augment import apply_augment, sample_augment
from .metrics import confusion_metrics, pearson, roc_auc, roc_curve

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss or gradients became non-finite; the last good checkpoint is kept."""


@dataclass
class TrainingConfig:
    optimizer: str = "adamw"
    peak_lr: float = 1e-4
    floor_lr: float = 1e-6
    warmup_epochs: int = 5
    decay_factor: float = 5.0
    decay_every: int = 30
    weight_decay: float = 1e-5
    epochs: int = 200
    batch_size: int = 8
    augment: bool = True
    max_discard: int = 7
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.floor_lr < self.peak_lr:
            raise ValueError("warm-up floor must be positive and below the peak learning rate")
        if self.decay_factor <= 1:
            raise ValueError("decay factor must exceed 1")

    def schedule(self, steps_per_epoch: int) -> WarmupStepDecay:
        return WarmupStepDecay(self.peak_lr, self.floor_lr, self.warmup_epochs, self.decay_factor,
                               self.decay_every, steps_per_epoch)


@dataclass(frozen=True)
class DataSpec:
    """Which slice of a record a model consumes."""

    levels: int = 3
    mode: str = "separated"


def collate(records, spec: DataSpec, rng=None, augment=False, max_discard=7):
    """Stack records into zero-padded (T, V, mask) batches at the batch max extent."""
    items = []
    for rec in records:
        t, v, m = rec.inputs(spec.levels, spec.mode)
        if augment:
            t, v, m = apply_augment(t, v, m, sample_augment(rng, m.shape, max_discard))
        items.append((t, v, m))
    hv = max(m.shape[0] for _, _, m in items)
    wv = max(m.shape[1] for _, _, m in items)
    hv, wv = -(-hv // 4) * 4, -(-wv // 4) * 4
    b = len(items)
    T = np.zeros((b, items[0][0].shape[0], 2 * hv, 2 * wv), np.float32)
    V = np.zeros((b, items[0][1].shape[0], hv, wv), np.float32)
    M = np.zeros((b, 1, hv, wv), np.float32)
    for i, (t, v, m) in enumerate(items):
        T[i, :, : t.shape[1], : t.shape[2]] = t
        V[i, :, : v.shape[1], : v.shape[2]] = v
        M[i, 0, : m.shape[0], : m.shape[1]] = m
    return T, V, M


def _forward(model, T, V, M):
    cfg = getattr(model, "config", None)
    use_t = getattr(cfg, "use_thumbnail", True)
    use_v = getattr(cfg, "use_embedding", True)
    return model(Tensor(T) if use_t else None, Tensor(V) if use_v else None, M)


def _model_kind(model) -> str:
    from .baseline import NaiveCNN

    return "naive" if isinstance(model, NaiveCNN) else "dsnet"


@dataclass
class Prediction:
    slide_ids: list
    labels: np.ndarray
    scores: np.ndarray  # P(positive)
    stream_scores: np.ndarray | None
    pixel_counts: np.ndarray
    loss: float


def predict(model, records, spec: DataSpec, batch_size: int = 8) -> Prediction:
    was = model.training
    model.eval()
    scores, streams, losses = [], [], []
    with no_grad():
        for i in range(0, len(records), batch_size):
            chunk = records[i : i + batch_size]
            out = _forward(model, *collate(chunk, spec))
            labels = np.array([r.label for r in chunk])
            losses.append(float(F.softmax_cross_entropy(out.logits, labels).data) * len(chunk))
            p = F.softmax(out.logits.data.astype(np.float64), axis=1)[:, 1]
            scores.append(p)
            if out.stream_score is not None:
                streams.append(np.asarray(out.stream_score, dtype=np.float64))
    model.train(was)
    return Prediction(
        [r.slide_id for r in records],
        np.array([r.label for r in records]),
        np.concatenate(scores) if scores else np.zeros(0),
        np.concatenate(streams) if streams else None,
        np.array([r.pixel_count for r in records]),
        sum(losses) / max(len(records), 1),
    )


@dataclass
class EvalReport:
    entries: list  # per-slide dicts: slide_id, label, score, stream_score, pixel_count
    metrics: dict  # accuracy, precision, recall, f1, auc (None if undefined), pearson_s_pixels, ...
    roc: list  # [(fpr, tpr)]

    def as_dict(self) -> dict:
        return {"entries": self.entries, "metrics": self.metrics, "roc": [list(p) for p in self.roc]}


def evaluate_prediction(pred: Prediction) -> EvalReport:
    auc = roc_auc(pred.labels, pred.scores)
    roc = roc_curve(pred.labels, pred.scores) if auc is not None else []
    conf = confusion_metrics(pred.labels, pred.scores)
    r = pearson(pred.stream_scores, pred.pixel_counts) if pred.stream_scores is not None else None
    metrics = {**conf.as_dict(), "auc": auc, "auc_defined": auc is not None, "n": int(len(pred.labels)),
               "loss": pred.loss, "pearson_s_pixels": r}
    entries = []
    for i, sid in enumerate(pred.slide_ids):
        entries.append({
            "slide_id": sid,
            "label": int(pred.labels[i]),
            "score": float(pred.scores[i]),
            "stream_score": None if pred.stream_scores is None else float(pred.stream_scores[i]),
            "pixel_count": int(pred.pixel_counts[i]),
        })
    return EvalReport(entries, metrics, roc)


def evaluate(model, records, spec: DataSpec = DataSpec()) -> EvalReport:
    return evaluate_prediction(predict(model, records, spec))


@dataclass
class TrainResult:
    model: object  # restored to the best-AUC epoch
    history: list = field(default_factory=list)  # one dict per epoch
    best_epoch: int = -1
    best_auc: float | None = None
    checkpoint: str | None = None


def train_dsnet(model, train_records, val_records, config: TrainingConfig = TrainingConfig(),
                spec: DataSpec = DataSpec(), checkpoint_path=None, epoch_callback=None) -> TrainResult:
    """Train with the warm-up / step-decay schedule, keeping the best-val-AUC weights.

    Every epoch logs loss, learning rate and validation metrics. The
    checkpoint (if a path is given) is rewritten whenever validation AUC
    improves; ties keep the earlier epoch. A non-finite loss or gradient
    raises :class:`TrainingDivergedError` and leaves that checkpoint intact.
    """
    cfg = config
    rng = np.random.default_rng(cfg.seed)
    n = len(train_records)
    steps = max(1, -(-n // cfg.batch_size))
    sched = cfg.schedule(steps)
    kw = {"weight_decay": cfg.weight_decay}
    if cfg.optimizer in ("sgd", "sgd_nesterov"):
        kw["momentum"] = 0.9
    opt = make_optimizer(model.parameters(), cfg.optimizer, lr=sched.lr(0, 0), **kw)
    labels_all = np.array([r.label for r in train_records])
    result = TrainResult(model)
    best_state = None
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(n)
        loss_sum, seen = 0.0, 0
        for step in range(steps):
            idx = order[step * cfg.batch_size : (step + 1) * cfg.batch_size]
            if len(idx) == 0:
                continue
            lr = sched.lr(epoch, step)
            opt.set_lr(lr)
            batch = [train_records[i] for i in idx]
            T, V, M = collate(batch, spec, rng, cfg.augment, cfg.max_discard)
            out = _forward(model, T, V, M)
            loss = F.softmax_cross_entropy(out.logits, labels_all[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, step {step} (lr {lr:.3g}); "
                    f"last good checkpoint: {result.checkpoint}"
                )
            model.zero_grad()
            loss.backward()
            try:
                opt.step()
            except NonFiniteGradientError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {step}: {exc}; last good checkpoint: {result.checkpoint}") from exc
            loss_sum += float(loss.data) * len(idx)
            seen += len(idx)
        report = evaluate(model, val_records, spec)
        auc = report.metrics["auc"]
        row = {"epoch": epoch, "lr": sched.lr(epoch, 0), "train_loss": loss_sum / max(seen, 1),
               "val_loss": report.metrics["loss"], "val_auc": auc, "val_accuracy": report.metrics["accuracy"]}
        result.history.append(row)
        log.info("epoch %d lr %.3g train %.4f val loss %.4f auc %s", epoch, row["lr"], row["train_loss"],
                 row["val_loss"], "n/a" if auc is None else f"{auc:.4f}")
        score = -np.inf if auc is None else auc
        best_score = -np.inf if result.best_auc is None else result.best_auc
        if best_state is None or score > best_score:
            best_state = copy.deepcopy(model.state_dict())
            result.best_epoch = epoch
            result.best_auc = auc
            if checkpoint_path is not None:
                save_model(checkpoint_path, model, model.config, _model_kind(model),
                           {"epoch": epoch, "val_auc": auc, "levels": spec.levels, "mode": spec.mode})
                result.checkpoint = str(checkpoint_path)
        if epoch_callback is not None:
            epoch_callback(row)
    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def overfit_single(model, record, spec: DataSpec = DataSpec(), steps: int = 200, lr: float = 1e-3) -> list:
    """Fit one slide repeatedly (no augmentation); returns the loss trace."""
    opt = AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    T, V, M = collate([record], spec)
    losses = []
    model.train()
    for _ in range(steps):
        out = _forward(model, T, V, M)
        loss = F.softmax_cross_entropy(out.logits, np.array([record.label]))
        model.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    return losses


def history_table(history: list) -> list[dict]:
    return [dict(row) for row in history]


def config_dict(cfg) -> dict:
    return asdict(cfg)


def save_history(path, history) -> Path:
    from .reports import write_csv

    return write_csv(path, history)
