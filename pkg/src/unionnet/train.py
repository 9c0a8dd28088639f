"""Training loop, evaluation metrics, checkpointing, history/report emission, k-fold.

Determinism contract: everything downstream of (dataset bytes, split seed,
train seed, config) is reproducible — per-epoch shuffle and augmentation
streams are derived from (seed, epoch) alone, so a run resumed from a
checkpoint emits byte-identical epoch records to the uninterrupted run.
"""

from __future__ import annotations

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .data import Dataset, SplitSpec, FoldPlan, augment_batch, batch_iter, channel_means
from .errors import FormatError, TrainingError, ValidationError
from .kernels import softmax_cross_entropy
from .model import (
    UnionNet,
    _Reader,
    parse_weights_section,
    serialize_weights,
    unionnet_backward,
    unionnet_forward,
)
from .optim import (
    NadamConfig,
    NadamState,
    PlateauConfig,
    PlateauState,
    nadam_step,
    plateau_update,
)

CHECKPOINT_MAGIC = b"UCKP1"
CHECKPOINT_VERSION = 1
HISTORY_COLUMNS = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


@dataclass
class EpochRecord:
    """One training epoch's summary; lr is the rate used during that epoch."""

    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass
class ClassMetrics:
    """Per-class precision/recall/F1 plus overall accuracy."""

    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float

    @property
    def num_classes(self) -> int:
        return self.precision.shape[0]


@dataclass
class EvalResult:
    metrics: ClassMetrics
    confusion: np.ndarray  # (K, K); rows = true class, cols = predicted
    loss: float
    predictions: np.ndarray  # aligned with the evaluated index order


def metrics_from_confusion(confusion: np.ndarray) -> ClassMetrics:
    """Precision/recall/F1 per class from a (true x predicted) count matrix.

    Zero-denominator cells (no predictions / no samples of a class) yield 0.
    """
    confusion = np.asarray(confusion, dtype=np.int64)
    tp = np.diag(confusion).astype(np.float64)
    predicted = confusion.sum(axis=0).astype(np.float64)
    actual = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(actual > 0, tp / actual, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    total = confusion.sum()
    accuracy = float(tp.sum() / total) if total else 0.0
    return ClassMetrics(precision=precision, recall=recall, f1=f1, accuracy=accuracy)


def evaluate(
    net: UnionNet,
    dataset: Dataset,
    indices=None,
    means: np.ndarray | None = None,
    batch_size: int = 64,
) -> EvalResult:
    """Inference-mode evaluation: argmax predictions (ties -> lowest class index).

    `means` is the per-channel training-set mean to subtract; None skips
    normalization.
    """
    if indices is None:
        indices = np.arange(len(dataset))
    indices = np.asarray(indices, dtype=np.int64)
    if indices.size == 0:
        raise ValidationError("cannot evaluate an empty sample set")
    k = net.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    predictions = np.empty(indices.size, dtype=np.int64)
    loss_sum = 0.0
    done = 0
    for images, labels in batch_iter(dataset, indices, batch_size):
        x = images if means is None else images - means[None, :, None, None]
        logits, _ = unionnet_forward(x, net, training=False)
        loss, probs, _ = softmax_cross_entropy(logits, labels)
        pred = probs.argmax(axis=1)  # argmax takes the first maximum: lowest index wins ties
        predictions[done:done + len(labels)] = pred
        np.add.at(confusion, (labels, pred), 1)
        loss_sum += loss * len(labels)
        done += len(labels)
    return EvalResult(
        metrics=metrics_from_confusion(confusion),
        confusion=confusion,
        loss=loss_sum / done,
        predictions=predictions,
    )


# ---------------------------------------------------------------------------
# History CSV and metric reports
# ---------------------------------------------------------------------------


def _fmt(value: float) -> str:
    return f"{value:.6g}"


def write_history(history: list[EpochRecord], path) -> None:
    """CSV with header epoch,train_loss,train_acc,val_loss,val_acc,lr; 6 significant digits."""
    lines = [",".join(HISTORY_COLUMNS)]
    for r in history:
        lines.append(
            f"{r.epoch},{_fmt(r.train_loss)},{_fmt(r.train_acc)},"
            f"{_fmt(r.val_loss)},{_fmt(r.val_acc)},{_fmt(r.lr)}"
        )
    _atomic_write(path, ("\n".join(lines) + "\n").encode("ascii"))


def read_history(path) -> list[EpochRecord]:
    with open(path, "r", encoding="ascii") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or lines[0] != ",".join(HISTORY_COLUMNS):
        raise FormatError(f"{path}: missing or wrong history header")
    records = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 6:
            raise FormatError(f"{path}: expected 6 fields, got {len(parts)} in line {ln!r}")
        records.append(
            EpochRecord(
                epoch=int(parts[0]),
                train_loss=float(parts[1]),
                train_acc=float(parts[2]),
                val_loss=float(parts[3]),
                val_acc=float(parts[4]),
                lr=float(parts[5]),
            )
        )
    return records


def format_report(metrics: ClassMetrics, class_names: list[str] | None = None) -> str:
    """Aligned text table: one row per class (ascending), then overall accuracy."""
    names = class_names or [str(i) for i in range(metrics.num_classes)]
    name_w = max(8, max(len(n) for n in names))
    lines = [f"{'class':<{name_w}}  {'precision':>9}  {'recall':>9}  {'f1-score':>9}"]
    for i, name in enumerate(names):
        lines.append(
            f"{name:<{name_w}}  {metrics.precision[i]:>9.4f}  "
            f"{metrics.recall[i]:>9.4f}  {metrics.f1[i]:>9.4f}"
        )
    lines.append(f"{'accuracy':<{name_w}}  {metrics.accuracy:>9.4f}")
    return "\n".join(lines) + "\n"


def report_dict(metrics: ClassMetrics, class_names: list[str] | None = None) -> dict:
    names = class_names or [str(i) for i in range(metrics.num_classes)]
    return {
        "accuracy": metrics.accuracy,
        "classes": [
            {
                "name": names[i],
                "precision": float(metrics.precision[i]),
                "recall": float(metrics.recall[i]),
                "f1": float(metrics.f1[i]),
            }
            for i in range(metrics.num_classes)
        ],
    }


def write_report(metrics: ClassMetrics, txt_path, json_path, class_names=None) -> None:
    """Emit the metrics as an aligned text table and a JSON document."""
    import json

    _atomic_write(txt_path, format_report(metrics, class_names).encode("utf-8"))
    payload = json.dumps(report_dict(metrics, class_names), indent=2) + "\n"
    _atomic_write(json_path, payload.encode("utf-8"))


# ---------------------------------------------------------------------------
# Checkpoints: weight section + training-state section
# ---------------------------------------------------------------------------
#
# Layout: [weight file bytes, CRC included] then magic "UCKP1" | u32 version |
# u32 epoch | i64 base_seed | f64 lr | u64 step t | f64 m_schedule |
# f64 plateau_best | u32 plateau_wait | u32 plateau_cooldown |
# f64 best_metric | i32 best_epoch | u8 has_means | [means array record] |
# u32 param-count | per parameter in canonical order: m record, v record |
# u32 CRC-32 of the section.  Array records are u8 rank, u32 dims, f32 data.


@dataclass
class TrainCheckpoint:
    net: UnionNet
    epoch: int
    base_seed: int
    lr: float
    opt_state: NadamState
    plateau_state: PlateauState
    best_metric: float
    best_epoch: int
    means: np.ndarray | None


def _array_record(arr: np.ndarray) -> bytes:
    parts = [bytes([arr.ndim])]
    parts.extend(int(d).to_bytes(4, "little") for d in arr.shape)
    parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def _read_array_record(rd: _Reader, expected_shape: tuple, what: str) -> np.ndarray:
    start = rd.off
    rank = rd.u8()
    if rank != len(expected_shape):
        raise FormatError(
            f"{rd.label}: {what} at byte {start} has rank {rank}, expected {len(expected_shape)}"
        )
    dims = tuple(rd.u32() for _ in range(rank))
    if dims != tuple(expected_shape):
        raise FormatError(
            f"{rd.label}: {what} at byte {start} has shape {dims}, expected {tuple(expected_shape)}"
        )
    size = int(np.prod(dims, dtype=np.int64)) if dims else 1
    raw = rd.take(4 * size)
    return np.frombuffer(raw, dtype="<f4").reshape(dims).copy()


def serialize_checkpoint(ckpt: TrainCheckpoint) -> bytes:
    params = ckpt.net.parameters()
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<I", ckpt.epoch),
        struct.pack("<q", ckpt.base_seed),
        struct.pack("<d", ckpt.lr),
        struct.pack("<Q", ckpt.opt_state.t),
        struct.pack("<d", ckpt.opt_state.m_schedule),
        struct.pack("<d", ckpt.plateau_state.best),
        struct.pack("<I", ckpt.plateau_state.wait),
        struct.pack("<I", ckpt.plateau_state.cooldown_counter),
        struct.pack("<d", ckpt.best_metric),
        struct.pack("<i", ckpt.best_epoch),
    ]
    if ckpt.means is None:
        parts.append(b"\x00")
    else:
        parts.append(b"\x01")
        parts.append(_array_record(ckpt.means))
    parts.append(struct.pack("<I", len(params)))
    for name in params:
        parts.append(_array_record(ckpt.opt_state.m[name]))
        parts.append(_array_record(ckpt.opt_state.v[name]))
    section = b"".join(parts)
    section += struct.pack("<I", zlib.crc32(section))
    return serialize_weights(ckpt.net) + section


def save_checkpoint(ckpt: TrainCheckpoint, path) -> None:
    _atomic_write(path, serialize_checkpoint(ckpt))


def load_checkpoint(path) -> TrainCheckpoint:
    with open(path, "rb") as fh:
        data = fh.read()
    label = str(path)
    rd = _Reader(data, label)
    net = parse_weights_section(rd)
    section_start = rd.off
    magic = rd.take(len(CHECKPOINT_MAGIC))
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(
            f"{label}: bad training-state magic {magic!r} at byte {section_start}, "
            f"expected {CHECKPOINT_MAGIC!r}"
        )
    version = rd.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{label}: unsupported checkpoint version {version}")
    epoch = rd.u32()
    (base_seed,) = struct.unpack("<q", rd.take(8))
    (lr,) = struct.unpack("<d", rd.take(8))
    (t,) = struct.unpack("<Q", rd.take(8))
    (m_schedule,) = struct.unpack("<d", rd.take(8))
    (plateau_best,) = struct.unpack("<d", rd.take(8))
    plateau_wait = rd.u32()
    plateau_cooldown = rd.u32()
    (best_metric,) = struct.unpack("<d", rd.take(8))
    (best_epoch,) = struct.unpack("<i", rd.take(4))
    means = None
    if rd.u8():
        means = _read_array_record(rd, (net.in_channels,), "channel means")
    params = net.parameters()
    count = rd.u32()
    if count != len(params):
        raise FormatError(
            f"{label}: optimizer tracks {count} parameters, model has {len(params)}"
        )
    m, v = {}, {}
    for name, p in params.items():
        m[name] = _read_array_record(rd, p.shape, f"first moment of {name}")
        v[name] = _read_array_record(rd, p.shape, f"second moment of {name}")
    crc_off = rd.off
    crc_stored = rd.u32()
    crc_actual = zlib.crc32(data[section_start:crc_off])
    if crc_stored != crc_actual:
        raise FormatError(
            f"{label}: training-state checksum mismatch at byte {crc_off} "
            f"(stored {crc_stored:#010x}, computed {crc_actual:#010x})"
        )
    if rd.off != len(data):
        raise FormatError(
            f"{label}: {len(data) - rd.off} unexpected trailing bytes at byte {rd.off}"
        )
    return TrainCheckpoint(
        net=net,
        epoch=epoch,
        base_seed=base_seed,
        lr=lr,
        opt_state=NadamState(m=m, v=v, t=t, m_schedule=m_schedule),
        plateau_state=PlateauState(
            best=plateau_best, wait=plateau_wait, cooldown_counter=plateau_cooldown
        ),
        best_metric=best_metric,
        best_epoch=best_epoch,
        means=means,
    )


def _atomic_write(path, data: bytes) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_acc: float
    best_path: str
    last_path: str
    history_path: str
    means: np.ndarray


def train(
    net: UnionNet,
    dataset: Dataset,
    split: SplitSpec,
    optim_cfg: NadamConfig,
    plateau_cfg: PlateauConfig,
    epochs: int,
    seed: int,
    out_dir,
    batch_size: int = 32,
    augment_policy: str = "none",
    resume: TrainCheckpoint | None = None,
    log=None,
) -> TrainResult:
    """Run the epoch loop; writes history.csv, best.ckpt and last.ckpt into out_dir.

    Per epoch: one full pass over split.train in a seeded-shuffle order with
    a Nadam update per batch, then an inference-mode pass over split.val,
    then the plateau controller ingests val accuracy.  The best checkpoint
    is kept by strict val-accuracy improvement, so ties keep the earlier
    epoch.  Passing `resume` (a loaded checkpoint) continues after its
    epoch; the records it emits match an uninterrupted run's exactly.
    """
    if epochs < 0:
        raise ValidationError(f"epochs must be >= 0, got {epochs}")
    if np.intersect1d(split.train, split.val).size:
        raise ValidationError("train and val index lists overlap")
    os.makedirs(out_dir, exist_ok=True)
    history_path = os.path.join(out_dir, "history.csv")
    best_path = os.path.join(out_dir, "best.ckpt")
    last_path = os.path.join(out_dir, "last.ckpt")

    if resume is not None:
        net = resume.net
        means = resume.means
        opt_state = resume.opt_state
        plateau_state = resume.plateau_state
        lr = resume.lr
        start_epoch = resume.epoch
        best_metric = resume.best_metric
        best_epoch = resume.best_epoch
        seed = resume.base_seed
    else:
        means = channel_means(dataset, split.train)
        opt_state = NadamState.for_params(net.parameters())
        plateau_state = PlateauState()
        lr = optim_cfg.lr
        start_epoch = 0
        best_metric = -math.inf
        best_epoch = -1

    params = net.parameters()
    history: list[EpochRecord] = []
    write_history(history, history_path)

    def checkpoint(epoch: int) -> TrainCheckpoint:
        return TrainCheckpoint(
            net=net,
            epoch=epoch,
            base_seed=seed,
            lr=lr,
            opt_state=opt_state,
            plateau_state=plateau_state,
            best_metric=best_metric,
            best_epoch=best_epoch,
            means=means,
        )

    if epochs == 0 or (resume is not None and start_epoch >= epochs):
        save_checkpoint(checkpoint(start_epoch), last_path)
        if not os.path.exists(best_path):
            save_checkpoint(checkpoint(start_epoch), best_path)
        return TrainResult(
            history=history,
            best_epoch=best_epoch,
            best_val_acc=best_metric,
            best_path=best_path,
            last_path=last_path,
            history_path=history_path,
            means=means,
        )

    offset = means[None, :, None, None]
    for epoch in range(start_epoch + 1, epochs + 1):
        shuffle_seed = np.random.SeedSequence([seed, epoch, 0])
        aug_rng = np.random.default_rng(np.random.SeedSequence([seed, epoch, 1]))
        loss_sum = 0.0
        correct = 0
        seen = 0
        for batch_idx, (images, labels) in enumerate(
            batch_iter(dataset, split.train, batch_size, shuffle_seed)
        ):
            x = augment_batch(images, aug_rng, augment_policy) - offset
            logits, cache = unionnet_forward(x, net, training=True)
            loss, probs, grad_logits = softmax_cross_entropy(logits, labels)
            if not math.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss} at epoch {epoch}, batch {batch_idx}"
                )
            grads = unionnet_backward(cache, grad_logits)
            try:
                nadam_step(params, grads, opt_state, optim_cfg, lr=lr)
            except ValidationError as exc:
                raise TrainingError(f"{exc} at epoch {epoch}, batch {batch_idx}") from exc
            loss_sum += loss * len(labels)
            correct += int((probs.argmax(axis=1) == labels).sum())
            seen += len(labels)

        val = evaluate(net, dataset, split.val, means, batch_size)
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / seen,
            train_acc=correct / seen,
            val_loss=val.loss,
            val_acc=val.metrics.accuracy,
            lr=lr,
        )
        history.append(record)
        lr = plateau_update(plateau_state, plateau_cfg, val.metrics.accuracy, lr)

        if val.metrics.accuracy > best_metric:
            best_metric = val.metrics.accuracy
            best_epoch = epoch
            save_checkpoint(checkpoint(epoch), best_path)
        write_history(history, history_path)
        save_checkpoint(checkpoint(epoch), last_path)
        if log is not None:
            log(
                f"epoch {epoch}/{epochs}: train_loss={record.train_loss:.4f} "
                f"train_acc={record.train_acc:.4f} val_loss={record.val_loss:.4f} "
                f"val_acc={record.val_acc:.4f} lr={record.lr:.6g}"
            )

    return TrainResult(
        history=history,
        best_epoch=best_epoch,
        best_val_acc=best_metric,
        best_path=best_path,
        last_path=last_path,
        history_path=history_path,
        means=means,
    )


# ---------------------------------------------------------------------------
# K-fold harness
# ---------------------------------------------------------------------------


@dataclass
class KFoldResult:
    fold_accuracies: list[float]
    mean_accuracy: float
    fold_metrics: list[ClassMetrics]
    aggregate_metrics: ClassMetrics
    aggregate_confusion: np.ndarray


def _run_one_fold(args) -> tuple[int, np.ndarray, np.ndarray, float, ClassMetrics]:
    (
        fold,
        dataset,
        split,
        width,
        optim_cfg,
        plateau_cfg,
        epochs,
        base_seed,
        batch_size,
        augment_policy,
        out_dir,
    ) = args
    fold_seed = base_seed + fold
    net = UnionNet.create(width=width, num_classes=dataset.num_classes, seed=fold_seed)
    fold_dir = os.path.join(out_dir, f"fold{fold}")
    try:
        result = train(
            net,
            dataset,
            split,
            optim_cfg,
            plateau_cfg,
            epochs,
            fold_seed,
            fold_dir,
            batch_size=batch_size,
            augment_policy=augment_policy,
        )
        best = load_checkpoint(result.best_path)
        test_eval = evaluate(best.net, dataset, split.test, best.means, batch_size)
    except TrainingError as exc:
        raise TrainingError(f"fold {fold}: {exc}") from exc
    return fold, split.test, test_eval.predictions, test_eval.metrics.accuracy, test_eval.metrics


def run_kfold(
    dataset: Dataset,
    plan: FoldPlan,
    width: int,
    optim_cfg: NadamConfig,
    plateau_cfg: PlateauConfig,
    epochs: int,
    base_seed: int,
    out_dir,
    batch_size: int = 32,
    augment_policy: str = "none",
    jobs: int = 1,
    log=None,
) -> KFoldResult:
    """Train/evaluate each of the 10 folds from a fresh seed = base_seed + fold.

    Per-class metrics are additionally aggregated over the union of all
    folds' test predictions (each sample is tested exactly once).
    """
    os.makedirs(out_dir, exist_ok=True)
    work = [
        (
            fold,
            dataset,
            plan.split(fold),
            width,
            optim_cfg,
            plateau_cfg,
            epochs,
            base_seed,
            batch_size,
            augment_policy,
            out_dir,
        )
        for fold in range(plan.num_folds)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_run_one_fold, work))
    else:
        outcomes = []
        for args in work:
            outcomes.append(_run_one_fold(args))
            if log is not None:
                fold, _, _, acc, _ = outcomes[-1]
                log(f"fold {fold}: test_acc={acc:.4f}")
    outcomes.sort(key=lambda item: item[0])

    k = dataset.num_classes
    confusion = np.zeros((k, k), dtype=np.int64)
    fold_accuracies, fold_metrics = [], []
    for _, test_idx, predictions, accuracy, metrics in outcomes:
        np.add.at(confusion, (dataset.labels[test_idx], predictions), 1)
        fold_accuracies.append(accuracy)
        fold_metrics.append(metrics)
    return KFoldResult(
        fold_accuracies=fold_accuracies,
        mean_accuracy=float(np.mean(fold_accuracies)),
        fold_metrics=fold_metrics,
        aggregate_metrics=metrics_from_confusion(confusion),
        aggregate_confusion=confusion,
    )
