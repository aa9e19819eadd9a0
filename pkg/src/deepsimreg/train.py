"""Two-stage training: a feature extractor on a surrogate task, then registration.

All three loops share the same skeleton: shuffled micro-batches whose
gradients are summed over ``accumulation`` passes before each Adam step,
a validation pass after every epoch, plateau-based learning-rate decay and
selection of the best epoch's weights.
"""

from __future__ import annotations

import copy
import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import Dataset, make_batch
from .evaluation import evaluate_fields, foreground_classes, mean_dice
from .metrics import MetricSpec, mse, registration_loss
from .networks import (
    Network,
    autoencoder_config,
    build_unet,
    forward_registration,
    registration_config,
    segmentation_config,
)
from .warp import AffineRanges

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    micro_batch: int = 2
    accumulation: int = 2
    lr: float = 1e-4
    plateau_patience: int = 5
    lr_decay: float = 10.0
    min_lr: float = 1e-7
    lam: float = 0.1
    metric: str = "mse"
    ncc_window: int = 9
    sup_gamma: float = 1.0
    augment: AffineRanges | None = AffineRanges()
    channels: tuple[int, ...] = (16, 32, 64)
    dropout_p: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.micro_batch < 1 or self.accumulation < 1:
            raise ValueError("micro_batch and accumulation must be >= 1")
        if self.lr_decay <= 1:
            raise ValueError("lr_decay must be > 1")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    @property
    def effective_batch(self) -> int:
        return self.micro_batch * self.accumulation

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["augment"] = dataclasses.asdict(self.augment) if self.augment else None
        return d


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_dice: float
    lr: float
    seconds: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epochs must be strictly increasing")
        if self.records and record.lr > self.records[-1].lr:
            raise ValueError("learning rate may not increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best_val_dice(self) -> float:
        scores = [r.val_dice for r in self.records if not np.isnan(r.val_dice)]
        return max(scores) if scores else float("nan")

    def rows(self) -> list[tuple[int, str, str, float]]:
        """Long-format rows ``(epoch, split, metric_name, value)``."""
        out = []
        for r in self.records:
            out += [
                (r.epoch, "train", "loss", r.train_loss),
                (r.epoch, "train", "lr", r.lr),
                (r.epoch, "train", "seconds", r.seconds),
                (r.epoch, "val", "loss", r.val_loss),
            ]
            if not np.isnan(r.val_dice):
                out.append((r.epoch, "val", "mean_dice", r.val_dice))
        return out


def _improved(value: float, best: float, rel: float) -> bool:
    return value < best - rel * abs(best)


def plateau_scheduler(log: TrainLog, patience: int = 5, factor: float = 10.0, min_lr: float = 0.0,
                      rel_threshold: float = 1e-5) -> float:
    """Learning rate for the next epoch given the validation history.

    The rate is divided by ``factor`` once the best validation loss has gone
    ``patience`` consecutive epochs at the current rate without a relative
    improvement of at least ``rel_threshold``. The caller stops training
    when the returned rate falls below ``min_lr``.
    """
    if patience < 1:
        raise ValueError("patience must be >= 1")
    if not log.records:
        raise ValueError("empty training log")
    best = float("inf")
    bad = 0
    prev_lr = None
    for r in log.records:
        if prev_lr is not None and r.lr != prev_lr:
            bad = 0
        prev_lr = r.lr
        if best == float("inf") or _improved(r.val_loss, best, rel_threshold):
            best = r.val_loss
            bad = 0
        else:
            bad += 1
    lr = log.records[-1].lr
    return lr / factor if bad >= patience else lr


def should_stop(lr: float, min_lr: float) -> bool:
    return lr < min_lr * (1.0 - 1e-9)


def _snapshot(net: Network) -> dict:
    return copy.deepcopy(net.state_dict())


def _steps(n: int, cfg: TrainConfig, rng: np.random.Generator):
    """Yield lists of micro-batches (index arrays), one list per optimizer step."""
    order = rng.permutation(n)
    per_step = cfg.effective_batch
    for start in range(0, n, per_step):
        chunk = order[start:start + per_step]
        yield [chunk[i:i + cfg.micro_batch] for i in range(0, len(chunk), cfg.micro_batch)]


def accumulated_step(params, adam: T.AdamState, micro_batches, loss_fn) -> list[float]:
    """One optimizer step over several micro-batches.

    Each micro-batch loss is weighted by its share of the step's samples, so
    the summed gradient equals the gradient of the mean loss over all of them.
    Returns the unweighted micro-batch losses.
    """
    T.zero_grads(params)
    total = sum(len(idx) for idx in micro_batches)
    losses = []
    for idx in micro_batches:
        loss = loss_fn(idx)
        T.scalar_mul(loss, len(idx) / total).backward()
        losses.append(loss.item())
    T.adam_step(params, adam)
    return losses


def _run(net: Network, n_train: int, cfg: TrainConfig, micro_loss, validate, select: str,
         after_step=None) -> tuple[Network, TrainLog]:
    """Generic loop. ``micro_loss(indices, rng) -> Tensor``; ``validate() -> (loss, dice)``."""
    rng = np.random.default_rng([cfg.seed, 2])
    params = net.parameters()
    adam = T.AdamState(lr=cfg.lr)
    trainlog = TrainLog()
    best_score = -float("inf")
    best_state = _snapshot(net)
    lr = cfg.lr
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        adam.lr = lr
        net.train()
        losses = []
        for step in _steps(n_train, cfg, rng):
            losses += accumulated_step(params, adam, step, lambda idx: micro_loss(idx, rng))
            if after_step is not None:
                after_step()
        net.eval()
        val_loss, val_dice = validate()
        trainlog.append(EpochRecord(epoch, float(np.mean(losses)), val_loss, val_dice, lr,
                                    time.perf_counter() - t0))
        score = val_dice if select == "dice" else -val_loss
        if score > best_score:
            best_score = score
            best_state = _snapshot(net)
            trainlog.best_epoch = epoch
        log.info("epoch %d loss %.5f val_loss %.5f val_dice %.4f lr %.1e", epoch, losses[-1], val_loss, val_dice, lr)
        lr = plateau_scheduler(trainlog, cfg.plateau_patience, cfg.lr_decay, cfg.min_lr)
        if should_stop(lr, cfg.min_lr):
            break
    net.load_state_dict(best_state)
    net.zero_grad()
    net.eval()
    return net, trainlog


def _images(samples) -> np.ndarray:
    return np.stack([im for s in samples for im in (s.moving, s.fixed)])[:, None].astype(np.float32)


def _predict(net: Network, x: np.ndarray, batch: int = 8) -> np.ndarray:
    with T.no_grad():
        return np.concatenate([net(x[i:i + batch]).data for i in range(0, len(x), batch)])


def train_autoencoder(dataset: Dataset, config: TrainConfig) -> tuple[Network, TrainLog]:
    """Reconstruct every training image (moving and fixed) under an MSE loss."""
    if not dataset.train:
        raise ValueError("empty training set")
    train_x = _images(dataset.train)
    val_x = _images(dataset.val or dataset.train)
    net = build_unet(autoencoder_config(config.channels, dropout_p=config.dropout_p), seed=config.seed)

    def micro_loss(idx, rng):
        x = train_x[idx]
        return mse(net(x), x)

    def validate():
        return float(np.mean((_predict(net, val_x) - val_x) ** 2)), float("nan")

    return _run(net, len(train_x), config, micro_loss, validate, select="loss")


def _label_set(dataset: Dataset, split):
    samples = dataset.split(split)
    images = _images(samples)
    labels = np.stack([lab for s in samples for lab in (s.moving_labels, s.fixed_labels)])
    return images, labels


def train_segmentation(dataset: Dataset, config: TrainConfig) -> tuple[Network, TrainLog]:
    """Per-pixel cross-entropy over softmax outputs; validation Dice is logged."""
    if not dataset.train:
        raise ValueError("empty training set")
    if not dataset.has_labels:
        raise ValueError("segmentation training needs label maps for every sample")
    c = dataset.num_classes
    train_x, train_y = _label_set(dataset, "train")
    val_x, val_y = _label_set(dataset, "val" if dataset.val else "train")
    net = build_unet(segmentation_config(c, config.channels, dropout_p=config.dropout_p), seed=config.seed)
    eye = np.eye(c, dtype=np.float32)

    def onehot(y):
        return eye[y].transpose(0, 3, 1, 2)

    def micro_loss(idx, rng):
        return T.softmax_cross_entropy(net(train_x[idx], activate=False), onehot(train_y[idx]))

    def validate():
        with T.no_grad():
            logits = np.concatenate([net(val_x[i:i + 8], activate=False).data for i in range(0, len(val_x), 8)])
        loss = T.softmax_cross_entropy(T.Tensor(logits), onehot(val_y)).item()
        pred = logits.argmax(axis=1)
        classes = foreground_classes(c)
        return loss, float(np.mean([mean_dice(p, y, classes) for p, y in zip(pred, val_y)]))

    return _run(net, len(train_x), config, micro_loss, validate, select="loss")


def predict_fields(net: Network, samples, batch: int = 8) -> np.ndarray:
    """Displacement fields ``(N, 2, H, W)`` for a list of samples, eval mode."""
    net.eval()
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch):
            b = make_batch(samples[i:i + batch])
            out.append(forward_registration(net, b.moving, b.fixed).data)
    return np.concatenate(out)


def metric_spec(config: TrainConfig, extractor: Network | None) -> MetricSpec:
    return MetricSpec(kind=config.metric, window=config.ncc_window, gamma=config.sup_gamma,
                      extractor=extractor if config.metric.startswith("deepsim") else None)


def train_registration(dataset: Dataset, extractor: Network | None, config: TrainConfig) -> tuple[Network, TrainLog]:
    """Train a registration U-Net against ``D(I o phi, J) + lam R(phi)``.

    For DeepSim metrics ``extractor`` is frozen and switched to eval mode
    first; any gradient reaching it aborts training.
    """
    if not dataset.train:
        raise ValueError("empty training set")
    spec = metric_spec(config, extractor)
    if spec.is_deepsim:
        extractor.freeze().eval()
    c = dataset.num_classes
    if spec.needs_labels and not dataset.has_labels:
        raise ValueError("ncc_sup needs label maps")
    train = dataset.train
    val = dataset.val or dataset.train
    net = build_unet(registration_config(config.channels, dropout_p=config.dropout_p), seed=config.seed)
    val_batches = [make_batch(val[i:i + 8], c) for i in range(0, len(val), 8)]

    def micro_loss(idx, rng):
        batch = make_batch([train[i] for i in idx], c, rng=rng if config.augment else None, ranges=config.augment)
        field_ = forward_registration(net, batch.moving, batch.fixed)
        return registration_loss(batch, field_, spec, config.lam)

    def check_frozen():
        if spec.is_deepsim:
            leaked = [k for k, p in extractor.params.items() if p.grad is not None or p.requires_grad]
            if leaked:
                raise RuntimeError(f"frozen feature extractor received gradients: {leaked[:5]}")

    def validate():
        losses, fields = [], []
        with T.no_grad():
            for b in val_batches:
                u = forward_registration(net, b.moving, b.fixed)
                losses.append(registration_loss(b, u, spec, config.lam).item() * len(b))
                fields.append(u.data)
        rows = evaluate_fields(val, np.concatenate(fields), c)
        return float(np.sum(losses) / len(val)), float(np.mean([r.mean_dice for r in rows]))

    return _run(net, len(train), config, micro_loss, validate, select="dice", after_step=check_frozen)


def train_extractor(dataset: Dataset, task: str, config: TrainConfig) -> tuple[Network, TrainLog]:
    """Surrogate-task dispatcher: ``ae`` (autoencoder) or ``seg`` (segmentation)."""
    if task == "ae":
        return train_autoencoder(dataset, config)
    if task == "seg":
        return train_segmentation(dataset, config)
    raise ValueError(f"unknown extractor task {task!r}; expected 'ae' or 'seg'")


__all__ = [
    "accumulated_step",
    "EpochRecord",
    "TrainConfig",
    "TrainLog",
    "plateau_scheduler",
    "predict_fields",
    "train_autoencoder",
    "train_extractor",
    "train_registration",
    "train_segmentation",
]
