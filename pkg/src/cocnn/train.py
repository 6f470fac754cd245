"""Desk-scale supervised training: SGD with momentum, step schedule, cross-entropy,
CIFAR-10 binary ingestion, checkpoints, and finite-difference gradient checks.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .layers import BatchNorm2d

log = logging.getLogger(__name__)

CIFAR_RECORD = 3073
CHECKPOINT_FORMAT = "cocnn-checkpoint"
CHECKPOINT_VERSION = 1


class DataError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, batch, lr, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}, lr {lr:g}")
        self.epoch, self.batch, self.lr, self.loss = epoch, batch, lr, loss


# ----------------------------------------------------------------- schedule/SGD

@dataclass(frozen=True)
class Schedule:
    base_lr: float = 0.1
    milestones: tuple[int, ...] = (30, 60, 80)
    gamma: float = 0.1


def lr_at_epoch(epoch: int, schedule: Schedule = Schedule()) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.base_lr * schedule.gamma ** sum(1 for m in schedule.milestones if m <= epoch)


@dataclass
class TrainState:
    params: dict[str, np.ndarray]
    velocity: dict[str, np.ndarray]
    decay: frozenset[str]
    schedule: Schedule = Schedule()
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr: float = 0.1
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        for k, p in self.params.items():
            if self.velocity[k].shape != p.shape:
                raise ValueError(f"momentum buffer for {k} has shape {self.velocity[k].shape}, not {p.shape}")

    @classmethod
    def for_params(cls, params, decay=None, **kw):
        decay = frozenset(params) if decay is None else frozenset(decay)
        return cls(params, {k: np.zeros_like(v) for k, v in params.items()}, decay, **kw)

    @classmethod
    def for_network(cls, net, schedule=Schedule(), momentum=0.9, weight_decay=1e-4):
        return cls.for_params(net.parameters(), net.decay_mask(), schedule=schedule, momentum=momentum,
                              weight_decay=weight_decay, lr=lr_at_epoch(0, schedule))


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float | None = None) -> TrainState:
    """v <- mu*v + (g + wd*w); w <- w - lr*v, in place. Decay only for names in ``state.decay``."""
    lr = state.lr if lr is None else lr
    for name, w in state.params.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {w.shape}")
        v = state.velocity[name]
        v *= state.momentum
        v += g
        if state.weight_decay and name in state.decay:
            v += state.weight_decay * w
        w -= lr * v
    state.step += 1
    return state


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to ``logits``."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must be {n} class indices in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


# ----------------------------------------------------------------------- data

@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    num_classes: int = 10
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, n):
        return Dataset(self.images[:n], self.labels[:n], self.num_classes, self.mean, self.std)


@dataclass
class LabeledBatch:
    images: np.ndarray
    labels: np.ndarray


def load_cifar10_batch(path, normalize=True, limit=None, dtype=np.float32) -> Dataset:
    """Read a CIFAR-10 binary batch (1 label byte + 3072 channel-planar pixels per record)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw or len(raw) % CIFAR_RECORD:
        raise DataError(f"{path}: {len(raw)} bytes is not a whole number of {CIFAR_RECORD}-byte records")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    if limit is not None:
        rec = rec[:limit]
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise DataError(f"{path}: record {bad} has label byte {labels[bad]}")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(dtype) / 255.0
    ds = Dataset(images, labels, 10)
    return normalize_dataset(ds) if normalize else ds


def normalize_dataset(ds: Dataset, mean=None, std=None) -> Dataset:
    """Per-channel standardisation; statistics come from ``ds`` unless given (e.g. from the train split)."""
    if mean is None:
        mean = ds.images.mean(axis=(0, 2, 3))
        std = ds.images.std(axis=(0, 2, 3)) + 1e-8
    images = (ds.images - mean.reshape(1, -1, 1, 1)) / std.reshape(1, -1, 1, 1)
    return Dataset(images.astype(ds.images.dtype), ds.labels, ds.num_classes, mean, std)


def write_cifar10_batch(path, images_u8, labels):
    """Write records in the CIFAR-10 binary layout (used to fabricate test fixtures)."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def synthetic_blobs(n=200, num_classes=2, shape=(3, 32, 32), seed=0, separation=1.0, dtype=np.float32) -> Dataset:
    """Each class is a random per-channel colour (constant over pixels) plus unit Gaussian pixel noise.

    Class means differ by ``separation`` standard deviations per channel, so the
    classes are linearly separable from channel averages alone.
    """
    rng = np.random.default_rng(seed)
    centers = np.broadcast_to(rng.standard_normal((num_classes, shape[0], 1, 1)) * separation,
                              (num_classes, *shape))
    labels = np.arange(n) % num_classes
    rng.shuffle(labels)
    images = centers[labels] + rng.standard_normal((n, *shape))
    return Dataset(images.astype(dtype), labels.astype(np.int64), num_classes)


def random_batch(n=8, num_classes=10, shape=(3, 32, 32), seed=0, dtype=np.float32) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.standard_normal((n, *shape)).astype(dtype),
                   (np.arange(n) % num_classes).astype(np.int64), num_classes)


def augment_batch(images, rng, pad=4):
    """Random horizontal flip and pad-and-crop."""
    n, _, h, w = images.shape
    flip = rng.random(n) < 0.5
    out = images.copy()
    out[flip] = out[flip, :, :, ::-1]
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, n)
    dx = rng.integers(0, 2 * pad + 1, n)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


# ------------------------------------------------------------------- training

def train(net, dataset: Dataset, epochs: int, schedule: Schedule = Schedule(), seed=0, batch_size=32,
          momentum=0.9, weight_decay=1e-4, augment=False, max_steps=None, target_loss=None,
          state: TrainState | None = None):
    """Mini-batch SGD. Returns ``(state, history)``; history has one dict per epoch.

    ``max_steps`` caps the total number of SGD steps; ``target_loss`` stops after
    the first epoch whose mean training loss falls below it.
    """
    if len(dataset) == 0:
        raise DataError("empty dataset")
    rng = np.random.default_rng(seed)
    if state is None:
        state = TrainState.for_network(net, schedule, momentum, weight_decay)
    dtype = net.dtype
    n = len(dataset)
    for _ in range(epochs):
        if max_steps is not None and state.step >= max_steps:
            break
        lr = lr_at_epoch(state.epoch, schedule)
        state.lr = lr
        order = rng.permutation(n)
        tot_loss = correct = seen = 0
        for b, start in enumerate(range(0, n, batch_size)):
            if max_steps is not None and state.step >= max_steps:
                break
            idx = order[start:start + batch_size]
            x = dataset.images[idx].astype(dtype, copy=False)
            if augment:
                x = augment_batch(x, rng)
            y = dataset.labels[idx]
            logits = net.forward(x, train=True)
            loss, g = cross_entropy_loss(logits, y)
            if not math.isfinite(loss):
                raise TrainingDiverged(state.epoch, b, lr, loss)
            net.backward(g.astype(dtype, copy=False))
            sgd_step(state, net.gradients(), lr)
            tot_loss += loss * len(idx)
            correct += int((logits.argmax(axis=1) == y).sum())
            seen += len(idx)
        row = {"epoch": state.epoch, "lr": lr, "train_loss": tot_loss / seen, "train_acc": correct / seen}
        state.history.append(row)
        log.info("epoch %d lr %g loss %.4f acc %.3f", row["epoch"], lr, row["train_loss"], row["train_acc"])
        state.epoch += 1
        if target_loss is not None and row["train_loss"] < target_loss:
            break
    return state, state.history


def evaluate(net, dataset: Dataset, batch_size=100, train_mode=False):
    """Mean loss and accuracy. ``train_mode`` uses batch statistics without touching running stats."""
    bns = net.batchnorms()
    frozen = [bn.frozen for bn in bns]
    for bn in bns:
        bn.frozen = True
    try:
        tot = correct = 0.0
        for start in range(0, len(dataset), batch_size):
            x = dataset.images[start:start + batch_size].astype(net.dtype, copy=False)
            y = dataset.labels[start:start + batch_size]
            logits = net.forward(x, train=train_mode)
            tot += cross_entropy_loss(logits, y)[0] * len(y)
            correct += int((logits.argmax(axis=1) == y).sum())
    finally:
        for bn, f in zip(bns, frozen):
            bn.frozen = f
    return tot / len(dataset), correct / len(dataset)


def recalibrate_bn(net, dataset: Dataset, batch_size=100):
    """Replace BN running statistics with their average over one pass of ``dataset`` (no parameter change).

    After only a few SGD steps the momentum-averaged running statistics still
    remember the initial (0, 1); eval-mode accuracy is only meaningful after this.
    """
    bns = net.batchnorms()
    saved = [(bn.momentum, bn.frozen) for bn in bns]
    for bn in bns:
        bn.frozen = False
        bn.running_mean[:] = 0
        bn.running_var[:] = 0
    try:
        for k, start in enumerate(range(0, len(dataset), batch_size)):
            for bn in bns:
                bn.momentum = 1.0 / (k + 1)
            net.forward(dataset.images[start:start + batch_size].astype(net.dtype, copy=False), train=True)
    finally:
        for bn, (mom, fr) in zip(bns, saved):
            bn.momentum, bn.frozen = mom, fr
    return net


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "lr", "train_loss", "train_acc"], lineterminator="\n")
        w.writeheader()
        for row in history:
            w.writerow({k: row[k] for k in w.fieldnames})


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(net, path, extra=None):
    """npz archive of every parameter and BN buffer plus a JSON header with the format version."""
    from .arch import config_to_dict

    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
              "config": config_to_dict(net.config), "extra": extra or {}}
    arrays = net.state_dict()
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.frombuffer(json.dumps(header).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path, net=None):
    """Load a checkpoint; rebuilds the network from the stored config when ``net`` is None."""
    from .arch import build, parse_arch_config

    with np.load(path) as z:
        header = json.loads(bytes(z["__header__"]).decode())
        if header.get("format") != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise DataError(f"{path}: unsupported checkpoint version {header.get('version')}")
        state = {k: z[k] for k in z.files if k != "__header__"}
    if net is None:
        net = build(parse_arch_config(header["config"]), init=False)
    net.load_state_dict(state)
    return net, header


# -------------------------------------------------------------- gradient check

def relative_error(a, b, floor=1e-6):
    """|a - b| / max(|a|, |b|, floor); the floor keeps round-off on ~zero gradients from dominating."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def _kink_signatures(net):
    return [sig for m in net.modules() if hasattr(m, "kink_signature")
            for sig in [m.kink_signature()] if sig is not None]


def _same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_network(net, batch, samples=3, seed=0, step=1e-5, floor=1e-6, report=None,
                       max_tries=20) -> float:
    """Max relative error between backprop and central differences over sampled coordinates.

    ``batch`` is a :class:`LabeledBatch` or :class:`Dataset`. BN layers run on
    batch statistics with their running statistics frozen for the duration.
    A coordinate whose +/- step flips any ReLU sign or max-pool winner sits on
    a kink where the central difference is not a derivative estimate; such
    coordinates are redrawn (up to ``max_tries`` draws per sample).
    """
    params = net.parameters()
    if any(p.dtype != np.float64 for p in params.values()):
        raise TypeError("gradient checks need a float64 network")
    x, y = batch.images.astype(np.float64), batch.labels
    bns = [m for m in net.modules() if isinstance(m, BatchNorm2d)]
    frozen = [bn.frozen for bn in bns]
    for bn in bns:
        bn.frozen = True
    rng = np.random.default_rng(seed)

    def loss_only():
        loss = cross_entropy_loss(net.forward(x, train=True), y)[0]
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")
        return loss

    try:
        loss, g = cross_entropy_loss(net.forward(x, train=True), y)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss}")
        base = [s.copy() for s in _kink_signatures(net)]
        net.backward(g)
        analytic = {k: v.copy() for k, v in net.gradients().items()}
        worst = 0.0
        for name, p in params.items():
            flat = p.reshape(-1)
            order = rng.permutation(flat.size)
            checked = tries = 0
            for idx in order:
                if checked >= samples or tries >= samples * max_tries:
                    break
                tries += 1
                orig = flat[idx]
                flat[idx] = orig + step
                up = loss_only()
                smooth = _same_pattern(base, _kink_signatures(net))
                flat[idx] = orig - step
                down = loss_only()
                smooth = smooth and _same_pattern(base, _kink_signatures(net))
                flat[idx] = orig
                if not smooth:
                    if report is not None:
                        report.append((name, int(idx), None, None, None))
                    continue
                numeric = (up - down) / (2 * step)
                a = analytic[name].reshape(-1)[idx]
                err = relative_error(np.array(a), np.array(numeric), floor)
                if report is not None:
                    report.append((name, int(idx), float(a), float(numeric), err))
                worst = max(worst, err)
                checked += 1
    finally:
        for bn, f in zip(bns, frozen):
            bn.frozen = f
    return worst


def grad_check_layer(layer, x, samples=5, seed=0, step=1e-5, floor=1e-6, train=True, check_input=True,
                     max_tries=20) -> float:
    """Finite-difference check of one layer (or block) under the loss ``sum(r * layer(x))``.

    ``r`` is a fixed random projection, so every output contributes. Parameter
    coordinates and, with ``check_input``, input coordinates are sampled; kink
    crossings are redrawn as in :func:`grad_check_network`.
    """
    x = np.array(x, dtype=np.float64)
    if any(p.dtype != np.float64 for p in _layer_params(layer).values()):
        raise TypeError("gradient checks need float64 parameters")
    bns = [m for m in layer.modules() if isinstance(m, BatchNorm2d)]
    frozen = [bn.frozen for bn in bns]
    for bn in bns:
        bn.frozen = True
    rng = np.random.default_rng(seed)
    try:
        out = layer.forward(x, train)
        r = rng.standard_normal(out.shape)
        base = [s.copy() for s in _kink_signatures(layer)]
        gx = layer.backward(r.copy())
        targets = {name: (arr, lay.grads[key].copy()) for name, (lay, key, arr) in _layer_params(layer, True).items()}
        if check_input:
            targets["<input>"] = (x, gx)
        worst = 0.0
        for name, (arr, grad) in targets.items():
            flat, gflat = arr.reshape(-1), grad.reshape(-1)
            checked = tries = 0
            for idx in rng.permutation(flat.size):
                if checked >= samples or tries >= samples * max_tries:
                    break
                tries += 1
                orig = flat[idx]
                vals, smooth = [], True
                for sgn in (1.0, -1.0):
                    flat[idx] = orig + sgn * step
                    vals.append(float(np.sum(r * layer.forward(x, train))))
                    smooth = smooth and _same_pattern(base, _kink_signatures(layer))
                flat[idx] = orig
                if not smooth:
                    continue
                numeric = (vals[0] - vals[1]) / (2 * step)
                worst = max(worst, relative_error(np.array(gflat[idx]), np.array(numeric), floor))
                checked += 1
    finally:
        for bn, f in zip(bns, frozen):
            bn.frozen = f
    return worst


def _layer_params(layer, with_owner=False):
    out = {}
    for name, lay, key in layer.named_parameters():
        out[name] = (lay, key, lay.params[key]) if with_owner else lay.params[key]
    return out


def set_threads(n: int):
    """Limit BLAS threads (1 keeps reductions in a fixed order)."""
    from threadpoolctl import threadpool_limits

    os.environ.setdefault("OMP_NUM_THREADS", str(n))
    return threadpool_limits(limits=n)
