"""Deterministic mini-batch SGD with momentum, step learning-rate decay,
checkpointing and a finite-difference gradient audit."""
import logging
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from .layers import Layer, MaxPool2, ReLU
from .losses import combined_loss, dice_per_class, format_metrics_row, \
    median_frequency_weights, write_metrics_csv
from .se import ConcurrentSE
from .tensor import read_tensors, write_tensors

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


class NonFiniteGradient(TrainingDiverged):
    pass


@dataclass
class TrainConfig:
    lr0: float = 0.01
    lr_decay_every: int = 10
    lr_decay_factor: float = 0.1
    momentum: float = 0.95
    weight_decay: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 20
    seed: int = 0
    lam: float = 1.0
    patience: int = 10

    def __post_init__(self):
        for name in ("lr0", "lr_decay_factor"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("momentum", "weight_decay", "lam"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        for name in ("lr_decay_every", "batch_size", "max_epochs", "patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class OptimState:
    velocity: list
    epoch: int = 0
    lr: float = 0.0

    @classmethod
    def for_params(cls, params, lr=0.0):
        return cls([np.zeros_like(p.value) for p in params], 0, lr)


def lr_at(epoch, config):
    """Learning rate for zero-based ``epoch``: lr0 * factor ** (epoch // every)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 * config.lr_decay_factor ** (epoch // config.lr_decay_every)


def sgd_step(params, state, config, names=None):
    """``v <- momentum v + grad + wd * param``; ``param <- param - lr v``.

    ``params`` is a list of :class:`Parameter`; gradients are read from
    ``p.grad``. Raises :class:`NonFiniteGradient` before touching anything if
    any gradient is NaN/Inf.
    """
    for i, p in enumerate(params):
        if not np.all(np.isfinite(p.grad)):
            name = names[i] if names else f"#{i}"
            bad = int((~np.isfinite(p.grad)).sum())
            raise NonFiniteGradient(f"non-finite gradient in parameter {name} "
                                    f"({bad} of {p.grad.size} entries)")
    lr = state.lr
    for p, v in zip(params, state.velocity):
        v *= config.momentum
        v += p.grad
        if config.weight_decay:
            v += config.weight_decay * p.value
        p.value -= lr * v


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(network, path):
    tmp = f"{path}.tmp"
    write_tensors([a for _, a in network.named_state()], tmp)
    os.replace(tmp, path)


def load_checkpoint(network, path):
    network.load_state(read_tensors(path))
    return network


def save_optim_state(state, path):
    tmp = f"{path}.tmp"
    write_tensors(state.velocity + [np.array([state.epoch, state.lr], dtype=np.float32)], tmp)
    os.replace(tmp, path)


def load_optim_state(path):
    arrays = read_tensors(path)
    epoch, lr = arrays[-1]
    return OptimState(list(arrays[:-1]), int(epoch), float(lr))


# -- training ----------------------------------------------------------------


def iterate_minibatches(n, batch_size, seed, epoch):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def predict_proba(network, images, batch_size=8):
    out = []
    for start in range(0, len(images), batch_size):
        out.append(network.forward(images[start:start + batch_size], mode="eval"))
    return np.concatenate(out)


def evaluate(network, images, labels, weights=None, lam=1.0, batch_size=8):
    """Eval-mode loss (if ``weights`` given) and per-class Dice pooled over the split."""
    num_classes = network.spec.num_classes
    probs = predict_proba(network, images, batch_size)
    pred = probs.argmax(axis=1)
    loss = float("nan")
    if weights is not None:
        loss = combined_loss(probs, labels, weights, lam)
    return loss, dice_per_class(pred, labels, num_classes)


def train(network, data, config, run_dir=None, weights=None, on_epoch_end=None,
          optim_state=None, start_epoch=0):
    """Train ``network`` on ``data`` = ``{"train": (X, y), "val": (X, y)}``.

    ``X`` is (N, C, H, W) float, ``y`` is (N, H, W) int. When ``run_dir`` is
    given, ``metrics.csv`` and ``checkpoints/epoch_%03d.ckpt`` are written
    there; checkpoint ``k`` holds the weights after ``k`` completed epochs
    (``epoch_000`` is the initialisation). Returns the list of metric rows.
    """
    x_train, y_train = data.get("train", (None, None))
    if x_train is None or len(x_train) == 0:
        raise ValueError("training split is empty")
    x_val, y_val = data.get("val", (None, None))
    num_classes = network.spec.num_classes
    if weights is None:
        weights = median_frequency_weights(list(y_train), num_classes)
    weights = np.asarray(weights, dtype=np.float32)

    params = network.parameters()
    names = [n for n, _ in network.named_parameters()]
    state = optim_state or OptimState.for_params(params)

    ckpt_dir = metrics_path = None
    if run_dir is not None:
        ckpt_dir = os.path.join(run_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)
        metrics_path = os.path.join(run_dir, "metrics.csv")
        if start_epoch == 0:
            write_metrics_csv(metrics_path, [], num_classes)
            save_checkpoint(network, os.path.join(ckpt_dir, "epoch_000.ckpt"))
            save_optim_state(state, os.path.join(ckpt_dir, "epoch_000.opt"))

    history = []
    best_val, stale = np.inf, 0
    for epoch in range(start_epoch, config.max_epochs):
        state.lr = lr_at(epoch, config)
        state.epoch = epoch
        losses = []
        train_pred_counts = np.zeros((3, num_classes), dtype=np.int64)
        for idx in iterate_minibatches(len(x_train), config.batch_size, config.seed, epoch):
            xb, yb = x_train[idx], y_train[idx]
            network.zero_grad()
            probs = network.forward(xb, mode="train")
            loss, grad = combined_loss(probs, yb, weights, config.lam, return_grad=True)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            network.backward(grad)
            sgd_step(params, state, config, names)
            losses.append(loss)
            pred = probs.argmax(axis=1)
            train_pred_counts += _dice_counts(pred, yb, num_classes)
        rows = [format_metrics_row(epoch, "train", state.lr, np.mean(losses),
                                   _dice_from_counts(train_pred_counts))]
        val_loss = None
        if x_val is not None and len(x_val):
            val_loss, val_dice = evaluate(network, x_val, y_val, weights, config.lam)
            if not np.isfinite(val_loss):
                raise TrainingDiverged(f"validation loss became {val_loss} in epoch {epoch}")
            rows.append(format_metrics_row(epoch, "val", state.lr, val_loss, val_dice))
        history.extend(rows)
        log.info("epoch %d lr %.4g train loss %.4f val loss %s", epoch, state.lr,
                 np.mean(losses), val_loss)
        if run_dir is not None:
            write_metrics_csv(metrics_path, rows, num_classes, append=True)
            tag = f"epoch_{epoch + 1:03d}"
            save_checkpoint(network, os.path.join(ckpt_dir, tag + ".ckpt"))
            state.epoch = epoch + 1
            save_optim_state(state, os.path.join(ckpt_dir, tag + ".opt"))
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, network)
        if val_loss is not None:
            if val_loss < best_val:
                best_val, stale = val_loss, 0
            else:
                stale += 1
                if stale >= config.patience:
                    log.info("validation loss converged after epoch %d", epoch)
                    break
    return history


def _dice_counts(pred, true, num_classes):
    p = np.bincount(pred.ravel(), minlength=num_classes)[:num_classes]
    t = np.bincount(true.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    same = pred.ravel() == true.ravel()
    i = np.bincount(pred.ravel()[same], minlength=num_classes)[:num_classes]
    return np.stack([i, p, t])


def _dice_from_counts(counts):
    inter, p, t = counts
    denom = p + t
    return np.divide(2.0 * inter, denom, out=np.full(len(inter), np.nan), where=denom > 0)


# -- gradient audit ----------------------------------------------------------


@dataclass
class GradCheckReport:
    n_checked: int
    max_rel_error: float
    per_kind: dict
    failures: list
    tolerance: float
    n_refined: int = 0

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def relative_error(analytic, numeric, floor=1e-8):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _layer_kind(name):
    parts = name.split(".")
    if "se" in parts:
        sub = parts[parts.index("se") + 1:]
        return "se." + (sub[0] + "." if sub[0] in ("cse", "sse") else "") + sub[-1]
    return parts[-1]


def _sublayers(layer):
    # every Layer held as an attribute, including parameter-free ones that
    # ``children`` leaves out (e.g. the ReLU inside a cSE block)
    for value in vars(layer).values():
        items = value if isinstance(value, (list, tuple)) else [value]
        for item in items:
            if isinstance(item, tuple) and len(item) == 2:
                item = item[1]
            if isinstance(item, Layer):
                yield item


def _switches(layer, seen=None):
    seen = set() if seen is None else seen
    if id(layer) in seen:
        return
    seen.add(id(layer))
    if isinstance(layer, ReLU):
        yield layer._mask
    elif isinstance(layer, MaxPool2):
        yield layer.indices
    elif isinstance(layer, ConcurrentSE) and layer.aggregation == "maxout":
        a, b = layer._ab
        yield a >= b
    for child in _sublayers(layer):
        yield from _switches(child, seen)


def switch_pattern(network):
    """Snapshot of every piecewise-linear decision taken in the last forward pass."""
    pattern = list(_switches(network))
    return [np.array(s, copy=True) for s in pattern]


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(network, images, labels, n_params=200, tolerance=1e-3, h=1e-5, seed=0,
               weights=None, lam=1.0, min_h=1e-9):
    """Compare backprop gradients against central differences in float64.

    A random subsample of ``n_params`` scalar parameters is checked; every
    parameter tensor contributes at least one entry when ``n_params`` allows.
    ReLU, max-pool and max-out make the loss piecewise smooth: when a probe at
    ``theta +- h`` flips any of those switches, ``h`` is divided by 10 (down
    to ``min_h``) so the difference quotient stays on the piece whose
    derivative backprop computes. Relative errors use a floor of
    ``max(1e-8, 1e4 * eps * max(1, |L|) / step)``, the round-off level of the
    difference quotient at the step actually used. The network is copied; ``network`` itself
    is left untouched.
    """
    net = network.astype(np.float64)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    k = net.spec.num_classes
    if weights is None:
        weights = np.ones(k)
    weights = np.asarray(weights, dtype=np.float64)

    named = list(net.named_parameters())

    def probe():
        value = combined_loss(net.forward(images, "train"), labels, weights, lam)
        return value, switch_pattern(net)

    net.zero_grad()
    probs = net.forward(images, "train")
    base_pattern = switch_pattern(net)
    base_loss, grad = combined_loss(probs, labels, weights, lam, return_grad=True)
    net.backward(grad)
    analytic = [p.grad.copy() for _, p in named]

    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for _, p in named])
    picks = []
    if n_params >= len(named):
        picks = [(t, int(rng.integers(sizes[t]))) for t in range(len(named))]
    else:
        picks = [(int(t), int(rng.integers(sizes[t])))
                 for t in rng.choice(len(named), n_params, replace=False)]
    chosen = set(picks)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    while len(picks) < n_params:
        flat = int(rng.integers(offsets[-1]))
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        item = (t, flat - int(offsets[t]))
        if item not in chosen:
            chosen.add(item)
            picks.append(item)

    per_kind, failures, worst, refined = {}, [], 0.0, 0
    for t, i in picks:
        name, p = named[t]
        flat = p.value.reshape(-1)
        orig = flat[i]
        step = h
        while True:
            flat[i] = orig + step
            plus, pat_plus = probe()
            flat[i] = orig - step
            minus, pat_minus = probe()
            flat[i] = orig
            clean = _same_pattern(pat_plus, base_pattern) and _same_pattern(pat_minus, base_pattern)
            if clean or step / 10 < min_h:
                break
            step /= 10
        refined += step != h
        numeric = (plus - minus) / (2 * step)
        a = float(analytic[t].reshape(-1)[i])
        floor = max(1e-8, 1e4 * np.finfo(np.float64).eps * max(1.0, abs(base_loss)) / step)
        err = relative_error(a, numeric, floor)
        kind = _layer_kind(name)
        per_kind[kind] = max(per_kind.get(kind, 0.0), err)
        worst = max(worst, err)
        if err >= tolerance:
            failures.append((name, i, a, numeric, err))
    return GradCheckReport(len(picks), worst, per_kind, failures, tolerance, refined)
