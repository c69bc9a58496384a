"""Class-imbalance-aware losses and Dice evaluation.

Loss functions take softmax probabilities ``(N, K, H, W)`` and integer label
maps ``(N, H, W)``. With ``return_grad=True`` they also return the gradient
w.r.t. the probabilities, which :class:`sefcn.layers.Softmax` turns into a
gradient w.r.t. the logits.
"""
import csv

import numpy as np

from .tensor import InvalidShapeError

LOG_CLAMP = 1e-12
DICE_EPS = 1e-6


def _check_pair(probs, labels):
    if probs.ndim != 4 or labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise InvalidShapeError(f"probs {probs.shape} and labels {labels.shape} do not match")


def one_hot(labels, num_classes, dtype=np.float32):
    """(N, H, W) integer labels -> (N, K, H, W) indicator maps."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(num_classes).reshape(1, -1, 1, 1)).astype(dtype)


def class_pixel_stats(label_maps, num_classes=None):
    """Per-class pixel counts and the pixel total of images containing each class."""
    maps = [np.asarray(m) for m in label_maps]
    if num_classes is None:
        num_classes = int(max((m.max() for m in maps if m.size), default=-1)) + 1
    counts = np.zeros(num_classes, dtype=np.int64)
    present_pixels = np.zeros(num_classes, dtype=np.int64)
    for m in maps:
        c = np.bincount(m.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
        counts += c
        present_pixels += np.where(c > 0, m.size, 0)
    return counts, present_pixels


def frequencies_from_stats(counts, present_pixels):
    return np.divide(counts, present_pixels, out=np.zeros(len(counts)),
                     where=present_pixels > 0)


def median_frequency_weights(label_maps, num_classes=None):
    """Median frequency balancing.

    ``f_c`` is the pixel count of class ``c`` divided by the total pixel count
    of the images in which ``c`` appears; ``w_c = median(f) / f_c`` over the
    present classes. Absent classes get weight 0.
    """
    counts, present = class_pixel_stats(label_maps, num_classes)
    if counts.sum() == 0:
        raise ValueError("no labelled pixels to compute class frequencies from")
    f = frequencies_from_stats(counts, present)
    seen = counts > 0
    med = np.median(f[seen])
    w = np.zeros_like(f)
    w[seen] = med / f[seen]
    return w


def weighted_cross_entropy(probs, labels, weights, return_grad=False):
    """Mean over pixels of ``w[y] * -log p[y]``; probabilities clamped at 1e-12."""
    probs = np.asarray(probs)
    labels = np.asarray(labels).astype(np.intp)
    _check_pair(probs, labels)
    weights = np.asarray(weights, dtype=probs.dtype)
    p_true = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
    p_clamped = np.maximum(p_true, LOG_CLAMP)
    w = weights[labels]
    m = labels.size
    loss = float((w * -np.log(p_clamped)).sum() / m)
    if not return_grad:
        return loss
    grad = np.zeros_like(probs)
    g_true = -w / (m * p_clamped)
    np.put_along_axis(grad, labels[:, None], g_true[:, None].astype(probs.dtype), axis=1)
    return loss, grad


def soft_dice_loss(probs, labels, eps=DICE_EPS, return_grad=False):
    """``1 - mean_c (2 sum p g + eps) / (sum p + sum g + eps)`` over the batch."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    _check_pair(probs, labels)
    k = probs.shape[1]
    g = one_hot(labels, k, probs.dtype)
    inter = (probs * g).sum(axis=(0, 2, 3))
    denom = probs.sum(axis=(0, 2, 3)) + g.sum(axis=(0, 2, 3)) + eps
    num = 2 * inter + eps
    loss = float(1 - (num / denom).mean())
    if not return_grad:
        return loss
    # d/dp of num/denom = (2 g denom - num) / denom^2
    coef_g = (2 / denom).reshape(1, -1, 1, 1)
    coef_c = (num / denom ** 2).reshape(1, -1, 1, 1)
    grad = -(g * coef_g - coef_c) / k
    return loss, grad.astype(probs.dtype)


def combined_loss(probs, labels, weights, lam=1.0, return_grad=False):
    """Weighted cross-entropy plus ``lam`` times soft Dice loss."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    if not return_grad:
        ce = weighted_cross_entropy(probs, labels, weights)
        return ce + lam * soft_dice_loss(probs, labels) if lam else ce
    ce, g = weighted_cross_entropy(probs, labels, weights, return_grad=True)
    if lam:
        dl, gd = soft_dice_loss(probs, labels, return_grad=True)
        return ce + lam * dl, g + lam * gd
    return ce, g


def dice_per_class(pred, true, num_classes=None):
    """Dice of every class; NaN for classes absent from both maps."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise InvalidShapeError(f"prediction {pred.shape} and truth {true.shape} differ in shape")
    if num_classes is None:
        num_classes = int(max(pred.max(initial=0), true.max(initial=0))) + 1
    p = np.bincount(pred.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    t = np.bincount(true.ravel().astype(np.int64), minlength=num_classes)[:num_classes]
    both = pred.ravel()[pred.ravel() == true.ravel()].astype(np.int64)
    inter = np.bincount(both, minlength=num_classes)[:num_classes]
    denom = p + t
    return np.divide(2.0 * inter, denom, out=np.full(num_classes, np.nan), where=denom > 0)


def dice_score(pred, true, scope="global", num_classes=None):
    """Dice overlap between two label maps.

    ``scope="per_class"`` returns the per-class vector (NaN where a class is
    absent from both maps); ``"global"`` the mean over the remaining classes.
    """
    per_class = dice_per_class(pred, true, num_classes)
    if scope == "per_class":
        return per_class
    if scope != "global":
        raise ValueError(f"unknown scope {scope!r}")
    present = ~np.isnan(per_class)
    return float(per_class[present].mean()) if present.any() else 1.0


def metrics_header(num_classes):
    return ["epoch", "split", "lr", "loss", "global_dice"] + [f"dice_{c}" for c in range(num_classes)]


def format_metrics_row(epoch, split, lr, loss, per_class):
    per_class = np.asarray(per_class, dtype=np.float64)
    present = ~np.isnan(per_class)
    global_dice = per_class[present].mean() if present.any() else float("nan")
    return [str(epoch), split, repr(float(lr)), repr(float(loss)), repr(float(global_dice))] + \
        [repr(float(v)) for v in per_class]


def write_metrics_csv(path, rows, num_classes, append=False):
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        if not append:
            writer.writerow(metrics_header(num_classes))
        writer.writerows(rows)


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))
