"""Evaluation of coarse flow predictions.

All metrics work at grid resolution: ground truth is pooled to cell means
(for EPE, direction and orientation) and to nearest-center labels (for
top-N). Each metric can be restricted to a boolean cell mask: every cell,
cells containing Canny edges, or cells whose ground-truth cluster is not the
zero cluster. Scores are averaged per image first and then over images.
"""
from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .codebook import cell_bounds, cell_means, one_hot, quantize_vectors, soft_decode
from .data import augment, center_origin, resize_short_side, to_gray

log = logging.getLogger(__name__)

NORM_EPS = 1e-9
MASKS = ("All", "Canny", "NZ")


def _masked(values, mask):
    values = np.asarray(values, dtype=np.float64)
    if mask is None:
        return values.ravel()
    return values[np.asarray(mask, dtype=bool)]


def epe(pred, gt, mask=None):
    """Mean end-point error over mask cells; NaN for an empty mask."""
    err = np.linalg.norm(np.asarray(pred, np.float64) - np.asarray(gt, np.float64), axis=-1)
    sel = _masked(err, mask)
    return float(sel.mean()) if sel.size else math.nan


def cosine(pred, gt):
    """Cell-wise cosine; 0 where either vector has (near) zero length."""
    a = np.asarray(pred, np.float64)
    b = np.asarray(gt, np.float64)
    na, nb = np.linalg.norm(a, axis=-1), np.linalg.norm(b, axis=-1)
    ok = (na > NORM_EPS) & (nb > NORM_EPS)
    dot = (a * b).sum(axis=-1)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def direction_similarity(pred, gt, mask=None):
    sel = _masked(cosine(pred, gt), mask)
    return float(sel.mean()) if sel.size else math.nan


def orientation_similarity(pred, gt, mask=None):
    sel = _masked(np.abs(cosine(pred, gt)), mask)
    return float(sel.mean()) if sel.size else math.nan


def rank_order(probs):
    """Class indices per cell by decreasing probability, lower index first on ties."""
    return np.argsort(-np.asarray(probs), axis=-1, kind="stable")


def top_n_hits(ranking, gt, n):
    """Boolean grid: is the true label among the first ``n`` ranked classes?"""
    n = max(1, min(n, ranking.shape[-1]))
    return (ranking[..., :n] == np.asarray(gt)[..., None]).any(axis=-1)


def top_n_accuracy(pred, gt, n, mask=None):
    sel = _masked(top_n_hits(rank_order(pred), gt, n), mask)
    return float(sel.mean()) if sel.size else math.nan


def rank_positions(ranking, gt):
    """1-based position of the true label in a full per-cell ranking."""
    hit = ranking == np.asarray(gt)[..., None]
    return hit.argmax(axis=-1) + 1


def mean_rank(pred, gt, mask=None):
    sel = _masked(rank_positions(rank_order(pred), gt), mask)
    return float(sel.mean()) if sel.size else math.nan


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def canny_edges(image, sigma=1.4, low=0.1, high=0.3):
    """Canny edge map; thresholds are fractions of the maximum gradient magnitude."""
    gray = to_gray(image)
    smooth = ndimage.gaussian_filter(gray, sigma, mode="nearest")
    gx = ndimage.sobel(smooth, axis=1, mode="nearest")
    gy = ndimage.sobel(smooth, axis=0, mode="nearest")
    mag = np.hypot(gx, gy)
    peak = mag.max()
    if peak <= 0:
        return np.zeros(gray.shape, dtype=bool)

    # non-maximum suppression along the gradient direction, 4 sectors
    angle = (np.rad2deg(np.arctan2(gy, gx)) + 180.0) % 180.0
    padded = np.pad(mag, 1)
    h, w = mag.shape

    def shifted(dy, dx):
        return padded[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]

    sector = np.digitize(angle, [22.5, 67.5, 112.5, 157.5]) % 4
    # sector 0: horizontal gradient, 1: 45 deg, 2: vertical, 3: 135 deg (image rows grow downward)
    steps = {0: (0, 1), 1: (1, 1), 2: (1, 0), 3: (1, -1)}
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (dy, dx) in steps.items():
        local = (mag >= shifted(dy, dx)) & (mag >= shifted(-dy, -dx))
        keep |= (sector == s) & local
    nms = np.where(keep & (mag > 0), mag, 0.0)

    strong = nms > high * peak
    weak = nms > low * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3)))
    if count == 0:
        return np.zeros(gray.shape, dtype=bool)
    connected = np.zeros(count + 1, dtype=bool)
    connected[np.unique(labels[strong])] = True
    connected[0] = False
    return connected[labels]


def cell_any(pixels, grid):
    """True for every grid cell containing at least one true pixel."""
    m, n = grid
    rows = cell_bounds(pixels.shape[0], m)
    cols = cell_bounds(pixels.shape[1], n)
    counts = np.add.reduceat(np.add.reduceat(pixels.astype(np.int64), rows, axis=0), cols, axis=1)
    return counts > 0


def canny_mask(image, grid, sigma=1.4, low=0.1, high=0.3):
    return cell_any(canny_edges(image, sigma, low, high), grid)


def nonzero_mask(gt_labels, codebook):
    return np.asarray(gt_labels) != codebook.zero_index


# ---------------------------------------------------------------------------
# nearest-neighbour baseline
# ---------------------------------------------------------------------------

def neighbour_order(query, train_features):
    """Training indices by increasing L2 feature distance (stable on ties)."""
    d = ((np.asarray(train_features, np.float64) - np.asarray(query, np.float64)) ** 2).sum(axis=1)
    return np.argsort(d, kind="stable")


def dedup_rankings(label_stack, width=None):
    """Per cell, labels of the stacked frames in order with repeats dropped.

    ``label_stack`` has shape (frames, M, N). Returns (M, N, width) with -1
    padding; ``width`` defaults to the number of frames.
    """
    label_stack = np.asarray(label_stack)
    frames = label_stack.shape[0]
    width = frames if width is None else width
    out = np.full(label_stack.shape[1:] + (width,), -1, dtype=np.int64)
    fill = np.zeros(label_stack.shape[1:], dtype=np.int64)
    for f in range(frames):
        lab = label_stack[f]
        dup = (out == lab[..., None]).any(axis=-1)
        new = ~dup & (fill < width)
        ii = np.nonzero(new)
        out[ii + (fill[ii],)] = lab[ii]
        fill[new] += 1
    return out


def nn_baseline(query, train_features, train_labels, n):
    """Top-``n`` matched frames' cluster labels per cell, duplicates removed."""
    order = neighbour_order(query, train_features)[:n]
    return dedup_rankings(np.asarray(train_labels)[order], n)


# ---------------------------------------------------------------------------
# predictions and predictors
# ---------------------------------------------------------------------------

class CellPrediction:
    """A predictor's output for one image: coarse flow and a class ranking."""

    def __init__(self, flow, probs=None, ranker=None):
        self.flow = np.asarray(flow, dtype=np.float64)
        self.probs = probs
        self._ranker = ranker
        self._order = None

    def ranked(self, n):
        if self._ranker is not None:
            return self._ranker(n)
        if self._order is None:
            self._order = rank_order(self.probs)
        return self._order[..., :n]

    def full_ranking(self, classes):
        if self._ranker is not None:
            return self._ranker(None)
        return self.ranked(classes)


@dataclass
class EvalItem:
    image: np.ndarray  # network-sized crop
    labels: np.ndarray  # (M, N) ground-truth clusters
    means: np.ndarray  # (M, N, 2) ground-truth cell means
    masks: dict  # mask name -> (M, N) bool


def prepare_eval_items(items, codebook, input_size, grid):
    """Center-crop (image, flow) pairs and derive labels, cell means and masks."""
    out = []
    for image, flow in items:
        image, flow = resize_short_side(image, flow, min(input_size))
        img, fl = augment(image, flow, False, center_origin(image.shape, input_size), input_size)
        means = cell_means(fl, grid)
        labels = quantize_vectors(means, codebook)
        masks = {"All": np.ones(grid, dtype=bool),
                 "Canny": canny_mask(img, grid),
                 "NZ": nonzero_mask(labels, codebook)}
        out.append(EvalItem(img, labels, means, masks))
    return out


def model_predictor(model, codebook):
    def predict(item):
        probs = model.forward(item.image)
        return CellPrediction(soft_decode(probs, codebook), probs)
    return predict


def oracle_predictor(codebook):
    """Feeds the ground truth back: one-hot labels and exact cell means."""
    def predict(item):
        return CellPrediction(item.means, one_hot(item.labels, codebook.size))
    return predict


def uniform_predictor(codebook):
    def predict(item):
        probs = np.full(item.labels.shape + (codebook.size,), 1.0 / codebook.size)
        return CellPrediction(soft_decode(probs, codebook), probs)
    return predict


def nn_predictor(train_items, featurize, classes):
    """Nearest-neighbour transfer from a labelled training set.

    The flow estimate is the best match's cell means; the top-N ranking of a
    cell lists the labels of the N best matches, without repeats.
    """
    train_feats = np.stack([featurize(it.image) for it in train_items])
    train_labels = np.stack([it.labels for it in train_items])
    train_means = np.stack([it.means for it in train_items])

    def predict(item):
        order = neighbour_order(featurize(item.image), train_feats)

        def ranker(n):
            if n is not None:
                return dedup_rankings(train_labels[order[:n]], n)
            # full ranking: every match in order, then the remaining classes by index
            grid = train_labels.shape[1:]
            tail = np.broadcast_to(np.arange(classes)[:, None, None], (classes,) + grid)
            return dedup_rankings(np.concatenate([train_labels[order], tail]), classes)

        return CellPrediction(train_means[order[0]], ranker=ranker)
    return predict


# ---------------------------------------------------------------------------
# evaluation and reporting
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    rows: dict = field(default_factory=dict)  # (metric, mask) -> (value, cells, images)
    per_image: dict = field(default_factory=dict)  # (metric, mask) -> list of per-image values
    failures: int = 0
    note: str = ("grid-resolution evaluation: ground truth pooled to cell means; "
                 "per-image means averaged over images")

    def value(self, metric, mask="All"):
        return self.rows[(metric, mask)][0]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "mask", "value", "cells"])
        for (metric, mask), (value, cells, _) in self.rows.items():
            w.writerow([metric, mask, repr(float(value)), cells])
        return buf.getvalue()

    def to_table(self):
        metrics = list(dict.fromkeys(m for m, _ in self.rows))
        lines = [f"# {self.note}"]
        for metric in metrics:
            heads = [metric, f"{metric}-Canny", f"{metric}-NZ"]
            values = [self.rows.get((metric, mk), (math.nan,))[0] for mk in MASKS]
            lines.append(" | ".join(f"{h:>16}" for h in heads))
            lines.append(" | ".join(f"{v:>16.4f}" for v in values))
            lines.append("")
        return "\n".join(lines) + "\n"


def _safe_predict(predictor, item):
    try:
        return predictor(item)
    except (ValueError, ArithmeticError) as exc:
        log.warning("prediction failed: %s", exc)
        return None


def evaluate(predictor, items, classes, topn=(5, 10), jobs=1):
    """Score ``predictor`` on prepared :class:`EvalItem` objects.

    With ``jobs > 1`` predictions run on a thread pool; results are consumed
    in item order, so the report does not depend on ``jobs``.
    """
    sums = {}
    report = MetricReport()
    metric_names = ["EPE", "Dir", "Orient"] + [f"Top-{n}" for n in topn] + ["mean_rank"]
    for name in metric_names:
        for mk in MASKS:
            report.per_image[(name, mk)] = []
            sums[(name, mk)] = 0
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            preds = list(pool.map(lambda it: _safe_predict(predictor, it), items))
    else:
        preds = (_safe_predict(predictor, it) for it in items)
    for item, pred in zip(items, preds):
        if pred is None:
            report.failures += 1
            continue
        cos = cosine(pred.flow, item.means)
        err = np.linalg.norm(pred.flow - item.means, axis=-1)
        cell_values = {"EPE": err, "Dir": cos, "Orient": np.abs(cos)}
        for n in topn:
            cell_values[f"Top-{n}"] = top_n_hits(pred.ranked(n), item.labels, n).astype(np.float64)
        cell_values["mean_rank"] = rank_positions(pred.full_ranking(classes), item.labels).astype(np.float64)
        for mk in MASKS:
            mask = item.masks[mk]
            count = int(mask.sum())
            if count == 0:
                continue
            for name in metric_names:
                report.per_image[(name, mk)].append(float(cell_values[name][mask].mean()))
                sums[(name, mk)] += count
    for name in metric_names:
        for mk in MASKS:
            vals = report.per_image[(name, mk)]
            value = float(np.mean(vals)) if vals else math.nan
            report.rows[(name, mk)] = (value, sums[(name, mk)], len(vals))
    return report
