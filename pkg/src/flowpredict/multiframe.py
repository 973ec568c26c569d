"""Multi-step prediction over a frame codebook.

A frozen single-frame network supplies a feature vector per image. A chain
of T fully connected stages then classifies each future coarse flow frame:

    h_t = relu(W_t [features, h_1, ..., h_{t-1}] + b_t)
    p_t = softmax(U_t h_t + c_t)

Nothing is shared between steps. Classifier weights start at zero so a fresh
chain predicts the uniform distribution at every step.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from .codebook import cell_means
from .data import augment, center_origin, read_flo, read_image, resize_short_side
from .errors import DataError, NumericError, ShapeError
from .viz import visualize_flow

log = logging.getLogger(__name__)

MF_MAGIC = b"FCMF1\0\0\0"


@dataclass(frozen=True)
class MultiFrameSpec:
    steps: int = 6
    hidden: int = 2000
    clusters: int = 1000
    features: int = 4096

    def validate(self):
        for name in ("steps", "hidden", "clusters", "features"):
            if getattr(self, name) < 1:
                raise ValueError(f"multiframe {name} must be >= 1")

    def input_width(self, t):
        """Hidden-layer input width of step ``t`` (1-based)."""
        return self.features + (t - 1) * self.hidden


def _names(t):
    p = f"step{t}"
    return f"{p}.hidden.weight", f"{p}.hidden.bias", f"{p}.classifier.weight", f"{p}.classifier.bias"


def init_multiframe(spec, seed=0, dtype=np.float64):
    """Xavier hidden layers, all-zero classifiers."""
    spec.validate()
    params = nn.NetworkParams()
    for t in range(1, spec.steps + 1):
        hw, hb, cw, cb = _names(t)
        w, b = nn.xavier_init(nn.fc(spec.hidden), (spec.input_width(t),),
                              np.random.SeedSequence([seed, t]), dtype)
        params[hw], params[hb] = w, b
        params[cw] = np.zeros((spec.clusters, spec.hidden), dtype=dtype)
        params[cb] = np.zeros(spec.clusters, dtype=dtype)
    return params


def spec_from_params(params):
    """Recover the spec from tensor shapes, checking the width law at every step."""
    steps = 0
    while _names(steps + 1)[0] in params:
        steps += 1
    if steps == 0:
        raise ShapeError("no multiframe steps found in parameters")
    h, d = params[_names(1)[0]].shape
    k = params[_names(1)[2]].shape[0]
    spec = MultiFrameSpec(steps, h, k, d)
    check_params(params, spec)
    return spec


def check_params(params, spec):
    for t in range(1, spec.steps + 1):
        hw, hb, cw, cb = _names(t)
        want = {hw: (spec.hidden, spec.input_width(t)), hb: (spec.hidden,),
                cw: (spec.clusters, spec.hidden), cb: (spec.clusters,)}
        for name, shape in want.items():
            if name not in params:
                raise ShapeError(f"step {t}: missing tensor {name}")
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"step {t}: {name} has shape {tuple(params[name].shape)}, expected {shape}")


def _forward(features, params, spec):
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[1] != spec.features:
        raise ShapeError(f"step 1: expected features of width {spec.features}, got shape {feats.shape}")
    inputs, pres, hiddens, probs = [], [], [], []
    for t in range(1, spec.steps + 1):
        hw, hb, cw, cb = _names(t)
        x = np.concatenate([feats] + hiddens, axis=1)
        if x.shape[1] != params[hw].shape[1]:
            raise ShapeError(f"step {t}: input width {x.shape[1]}, weights expect {params[hw].shape[1]}")
        pre = x @ params[hw].T + params[hb]
        h = np.maximum(pre, 0.0)
        probs.append(nn.softmax(h @ params[cw].T + params[cb]))
        inputs.append(x)
        pres.append(pre)
        hiddens.append(h)
    return probs, (inputs, pres, hiddens)


def multiframe_forward(features, params, spec):
    """Per-step distributions over the K frame clusters.

    ``features`` is (D,) or (B, D); the result is a list of T arrays of
    shape (K,) or (B, K).
    """
    feats = np.asarray(features, dtype=np.float64)
    single = feats.ndim == 1
    probs, _ = _forward(feats[None] if single else feats, params, spec)
    return [p[0] for p in probs] if single else probs


def multiframe_loss(probs, labels):
    """Summed cross-entropy over steps and batch; ``labels`` is (B, T)."""
    labels = np.asarray(labels)
    rows = np.arange(len(labels))
    return float(-sum(np.log(np.maximum(p[rows, labels[:, t]], 1e-12)).sum()
                      for t, p in enumerate(probs)))


def loss_and_grads(features, labels, params, spec):
    """Summed loss and its gradients with respect to every chain tensor."""
    labels = np.asarray(labels)
    probs, (inputs, pres, hiddens) = _forward(features, params, spec)
    loss = multiframe_loss(probs, labels)
    rows = np.arange(len(labels))
    dh = [np.zeros_like(h) for h in hiddens]
    grads = {}
    for t in range(spec.steps, 0, -1):
        hw, hb, cw, cb = _names(t)
        dz = probs[t - 1].copy()
        dz[rows, labels[:, t - 1]] -= 1.0
        grads[cw] = dz.T @ hiddens[t - 1]
        grads[cb] = dz.sum(axis=0)
        dpre = (dh[t - 1] + dz @ params[cw]) * (pres[t - 1] > 0)
        grads[hw] = dpre.T @ inputs[t - 1]
        grads[hb] = dpre.sum(axis=0)
        dx = dpre @ params[hw]
        for s in range(1, t):
            lo = spec.features + (s - 1) * spec.hidden
            dh[s - 1] += dx[:, lo:lo + spec.hidden]
    return loss, {k: grads[k] for k in params.names()}


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def extract_features(model, images, spec=None):
    """Penultimate activations of the frozen single-frame ``model``.

    ``images`` are raw images; each is resized and center-cropped first.
    """
    crops = np.stack([model.prepare(img)[0] for img in images])
    feats = model.features(crops)
    if spec is not None and feats.shape[1] != spec.features:
        raise ShapeError(f"model features have width {feats.shape[1]}, multiframe spec expects {spec.features}")
    return feats


def coarse_frames(image_shape, flows, input_size, grid):
    """Cell-mean frames (T, M, N, 2) of flows cropped like the network input."""
    out = []
    for flow in flows:
        if flow.shape[:2] != tuple(image_shape[:2]):
            raise DataError(f"flow {flow.shape[:2]} does not match image {tuple(image_shape[:2])}")
        dummy = np.zeros(flow.shape[:2] + (1,))
        img, fl = resize_short_side(dummy, flow, min(input_size))
        _, fl = augment(img, fl, False, center_origin(img.shape, input_size), input_size)
        out.append(cell_means(fl, grid))
    return np.stack(out)


def load_sequences(records, steps, input_size, grid):
    """Return [(image, frames (T, M, N, 2))] and the number of skipped records."""
    items, skipped = [], 0
    for rec in records:
        if len(rec.flows) != steps:
            skipped += 1
            log.warning("skipping %s: %d frames, expected %d", rec.image, len(rec.flows), steps)
            continue
        try:
            image = read_image(rec.image)
            frames = coarse_frames(image.shape, [read_flo(f) for f in rec.flows], input_size, grid)
        except (OSError, ValueError) as exc:
            skipped += 1
            log.warning("skipping %s: %s", rec.image, exc)
            continue
        items.append((image, frames))
    if skipped:
        log.warning("skipped %d of %d sequence records", skipped, len(records))
    if not items:
        raise DataError("no usable sequence records")
    return items, skipped


# ---------------------------------------------------------------------------
# training and prediction
# ---------------------------------------------------------------------------

def train_chain(features, labels, spec, sgd, seed=0, params=None, progress=None, log_every=100):
    """SGD on precomputed features (N, D) and step labels (N, T).

    Returns the parameters and a list of (iteration, mean loss, lr) rows.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (len(features), spec.steps):
        raise ShapeError(f"labels must be ({len(features)}, {spec.steps}), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= spec.clusters:
        raise ValueError(f"labels must lie in [0, {spec.clusters})")
    params = init_multiframe(spec, seed) if params is None else params
    check_params(params, spec)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    velocity, rows = {}, []
    order, cursor = rng.permutation(len(features)), 0
    while params.iteration < sgd.max_iters:
        it = params.iteration
        idx = []
        for _ in range(min(sgd.batch, len(features))):
            if cursor == len(order):
                order, cursor = rng.permutation(len(features)), 0
            idx.append(order[cursor])
            cursor += 1
        loss, grads = loss_and_grads(features[idx], labels[idx], params, spec)
        loss /= len(idx)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at iteration {it}")
        if it % log_every == 0 or it == sgd.max_iters - 1:
            rows.append((it, loss, sgd.lr(it)))
            if progress:
                progress(it, loss, sgd.lr(it))
        nn.sgd_step(params, {k: g / len(idx) for k, g in grads.items()}, sgd, velocity)
    return params, rows


def train_multiframe(items, model, frame_codebook, spec, sgd, seed=0, progress=None, log_every=100):
    """Train the chain on [(image, frames)] items against a frozen ``model``."""
    if frame_codebook.size != spec.clusters:
        raise ShapeError(f"frame codebook has {frame_codebook.size} clusters, spec expects {spec.clusters}")
    feats = extract_features(model, [img for img, _ in items], spec)
    labels = np.stack([frame_codebook.assign(frames) for _, frames in items])
    return train_chain(feats, labels, spec, sgd, seed, progress=progress, log_every=log_every)


def top1_accuracy(features, labels, params, spec):
    """Per-step fraction of argmax predictions equal to ``labels`` (N, T)."""
    probs = multiframe_forward(features, params, spec)
    labels = np.asarray(labels)
    return np.array([np.mean(p.argmax(axis=1) == labels[:, t]) for t, p in enumerate(probs)])


@dataclass
class MultiFramePrediction:
    probs: list  # T arrays of shape (K,)
    labels: list  # argmax cluster per step
    frames: np.ndarray  # (T, M, N, 2) centroid frames
    images: list  # color-coded frames


def predict_multiframe(image, model, params, frame_codebook, max_magnitude=None):
    spec = spec_from_params(params)
    if frame_codebook.size != spec.clusters:
        raise ShapeError(f"frame codebook has {frame_codebook.size} clusters, checkpoint expects {spec.clusters}")
    feats = extract_features(model, [image], spec)[0]
    probs = multiframe_forward(feats, params, spec)
    labels = [int(np.argmax(p)) for p in probs]
    frames = frame_codebook.centroids[labels]
    if max_magnitude is None:
        max_magnitude = float(np.abs(frame_codebook.centroids).max()) or 1.0
    images = [visualize_flow(f, max_magnitude) for f in frames]
    return MultiFramePrediction(probs, labels, frames, images)


def save_multiframe(path, params):
    nn.save_checkpoint(path, params, MF_MAGIC)


def load_multiframe(path):
    params = nn.load_checkpoint(path, MF_MAGIC)
    spec_from_params(params)
    return params.astype(np.float64)
