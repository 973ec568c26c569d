"""Single-frame motion prediction network and its training loop.

The network maps an RGB image to an M x N grid of distributions over the
C flow-codebook clusters. It is trained with the spatial cross-entropy

    L(I, Y) = -sum_i log F[i, y_i]

summed over all grid cells.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import nn
from .codebook import cell_means, quantize, soft_decode
from .data import augment, center_origin, random_origin, read_image, resize_short_side, to_gray
from .errors import DataError, NumericError, ShapeError
from .viz import visualize_flow

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
INPUT_MEAN = "input_mean"


def paper_body():
    return [
        nn.conv(96, 11, stride=4, pad=0), nn.relu(), nn.lrn(), nn.maxpool(3, 2),
        nn.conv(256, 5, pad=2), nn.relu(), nn.lrn(), nn.maxpool(3, 2),
        nn.conv(384, 3, pad=1), nn.relu(),
        nn.conv(384, 3, pad=1), nn.relu(),
        nn.conv(256, 3, pad=1), nn.relu(), nn.maxpool(3, 2),
        nn.fc(4096), nn.relu(), nn.fc(4096), nn.relu(),
    ]


def tiny_body():
    return [
        nn.conv(16, 5, stride=2, pad=0), nn.relu(), nn.maxpool(3, 2),
        nn.conv(32, 3, pad=1), nn.relu(), nn.maxpool(3, 2),
        nn.conv(32, 3, pad=1), nn.relu(), nn.maxpool(3, 2),
        nn.fc(256), nn.relu(),
    ]


@dataclass
class ModelConfig:
    input_size: tuple = (200, 200)
    grid: tuple = (20, 20)
    clusters: int = 40
    body: list = field(default_factory=paper_body)
    sgd: nn.SgdConfig = field(default_factory=lambda: nn.SgdConfig(base_lr=1e-4, stepsize=50000))
    augment: bool = True
    flip: bool = True  # mirror half the crops; only meaningful with augment
    preset: str = "paper"
    log_every: int = 100
    checkpoint_every: int = 0
    channels: int = 3

    @property
    def layers(self):
        """Full layer chain: body followed by the M*N*C logit layer."""
        m, n = self.grid
        return list(self.body) + [nn.fc(m * n * self.clusters)]

    @property
    def input_shape(self):
        return (self.channels,) + tuple(self.input_size)

    def network(self):
        return nn.Network(self.layers, self.input_shape)


def preset_config(name="paper", **overrides):
    if name == "paper":
        cfg = ModelConfig()
    elif name == "tiny":
        cfg = ModelConfig(input_size=(64, 64), grid=(8, 8), clusters=10, body=tiny_body(),
                          sgd=nn.SgdConfig(base_lr=1e-3, stepsize=5000), preset="tiny")
    else:
        raise ValueError(f"unknown preset {name!r}; expected 'paper' or 'tiny'")
    return apply_overrides(cfg, overrides)


CONFIG_KEYS = ("input_size", "grid_m", "grid_n", "clusters", "base_lr", "stepsize", "gamma",
               "batch", "max_iters", "seed", "augment", "flip", "preset", "momentum", "weight_decay",
               "log_every", "checkpoint_every")


def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_size(text):
    if isinstance(text, (tuple, list)):
        return tuple(int(x) for x in text)[:2]
    parts = [int(p) for p in str(text).lower().replace("x", " ").split()]
    if len(parts) == 1:
        return (parts[0], parts[0])
    return tuple(parts[:2])


def apply_overrides(cfg, values):
    """Return a copy of ``cfg`` with config-file style ``values`` applied."""
    values = {k: v for k, v in values.items() if v is not None}
    unknown = set(values) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if "preset" in values and values["preset"] != cfg.preset:
        cfg = preset_config(values["preset"])
    sgd = {}
    for key in ("base_lr", "gamma", "momentum", "weight_decay"):
        if key in values:
            sgd[key] = float(values[key])
    for key in ("stepsize", "batch", "max_iters", "seed"):
        if key in values:
            sgd[key] = int(values[key])
    out = replace(cfg, sgd=replace(cfg.sgd, **sgd))
    if "input_size" in values:
        out = replace(out, input_size=_parse_size(values["input_size"]))
    grid = list(out.grid)
    if "grid_m" in values:
        grid[0] = int(values["grid_m"])
    if "grid_n" in values:
        grid[1] = int(values["grid_n"])
    out = replace(out, grid=tuple(grid))
    if "clusters" in values:
        out = replace(out, clusters=int(values["clusters"]))
    for key in ("augment", "flip"):
        if key in values:
            out = replace(out, **{key: _parse_bool(values[key])})
    for key in ("log_every", "checkpoint_every"):
        if key in values:
            out = replace(out, **{key: int(values[key])})
    return out


def read_config_file(path):
    """Parse ``key = value`` lines (``#`` starts a comment)."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = value
    return values


def load_config(path=None, preset=None, **overrides):
    values = read_config_file(path) if path else {}
    name = preset or values.get("preset", "paper")
    values.pop("preset", None)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return preset_config(name, **values)


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def spatial_loss(probs, labels):
    """Spatial cross-entropy and its gradient with respect to the logits.

    ``probs`` has shape (..., cells, C) and ``labels`` (..., cells). The loss
    sums over cells (and any leading batch axes); the gradient is
    ``probs - one_hot(labels)`` with the shape of ``probs``.
    """
    probs = np.asarray(probs)
    labels = np.asarray(labels).reshape(probs.shape[:-1])
    picked = np.take_along_axis(probs, labels[..., None], axis=-1)[..., 0]
    loss = float(-np.log(np.maximum(picked.astype(np.float64), LOG_FLOOR)).sum())
    grad = probs.copy()
    np.put_along_axis(grad, labels[..., None],
                      np.take_along_axis(grad, labels[..., None], axis=-1) - 1, axis=-1)
    return loss, grad


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class FlowModel:
    """A configured network together with its parameters and input mean."""

    def __init__(self, config, params=None, seed=0, dtype=np.float32):
        self.config = config
        self.net = config.network()
        if params is None:
            params = self.net.init_params(seed, dtype)
            params[INPUT_MEAN] = np.full(config.channels, 0.5, dtype=dtype)
        self.net.check_params(params)
        if INPUT_MEAN not in params:
            params[INPUT_MEAN] = np.full(config.channels, 0.5, dtype=params[self._first_weight()].dtype)
        self.params = params

    def _first_weight(self):
        return next(iter(self.net.param_shapes()))

    @property
    def dtype(self):
        return self.params[self._first_weight()].dtype

    @property
    def feature_width(self):
        return int(np.prod(self.net.shapes[-2]))

    @property
    def cells(self):
        m, n = self.config.grid
        return m * n

    def clone(self):
        """A model sharing parameters but with its own layer caches."""
        twin = FlowModel.__new__(FlowModel)
        twin.config, twin.params, twin.net = self.config, self.params, self.config.network()
        return twin

    def to_input(self, images):
        """(B, H, W, C) or (H, W, C) images in [0, 1] -> mean-subtracted (B, C, H, W)."""
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[-1] != self.config.channels:
            raise ShapeError(f"input: expected {self.config.channels} channels, got {x.shape[-1]}")
        x = x - self.params[INPUT_MEAN].astype(np.float64)
        return np.ascontiguousarray(x.transpose(0, 3, 1, 2), dtype=self.dtype)

    def logits(self, images, keep=False):
        return self.net.forward(self.to_input(images), self.params, keep=keep)

    def probabilities(self, images, keep=False):
        """(B, M*N, C) per-cell distributions."""
        return nn.spatial_softmax_forward(self.logits(images, keep), self.config.clusters)

    def forward(self, image):
        """(M, N, C) prediction grid for a single prepared image."""
        m, n = self.config.grid
        return self.probabilities(image)[0].reshape(m, n, self.config.clusters).astype(np.float64)

    def features(self, images):
        """Post-ReLU activations of the last hidden fully connected layer."""
        x = self.to_input(images)
        return self.net.forward(x, self.params, upto=len(self.net.specs) - 1, keep=False).astype(np.float64)

    def loss_and_grads(self, images, labels):
        """Summed spatial loss over the batch and parameter gradients of that sum."""
        probs = self.probabilities(images, keep=True)
        loss, dlogits = spatial_loss(probs, np.asarray(labels).reshape(len(probs), -1))
        grads, _ = self.net.backward(dlogits.reshape(len(probs), -1))
        return loss, grads

    def prepare(self, image, flow=None):
        """Short-side resize and center crop to the network input size."""
        size = self.config.input_size
        image, flow = resize_short_side(image, flow, min(size))
        origin = center_origin(image.shape, size)
        if flow is None:
            y, x = origin
            return image[y:y + size[0], x:x + size[1]].copy(), None
        return augment(image, flow, False, origin, size)

    def save(self, path):
        nn.save_checkpoint(path, self.params)

    @classmethod
    def load(cls, path, config):
        params = nn.load_checkpoint(path)
        return cls(config, params)


def initial_loss(model, images, labels):
    """Mean per-image spatial loss of ``model`` on a batch (no training)."""
    probs = model.probabilities(images)
    loss, _ = spatial_loss(probs, np.asarray(labels).reshape(len(probs), -1))
    return loss / len(probs)


MAX_CODEBOOK_SAMPLES = 10 ** 6


def codebook_samples(items, config, limit=MAX_CODEBOOK_SAMPLES, seed=0):
    """Cell-mean flow vectors of center-cropped training labels, at most ``limit``."""
    size = config.input_size
    out = []
    for image, flow in items:
        image, flow = resize_short_side(image, flow, min(size))
        _, fl = augment(image, flow, False, center_origin(image.shape, size), size)
        out.append(cell_means(fl, config.grid).reshape(-1, 2))
    samples = np.concatenate(out)
    if len(samples) > limit:
        keep = np.random.default_rng(seed).choice(len(samples), size=limit, replace=False)
        samples = samples[np.sort(keep)]
    return samples


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

class TrainingSet:
    """Images and flows resized once, cropped and labelled on demand."""

    def __init__(self, items, codebook, config):
        self.config = config
        self.codebook = codebook
        size = config.input_size
        self.items = []
        for image, flow in items:
            image, flow = resize_short_side(image, flow, min(size))
            if image.shape[0] < size[0] or image.shape[1] < size[1]:
                raise DataError(f"image {image.shape[:2]} smaller than input {size}")
            if image.shape[2] != config.channels:
                raise DataError(f"image has {image.shape[2]} channels, expected {config.channels}")
            self.items.append((image, flow))

    def __len__(self):
        return len(self.items)

    def example(self, index, rng=None):
        """Cropped (image, labels, cell-mean flow); random flip/crop when ``rng`` is given."""
        image, flow = self.items[index]
        size = self.config.input_size
        if rng is None:
            img, fl = augment(image, flow, False, center_origin(image.shape, size), size)
        else:
            flip = bool(rng.integers(0, 2)) and self.config.flip
            img, fl = augment(image, flow, flip, random_origin(rng, image.shape, size), size)
        return img, quantize(fl, self.codebook, self.config.grid), fl

    def channel_mean(self):
        return np.mean([img.reshape(-1, img.shape[2]).mean(axis=0) for img, _ in self.items], axis=0)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)  # (iteration, loss, lr)

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss", "lr"])
            for it, loss, lr in self.rows:
                w.writerow([it, repr(float(loss)), repr(float(lr))])


def _batch_grads(models, images, labels):
    """Loss and gradients summed over the batch, split across worker models."""
    if len(models) == 1:
        return models[0].loss_and_grads(images, labels)
    chunks = np.array_split(np.arange(len(images)), len(models))
    jobs = [(m, c) for m, c in zip(models, chunks) if len(c)]
    with ThreadPoolExecutor(len(jobs)) as pool:
        results = list(pool.map(lambda mc: mc[0].loss_and_grads(images[mc[1]], labels[mc[1]]), jobs))
    loss = sum(r[0] for r in results)
    grads = {k: sum(r[1][k] for r in results) for k in results[0][1]}
    return loss, grads


def train(items, codebook, config, seed=None, jobs=1, checkpoint_path=None, model=None,
          progress=None):
    """Minibatch SGD on (image, flow) pairs.

    Returns the trained :class:`FlowModel` and a :class:`TrainLog`. With
    ``jobs == 1`` the run is deterministic for a fixed seed.
    """
    if codebook.size != config.clusters:
        raise ShapeError(f"codebook has {codebook.size} clusters, config expects {config.clusters}")
    seed = config.sgd.seed if seed is None else seed
    data = TrainingSet(items, codebook, config)
    if model is None:
        model = FlowModel(config, seed=seed)
        model.params[INPUT_MEAN] = data.channel_mean().astype(model.dtype)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    workers = [model] + [model.clone() for _ in range(max(1, jobs) - 1)]
    sgd = config.sgd
    velocity = {}
    train_log = TrainLog()
    order, cursor = rng.permutation(len(data)), 0
    while model.params.iteration < sgd.max_iters:
        it = model.params.iteration
        idx = []
        for _ in range(sgd.batch):
            if cursor == len(order):
                order, cursor = rng.permutation(len(data)), 0
            idx.append(order[cursor])
            cursor += 1
        batch = [data.example(i, rng if config.augment else None) for i in idx]
        images = np.stack([b[0] for b in batch])
        labels = np.stack([b[1] for b in batch])
        loss, grads = _batch_grads(workers, images, labels)
        loss /= len(idx)
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at iteration {it}")
        scale = np.asarray(1.0 / len(idx), dtype=model.dtype)
        grads = {k: g * scale for k, g in grads.items()}
        if it % config.log_every == 0 or it == sgd.max_iters - 1:
            train_log.rows.append((it, loss, sgd.lr(it)))
            if progress:
                progress(it, loss, sgd.lr(it))
        nn.sgd_step(model.params, grads, sgd, velocity)
        if checkpoint_path and config.checkpoint_every and model.params.iteration % config.checkpoint_every == 0:
            model.save(checkpoint_path)
    if checkpoint_path:
        model.save(checkpoint_path)
    return model, train_log


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    probs: np.ndarray  # (M, N, C)
    flow: np.ndarray  # (M, N, 2)
    image: np.ndarray  # color-coded flow at input resolution


def predict_image(model, image, codebook, max_magnitude=None):
    if codebook.size != model.config.clusters:
        raise ShapeError(f"codebook has {codebook.size} clusters, model predicts {model.config.clusters}")
    crop, _ = model.prepare(image)
    probs = model.forward(crop)
    flow = soft_decode(probs, codebook)
    h, w = model.config.input_size
    m, n = model.config.grid
    rows = np.minimum(np.arange(h) * m // h, m - 1)
    cols = np.minimum(np.arange(w) * n // w, n - 1)
    if max_magnitude is None:
        max_magnitude = float(np.abs(codebook.centers).max()) or 1.0
    vis = visualize_flow(flow[rows][:, cols], max_magnitude)
    return Prediction(probs, flow, vis)


def predict(image_path, model, codebook):
    return predict_image(model, read_image(image_path), codebook)


def gradient_check(config, seed=0, samples=100, batch=2, eps=1e-4):
    """Full-network analytic vs central-difference gradient in float64.

    Returns the maximum relative error over ``samples`` randomly chosen
    parameters (at least one from every tensor).
    """
    rng = np.random.default_rng(seed)
    model = FlowModel(config, seed=seed, dtype=np.float64)
    h, w = config.input_size
    images = rng.random((batch, h, w, config.channels))
    m, n = config.grid
    labels = rng.integers(0, config.clusters, size=(batch, m * n))
    _, grads = model.loss_and_grads(images, labels)

    def f():
        return model.loss_and_grads(images, labels)[0]

    names = list(grads)
    sizes = np.array([grads[k].size for k in names])
    picks = {k: [int(rng.integers(grads[k].size))] for k in names}
    flat = rng.choice(sizes.sum(), size=max(0, samples - len(names)), replace=False)
    offsets = np.cumsum(sizes) - sizes
    for i in flat:
        t = int(np.searchsorted(offsets, i, side="right") - 1)
        picks[names[t]].append(int(i - offsets[t]))
    worst = 0.0
    for k, idxs in picks.items():
        arr = model.params[k]
        for i in sorted(set(idxs)):
            idx = np.unravel_index(i, arr.shape)
            num = nn.numerical_gradient(f, arr, idx, eps)
            worst = max(worst, float(nn.relative_error(grads[k][idx], num)))
    return worst


def grayscale_thumbnail(image, size=32):
    """Raw-pixel descriptor: grayscale nearest-neighbour downsample to size x size."""
    g = to_gray(image)
    h, w = g.shape
    rows = np.minimum(((np.arange(size) + 0.5) * h / size).astype(np.int64), h - 1)
    cols = np.minimum(((np.arange(size) + 0.5) * w / size).astype(np.int64), w - 1)
    return g[rows][:, cols].ravel()
