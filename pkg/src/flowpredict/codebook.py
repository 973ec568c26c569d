"""Flow-vector and flow-frame codebooks.

Dense flow is turned into classification targets by averaging it over the
cells of an M x N grid and labelling each cell with its nearest codebook
center. Predicted per-cell distributions are turned back into flow either by
the probability-weighted sum of centers (:func:`soft_decode`) or by argmax
(:func:`hard_decode`). Ties always go to the lowest index.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

DEFAULT_CLUSTERS = 40
DEFAULT_FRAME_CLUSTERS = 1000


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    history: list  # within-cluster SSE after every assignment step


def nearest(points, centers):
    """Index of the nearest center for every row of ``points`` (lowest on ties)."""
    points = np.asarray(points, dtype=np.float64)
    return _sq_dist_to_nearest(points, np.asarray(centers, dtype=np.float64))[1]


def _sq_dist_to_nearest(points, centers):
    """Exact squared distance to, and index of, the nearest center (lowest on ties)."""
    k, d = centers.shape
    chunk = max(1, (1 << 22) // max(1, k * d))
    out = np.empty(len(points))
    labels = np.empty(len(points), dtype=np.int64)
    for s in range(0, len(points), chunk):
        dist = ((points[s:s + chunk, None, :] - centers[None]) ** 2).sum(-1)
        lab = dist.argmin(axis=1)
        labels[s:s + chunk] = lab
        out[s:s + chunk] = dist[np.arange(len(lab)), lab]
    return out, labels


def kmeans_pp_init(points, k, rng):
    """k-means++ seeding: first center uniform, then proportional to D^2."""
    n = len(points)
    idx = [int(rng.integers(n))]
    d2, _ = _sq_dist_to_nearest(points, points[idx])
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise ValueError("k-means++ ran out of distinct samples")
        i = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
        i = min(i, n - 1)
        while d2[i] == 0:  # guard against landing on a zero-weight point by rounding
            i = (i + 1) % n
        idx.append(i)
        nd, _ = _sq_dist_to_nearest(points, points[[i]])
        d2 = np.minimum(d2, nd)
    return points[idx].copy()


def kmeans(points, k, seed=0, max_iters=100):
    """Lloyd's algorithm from k-means++ seeding.

    Empty clusters keep their previous center, so the objective recorded in
    ``history`` never increases.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ShapeError(f"samples must be a 2-D array, got shape {points.shape}")
    if k < 1:
        raise ValueError("need at least one cluster")
    distinct = len(np.unique(points, axis=0))
    if distinct < k:
        raise ValueError(f"{distinct} distinct samples cannot seed {k} clusters")
    rng = np.random.default_rng(seed)
    centers = kmeans_pp_init(points, k, rng)
    history = []
    labels = None
    for _ in range(max(1, max_iters)):
        d2, new_labels = _sq_dist_to_nearest(points, centers)
        history.append(float(d2.sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=k)
        filled = counts > 0
        centers = centers.copy()
        centers[filled] = sums[filled] / counts[filled, None]
    else:
        d2, labels = _sq_dist_to_nearest(points, centers)
        history.append(float(d2.sum()))
    return KMeansResult(centers, labels, history)


# ---------------------------------------------------------------------------
# flow-vector codebook
# ---------------------------------------------------------------------------

@dataclass
class FlowCodebook:
    centers: np.ndarray  # (C, 2)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        if len(self.centers) < 1:
            raise ValueError("codebook needs at least one center")

    @property
    def size(self):
        return len(self.centers)

    @property
    def zero_index(self):
        return int(np.argmin(np.hypot(self.centers[:, 0], self.centers[:, 1])))


def build_codebook(samples, clusters=DEFAULT_CLUSTERS, seed=0, max_iters=100):
    result = kmeans(np.asarray(samples, dtype=np.float64).reshape(-1, 2), clusters, seed, max_iters)
    return FlowCodebook(result.centers)


def cell_bounds(n, cells):
    """Start offsets of ``cells`` equal parts of ``n``; the last absorbs the remainder."""
    if cells < 1 or cells > n:
        raise ShapeError(f"cannot split {n} pixels into {cells} cells")
    return np.arange(cells) * (n // cells)


def cell_means(flow, grid):
    """Mean flow over every cell of an M x N partition of the field -> (M, N, 2)."""
    flow = np.asarray(flow, dtype=np.float64)
    m, n = grid
    rows = cell_bounds(flow.shape[0], m)
    cols = cell_bounds(flow.shape[1], n)
    sums = np.add.reduceat(np.add.reduceat(flow, rows, axis=0), cols, axis=1)
    heights = np.diff(np.append(rows, flow.shape[0]))
    widths = np.diff(np.append(cols, flow.shape[1]))
    return sums / (heights[:, None] * widths[None, :])[..., None]


def quantize_vectors(vectors, codebook):
    v = np.asarray(vectors, dtype=np.float64)
    return nearest(v.reshape(-1, 2), codebook.centers).reshape(v.shape[:-1])


def quantize(flow, codebook, grid):
    """Label grid (M, N) of nearest-center indices of the cell-mean flow."""
    return quantize_vectors(cell_means(flow, grid), codebook)


def soft_decode(pred, codebook):
    """Expected flow per cell: sum_r p_r * center_r. ``pred`` is (..., C)."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape[-1] != codebook.size:
        raise ShapeError(f"prediction has {pred.shape[-1]} classes, codebook {codebook.size}")
    return pred @ codebook.centers


def hard_decode(pred):
    return np.asarray(pred).argmax(axis=-1)


def one_hot(labels, classes):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (classes,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def save_codebook(codebook, path):
    lines = [f"FLOWCB 1 {codebook.size}"]
    lines += [f"{repr(float(u))} {repr(float(v))}" for u, v in codebook.centers]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codebook(path):
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    if len(head) != 3 or head[0] != "FLOWCB" or head[1] != "1":
        raise FormatError(f"{path}:1: expected 'FLOWCB 1 C', got {lines[0]!r}")
    c = int(head[2])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != c:
        raise FormatError(f"{path}: header declares {c} centers, found {len(rows)}")
    try:
        centers = [[float(x) for x in ln.split()] for ln in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if any(len(r) != 2 for r in centers):
        raise FormatError(f"{path}: every center line needs two values")
    return FlowCodebook(np.array(centers))


# ---------------------------------------------------------------------------
# frame codebook
# ---------------------------------------------------------------------------

@dataclass
class FrameCodebook:
    centroids: np.ndarray  # (K, M, N, 2)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 4 or self.centroids.shape[-1] != 2 or len(self.centroids) < 1:
            raise ShapeError(f"frame centroids must be (K, M, N, 2), got {self.centroids.shape}")

    @property
    def size(self):
        return len(self.centroids)

    @property
    def grid(self):
        return self.centroids.shape[1:3]

    def assign(self, frames):
        """Nearest centroid of each coarse frame (Euclidean on flattened frames)."""
        frames = np.asarray(frames, dtype=np.float64)
        single = frames.ndim == 3
        flat = frames.reshape(-1 if not single else 1, int(np.prod(self.centroids.shape[1:])))
        _, labels = _sq_dist_to_nearest(flat, self.centroids.reshape(self.size, -1))
        return int(labels[0]) if single else labels


def build_frame_codebook(frames, clusters=DEFAULT_FRAME_CLUSTERS, seed=0, max_iters=100):
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[-1] != 2:
        raise ShapeError(f"frames must be (count, M, N, 2), got {frames.shape}")
    result = kmeans(frames.reshape(len(frames), -1), clusters, seed, max_iters)
    return FrameCodebook(result.centers.reshape((clusters,) + frames.shape[1:]))


def save_frame_codebook(codebook, path):
    k, m, n, _ = codebook.centroids.shape
    lines = [f"FRAMECB 1 {k} {m} {n}"]
    for c in codebook.centroids.reshape(k, -1):
        lines.append(" ".join(repr(float(x)) for x in c))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_frame_codebook(path):
    lines = Path(path).read_text(encoding="utf-8").split("\n")
    head = lines[0].split()
    if len(head) != 5 or head[0] != "FRAMECB" or head[1] != "1":
        raise FormatError(f"{path}:1: expected 'FRAMECB 1 K M N', got {lines[0]!r}")
    k, m, n = (int(x) for x in head[2:])
    rows = [ln for ln in lines[1:] if ln.strip()]
    if len(rows) != k:
        raise FormatError(f"{path}: header declares {k} centroids, found {len(rows)}")
    data = np.array([[float(x) for x in ln.split()] for ln in rows])
    if data.shape != (k, m * n * 2):
        raise FormatError(f"{path}: centroid rows must hold {m * n * 2} values")
    return FrameCodebook(data.reshape(k, m, n, 2))
