"""Slow, loop-based reference implementations used as test oracles.

Nothing here imports the package's numeric helpers; each function
recomputes its quantity from first principles.
"""
import itertools
import math

import numpy as np


# ---------------------------------------------------------------------------
# codebook
# ---------------------------------------------------------------------------

def cell_means_loop(flow, m, n):
    h, w = flow.shape[:2]
    ch, cw = h // m, w // n
    out = np.zeros((m, n, 2))
    for i in range(m):
        for j in range(n):
            r1 = h if i == m - 1 else (i + 1) * ch
            c1 = w if j == n - 1 else (j + 1) * cw
            acc = [0.0, 0.0]
            count = 0
            for y in range(i * ch, r1):
                for x in range(j * cw, c1):
                    acc[0] += float(flow[y, x, 0])
                    acc[1] += float(flow[y, x, 1])
                    count += 1
            out[i, j] = acc[0] / count, acc[1] / count
    return out


def nearest_loop(vec, centers):
    best, best_d = 0, math.inf
    for r, c in enumerate(centers):
        d = (vec[0] - c[0]) ** 2 + (vec[1] - c[1]) ** 2
        if d < best_d:
            best, best_d = r, d
    return best


def kmeans_exhaustive(points, k=2):
    """Globally optimal partition by enumerating every label assignment."""
    points = np.asarray(points, dtype=np.float64)
    best, best_sse = None, math.inf
    for labels in itertools.product(range(k), repeat=len(points)):
        if labels[0] != 0 or len(set(labels)) < k:
            continue  # fix the first label to skip relabelled duplicates
        labels = np.array(labels)
        centers = np.array([points[labels == r].mean(axis=0) for r in range(k)])
        sse = sum(((points[labels == r] - centers[r]) ** 2).sum() for r in range(k))
        if sse < best_sse - 1e-12:
            best, best_sse = centers, sse
    return best, best_sse


def two_means_exhaustive(points):
    """Optimal 2-partition of up to ~22 points by enumerating every bitmask.

    Uses SSE = sum |x|^2 - |S_a|^2 / n_a - |S_b|^2 / n_b for each split.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    masks = np.arange(1, 2 ** (n - 1))  # point n-1 always in the second group
    member = ((masks[:, None] >> np.arange(n)) & 1).astype(np.float64)
    total = points.sum(axis=0)
    s_a = member @ points
    n_a = member.sum(axis=1)
    s_b = total - s_a
    n_b = n - n_a
    sse = (points ** 2).sum() - (s_a ** 2).sum(1) / n_a - (s_b ** 2).sum(1) / n_b
    best = int(np.argmin(sse))
    return np.array([s_a[best] / n_a[best], s_b[best] / n_b[best]]), float(sse[best])


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def _norm(v):
    return math.sqrt(v[0] * v[0] + v[1] * v[1])


def epe_loop(pred, gt, mask):
    vals = [_norm(pred[i, j] - gt[i, j]) for i in range(mask.shape[0]) for j in range(mask.shape[1])
            if mask[i, j]]
    return sum(vals) / len(vals) if vals else math.nan


def _cos(a, b):
    na, nb = _norm(a), _norm(b)
    if na <= 1e-9 or nb <= 1e-9:
        return 0.0
    return (a[0] * b[0] + a[1] * b[1]) / (na * nb)


def dir_loop(pred, gt, mask, absolute=False):
    vals = []
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j]:
                c = _cos(pred[i, j], gt[i, j])
                vals.append(abs(c) if absolute else c)
    return sum(vals) / len(vals) if vals else math.nan


def ranking_loop(p):
    """Class indices sorted by decreasing probability, lower index first on ties."""
    return sorted(range(len(p)), key=lambda r: (-p[r], r))


def topn_loop(probs, gt, n, mask):
    n = min(n, probs.shape[-1])
    hits = []
    for i in range(mask.shape[0]):
        for j in range(mask.shape[1]):
            if mask[i, j]:
                hits.append(1.0 if gt[i, j] in ranking_loop(list(probs[i, j]))[:n] else 0.0)
    return sum(hits) / len(hits) if hits else math.nan


def nonzero_loop(labels, zero_index):
    out = np.zeros(labels.shape, dtype=bool)
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            out[i, j] = labels[i, j] != zero_index
    return out


def _gauss_kernel(sigma, truncate=4.0):
    radius = int(truncate * sigma + 0.5)
    k = [math.exp(-0.5 * (x / sigma) ** 2) for x in range(-radius, radius + 1)]
    s = sum(k)
    return [v / s for v in k], radius


def _clamp(i, n):
    return min(max(i, 0), n - 1)


def canny_loop(gray, sigma=1.4, low=0.1, high=0.3):
    """Canny with edge-replicated borders, Sobel gradients, four-sector
    non-maximum suppression (ties kept), hysteresis relative to the peak
    magnitude with 8-connectivity."""
    h, w = gray.shape
    k, r = _gauss_kernel(sigma)
    tmp = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            tmp[y, x] = sum(k[d + r] * gray[_clamp(y + d, h), x] for d in range(-r, r + 1))
    smooth = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            smooth[y, x] = sum(k[d + r] * tmp[y, _clamp(x + d, w)] for d in range(-r, r + 1))

    def s(y, x):
        return smooth[_clamp(y, h), _clamp(x, w)]

    mag = np.zeros((h, w))
    ang = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            gx = (s(y - 1, x + 1) + 2 * s(y, x + 1) + s(y + 1, x + 1)
                  - s(y - 1, x - 1) - 2 * s(y, x - 1) - s(y + 1, x - 1))
            gy = (s(y + 1, x - 1) + 2 * s(y + 1, x) + s(y + 1, x + 1)
                  - s(y - 1, x - 1) - 2 * s(y - 1, x) - s(y - 1, x + 1))
            mag[y, x] = math.hypot(gx, gy)
            ang[y, x] = (math.degrees(math.atan2(gy, gx)) + 180.0) % 180.0
    peak = mag.max()
    edges = np.zeros((h, w), dtype=bool)
    if peak <= 0:
        return edges

    def m(y, x):
        return mag[y, x] if 0 <= y < h and 0 <= x < w else 0.0

    nms = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            a = ang[y, x]
            if a < 22.5 or a >= 157.5:
                dy, dx = 0, 1
            elif a < 67.5:
                dy, dx = 1, 1
            elif a < 112.5:
                dy, dx = 1, 0
            else:
                dy, dx = 1, -1
            v = mag[y, x]
            if v > 0 and v >= m(y + dy, x + dx) and v >= m(y - dy, x - dx):
                nms[y, x] = v
    weak = nms > low * peak
    stack = [(y, x) for y in range(h) for x in range(w) if nms[y, x] > high * peak]
    while stack:
        y, x = stack.pop()
        if edges[y, x]:
            continue
        edges[y, x] = True
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and weak[yy, xx] and not edges[yy, xx]:
                    stack.append((yy, xx))
    return edges


def cell_any_loop(pixels, m, n):
    h, w = pixels.shape
    ch, cw = h // m, w // n
    out = np.zeros((m, n), dtype=bool)
    for y in range(h):
        for x in range(w):
            if pixels[y, x]:
                out[min(y // ch, m - 1), min(x // cw, n - 1)] = True
    return out


def gray_loop(image):
    if image.shape[2] == 1:
        return image[:, :, 0].astype(np.float64)
    return 0.299 * image[:, :, 0] + 0.587 * image[:, :, 1] + 0.114 * image[:, :, 2]


# ---------------------------------------------------------------------------
# multiframe
# ---------------------------------------------------------------------------

def chain_forward_loop(feat, weights):
    """``weights``: list of (W, b, U, c) per step; returns per-step distributions."""
    hidden, probs = [], []
    for w, b, u, c in weights:
        x = list(feat) + [v for h in hidden for v in h]
        h = [max(0.0, sum(w[i, j] * x[j] for j in range(len(x))) + b[i]) for i in range(len(b))]
        z = [sum(u[r, i] * h[i] for i in range(len(h))) + c[r] for r in range(len(c))]
        top = max(z)
        e = [math.exp(v - top) for v in z]
        probs.append(np.array([v / sum(e) for v in e]))
        hidden.append(h)
    return probs
