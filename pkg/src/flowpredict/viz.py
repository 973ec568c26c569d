"""Middlebury color coding of flow fields."""
import numpy as np

# hue segments of the wheel: red-yellow, yellow-green, green-cyan,
# cyan-blue, blue-magenta, magenta-red
SEGMENTS = (15, 6, 4, 11, 13, 6)


def make_colorwheel():
    """(55, 3) array of wheel colors in 0..255."""
    ry, yg, gc, cb, bm, mr = SEGMENTS
    wheel = np.zeros((sum(SEGMENTS), 3))
    col = 0
    wheel[col:col + ry, 0] = 255
    wheel[col:col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col:col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col:col + yg, 1] = 255
    col += yg
    wheel[col:col + gc, 1] = 255
    wheel[col:col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col:col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col:col + cb, 2] = 255
    col += cb
    wheel[col:col + bm, 2] = 255
    wheel[col:col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col:col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col:col + mr, 0] = 255
    return wheel


def visualize_flow(flow, max_magnitude=None):
    """Render a (H, W, 2) flow field as an RGB image in [0, 1].

    Hue encodes direction, saturation the magnitude relative to
    ``max_magnitude`` (the field's own maximum when ``None``). Zero flow is
    white; vectors longer than ``max_magnitude`` are darkened.
    """
    flow = np.asarray(flow, dtype=np.float64)
    # +0.0 folds negative zeros so the angle of (u, 0) does not depend on sign bits
    u = flow[..., 0] + 0.0
    v = flow[..., 1] + 0.0
    rad = np.hypot(u, v)
    if max_magnitude is None:
        max_magnitude = float(rad.max()) if rad.size else 0.0
        if max_magnitude == 0:
            max_magnitude = 1.0
    elif not max_magnitude > 0:
        raise ValueError("max_magnitude must be positive")
    u = u / max_magnitude
    v = v / max_magnitude
    rad = rad / max_magnitude

    wheel = make_colorwheel()
    ncols = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (ncols - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % ncols
    f = fk - k0
    out = np.empty(flow.shape[:2] + (3,))
    inside = rad <= 1
    for ch in range(3):
        col = (1 - f) * wheel[k0, ch] / 255.0 + f * wheel[k1, ch] / 255.0
        col = np.where(inside, 1 - rad * (1 - col), col * 0.75)
        out[..., ch] = np.floor(255 * col) / 255.0
    return out
