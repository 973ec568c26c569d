"""Synthetic scenes of textured sprites moving at constant velocity.

Every frame comes with exact ground-truth flow: a pixel covered by a sprite
carries that sprite's velocity (later sprites occlude earlier ones), every
other pixel is static. Background revealed behind a moving sprite is static
too; there is no dis-occlusion modelling.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Record, average_flows, write_flo, write_image, write_manifest


@dataclass
class Sprite:
    shape: str  # "rect" or "disc"
    position: tuple  # (x, y) of the bounding box's top-left corner at frame 0
    size: tuple  # (width, height); a disc uses width as its diameter
    velocity: tuple  # (u, v) pixels per frame
    tone: tuple = (0.5, 0.5, 0.5)
    texture_seed: int = 0
    texture_amplitude: float = 0.08

    def mask(self):
        w, h = self.size
        if self.shape == "rect":
            return np.ones((h, w), dtype=bool)
        r = (w - 1) / 2.0
        yy, xx = np.mgrid[0:w, 0:w]
        return (yy - r) ** 2 + (xx - r) ** 2 <= (r + 0.5) ** 2

    def texture(self):
        w, h = self.size if self.shape == "rect" else (self.size[0], self.size[0])
        rng = np.random.default_rng(self.texture_seed)
        noise = rng.uniform(-self.texture_amplitude, self.texture_amplitude, size=(h, w, 3))
        return np.clip(np.asarray(self.tone, dtype=np.float64) + noise, 0.0, 1.0)


@dataclass
class SyntheticSceneSpec:
    canvas: tuple  # (height, width)
    background_seed: int = 0
    sprites: list = field(default_factory=list)
    frames: int = 6
    background_level: float = 0.5
    background_amplitude: float = 0.12

    def validate(self):
        h, w = self.canvas
        if h < 1 or w < 1 or self.frames < 1:
            raise ValueError("canvas and frame count must be positive")
        for i, s in enumerate(self.sprites):
            if s.shape not in ("rect", "disc"):
                raise ValueError(f"sprite {i}: unknown shape {s.shape!r}")
            sw, sh = s.size if s.shape == "rect" else (s.size[0], s.size[0])
            x, y = s.position
            if sw < 1 or sh < 1:
                raise ValueError(f"sprite {i}: empty size {s.size}")
            if x < 0 or y < 0 or x + sw > w or y + sh > h:
                raise ValueError(f"sprite {i} lies outside the {h}x{w} canvas at frame 0")
            if not np.all(np.isfinite(s.velocity)):
                raise ValueError(f"sprite {i}: non-finite velocity")


def _background(spec):
    rng = np.random.default_rng(spec.background_seed)
    h, w = spec.canvas
    noise = rng.uniform(-spec.background_amplitude, spec.background_amplitude, size=(h, w, 3))
    return np.clip(spec.background_level + noise, 0.0, 1.0)


def _paste(canvas, values, mask, x0, y0):
    """Paste ``values`` where ``mask`` holds, clipped to the canvas."""
    h, w = canvas.shape[:2]
    mh, mw = mask.shape
    ys, xs = max(0, -y0), max(0, -x0)
    ye, xe = min(mh, h - y0), min(mw, w - x0)
    if ys >= ye or xs >= xe:
        return
    region = canvas[y0 + ys:y0 + ye, x0 + xs:x0 + xe]
    m = mask[ys:ye, xs:xe]
    region[m] = values[ys:ye, xs:xe][m] if values.ndim == 3 else values


def sprite_origin(sprite, t):
    x = int(np.floor(sprite.position[0] + t * sprite.velocity[0]))
    y = int(np.floor(sprite.position[1] + t * sprite.velocity[1]))
    return x, y


def synthesize_sequence(spec):
    """Render frames 0..frames-1 and the ground-truth flow of each frame."""
    spec.validate()
    background = _background(spec)
    h, w = spec.canvas
    masks = [s.mask() for s in spec.sprites]
    textures = [s.texture() for s in spec.sprites]
    images, flows = [], []
    for t in range(spec.frames):
        img = background.copy()
        flow = np.zeros((h, w, 2), dtype=np.float32)
        for s, m, tex in zip(spec.sprites, masks, textures):
            x0, y0 = sprite_origin(s, t)
            _paste(img, tex, m, x0, y0)
            _paste(flow, np.asarray(s.velocity, dtype=np.float32), m, x0, y0)
        images.append(img)
        flows.append(flow)
    return images, flows


def cue_scene(rng, canvas=(77, 77), frames=6, max_sprites=2, speed=3.0):
    """Random scene where appearance decides motion.

    Bright sprites move right at ``(speed, 0)``, dark ones left at
    ``(-speed, 0)``.
    """
    h, w = canvas
    sprites = []
    for _ in range(int(rng.integers(1, max_sprites + 1))):
        bright = bool(rng.integers(0, 2))
        sw, sh = int(rng.integers(14, 25)), int(rng.integers(14, 25))
        shape = "rect" if rng.random() < 0.7 else "disc"
        if shape == "disc":
            sh = sw
        x = int(rng.integers(0, w - sw + 1))
        y = int(rng.integers(0, h - sh + 1))
        level = rng.uniform(0.85, 0.95) if bright else rng.uniform(0.05, 0.15)
        sprites.append(Sprite(shape, (x, y), (sw, sh), (speed if bright else -speed, 0.0),
                              tone=(level,) * 3, texture_seed=int(rng.integers(2**31))))
    return SyntheticSceneSpec(canvas, int(rng.integers(2**31)), sprites, frames)


def write_dataset(out_dir, specs, label_frames=5, steps=0, step_frames=5, prefix="scene"):
    """Render ``specs`` to disk and write manifests.

    Writes ``manifest.txt`` (frame 0 plus the first ``label_frames`` flows,
    averaged by readers) and, when ``steps`` > 0, ``sequences.txt`` whose
    records list one pre-averaged flow file per future step of
    ``step_frames`` frames each.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, sequences = [], []
    for i, spec in enumerate(specs):
        need = max(label_frames, steps * step_frames)
        if spec.frames < need:
            spec = replace(spec, frames=need)
        images, flows = synthesize_sequence(spec)
        d = out / f"{prefix}_{i:04d}"
        d.mkdir(exist_ok=True)
        write_image(images[0], d / "frame_000.ppm")
        flo_paths = []
        for t in range(label_frames):
            p = d / f"flow_{t:03d}.flo"
            write_flo(flows[t], p)
            flo_paths.append(p)
        records.append(Record(d / "frame_000.ppm", flo_paths))
        if steps:
            step_paths = []
            for s in range(steps):
                p = d / f"step_{s:02d}.flo"
                write_flo(average_flows(flows[s * step_frames:(s + 1) * step_frames]), p)
                step_paths.append(p)
            sequences.append(Record(d / "frame_000.ppm", step_paths))
    write_manifest(out / "manifest.txt", records)
    if steps:
        write_manifest(out / "sequences.txt", sequences)
    return out / "manifest.txt"
