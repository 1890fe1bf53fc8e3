"""Synthetic corpora with ground-truth object masks.

* shapes-2D: one coloured shape per 64x64 image, class = shape kind.
* two-shape composites: two shapes of different classes per image.
* moving shapes: 16 frames of 32x32, one shape translating with wrap-around,
  class = direction of motion. Positions are uniform on the torus, so a single
  frame says nothing about the label.
"""
from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import numpy as np

from .tensor import Prng, derive_seed

SHAPES_2D = ("square", "circle", "triangle", "cross")
DIRECTIONS = ("up", "down", "left", "right")
_VELOCITY = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}

IMAGE_SIZE = 64
VIDEO_SHAPE = (16, 32, 32)
NOISE_AMPLITUDE = 0.1


@dataclass
class Sample:
    input: np.ndarray
    label: int
    truth_mask: np.ndarray
    meta: dict = field(default_factory=dict)


@dataclass
class TwoShapeSample:
    input: np.ndarray
    labels: tuple
    masks: tuple


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of one shape, sampled at pixel centres."""
    c = (np.arange(size) + 0.5) / size  # pixel centres in [0, 1]
    y, x = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((size, size), bool)
    if kind == "circle":
        return (y - 0.5) ** 2 + (x - 0.5) ** 2 <= 0.25
    if kind == "triangle":
        # apex at the top centre, base along the bottom edge
        return np.abs(x - 0.5) <= 0.5 * y
    if kind == "cross":
        bar = 1.0 / 3.0
        return (np.abs(x - 0.5) <= bar / 2) | (np.abs(y - 0.5) <= bar / 2)
    raise ValueError(f"unknown shape {kind!r}")


def _colour(rng: Prng) -> np.ndarray:
    h, s, v = rng.random(3).astype(np.float64)
    rgb = colorsys.hsv_to_rgb(h, 0.5 + 0.5 * s, 0.6 + 0.4 * v)
    return np.array(rgb, np.float32)


def _background(rng: Prng, shape) -> np.ndarray:
    n = int(np.prod(shape))
    noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, n).reshape(shape)
    return (0.5 + noise).astype(np.float32)


def _paint(image, mask, colour):
    image[:, mask] = colour[:, None]


def gen_shapes_2d(n: int, seed: int = 0) -> list[Sample]:
    """``n`` single-shape images; label ``i % 4`` for sample ``i``."""
    out = []
    for i in range(n):
        rng = Prng(derive_seed(seed, i))
        label = i % len(SHAPES_2D)
        size = rng.randint(10, 24)
        y0 = rng.randint(0, IMAGE_SIZE - size)
        x0 = rng.randint(0, IMAGE_SIZE - size)
        colour = _colour(rng)
        image = _background(rng, (3, IMAGE_SIZE, IMAGE_SIZE))
        mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), bool)
        mask[y0 : y0 + size, x0 : x0 + size] = shape_mask(SHAPES_2D[label], size)
        _paint(image, mask, colour)
        out.append(Sample(image, label, mask, {"size": size, "origin": (y0, x0)}))
    return out


def _boxes_apart(a, b, gap=2):
    (ay, ax, asz), (by, bx, bsz) = a, b
    return ay + asz + gap <= by or by + bsz + gap <= ay or ax + asz + gap <= bx or bx + bsz + gap <= ax


def gen_two_shape_2d(n: int, seed: int = 0) -> list[TwoShapeSample]:
    """Composites holding two shapes of different classes with disjoint boxes."""
    out = []
    for i in range(n):
        rng = Prng(derive_seed(seed, i))
        first = i % len(SHAPES_2D)
        second = (first + 1 + rng.randint(0, len(SHAPES_2D) - 2)) % len(SHAPES_2D)
        image = _background(rng, (3, IMAGE_SIZE, IMAGE_SIZE))
        boxes = []
        masks = []
        for label in (first, second):
            while True:
                size = rng.randint(10, 20)
                box = (rng.randint(0, IMAGE_SIZE - size), rng.randint(0, IMAGE_SIZE - size), size)
                if all(_boxes_apart(box, other) for other in boxes):
                    break
            boxes.append(box)
            y0, x0, size = box
            mask = np.zeros((IMAGE_SIZE, IMAGE_SIZE), bool)
            mask[y0 : y0 + size, x0 : x0 + size] = shape_mask(SHAPES_2D[label], size)
            _paint(image, mask, _colour(rng))
            masks.append(mask)
        out.append(TwoShapeSample(image, (first, second), tuple(masks)))
    return out


def gen_moving_shapes_3d(n: int, seed: int = 0) -> list[Sample]:
    """``n`` clips of a shape moving 1 or 2 px/frame; label ``i % 4`` is the direction."""
    t_len, h, w = VIDEO_SHAPE
    out = []
    for i in range(n):
        rng = Prng(derive_seed(seed, i))
        label = i % len(DIRECTIONS)
        kind = SHAPES_2D[rng.randint(0, len(SHAPES_2D) - 1)]
        size = rng.randint(5, 8)
        speed = rng.randint(1, 2)
        y0, x0 = rng.randint(0, h - 1), rng.randint(0, w - 1)
        colour = _colour(rng)
        vy, vx = _VELOCITY[DIRECTIONS[label]]
        base = np.zeros((h, w), bool)
        base[:size, :size] = shape_mask(kind, size)
        video = _background(rng, (3, t_len, h, w))
        masks = np.zeros(VIDEO_SHAPE, bool)
        positions = []
        for t in range(t_len):
            py, px = (y0 + vy * speed * t) % h, (x0 + vx * speed * t) % w
            masks[t] = np.roll(base, (py, px), axis=(0, 1))
            video[:, t][:, masks[t]] = colour[:, None]
            positions.append((py, px))
        out.append(Sample(video, label, masks, {"shape": kind, "speed": speed, "positions": positions}))
    return out


def stack(samples):
    """(inputs [N, ...], labels [N]) arrays from a list of samples."""
    return np.stack([s.input for s in samples]), np.array([s.label for s in samples], np.int64)
