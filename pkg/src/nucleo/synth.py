"""Synthetic nucleus images: bright, non-touching ellipses on a noisy background."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image


def ellipse_mask(h, w, cy, cx, ry, rx, theta) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w] + 0.5
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def synth_image(
    rng: np.random.Generator,
    size: int = 64,
    count: tuple[int, int] = (3, 5),
    radius: tuple[float, float] = (6.0, 11.0),
    margin: int = 2,
) -> tuple[np.ndarray, list[np.ndarray]]:
    """One ``(size, size, 3)`` uint8 image and its instance masks.

    Nuclei are placed by rejection sampling so they stay inside the frame and
    at least ``margin`` pixels apart.
    """
    target = int(rng.integers(count[0], count[1] + 1))
    masks: list[np.ndarray] = []
    occupied = np.zeros((size, size), dtype=bool)
    for _ in range(200 * target):
        if len(masks) == target:
            break
        ry, rx = rng.uniform(*radius, size=2)
        r = max(ry, rx)
        cy, cx = rng.uniform(r + 1, size - r - 1, size=2)
        m = ellipse_mask(size, size, cy, cx, ry, rx, rng.uniform(0, np.pi))
        grown = np.zeros_like(m)
        ys, xs = np.nonzero(m)
        for dy in range(-margin, margin + 1):
            for dx in range(-margin, margin + 1):
                grown[np.clip(ys + dy, 0, size - 1), np.clip(xs + dx, 0, size - 1)] = True
        if (grown & occupied).any():
            continue
        occupied |= m
        masks.append(m)

    img = rng.normal(30.0, 8.0, size=(size, size))
    for m in masks:
        img[m] = rng.uniform(150, 220) + rng.normal(0.0, 10.0, size=int(m.sum()))
    gray = np.clip(img, 0, 255).astype(np.uint8)
    tint = np.array([0.85, 0.9, 1.0])
    rgb = np.clip(gray[..., None] * tint, 0, 255).astype(np.uint8)
    return rgb, masks


def make_synthetic_dataset(n: int, out_dir: str | os.PathLike, seed: int = 0, size: int = 64) -> list[str]:
    """Write ``n`` samples in the DSB directory layout; returns their ids."""
    if n < 1:
        raise ValueError("n must be at least 1")
    out = Path(out_dir)
    rng = np.random.default_rng(seed)
    ids = []
    for i in range(n):
        sample_id = f"synth{i:04d}"
        image, masks = synth_image(rng, size)
        (out / sample_id / "images").mkdir(parents=True, exist_ok=True)
        (out / sample_id / "masks").mkdir(parents=True, exist_ok=True)
        Image.fromarray(image, mode="RGB").save(out / sample_id / "images" / f"{sample_id}.png")
        for k, m in enumerate(masks):
            Image.fromarray(m.astype(np.uint8) * 255, mode="L").save(
                out / sample_id / "masks" / f"{sample_id}_m{k:02d}.png"
            )
        ids.append(sample_id)
    return ids
