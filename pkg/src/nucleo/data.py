"""Loading, preprocessing, augmentation and splitting of nucleus samples.

On-disk layout (Data Science Bowl 2018 stage 1)::

    <root>/<image_id>/images/<image_id>.png
    <root>/<image_id>/masks/<mask_id>.png     one file per nucleus
"""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from nucleo.interp import resize2d

log = logging.getLogger(__name__)

UPSAMPLE = 2
PAD_MULTIPLE = 32


class DataError(ValueError):
    """A sample on disk is missing or malformed."""


@dataclass
class Sample:
    """One image with its per-nucleus masks.

    ``image`` is ``(3, H, W)`` float32; raw 0-255 after loading, mean-subtracted
    after :func:`preprocess`. ``scale`` and ``orig_hw`` let predictions made on
    the preprocessed image be mapped back to the original pixels.
    """

    id: str
    image: np.ndarray
    instances: list[np.ndarray]
    scale: float = 1.0
    orig_hw: tuple[int, int] | None = None

    def __post_init__(self):
        if self.orig_hw is None:
            self.orig_hw = tuple(self.image.shape[-2:])

    @property
    def boxes(self) -> np.ndarray:
        from nucleo.geometry import masks_to_boxes

        return masks_to_boxes(self.instances)


@dataclass(frozen=True)
class AugmentConfig:
    crop_hw: tuple[int, int] | None = (256, 256)
    rotation_degrees: tuple[float, float] = (-15.0, 15.0)
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    min_instance_area: int = 4

    def __post_init__(self):
        for p in (self.flip_h_prob, self.flip_v_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"flip probability {p} outside [0, 1]")
        if self.blur_sigma[0] < 0 or self.blur_sigma[1] < self.blur_sigma[0]:
            raise ValueError(f"bad blur range {self.blur_sigma}")
        if self.rotation_degrees[1] < self.rotation_degrees[0]:
            raise ValueError(f"bad rotation range {self.rotation_degrees}")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(crop_hw=None, rotation_degrees=(0.0, 0.0), blur_sigma=(0.0, 0.0), flip_h_prob=0.0, flip_v_prob=0.0)


@dataclass(frozen=True)
class DatasetSplit:
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    seed: int = field(default=0)

    def subset(self, name: str) -> list[str]:
        return {"train": self.train_ids, "val": self.val_ids, "test": self.test_ids}[name]


def read_png(path: str | os.PathLike) -> np.ndarray:
    """Decode a PNG into ``(H, W)`` or ``(H, W, C)`` uint8, alpha dropped."""
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == bool:
        arr = arr.astype(np.uint8) * 255
    if arr.ndim == 3:
        if arr.shape[2] == 4:
            arr = arr[..., :3]
        elif arr.shape[2] == 2:
            arr = arr[..., 0]
    return arr


def load_sample(dir_path: str | os.PathLike) -> Sample:
    """Load ``<dir>/images/<id>.png`` and every ``<dir>/masks/*.png``.

    Raises:
        DataError: if the image is missing or a mask does not match its size.
    """
    d = Path(dir_path)
    sample_id = d.name
    image_path = d / "images" / f"{sample_id}.png"
    if not image_path.is_file():
        raise DataError(f"missing image {image_path}")
    raw = read_png(image_path)
    if raw.ndim == 2:
        raw = np.repeat(raw[..., None], 3, axis=2)
    image = np.ascontiguousarray(raw.transpose(2, 0, 1)).astype(np.float32)
    h, w = image.shape[1:]
    instances = []
    mask_dir = d / "masks"
    for mp in sorted(mask_dir.glob("*.png")) if mask_dir.is_dir() else []:
        m = read_png(mp)
        if m.ndim == 3:
            m = m.max(axis=2)
        if m.shape != (h, w):
            raise DataError(f"mask {mp} has shape {m.shape}, image is {(h, w)}")
        m = m > 0
        if not m.any():
            log.warning("skipping empty mask %s", mp)
            continue
        instances.append(m)
    if not instances:
        log.warning("sample %s has no instance masks", sample_id)
    return Sample(sample_id, image, instances)


def discover_samples(root: str | os.PathLike) -> list[str]:
    """Sorted ids of every ``<root>/<id>/images/<id>.png`` present."""
    root = Path(root)
    if not root.is_dir():
        return []
    return sorted(p.name for p in root.iterdir() if (p / "images" / f"{p.name}.png").is_file())


def load_dataset(root: str | os.PathLike, ids: Sequence[str] | None = None) -> list[Sample]:
    ids = discover_samples(root) if ids is None else ids
    return [load_sample(Path(root) / i) for i in ids]


def compute_channel_means(samples: Sequence[Sample]) -> np.ndarray:
    """Pixel-weighted per-channel mean over raw images."""
    total = np.zeros(3)
    count = 0
    for s in samples:
        total += s.image.reshape(3, -1).sum(axis=1, dtype=np.float64)
        count += s.image.shape[1] * s.image.shape[2]
    if count == 0:
        raise ValueError("no pixels to average")
    return total / count


def pad_to_multiple(a: np.ndarray, multiple: int = PAD_MULTIPLE) -> np.ndarray:
    """Zero-pad the last two axes at the bottom/right up to a multiple."""
    h, w = a.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not ph and not pw:
        return a
    pad = [(0, 0)] * (a.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(a, pad)


def preprocess(s: Sample, channel_means, upsample: int = UPSAMPLE, multiple: int = PAD_MULTIPLE) -> Sample:
    """Upsample 2x, subtract channel means and pad to a multiple of 32.

    The image is resized bilinearly; masks are repeated (nearest neighbour) so
    each set pixel becomes an ``upsample x upsample`` block.
    """
    h, w = s.image.shape[1:]
    image = resize2d(s.image.astype(np.float32), h * upsample, w * upsample)
    image -= np.asarray(channel_means, dtype=np.float32)[:, None, None]
    masks = [np.repeat(np.repeat(m, upsample, axis=0), upsample, axis=1) for m in s.instances]
    return Sample(
        s.id,
        pad_to_multiple(image, multiple),
        [pad_to_multiple(m, multiple) for m in masks],
        scale=s.scale * upsample,
        orig_hw=s.orig_hw,
    )


def _random_crop(image, masks, crop_hw, rng):
    ch, cw = crop_hw
    h, w = image.shape[1:]
    if ch > h or cw > w:
        ph, pw = max(ch - h, 0), max(cw - w, 0)
        image = np.pad(image, ((0, 0), (0, ph), (0, pw)))
        masks = [np.pad(m, ((0, ph), (0, pw))) for m in masks]
        h, w = image.shape[1:]
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return image[:, y0 : y0 + ch, x0 : x0 + cw], [m[y0 : y0 + ch, x0 : x0 + cw] for m in masks]


def augment(s: Sample, cfg: AugmentConfig, rng: np.random.Generator) -> Sample:
    """Random crop, rotation, blur and flips; geometry is shared by image and masks.

    Rotation fills exposed corners with 0 (the channel mean after
    preprocessing). Instances left with fewer than ``cfg.min_instance_area``
    pixels are dropped.
    """
    image, masks = s.image, list(s.instances)
    if cfg.crop_hw is not None:
        image, masks = _random_crop(image, masks, cfg.crop_hw, rng)
    lo, hi = cfg.rotation_degrees
    angle = float(rng.uniform(lo, hi)) if hi > lo else lo
    if angle:
        image = ndimage.rotate(image, angle, axes=(2, 1), reshape=False, order=1, mode="constant", cval=0.0)
        masks = [ndimage.rotate(m, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0) for m in masks]
    slo, shi = cfg.blur_sigma
    sigma = float(rng.uniform(slo, shi)) if shi > slo else slo
    if sigma > 0:
        image = ndimage.gaussian_filter(image, sigma=(0, sigma, sigma))
    if rng.random() < cfg.flip_h_prob:
        image = image[:, :, ::-1]
        masks = [m[:, ::-1] for m in masks]
    if rng.random() < cfg.flip_v_prob:
        image = image[:, ::-1, :]
        masks = [m[::-1, :] for m in masks]
    masks = [np.ascontiguousarray(m) for m in masks if np.count_nonzero(m) >= cfg.min_instance_area]
    return replace(s, image=np.ascontiguousarray(image, dtype=np.float32), instances=masks)


def sample_rng(seed: int, sample_id: str, epoch: int) -> np.random.Generator:
    """Independent stream per (seed, sample, epoch)."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


def split_dataset(ids: Sequence[str], seed: int, test_count: int = 65, val_fraction: float = 0.1) -> DatasetSplit:
    """Seeded shuffle; the first ``test_count`` ids are held out for testing.

    The remainder is divided into validation (``val_fraction``, rounded) and
    training ids.
    """
    ids = sorted(ids)
    if len(ids) < test_count:
        raise ValueError(f"{len(ids)} ids cannot supply {test_count} test samples")
    perm = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    test, rest = perm[:test_count], perm[test_count:]
    n_val = int(round(val_fraction * len(rest)))
    return DatasetSplit(train_ids=rest[n_val:], val_ids=rest[:n_val], test_ids=test, seed=seed)
