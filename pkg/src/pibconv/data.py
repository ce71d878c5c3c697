"""Datasets: CIFAR-10 binary batches, a synthetic desk-scale dataset,
and the training-time augmentations (pad-and-crop, flip, cutout)."""

from __future__ import annotations

import os
from typing import Tuple

import numpy as np

from . import rng as rng_mod

CIFAR_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]


class DataError(Exception):
    """Unusable dataset: missing files or malformed records."""


def _resolve_dir(data_dir: str) -> str:
    sub = os.path.join(data_dir, "cifar-10-batches-bin")
    if os.path.isdir(sub):
        return sub
    return data_dir


def _read_batch(path: str) -> Tuple[np.ndarray, np.ndarray]:
    if not os.path.isfile(path):
        raise DataError(f"missing batch file: {path}")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        raise DataError(
            f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}-byte records")
    rec = raw.reshape(-1, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) > 9:
        raise DataError(f"{path}: label {int(labels.max())} out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def normalize_images(images_u8: np.ndarray) -> np.ndarray:
    x = images_u8.astype(np.float32) / 255.0
    return (x - CIFAR_MEAN[:, None, None]) / CIFAR_STD[:, None, None]


def load_cifar10(data_dir: str, normalize: bool = True):
    """Load the binary-format CIFAR-10 batches under ``data_dir`` (the
    directory itself or its ``cifar-10-batches-bin`` child).  Returns
    ((train_x, train_y), (test_x, test_y)) with NCHW float32 images.
    """
    d = _resolve_dir(data_dir)
    if not os.path.isdir(d):
        raise DataError(f"dataset directory not found: {data_dir}")

    def load_files(names):
        images, labels = [], []
        for name in names:
            im, lb = _read_batch(os.path.join(d, name))
            images.append(im)
            labels.append(lb)
        x = np.concatenate(images)
        y = np.concatenate(labels)
        return (normalize_images(x) if normalize else x.astype(np.float32) / 255.0), y

    return load_files(TRAIN_FILES), load_files(TEST_FILES)


def write_cifar10_batch(path: str, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of ``_read_batch``; used to build test fixtures."""
    n = len(labels)
    rec = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = labels
    rec[:, 1:] = images_u8.reshape(n, -1)
    rec.tofile(path)


def make_synthetic(seed: int, n: int, classes: int, hw: int,
                   noise: float = 0.1) -> Tuple[np.ndarray, np.ndarray]:
    """Gaussian-blob images: each class has a fixed colored bump at a
    class-specific position; samples add i.i.d. pixel noise.  Labels
    cycle 0..classes-1 so any prefix is near-balanced.
    """
    rng = rng_mod.stream(seed, "synthetic")
    ii, jj = np.mgrid[0:hw, 0:hw].astype(np.float32)
    sigma = max(hw / 6.0, 1.0)
    templates = np.empty((classes, 3, hw, hw), dtype=np.float32)
    for c in range(classes):
        ang = 2.0 * np.pi * c / classes
        ci = hw / 2.0 + (hw / 4.0) * np.sin(ang)
        cj = hw / 2.0 + (hw / 4.0) * np.cos(ang)
        bump = np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2.0 * sigma ** 2))
        amps = rng.uniform(-1.5, 1.5, size=3).astype(np.float32)
        templates[c] = amps[:, None, None] * bump
    y = (np.arange(n) % classes).astype(np.int64)
    x = templates[y]
    if noise > 0:
        x = x + noise * rng.standard_normal(x.shape).astype(np.float32)
    return np.ascontiguousarray(x, dtype=np.float32), y


def augment_batch(x: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded canvas plus random horizontal
    flip, applied per image."""
    n, c, h, w = x.shape
    canvas = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    canvas[:, :, pad:pad + h, pad:pad + w] = x
    out = np.empty_like(x)
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    for i in range(n):
        oi, oj = offs[i]
        img = canvas[i, :, oi:oi + h, oj:oj + w]
        out[i] = img[:, :, ::-1] if flips[i] else img
    return out


def cutout(image: np.ndarray, length: int, rng) -> np.ndarray:
    """Zero a length x length square centered at a uniformly chosen
    pixel (clipped at the borders).  Returns a modified copy."""
    _, h, w = image.shape
    ci = int(rng.integers(0, h))
    cj = int(rng.integers(0, w))
    i0, i1 = max(ci - length // 2, 0), min(ci + length // 2, h)
    j0, j1 = max(cj - length // 2, 0), min(cj + length // 2, w)
    out = image.copy()
    out[:, i0:i1, j0:j1] = 0.0
    return out


def cutout_batch(x: np.ndarray, length: int, rng) -> np.ndarray:
    out = np.empty_like(x)
    for i in range(len(x)):
        out[i] = cutout(x[i], length, rng)
    return out
