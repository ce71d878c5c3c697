"""Class-activation maps from the last cell's feature map: channel
weights are spatially averaged gradients of the target logit, the
weighted sum is clamped at zero and min-max scaled, and the map can be
rendered as PGM/PPM images at an arbitrary resolution."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .engine import Tape
from .engine.tensor import Tensor


@dataclass
class Heatmap:
    values: np.ndarray  # [h, w] in [0, 1]; max is 1 unless identically 0
    source_layer: str
    target_class: int


def gradcam(model, image: np.ndarray, class_idx: Optional[int] = None) -> Heatmap:
    """Compute the activation map for one image ([3,h,w] or [1,3,h,w]).
    ``class_idx`` defaults to the predicted class.  ``model.forward``
    must return an object with ``logits`` and ``features`` tensors.
    """
    x = np.asarray(image)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[0] != 1:
        raise ValueError(f"expected one image, got shape {image.shape}")
    model.set_training(False)
    # trace the input so the graph is recorded even if all weights are frozen
    with Tape() as tape:
        out = model.forward(Tensor(np.ascontiguousarray(x), traced=True))
    logits = out.logits
    cls = int(class_idx) if class_idx is not None else int(logits.data[0].argmax())
    if not 0 <= cls < logits.shape[1]:
        raise ValueError(f"class index {cls} out of range 0..{logits.shape[1] - 1}")
    seed = np.zeros_like(logits.data)
    seed[0, cls] = 1.0
    tape.backward(logits, seed=seed)

    acts = out.features.data[0]
    grads = out.features.grad[0]
    weights = grads.mean(axis=(1, 2))
    cam = np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)
    return Heatmap(values=_minmax(cam), source_layer="last_cell", target_class=cls)


def _minmax(cam: np.ndarray) -> np.ndarray:
    hi = float(cam.max())
    if hi <= 0.0:
        return np.zeros_like(cam, dtype=np.float32)
    lo = float(cam.min())
    if hi == lo:
        return np.ones_like(cam, dtype=np.float32)
    return ((cam - lo) / (hi - lo)).astype(np.float32)


def bilinear_resize(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [h,w] with half-pixel-aligned bilinear sampling."""
    h, w = arr.shape
    a = arr.astype(np.float64)
    si = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    sj = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    i0 = np.floor(si).astype(np.intp)
    j0 = np.floor(sj).astype(np.intp)
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    fi = (si - i0)[:, None]
    fj = (sj - j0)[None, :]
    top = a[np.ix_(i0, j0)] * (1 - fj) + a[np.ix_(i0, j1)] * fj
    bot = a[np.ix_(i1, j0)] * (1 - fj) + a[np.ix_(i1, j1)] * fj
    return (top * (1 - fi) + bot * fi).astype(np.float32)


def write_pgm(path, gray01: np.ndarray) -> None:
    """8-bit binary PGM (P5) from values in [0, 1]."""
    h, w = gray01.shape
    data = np.clip(np.rint(gray01 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_ppm(path, rgb01: np.ndarray) -> None:
    """8-bit binary PPM (P6) from a [3,h,w] array in [0, 1]."""
    _, h, w = rgb01.shape
    data = np.clip(np.rint(rgb01 * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(data.transpose(1, 2, 0)).tobytes())


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6) to a [3,h,w] float array in [0, 1]."""
    with open(path, "rb") as f:
        raw = f.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(raw[start:pos])
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    pos += 1  # single whitespace byte after maxval
    pix = np.frombuffer(raw, dtype=np.uint8, count=h * w * 3, offset=pos)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / (maxval or 255)


def render_heatmap(heatmap: Heatmap, image01: Optional[np.ndarray],
                   out_base: str, out_hw: int = 224):
    """Write ``<out_base>.pgm`` (the upsampled map) and, when a source
    image is given, ``<out_base>.ppm`` with the map blended into the red
    channel at 0.5 opacity.  Returns the written paths."""
    up = bilinear_resize(heatmap.values, out_hw, out_hw)
    pgm = f"{out_base}.pgm"
    write_pgm(pgm, up)
    written = [pgm]
    if image01 is not None:
        rgb = np.stack([bilinear_resize(image01[c], out_hw, out_hw) for c in range(3)])
        rgb = np.clip(rgb, 0.0, 1.0)
        rgb[0] = 0.5 * rgb[0] + 0.5 * up
        ppm = f"{out_base}.ppm"
        write_ppm(ppm, rgb)
        written.append(ppm)
    return written
