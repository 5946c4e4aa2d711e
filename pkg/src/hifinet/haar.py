"""One-level orthonormal 2D Haar transform and the five network inputs.

For each 2x2 block ``[[a, b], [c, d]]`` of every channel::

    ll = (a + b + c + d) / 2    approximation
    lh = (a - b + c - d) / 2    horizontal intensity change (left minus right)
    hl = (a + b - c - d) / 2    vertical intensity change (top minus bottom)
    hh = (a - b - c + d) / 2    diagonal

``lh`` is what the network calls the x-direction band and ``hl`` the
y-direction band.  Images with an odd height or width get one reflected
row/column appended before the transform; the original size is kept on the
decomposition so the inverse and the upsampled inputs return to it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor, upsample_nearest


@dataclass(frozen=True)
class HaarDecomposition:
    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    size: tuple[int, int]

    def __post_init__(self):
        shapes = {t.shape for t in self.bands()}
        if len(shapes) != 1:
            raise ShapeError(f"Haar sub-images disagree in shape: {sorted(shapes)}")

    def bands(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.ll, self.lh, self.hl, self.hh


_SIGNS = {
    "ll": (1, 1, 1, 1),
    "lh": (1, -1, 1, -1),
    "hl": (1, 1, -1, -1),
    "hh": (1, -1, -1, 1),
}
_CORNERS = ((0, 0), (0, 1), (1, 0), (1, 1))


def _pad_even(x: Tensor) -> Tensor:
    h, w = x.shape[2], x.shape[3]
    pad_h, pad_w = h % 2, w % 2
    if not (pad_h or pad_w):
        return x
    mode = "reflect" if min(h, w) > 1 else "edge"
    out = np.pad(x.data, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode=mode)

    def vjp(g):
        g = g.copy()
        # fold the appended row/column back onto the row/column it copies
        if pad_w:
            g[:, :, :, w - 2 if mode == "reflect" else w - 1] += g[:, :, :, w]
        if pad_h:
            g[:, :, h - 2 if mode == "reflect" else h - 1, :] += g[:, :, h, :]
        return (g[:, :, :h, :w],)

    return T._make(out, (x,), vjp)


def _band(x: Tensor, signs) -> Tensor:
    d = x.data
    a, b, c, e = (d[:, :, i::2, j::2] for i, j in _CORNERS)
    s0, s1, s2, s3 = signs
    out = (s0 * a + s1 * b + s2 * c + s3 * e) / 2

    def vjp(g):
        gx = np.empty(d.shape, dtype=g.dtype)
        half = g / 2
        for (i, j), s in zip(_CORNERS, signs):
            gx[:, :, i::2, j::2] = s * half
        return (gx,)

    return T._make(out, (x,), vjp)


def haar_forward(image: Tensor) -> HaarDecomposition:
    if image.ndim != 4:
        raise ShapeError(f"haar_forward expects (n, c, h, w), got {image.shape}")
    if image.shape[2] == 0 or image.shape[3] == 0:
        raise ShapeError(f"haar_forward: empty image {image.shape}")
    size = (image.shape[2], image.shape[3])
    x = _pad_even(image)
    return HaarDecomposition(*(_band(x, _SIGNS[k]) for k in ("ll", "lh", "hl", "hh")), size=size)


def haar_inverse(dec: HaarDecomposition) -> Tensor:
    ll, lh, hl, hh = (t.data for t in dec.bands())
    n, c, h2, w2 = ll.shape
    out = np.empty((n, c, 2 * h2, 2 * w2), dtype=ll.dtype)
    out[:, :, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[:, :, 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[:, :, 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[:, :, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    h, w = dec.size
    return Tensor(out[:, :, :h, :w])


def make_five_inputs(image: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
    """Return (InputA, InputB, InputC, InputD, InputE) for the fusion module.

    InputA is the image itself; B..E are the ll, lh, hl, hh bands brought back
    to the image size by nearest-neighbour upsampling.
    """
    dec = haar_forward(image)
    h, w = dec.size
    ups = tuple(upsample_nearest(band, h, w) for band in dec.bands())
    return (image,) + ups
