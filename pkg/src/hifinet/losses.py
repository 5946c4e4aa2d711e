"""Training objective: Charbonnier + SSIM + perceptual terms."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import ConvParams, ShapeError, Tensor

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

FeatureExtractor = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class LossWeights:
    charbonnier: float = 1.0
    ssim: float = 1.1
    perceptual: float = 11.0
    eps: float = 1e-3

    def __post_init__(self):
        if min(self.charbonnier, self.ssim, self.perceptual) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.eps <= 0:
            raise ValueError("Charbonnier eps must be positive")


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name}: shapes differ, {a.shape} vs {b.shape}")


def charbonnier(pred: Tensor, gt: Tensor, eps: float = 1e-3) -> Tensor:
    """Mean over elements of sqrt((pred - gt)^2 + eps^2).

    Evaluated as ``eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps))``, which avoids
    cancellation and returns exactly ``eps`` when pred equals gt.
    """
    _same_shape(pred, gt, "charbonnier")
    d = T.sub(pred, gt)
    d2 = T.mul(d, d)
    root = T.sqrt(T.add(d2, eps * eps))
    return T.add(T.mean_all(T.div(d2, T.add(root, eps))), eps)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_window_size(h: int, w: int) -> int:
    """11, or the largest odd size that fits a smaller image."""
    size = min(SSIM_WINDOW, h, w)
    return size if size % 2 else size - 1


def ssim(x: Tensor, y: Tensor, data_range: float = 1.0) -> Tensor:
    """Mean local SSIM (Gaussian window, valid positions), averaged over channels."""
    _same_shape(x, y, "ssim")
    if x.ndim != 4:
        raise ShapeError(f"ssim expects (n, c, h, w), got {x.shape}")
    size = ssim_window_size(x.shape[2], x.shape[3])
    if size < 1:
        raise ShapeError(f"ssim: image too small {x.shape}")
    win = gaussian_window(size)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    mu_x = T.gaussian_blur(x, win)
    mu_y = T.gaussian_blur(y, win)
    mu_xx = T.mul(mu_x, mu_x)
    mu_yy = T.mul(mu_y, mu_y)
    mu_xy = T.mul(mu_x, mu_y)
    var_x = T.sub(T.gaussian_blur(T.mul(x, x), win), mu_xx)
    var_y = T.sub(T.gaussian_blur(T.mul(y, y), win), mu_yy)
    cov = T.sub(T.gaussian_blur(T.mul(x, y), win), mu_xy)

    num = T.mul(T.add(T.add(mu_xy, mu_xy), c1), T.add(T.add(cov, cov), c2))
    den = T.mul(T.add(T.add(mu_xx, mu_yy), c1), T.add(T.add(var_x, var_y), c2))
    return T.mean_all(T.div(num, den))


def ssim_loss(pred: Tensor, gt: Tensor) -> Tensor:
    return T.sub(1.0, ssim(pred, gt))


class ConvFeatureExtractor:
    """Frozen stand-in for a pretrained backbone.

    Three 3x3 convs (3 -> 16 -> 32 -> 64), each stride 2 with ReLU, drawn
    from a seeded uniform distribution.  Weights never require gradients but
    gradients flow through to the input image.
    """

    plan = ((16, 3), (32, 16), (64, 32))

    def __init__(self, seed: int = 0, dtype=np.float64):
        rng = np.random.default_rng(seed)
        self.layers = []
        for out_ch, in_ch in self.plan:
            bound = np.sqrt(6.0 / (in_ch * 9))
            w = rng.uniform(-bound, bound, size=(out_ch, in_ch, 3, 3)).astype(dtype)
            self.layers.append(ConvParams(Tensor(w), Tensor(np.zeros(out_ch, dtype=dtype))))

    def __call__(self, image: Tensor) -> Tensor:
        if image.ndim != 4 or image.shape[1] != 3:
            raise ShapeError(f"feature extractor expects 3-channel images, got {image.shape}")
        x = image
        for layer in self.layers:
            x = T.subsample(T.conv2d(x, layer, "relu"), 2)
        return x


def identity_extractor(image: Tensor) -> Tensor:
    return image


def perceptual(pred: Tensor, gt: Tensor, extractor: FeatureExtractor) -> Tensor:
    """Mean absolute difference between extractor features."""
    _same_shape(pred, gt, "perceptual")
    return T.mean_all(T.absolute(T.sub(extractor(pred), extractor(gt))))


def loss_terms(pred: Tensor, gt: Tensor, weights: LossWeights, extractor: FeatureExtractor) -> dict[str, Tensor]:
    return {
        "charbonnier": charbonnier(pred, gt, weights.eps),
        "ssim": ssim_loss(pred, gt),
        "perceptual": perceptual(pred, gt, extractor),
    }


def total_loss(pred: Tensor, gt: Tensor, weights: LossWeights = LossWeights(),
               extractor: FeatureExtractor | None = None) -> Tensor:
    if extractor is None:
        extractor = ConvFeatureExtractor(dtype=pred.dtype)
    terms = loss_terms(pred, gt, weights, extractor)
    total = T.mul(terms["charbonnier"], weights.charbonnier)
    total = T.add(total, T.mul(terms["ssim"], weights.ssim))
    return T.add(total, T.mul(terms["perceptual"], weights.perceptual))
