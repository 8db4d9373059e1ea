"""PSNR and SSIM.

SSIM uses an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03 and a
dynamic range of 1.0, computed per channel and averaged.  ``padding="valid"``
(the evaluation default) averages over windows fully inside the image;
``padding="same"`` zero-pads like the usual training-loss implementation so
it also works on images smaller than the window.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor

WINDOW = 11
SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2
PSNR_CAP = 100.0


def gaussian_kernel(size: int = WINDOW, sigma: float = SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-x * x / (2 * sigma * sigma))
    return k / k.sum()


def _corr_valid(x: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis] - len(k) + 1
    out = 0.0
    for j, kj in enumerate(k):
        out = out + kj * np.take(x, np.arange(j, j + n), axis=axis)
    return out


def _corr_valid_adjoint(g: np.ndarray, k: np.ndarray, axis: int, n_in: int) -> np.ndarray:
    shape = list(g.shape)
    shape[axis] = n_in
    out = np.zeros(shape)
    n = g.shape[axis]
    outm = np.moveaxis(out, axis, 0)
    gm = np.moveaxis(g, axis, 0)
    for j, kj in enumerate(k):
        outm[j:j + n] += kj * gm
    return out


def _filter(x: np.ndarray, padding: str) -> np.ndarray:
    """Separable Gaussian filter over the first two axes of (H, W, C)."""
    k = gaussian_kernel()
    if padding == "same":
        p = WINDOW // 2
        x = np.pad(x, ((p, p), (p, p), (0, 0)))
    return _corr_valid(_corr_valid(x, k, 0), k, 1)


def _filter_adjoint(g: np.ndarray, in_shape, padding: str) -> np.ndarray:
    k = gaussian_kernel()
    p = WINDOW // 2 if padding == "same" else 0
    H, W = in_shape[0] + 2 * p, in_shape[1] + 2 * p
    x = _corr_valid_adjoint(_corr_valid_adjoint(g, k, 1, W), k, 0, H)
    return x[p:H - p, p:W - p] if p else x


def filter_tensor(x: Tensor, padding: str = "valid") -> Tensor:
    """Gaussian window filter as a linear tape op (adjoint = transposed filter)."""
    shape = x.shape
    return dk.custom("gaussian_filter", [x], _filter(x.data, padding),
                     lambda g: (_filter_adjoint(g, shape, padding),))


def _as_hwc(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _check(a, b, window: bool, padding: str = "valid"):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if window and padding == "valid" and min(a.shape[0], a.shape[1]) < WINDOW:
        raise ValueError(f"image {a.shape[:2]} smaller than the {WINDOW}x{WINDOW} SSIM window")


def ssim_tensor(a: Tensor, b, padding: str = "valid") -> Tensor:
    """Mean SSIM as a differentiable function of ``a`` (and ``b`` if a Tensor)."""
    a, b = dk.as_tensor(a), dk.as_tensor(b)
    if a.ndim == 2:
        a, b = dk.reshape(a, a.shape + (1,)), dk.reshape(b, b.shape + (1,))
    _check(a, b, True, padding)
    mu_a, mu_b = filter_tensor(a, padding), filter_tensor(b, padding)
    saa = filter_tensor(a * a, padding) - mu_a * mu_a
    sbb = filter_tensor(b * b, padding) - mu_b * mu_b
    sab = filter_tensor(a * b, padding) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + C1) * (2.0 * sab + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (saa + sbb + C2)
    return dk.mean(num / den)


def ssim(a, b, padding: str = "valid") -> float:
    a, b = _as_hwc(a), _as_hwc(b)
    _check(a, b, True, padding)
    return float(ssim_tensor(Tensor(a), Tensor(b), padding).data)


def psnr(a, b) -> float:
    """10 log10(1 / MSE); identical images give the 100 dB cap."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check(a, b, False)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


@dataclass
class MetricReport:
    frames: list = field(default_factory=list)   # (frame id, psnr, ssim, seconds)

    def add(self, frame_id, p: float, s: float, seconds: float = 0.0):
        self.frames.append((frame_id, p, s, seconds))

    @property
    def psnr(self) -> float:
        return float(np.mean([f[1] for f in self.frames]))

    @property
    def ssim(self) -> float:
        return float(np.mean([f[2] for f in self.frames]))

    @property
    def fps(self) -> float:
        total = sum(f[3] for f in self.frames)
        return len(self.frames) / total if total > 0 else float("inf")

    def rows(self):
        yield ("frame", "psnr", "ssim", "seconds")
        for f in self.frames:
            yield (str(f[0]), f"{f[1]:.6f}", f"{f[2]:.6f}", f"{f[3]:.6f}")
        yield ("mean", f"{self.psnr:.6f}", f"{self.ssim:.6f}", f"fps={self.fps:.3f}")
