"""Training objectives and their iteration gating.

Detached quantities (static weights, group means, window expectations) are
produced through ``stop_gradient`` so gradient oracles can freeze them.
"""
from __future__ import annotations

import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor
from .metrics import ssim_tensor

STATIC_THRESHOLD = 0.1
STATIC_DELTA = 1e-8


@dataclass
class LossWeights:
    w_dn: float = 1e-2
    w_s: float = 1e-3
    w_con: float = 1e-3
    w_m: float = 5e-4
    lambda_dssim: float = 0.2
    static_from: int = 3000
    consistency_from: int = 3000
    denoise_from: int = 5000

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"LossWeights.{k} must be >= 0")


class SlidingWindowStats:
    """Ring buffer of per-point (scale, opacity) snapshots."""

    def __init__(self, capacity: int = 50, stride: int = 10):
        self.capacity, self.stride = capacity, stride
        self.scales: deque = deque(maxlen=capacity)
        self.opacities: deque = deque(maxlen=capacity)

    def __len__(self):
        return len(self.scales)

    def maybe_record(self, iteration: int, scale, opacity) -> bool:
        if iteration % self.stride:
            return False
        self.scales.append(np.array(dk.as_tensor(scale).data, dtype=np.float64))
        self.opacities.append(np.array(dk.as_tensor(opacity).data, dtype=np.float64))
        return True

    def expectation(self):
        """Per-point window means; NaN where a point has no snapshot yet."""
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            return (np.nanmean(np.stack(self.scales), axis=0),
                    np.nanmean(np.stack(self.opacities), axis=0))

    def remap(self, source: np.ndarray):
        """Re-index every snapshot: new row i takes old row ``source[i]``."""
        source = np.asarray(source, dtype=np.int64)
        self.scales = deque((s[source] for s in self.scales), maxlen=self.capacity)
        self.opacities = deque((o[source] for o in self.opacities), maxlen=self.capacity)

    def remap_with_fill(self, source: np.ndarray):
        """Like ``remap`` but rows with ``source == -1`` get NaN (no history)."""
        source = np.asarray(source, dtype=np.int64)

        def pick(a):
            out = np.full((len(source),) + a.shape[1:], np.nan)
            ok = source >= 0
            out[ok] = a[source[ok]]
            return out

        self.scales = deque((pick(s) for s in self.scales), maxlen=self.capacity)
        self.opacities = deque((pick(o) for o in self.opacities), maxlen=self.capacity)

    def state(self) -> dict:
        return {"scales": np.stack(self.scales) if self.scales else np.zeros((0, 0, 3)),
                "opacities": np.stack(self.opacities) if self.opacities else np.zeros((0, 0))}

    def load_state(self, state: dict):
        self.scales = deque(list(state["scales"]), maxlen=self.capacity)
        self.opacities = deque(list(state["opacities"]), maxlen=self.capacity)


def photometric_loss(rendered, target, lambda_dssim: float = 0.2) -> Tensor:
    """(1 - lambda) * L1 + lambda * (1 - SSIM) / 2 with zero-padded SSIM windows."""
    rendered = dk.as_tensor(rendered)
    target = np.asarray(getattr(target, "data", target), dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"photometric_loss: shapes differ {rendered.shape} vs {target.shape}")
    l1 = dk.mean(dk.abs_(rendered - target))
    dssim = (1.0 - ssim_tensor(rendered, Tensor(target), padding="same")) * 0.5
    return (1.0 - lambda_dssim) * l1 + lambda_dssim * dssim


def denoise_loss(scale, opacity, stats: SlidingWindowStats) -> Tensor:
    """mean_i |E(s_i) - s_i|_1 + mean_i |E(o_i) - o_i| against window means."""
    if len(stats) == 0:
        return Tensor(0.0)
    scale, opacity = dk.as_tensor(scale), dk.as_tensor(opacity)
    Es, Eo = stats.expectation()
    if Es.shape != scale.shape:
        raise ValueError(f"denoise_loss: window has {Es.shape[0]} points, model has {scale.shape[0]}")
    # points without history contribute nothing
    Es = np.where(np.isnan(Es), scale.data, Es)
    Eo = np.where(np.isnan(Eo), opacity.data, Eo)
    Es, Eo = dk.stop_gradient(Es), dk.stop_gradient(Eo)
    return dk.mean(dk.norm_l1(Es - scale, axis=1)) + dk.mean(dk.abs_(Eo - opacity))


def mask_loss(m) -> Tensor:
    return dk.mean(dk.sigmoid(m))


def static_loss(d_mu, threshold: float = STATIC_THRESHOLD, delta: float = STATIC_DELTA) -> Tensor:
    """sum_i w_i |d_mu_i|_1 over points with |d_mu_i|_1 < threshold.

    w_i is proportional to 1 / (|d_mu_i|_1 + delta), normalized and detached.
    """
    norms = dk.norm_l1(dk.as_tensor(d_mu), axis=1)
    idx = np.flatnonzero(norms.data < threshold)
    if idx.size == 0:
        return Tensor(0.0)
    sel = dk.index_gather(norms, idx)
    beta = 1.0 / (dk.stop_gradient(sel) + delta)
    w = beta / dk.sum_(beta)
    return dk.sum_(w * sel)


def consistency_loss(d_mu) -> Tensor:
    """Sum over axis x sign groups of the mean |d - mean(d)| within the group."""
    d_mu = dk.as_tensor(d_mu)
    total = Tensor(0.0)
    for axis in range(3):
        col = d_mu[:, axis]
        for members in (col.data > 0, col.data < 0):
            idx = np.flatnonzero(members)
            if idx.size == 0:
                continue
            vals = dk.index_gather(col, idx)
            centre = dk.stop_gradient(dk.mean(vals))
            total = total + dk.mean(dk.abs_(vals - centre))
    return total


def active_terms(weights: LossWeights, iteration: int) -> dict:
    return {"static": iteration >= weights.static_from,
            "consistency": iteration >= weights.consistency_from,
            "denoise": iteration >= weights.denoise_from}


def total_loss(terms: dict, weights: LossWeights, iteration: int):
    """photometric + w_m L_m + gated (w_s L_s, w_con L_con, w_dn L_dn).

    ``terms`` maps names ("photometric", "mask", "static", "consistency",
    "denoise") to tensors; missing or inactive terms contribute exactly 0.
    Returns ``(total tensor, {name: contribution})``.
    """
    on = active_terms(weights, iteration)
    scale = {"photometric": 1.0, "mask": weights.w_m, "static": weights.w_s,
             "consistency": weights.w_con, "denoise": weights.w_dn}
    total = dk.as_tensor(terms["photometric"])
    record = {"photometric": float(total.data)}
    for name in ("mask", "static", "consistency", "denoise"):
        t = terms.get(name)
        if t is None or not on.get(name, True):
            record[name] = 0.0
            continue
        part = scale[name] * dk.as_tensor(t)
        record[name] = float(part.data)
        total = total + part
    record["total"] = float(total.data)
    return total, record
