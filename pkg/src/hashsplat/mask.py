"""Learnable denoising mask with straight-through binarization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor

EPSILON = 0.01
INIT_LOGIT = float(np.log(0.9 / 0.1))  # sigmoid(m) = 0.9


@dataclass
class MaskValues:
    m: Tensor
    M: Tensor
    epsilon: float

    @property
    def binary(self) -> np.ndarray:
        return self.M.data > 0.5


def binary_mask(m, epsilon: float = EPSILON) -> MaskValues:
    """M = sigmoid(m) + sg(1[sigmoid(m) > eps] - sigmoid(m)).

    Forward values are exactly 0 or 1; the adjoint is sigmoid'(m).
    """
    m = dk.as_tensor(m)
    s = dk.sigmoid(m)
    hard = Tensor((s.data > epsilon).astype(np.float64))
    M = s + dk.stop_gradient(hard - s)
    # s + (hard - s) can round to 1 - 2^-53; pin exact values except under oracle replay
    if not dk.replaying():
        M.data = hard.data.copy()
    return MaskValues(m, M, epsilon)


def apply_mask(scale, opacity, d_scale, M):
    """(M * s + sg(M) * d_s, M * o) with ``s`` (N, 3) and ``o`` (N,)."""
    M = dk.as_tensor(M)
    Mc = dk.reshape(M, (-1, 1))
    return Mc * scale + dk.stop_gradient(Mc) * d_scale, M * opacity


def prune_masked(mask_logit, epsilon: float = EPSILON):
    """Indices of surviving points and the old -> new index map (-1 = removed)."""
    mask_logit = np.asarray(mask_logit, dtype=np.float64)
    keep = dk.sigmoid_np(mask_logit) > epsilon
    if not keep.any():
        raise ValueError("prune_masked: every point is masked out")
    index_map = np.full(len(mask_logit), -1, dtype=np.int64)
    index_map[keep] = np.arange(int(keep.sum()))
    return np.flatnonzero(keep), index_map
