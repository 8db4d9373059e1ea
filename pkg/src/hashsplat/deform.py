"""Deformation field: frequency encodings of (position, time) fed to an
8x256 MLP with four zero-initialized output heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor

HEADS = (("d_mu", 3), ("d_rot", 4), ("d_scale", 3), ("d_color", 3))


@dataclass(frozen=True)
class FreqEncoding:
    L: int
    include_input: bool = False

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("FreqEncoding: L must be >= 1")

    def out_dim(self, in_dim: int) -> int:
        return in_dim * 2 * self.L + (in_dim if self.include_input else 0)


def freq_encode(x, enc: FreqEncoding) -> np.ndarray:
    """(sin(2^k pi x), cos(2^k pi x)) for k = 0..L-1, optionally prefixed by x."""
    x = np.asarray(x, dtype=np.float64)
    parts = [x] if enc.include_input else []
    for k in range(enc.L):
        arg = (2.0 ** k) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    return np.concatenate(parts, axis=-1)


def freq_encode_tensor(x: Tensor, enc: FreqEncoding) -> Tensor:
    parts = [x] if enc.include_input else []
    for k in range(enc.L):
        arg = x * ((2.0 ** k) * np.pi)
        parts += [dk.sin(arg), dk.cos(arg)]
    return dk.concat(parts, axis=-1)


@dataclass
class DeformOffsets:
    d_mu: Tensor
    d_rot: Tensor
    d_scale: Tensor
    d_color: Tensor

    @classmethod
    def zeros(cls, n: int) -> "DeformOffsets":
        return cls(*(Tensor(np.zeros((n, k))) for _, k in HEADS))


class DeformNet:
    """MLP F(gamma(mu), gamma(t)) -> (d_mu, d_rot, d_scale, d_color).

    ``params`` maps names to float64 arrays; the trunk has ``depth`` ReLU
    layers of ``width`` units and re-injects the encoded input after layer
    ``skip``.
    """

    def __init__(self, params: dict, depth: int = 8, width: int = 256, skip: int = 4,
                 pos_enc: FreqEncoding = FreqEncoding(10, True),
                 time_enc: FreqEncoding = FreqEncoding(6, False)):
        self.params = params
        self.depth, self.width, self.skip = depth, width, skip
        self.pos_enc, self.time_enc = pos_enc, time_enc

    @property
    def in_dim(self) -> int:
        return self.pos_enc.out_dim(3) + self.time_enc.out_dim(1)

    @classmethod
    def create(cls, rng: np.random.Generator, depth: int = 8, width: int = 256, skip: int = 4,
               pos_L: int = 10, time_L: int = 6) -> "DeformNet":
        net = cls({}, depth, width, skip, FreqEncoding(pos_L, True), FreqEncoding(time_L, False))
        d_in = net.in_dim
        fan = d_in
        for i in range(depth):
            bound = 1.0 / np.sqrt(fan)
            net.params[f"W{i}"] = rng.uniform(-bound, bound, (fan, width))
            net.params[f"b{i}"] = rng.uniform(-bound, bound, width)
            fan = width + d_in if i == skip and i < depth - 1 else width
        for name, k in HEADS:
            net.params[f"{name}_W"] = np.zeros((width, k))
            net.params[f"{name}_b"] = np.zeros(k)
        return net

    def encode(self, mu: np.ndarray, t: float) -> np.ndarray:
        n = len(mu)
        return np.concatenate([freq_encode(mu, self.pos_enc),
                               np.broadcast_to(freq_encode(np.array([t]), self.time_enc), (n, self.time_enc.out_dim(1)))],
                              axis=-1)

    def forward(self, x: Tensor, params: dict) -> DeformOffsets:
        h = x
        for i in range(self.depth):
            h = dk.relu(h @ params[f"W{i}"] + params[f"b{i}"])
            if i == self.skip and i < self.depth - 1:
                h = dk.concat([x, h], axis=-1)
        return DeformOffsets(*(h @ params[f"{name}_W"] + params[f"{name}_b"] for name, _ in HEADS))


def deform(mu, t: float, net: DeformNet, iteration: int, warmup: int = 1500,
           params: dict | None = None) -> DeformOffsets:
    """Per-point offsets at time ``t``.

    The positional input is detached from ``mu``.  Before ``warmup`` the
    network is not evaluated and exact zeros are returned.  ``params`` may
    supply tensor-wrapped weights so the caller can collect their adjoints.
    """
    mu = dk.as_tensor(mu)
    n = mu.shape[0]
    if iteration < warmup:
        return DeformOffsets.zeros(n)
    if params is None:
        params = {k: Tensor(v) for k, v in net.params.items()}
    x = Tensor(net.encode(dk.stop_gradient(mu).data, t))
    return net.forward(x, params)
