"""Multiresolution hash-grid color field with a tiny MLP decoder."""
from __future__ import annotations

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor

PRIMES = (1, 2654435761, 805459861)

_CORNERS = np.array([[i, j, k] for k in (0, 1) for j in (0, 1) for i in (0, 1)], dtype=np.int64)


def level_resolutions(n_levels: int = 16, min_res: int = 16, max_res: int = 2048) -> np.ndarray:
    if n_levels == 1:
        return np.array([min_res])
    b = np.exp((np.log(max_res) - np.log(min_res)) / (n_levels - 1))
    return np.floor(min_res * b ** np.arange(n_levels) + 1e-6).astype(np.int64)


class HashColorField:
    """Hash grid ``h`` plus decoder ``Phi``; base color = sigmoid(Phi(h(x))).

    Levels whose dense vertex grid fits in ``table_size`` entries are
    indexed directly, the rest through the XOR-of-primes spatial hash.
    """

    def __init__(self, params: dict, aabb, n_levels=16, min_res=16, max_res=2048,
                 log2_table=20, feat_dim=2, hidden=64, n_hidden=2):
        self.params = params
        self.aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
        self.n_levels, self.min_res, self.max_res = n_levels, min_res, max_res
        self.log2_table, self.feat_dim = log2_table, feat_dim
        self.hidden, self.n_hidden = hidden, n_hidden
        self.resolutions = level_resolutions(n_levels, min_res, max_res)
        if np.any(np.diff(self.resolutions) <= 0):
            raise ValueError("HashColorField: level resolutions must be strictly increasing")
        self.table_size = 2 ** log2_table
        self.dense = self.resolutions.astype(object) ** 3 <= self.table_size
        sizes = np.where(self.dense, self.resolutions ** 3, self.table_size)
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)

    @property
    def config(self) -> dict:
        return dict(n_levels=self.n_levels, min_res=self.min_res, max_res=self.max_res,
                    log2_table=self.log2_table, feat_dim=self.feat_dim,
                    hidden=self.hidden, n_hidden=self.n_hidden)

    @property
    def out_dim(self) -> int:
        return self.n_levels * self.feat_dim

    @classmethod
    def create(cls, rng: np.random.Generator, aabb, zero_output: bool = False, **cfg) -> "HashColorField":
        f = cls({}, aabb, **cfg)
        f.params["table"] = rng.uniform(-1e-4, 1e-4, (int(f.offsets[-1]), f.feat_dim))
        fan = f.out_dim
        for i in range(f.n_hidden):
            bound = 1.0 / np.sqrt(fan)
            f.params[f"W{i}"] = rng.uniform(-bound, bound, (fan, f.hidden))
            f.params[f"b{i}"] = rng.uniform(-bound, bound, f.hidden)
            fan = f.hidden
        bound = 1.0 / np.sqrt(fan)
        f.params["Wout"] = np.zeros((fan, 3)) if zero_output else rng.uniform(-bound, bound, (fan, 3))
        f.params["bout"] = np.zeros(3) if zero_output else rng.uniform(-bound, bound, 3)
        return f

    @staticmethod
    def aabb_from_points(points, margin: float = 0.1) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        lo, hi = points.min(axis=0), points.max(axis=0)
        ext = np.maximum(hi - lo, 1e-3)
        return np.stack([lo - margin * ext, hi + margin * ext])

    def normalize(self, x) -> np.ndarray:
        lo, hi = self.aabb
        return np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)

    def corner_lookup(self, x: np.ndarray):
        """Table rows (N, L, 8) and trilinear weights (N, L, 8) for ``x`` in [0,1]^3."""
        x = np.clip(np.asarray(x, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)
        n = len(x)
        rows = np.empty((n, self.n_levels, 8), dtype=np.int64)
        wts = np.empty((n, self.n_levels, 8))
        for lvl, res in enumerate(self.resolutions):
            pos = x * (res - 1)
            base = np.minimum(np.floor(pos).astype(np.int64), res - 2)
            frac = pos - base
            corner = base[:, None, :] + _CORNERS[None]                     # (N, 8, 3)
            w = np.prod(np.where(_CORNERS[None] == 1, frac[:, None, :], 1.0 - frac[:, None, :]), axis=-1)
            if self.dense[lvl]:
                idx = corner[..., 0] + corner[..., 1] * res + corner[..., 2] * res * res
            else:
                c = corner.astype(np.uint64)
                h = (c[..., 0] * np.uint64(PRIMES[0])) ^ (c[..., 1] * np.uint64(PRIMES[1])) \
                    ^ (c[..., 2] * np.uint64(PRIMES[2]))
                idx = (h % np.uint64(self.table_size)).astype(np.int64)
            rows[:, lvl] = idx + self.offsets[lvl]
            wts[:, lvl] = w
        return rows, wts

    def encode_tensor(self, x: np.ndarray, table: Tensor) -> Tensor:
        rows, wts = self.corner_lookup(x)
        n = len(rows)
        feats = dk.index_gather(table, rows.ravel())
        feats = dk.reshape(feats, (n, self.n_levels, 8, self.feat_dim))
        out = dk.sum_(feats * Tensor(wts[..., None]), axis=2)
        return dk.reshape(out, (n, self.out_dim))

    def decode_tensor(self, feats: Tensor, params: dict) -> Tensor:
        h = feats
        for i in range(self.n_hidden):
            h = dk.relu(h @ params[f"W{i}"] + params[f"b{i}"])
        return h @ params["Wout"] + params["bout"]

    def base_color_tensor(self, x_world, params: dict | None = None) -> Tensor:
        """sigmoid(decoder(h(normalize(x)))); the lookup position is a constant."""
        if params is None:
            params = {k: Tensor(v) for k, v in self.params.items()}
        xn = self.normalize(dk.as_tensor(x_world).data)
        return dk.sigmoid(self.decode_tensor(self.encode_tensor(xn, params["table"]), params))


def hash_encode(x, field: HashColorField) -> np.ndarray:
    """(32,) or (N, 32) concatenated per-level trilinear features."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = field.encode_tensor(x.reshape(-1, 3), Tensor(field.params["table"])).data
    return out[0] if single else out


def base_color(x, field: HashColorField) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    out = field.base_color_tensor(x.reshape(-1, 3)).data
    return out[0] if single else out


def bake_colors(positions, field: HashColorField) -> np.ndarray:
    """Cache per-point base colors for inference rendering."""
    return base_color(np.asarray(positions, dtype=np.float64).reshape(-1, 3), field)
