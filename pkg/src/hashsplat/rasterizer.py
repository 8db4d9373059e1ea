"""Tile-based alpha compositing of screen-space Gaussians.

Three renderers share the same per-pixel rules (alpha clamp 0.99, alpha
floor 1/255, early stop when transmittance would fall below 1e-4):

* :func:`render_tiled` - 16x16 tiles, per-tile depth sort, fused adjoint.
* :func:`render_reference` - no tiling or culling, one global depth sort,
  front-to-back loop over points; the comparison oracle.
* :func:`render_tape` - dense composition from tape primitives, used to
  validate the fused adjoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffkernel as dk
from .diffkernel import Tensor
from .gaussians import Camera, DeformedGaussians, covariance_tensor, project_tensor

TILE = 16
ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
DET_MIN = 1e-12


@dataclass
class RenderablePointSet:
    """Screen-space splats; ``conic`` holds (A, B, C) of the inverse 2x2 covariance."""

    mu2d: np.ndarray
    conic: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    depth: np.ndarray

    def __len__(self):
        return len(self.mu2d)

    @classmethod
    def from_covariance(cls, mu2d, cov2d, opacity, color, depth):
        """Invert covariances, dropping singular ones, and clamp colors."""
        cov2d = np.asarray(cov2d, dtype=np.float64).reshape(-1, 2, 2)
        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        keep = det > DET_MIN
        det = det[keep]
        conic = np.stack([c[keep] / det, -b[keep] / det, a[keep] / det], axis=-1)
        return cls(np.asarray(mu2d, dtype=np.float64).reshape(-1, 2)[keep], conic,
                   np.asarray(opacity, dtype=np.float64).reshape(-1)[keep],
                   np.clip(np.asarray(color, dtype=np.float64).reshape(-1, 3)[keep], 0.0, 1.0),
                   np.asarray(depth, dtype=np.float64).reshape(-1)[keep])

    @classmethod
    def random(cls, rng: np.random.Generator, n: int, width: int, height: int):
        """Random well-conditioned splats over a ``width x height`` image."""
        mu2d = rng.uniform([-4, -4], [width + 4, height + 4], size=(n, 2))
        ang = rng.uniform(0, np.pi, n)
        s = rng.uniform(0.8, max(width, height) / 5, size=(n, 2))
        c, si = np.cos(ang), np.sin(ang)
        R = np.stack([np.stack([c, -si], -1), np.stack([si, c], -1)], -2)
        cov = R @ (s[:, :, None] ** 2 * np.eye(2)) @ np.swapaxes(R, -1, -2)
        return cls.from_covariance(mu2d, cov, rng.uniform(0.05, 1.0, n),
                                   rng.uniform(0, 1, (n, 3)), rng.uniform(0.5, 10.0, n))


@dataclass
class RenderOutput:
    rgb: np.ndarray     # (H, W, 3)
    depth: np.ndarray   # (H, W) expected depth
    alpha: np.ndarray   # (H, W) accumulated opacity
    count: np.ndarray   # (H, W) contributors per pixel


@dataclass
class RasterContext:
    """Per-call statistics shared with the densification policy."""

    tiles: list = field(default_factory=list)
    visible: np.ndarray | None = None     # (N,) point touches at least one tile
    radius: np.ndarray | None = None      # (N,) conservative screen radius, px
    grad_mu2d: np.ndarray | None = None   # (N, 2) filled by backward


def pixel_alpha(p, mu2d, conic, alpha_base) -> float:
    """alpha = o * exp(-0.5 d^T Sigma'^-1 d), clamped to 0.99, zero below 1/255."""
    d = np.asarray(p, dtype=np.float64) - np.asarray(mu2d, dtype=np.float64)
    conic = np.asarray(conic, dtype=np.float64)
    if conic.shape == (2, 2):
        conic = np.array([conic[0, 0], conic[0, 1], conic[1, 1]])
    q = conic[0] * d[0] ** 2 + 2 * conic[1] * d[0] * d[1] + conic[2] * d[1] ** 2
    a = alpha_base * np.exp(-0.5 * q)
    if a < ALPHA_MIN:
        return 0.0
    return float(min(ALPHA_MAX, a))


def composite(contributions, check_order: bool = True):
    """Front-to-back compositing of ``(alpha, color, depth)`` tuples.

    Returns ``(rgb, alpha, depth)`` without background.  Accumulation stops
    before the contributor that would drive transmittance below 1e-4.
    """
    T = 1.0
    rgb = np.zeros(3)
    wsum = dsum = 0.0
    last = -np.inf
    for a, c, d in contributions:
        if check_order:
            if d < last:
                raise ValueError("composite: contributions are not sorted by depth")
            last = d
        if a < ALPHA_MIN:
            continue
        test_T = T * (1.0 - a)
        if test_T < T_MIN:
            break
        w = a * T
        rgb = rgb + w * np.asarray(c, dtype=np.float64)
        wsum += w
        dsum += w * d
        T = test_T
    return rgb, 1.0 - T, dsum / max(wsum, 1e-10)


# ------------------------------------------------------------------ tiling

def splat_radius(conic: np.ndarray, opacity: np.ndarray) -> np.ndarray:
    """Radius beyond which a splat's alpha is provably below 1/255.

    Uses q >= |d|^2 * lambda_min(conic), so the bound is exact rather than a
    fixed number of standard deviations.  Returns -1 for splats whose peak
    alpha is already below the floor.
    """
    A, B, C = conic[:, 0], conic[:, 1], conic[:, 2]
    lam_min = 0.5 * (A + C) - np.sqrt(0.25 * (A - C) ** 2 + B * B)
    lam_min = np.maximum(lam_min, 1e-300)
    with np.errstate(divide="ignore"):
        lim = 2.0 * np.log(np.maximum(opacity, 1e-300) * 255.0)
    r = np.sqrt(np.maximum(lim, 0.0) / lam_min) * (1 + 1e-9) + 1e-6
    return np.where(opacity >= ALPHA_MIN, r, -1.0)


def _tile_lists(mu2d, radius, depth, width, height, tile=TILE):
    tiles = []
    live = radius >= 0
    for y0 in range(0, height, tile):
        y1 = min(y0 + tile, height)
        for x0 in range(0, width, tile):
            x1 = min(x0 + tile, width)
            hit = (live
                   & (mu2d[:, 0] + radius >= x0 + 0.5) & (mu2d[:, 0] - radius <= x1 - 0.5)
                   & (mu2d[:, 1] + radius >= y0 + 0.5) & (mu2d[:, 1] - radius <= y1 - 0.5))
            idx = np.flatnonzero(hit)
            # stable depth order, point index breaks ties
            idx = idx[np.lexsort((idx, depth[idx]))]
            tiles.append((y0, y1, x0, x1, idx))
    return tiles


def _tile_state(y0, y1, x0, x1, idx, mu2d, conic, opacity):
    ys, xs = np.mgrid[y0:y1, x0:x1]
    px = xs.ravel() + 0.5
    py = ys.ravel() + 0.5
    dx = px[:, None] - mu2d[idx, 0][None, :]
    dy = py[:, None] - mu2d[idx, 1][None, :]
    A, B, C = (conic[idx, i][None, :] for i in range(3))
    q = A * dx * dx + 2 * B * dx * dy + C * dy * dy
    e = np.exp(-0.5 * q)
    raw = opacity[idx][None, :] * e
    valid = raw >= ALPHA_MIN
    a = np.where(valid, np.minimum(raw, ALPHA_MAX), 0.0)
    T_after = np.cumprod(1.0 - a, axis=1)
    keep = T_after >= T_MIN
    a_eff = np.where(keep, a, 0.0)
    T_before = np.ones_like(a)
    T_before[:, 1:] = np.cumprod(1.0 - a, axis=1)[:, :-1]
    w = T_before * a_eff
    F = np.cumprod(1.0 - a_eff, axis=1)[:, -1]
    return dict(dx=dx, dy=dy, e=e, raw=raw, valid=valid, a=a, keep=keep,
                T_before=T_before, w=w, F=F, A=A, B=B, C=C)


def _rasterize_forward(mu2d, conic, opacity, color, depth, width, height, background):
    bg = np.asarray(background, dtype=np.float64)
    out = np.zeros((height, width, 5))
    out[..., :3] = bg
    count = np.zeros((height, width), dtype=np.int64)
    radius = splat_radius(conic, opacity)
    tiles = _tile_lists(mu2d, radius, depth, width, height)
    visible = np.zeros(len(mu2d), dtype=bool)
    for y0, y1, x0, x1, idx in tiles:
        if idx.size == 0:
            continue
        visible[idx] = True
        st = _tile_state(y0, y1, x0, x1, idx, mu2d, conic, opacity)
        w, F = st["w"], st["F"]
        wsum = w.sum(axis=1)
        rgb = w @ color[idx] + F[:, None] * bg
        D = (w @ depth[idx]) / np.maximum(wsum, 1e-10)
        h, wd = y1 - y0, x1 - x0
        out[y0:y1, x0:x1, :3] = rgb.reshape(h, wd, 3)
        out[y0:y1, x0:x1, 3] = D.reshape(h, wd)
        out[y0:y1, x0:x1, 4] = (1.0 - F).reshape(h, wd)
        count[y0:y1, x0:x1] = (st["keep"] & st["valid"]).sum(axis=1).reshape(h, wd)
    return out, count, RasterContext(tiles=tiles, visible=visible, radius=radius)


def _rasterize_backward(g, mu2d, conic, opacity, color, depth, background, ctx):
    bg = np.asarray(background, dtype=np.float64)
    n = len(mu2d)
    d_mu = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_color = np.zeros((n, 3))
    d_depth = np.zeros(n)
    for y0, y1, x0, x1, idx in ctx.tiles:
        if idx.size == 0:
            continue
        st = _tile_state(y0, y1, x0, x1, idx, mu2d, conic, opacity)
        gt = g[y0:y1, x0:x1].reshape(-1, 5)
        gC, gD, gA = gt[:, :3], gt[:, 3], gt[:, 4]
        w, F, a, keep = st["w"], st["F"], st["a"], st["keep"]
        cols, dep = color[idx], depth[idx]
        wsum = w.sum(axis=1)
        big = wsum > 1e-10
        den = np.where(big, wsum, 1e-10)
        D = (w @ dep) / den
        dD_dw = np.where(big[:, None], dep[None, :] - D[:, None], dep[None, :]) / den[:, None]
        G = gC @ cols.T + gD[:, None] * dD_dw
        wG = w * G
        suffix = wG.sum(axis=1, keepdims=True) - np.cumsum(wG, axis=1)
        dLdF = gC @ bg - gA
        da = st["T_before"] * G - (suffix + (dLdF * F)[:, None]) / (1.0 - a)
        draw = np.where(keep & st["valid"] & (st["raw"] <= ALPHA_MAX), da, 0.0)
        dx, dy = st["dx"], st["dy"]
        dq = -0.5 * st["raw"] * draw
        A, B, C = st["A"], st["B"], st["C"]
        d_opac[idx] += (draw * st["e"]).sum(axis=0)
        d_conic[idx, 0] += (dq * dx * dx).sum(axis=0)
        d_conic[idx, 1] += (dq * 2 * dx * dy).sum(axis=0)
        d_conic[idx, 2] += (dq * dy * dy).sum(axis=0)
        d_mu[idx, 0] += (-2 * dq * (A * dx + B * dy)).sum(axis=0)
        d_mu[idx, 1] += (-2 * dq * (B * dx + C * dy)).sum(axis=0)
        d_color[idx] += w.T @ gC
        d_depth[idx] += (gD[:, None] * w / den[:, None]).sum(axis=0)
    return d_mu, d_conic, d_opac, d_color, d_depth


def rasterize(mu2d: Tensor, conic: Tensor, opacity: Tensor, color: Tensor, depth: Tensor,
              width: int, height: int, background=(0.0, 0.0, 0.0)):
    """Differentiable tiled rasterization.

    Returns an (H, W, 5) tensor holding rgb, expected depth and accumulated
    alpha, plus a :class:`RasterContext`; after ``Tape.backward`` the
    context's ``grad_mu2d`` holds the screen-space position adjoints.
    """
    ins = [dk.as_tensor(t) for t in (mu2d, conic, opacity, color, depth)]
    arrs = [t.data for t in ins]
    out, count, ctx = _rasterize_forward(*arrs, width, height, background)
    ctx.grad_mu2d = np.zeros_like(arrs[0])

    def vjp(g):
        grads = _rasterize_backward(g, *arrs, background, ctx)
        ctx.grad_mu2d += grads[0]
        return grads
    t = dk.custom("rasterize", ins, out, vjp)
    t.name = "image"
    return t, ctx


def render_tiled(points: RenderablePointSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    out, count, _ = _rasterize_forward(points.mu2d, points.conic, points.opacity, points.color,
                                       points.depth, cam.width, cam.height, background)
    return RenderOutput(out[..., :3], out[..., 3], out[..., 4], count)


def render_reference(points: RenderablePointSet, cam: Camera, background=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Every pixel against every point, one global (depth, index) order."""
    H, W = cam.height, cam.width
    ys, xs = np.mgrid[0:H, 0:W]
    px, py = xs.ravel() + 0.5, ys.ravel() + 0.5
    n_px = px.size
    order = np.lexsort((np.arange(len(points)), points.depth))
    T = np.ones(n_px)
    rgb = np.zeros((n_px, 3))
    wsum = np.zeros(n_px)
    dsum = np.zeros(n_px)
    count = np.zeros(n_px, dtype=np.int64)
    done = np.zeros(n_px, dtype=bool)
    for k in order:
        dx = px - points.mu2d[k, 0]
        dy = py - points.mu2d[k, 1]
        A, B, C = points.conic[k]
        raw = points.opacity[k] * np.exp(-0.5 * (A * dx * dx + 2 * B * dx * dy + C * dy * dy))
        a = np.minimum(raw, ALPHA_MAX)
        live = (raw >= ALPHA_MIN) & ~done
        test_T = T * (1.0 - a)
        stop = live & (test_T < T_MIN)
        done |= stop
        live &= ~stop
        w = np.where(live, a * T, 0.0)
        rgb += w[:, None] * points.color[k]
        wsum += w
        dsum += w * points.depth[k]
        count += live
        T = np.where(live, test_T, T)
    rgb += T[:, None] * np.asarray(background, dtype=np.float64)
    return RenderOutput(rgb.reshape(H, W, 3), (dsum / np.maximum(wsum, 1e-10)).reshape(H, W),
                        (1.0 - T).reshape(H, W), count.reshape(H, W))


def render_tape(mu2d: Tensor, conic: Tensor, opacity: Tensor, color: Tensor, depth: Tensor,
                width: int, height: int, background=(0.0, 0.0, 0.0)) -> Tensor:
    """Dense (H, W, 5) rendering composed only of tape primitives."""
    order = np.lexsort((np.arange(mu2d.shape[0]), depth.data))
    mu2d, conic, opacity, color, depth = (dk.index_gather(t, order) for t in (mu2d, conic, opacity, color, depth))
    ys, xs = np.mgrid[0:height, 0:width]
    px = Tensor(xs.reshape(-1, 1) + 0.5)
    py = Tensor(ys.reshape(-1, 1) + 0.5)
    dx = px - dk.reshape(mu2d[:, 0], (1, -1))
    dy = py - dk.reshape(mu2d[:, 1], (1, -1))
    A, B, C = (dk.reshape(conic[:, i], (1, -1)) for i in range(3))
    q = A * dx * dx + 2.0 * B * dx * dy + C * dy * dy
    raw = dk.reshape(opacity, (1, -1)) * dk.exp(-0.5 * q)
    valid = raw.data >= ALPHA_MIN
    a = dk.where(valid, dk.clamp(raw, None, ALPHA_MAX), 0.0)
    k = mu2d.shape[0]
    upper = Tensor(np.triu(np.ones((k, k)), 1))
    log_t = dk.log(1.0 - a)
    T_before = dk.exp(log_t @ upper)
    T_after = dk.exp(log_t @ Tensor(np.triu(np.ones((k, k)))))
    keep = T_after.data >= T_MIN
    w = dk.where(keep, T_before * a, 0.0)
    log_final = dk.sum_(dk.where(keep, log_t, 0.0), axis=1)
    F = dk.exp(log_final)
    wsum = dk.sum_(w, axis=1)
    rgb = w @ color + dk.reshape(F, (-1, 1)) * Tensor(np.asarray(background, dtype=np.float64))
    den = dk.where(wsum.data > 1e-10, wsum, 1e-10)
    D = dk.reshape(w @ dk.reshape(depth, (-1, 1)), (-1,)) / den
    out = dk.concat([rgb, dk.reshape(D, (-1, 1)), dk.reshape(1.0 - F, (-1, 1))], axis=1)
    return dk.reshape(out, (height, width, 5))


# ----------------------------------------------------------- world -> screen

@dataclass
class ScreenSplats:
    """Tensor-valued splats plus the indices of the world points they came from."""

    mu2d: Tensor
    conic: Tensor
    opacity: Tensor
    color: Tensor
    depth: Tensor
    index: np.ndarray

    def to_points(self) -> RenderablePointSet:
        return RenderablePointSet(self.mu2d.data, self.conic.data, self.opacity.data,
                                  np.clip(self.color.data, 0, 1), self.depth.data)


def screen_splats(g: DeformedGaussians, cam: Camera) -> ScreenSplats:
    """Covariance, EWA projection, near-plane culling and 2x2 inversion."""
    cov = covariance_tensor(g.rot, g.scale)
    proj = project_tensor(g.mu, cov, cam)
    c = proj.cov2d
    a, b, cc = c[:, 0, 0], c[:, 0, 1], c[:, 1, 1]
    det = a * cc - b * b
    keep = np.flatnonzero(proj.visible & (det.data > DET_MIN) & (proj.depth.data < cam.far))
    a, b, cc, det = (dk.index_gather(t, keep) for t in (a, b, cc, det))
    conic = dk.stack([cc / det, -b / det, a / det], axis=-1)
    return ScreenSplats(dk.index_gather(proj.mu2d, keep), conic, dk.index_gather(g.opacity, keep),
                        dk.index_gather(g.color, keep), dk.index_gather(proj.depth, keep), keep)


def render_gaussians(g: DeformedGaussians, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Full differentiable render of world-space Gaussians.

    Returns ``(image (H, W, 5) tensor, ScreenSplats, RasterContext)``.
    """
    s = screen_splats(g, cam)
    img, ctx = rasterize(s.mu2d, s.conic, s.opacity, s.color, s.depth, cam.width, cam.height, background)
    return img, s, ctx
