"""Optimization loop: Adam with per-group schedules, warm-up, loss gating,
densification and mask pruning."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy.spatial import cKDTree

from . import diffkernel as dk
from .deform import DeformNet, DeformOffsets, deform
from .diffkernel import Tensor
from .gaussians import Camera, GaussianCloud, compose_deformed, quat_to_rotmat
from .hashenc import HashColorField
from .losses import (LossWeights, SlidingWindowStats, active_terms, consistency_loss, denoise_loss,
                     mask_loss, photometric_loss, static_loss, total_loss)
from .mask import binary_mask, prune_masked
from .rasterizer import RenderOutput, render_gaussians

log = logging.getLogger(__name__)

POINT_GROUPS = ("mu", "rot", "log_scale", "opacity_logit", "mask_logit")


@dataclass
class TrainConfig:
    total_iters: int = 40000
    warmup_iters: int = 1500
    static_from: int = 3000
    consistency_from: int = 3000
    denoise_from: int = 5000
    w_dn: float = 1e-2
    w_s: float = 1e-3
    w_con: float = 1e-3
    w_m: float = 5e-4
    lambda_dssim: float = 0.2
    static_threshold: float = 0.1
    # learning rates
    deform_lr_start: float = 8e-4
    deform_lr_end: float = 1.6e-6
    hash_lr_start: float = 8e-4
    hash_lr_end: float = 3.2e-4
    position_lr_start: float = 1.6e-4
    position_lr_end: float = 1.6e-6
    opacity_lr: float = 0.05
    scale_lr: float = 5e-3
    rotation_lr: float = 1e-3
    mask_lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-15
    # densification (3D-GS defaults)
    densify_from: int = 500
    densify_until: int = 15000
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    opacity_reset_interval: int = 3000
    min_opacity: float = 0.005
    max_points: int = 1_000_000
    # mask
    mask_epsilon: float = 0.01
    mask_init: float = 0.9
    mask_prune_from: int = 5000
    mask_prune_interval: int = 1000
    window_capacity: int = 50
    window_stride: int = 10
    # model
    deform_depth: int = 8
    deform_width: int = 256
    deform_skip: int = 4
    pos_freqs: int = 10
    time_freqs: int = 6
    hash_levels: int = 16
    hash_min_res: int = 16
    hash_max_res: int = 2048
    hash_log2_table: int = 20
    hash_feat_dim: int = 2
    hash_hidden: int = 64
    hash_layers: int = 2
    color_lookup: str = "deformed"
    # ablation switches
    deform_enabled: bool = True
    static_enabled: bool = True
    consistency_enabled: bool = True
    denoise_enabled: bool = True
    # scene / run
    init_opacity: float = 0.1
    random_init_count: int = 0
    default_scale: float = 0.01
    background: tuple = (0.0, 0.0, 0.0)
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if not self.warmup_iters < self.static_from <= self.denoise_from:
            raise ValueError("TrainConfig: need warmup_iters < static_from <= denoise_from")
        if self.color_lookup not in ("deformed", "canonical"):
            raise ValueError("TrainConfig: color_lookup must be 'deformed' or 'canonical'")

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_dn, self.w_s, self.w_con, self.w_m, self.lambda_dssim,
                           self.static_from, self.consistency_from, self.denoise_from)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


_MILESTONES = ("total_iters", "warmup_iters", "static_from", "consistency_from", "denoise_from",
               "densify_from", "densify_until", "densify_interval", "opacity_reset_interval",
               "mask_prune_from", "mask_prune_interval")


def preset(name: str, **overrides) -> TrainConfig:
    """``full`` (40k iterations) or ``toy`` (5k iterations, milestones / 8)."""
    if name in ("full", "default"):
        return replace(TrainConfig(), **overrides)
    if name == "toy":
        base = TrainConfig()
        scaled = {k: max(1, int(round(getattr(base, k) / 8))) for k in _MILESTONES}
        scaled.update(hash_log2_table=14, max_points=1500, densify_grad_threshold=2e-3)
        scaled.update(overrides)
        return replace(base, **scaled)
    raise ValueError(f"unknown preset {name!r}")


def lr_at(iteration: int, lr_start: float, lr_end: float, total: int) -> float:
    """Log-linear decay from ``lr_start`` to ``lr_end`` over ``total`` iterations."""
    frac = min(max(iteration, 0), total) / total
    return float(np.exp((1 - frac) * np.log(lr_start) + frac * np.log(lr_end)))


class Adam:
    """Adam over named parameter groups of numpy arrays (updated in place)."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.groups: dict[str, dict] = {}

    def add_group(self, name: str, params: dict):
        self.groups[name] = {"params": params, "step": 0,
                             "m": {k: np.zeros_like(v) for k, v in params.items()},
                             "v": {k: np.zeros_like(v) for k, v in params.items()}}

    def step(self, name: str, grads: dict, lr: float):
        g = self.groups[name]
        live = {k: v for k, v in grads.items() if v is not None}
        if not live:
            return
        g["step"] += 1
        t = g["step"]
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for k, gr in live.items():
            m, v = g["m"][k], g["v"][k]
            m *= self.beta1
            m += (1 - self.beta1) * gr
            v *= self.beta2
            v += (1 - self.beta2) * gr * gr
            g["params"][k] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def remap_rows(self, name: str, source: np.ndarray):
        """Rows of every moment array follow ``source`` (-1 = fresh zero row)."""
        g = self.groups[name]
        for mom in ("m", "v"):
            for k, arr in g[mom].items():
                new = np.zeros((len(source),) + arr.shape[1:])
                ok = source >= 0
                new[ok] = arr[source[ok]]
                g[mom][k] = new

    def reset_rows(self, name: str, key: str):
        g = self.groups[name]
        g["m"][key][:] = 0.0
        g["v"][key][:] = 0.0

    def state(self) -> dict:
        out = {}
        for name, g in self.groups.items():
            out[f"{name}.step"] = np.array([g["step"]], dtype=np.int64)
            for mom in ("m", "v"):
                for k, arr in g[mom].items():
                    out[f"{name}.{mom}.{k}"] = arr
        return out

    def load_state(self, state: dict):
        for name, g in self.groups.items():
            if f"{name}.step" not in state:
                continue
            g["step"] = int(state[f"{name}.step"][0])
            for mom in ("m", "v"):
                for k in g[mom]:
                    g[mom][k] = np.array(state[f"{name}.{mom}.{k}"], dtype=np.float64)


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray
    name: str = ""

    @property
    def time(self) -> float:
        return self.camera.time


def init_scene(points, config: TrainConfig, rng: np.random.Generator, aabb=None) -> GaussianCloud:
    """Gaussians at seed points (or ``config.random_init_count`` random points in ``aabb``)."""
    if points is not None and len(points):
        mu = np.array(points, dtype=np.float64).reshape(-1, 3)
    elif config.random_init_count > 0:
        if aabb is None:
            raise ValueError("init_scene: random initialization needs an AABB")
        lo, hi = np.asarray(aabb, dtype=np.float64)
        mu = rng.uniform(lo, hi, size=(config.random_init_count, 3))
    else:
        raise ValueError("init_scene: no seed points and random_init_count is 0")
    n = len(mu)
    if n == 1:
        scale = np.full(n, config.default_scale)
    else:
        k = min(4, n)
        d, _ = cKDTree(mu).query(mu, k=k)
        dist2 = np.mean(d[:, 1:] ** 2, axis=1)
        scale = np.sqrt(np.maximum(dist2, 1e-14))
    rot = np.zeros((n, 4))
    rot[:, 0] = 1.0
    logit = lambda p: float(np.log(p / (1 - p)))
    return GaussianCloud(mu, rot, np.repeat(np.log(scale)[:, None], 3, axis=1),
                         np.full(n, logit(config.init_opacity)), np.full(n, logit(config.mask_init)))


def scene_extent(cameras) -> float:
    """1.1 x the largest camera distance from the mean centre (1.0 for one camera)."""
    centers = np.stack([c.center for c in cameras])
    r = float(np.linalg.norm(centers - centers.mean(axis=0), axis=1).max() * 1.1)
    return r if r > 1e-6 else 1.0


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class StepResult:
    iteration: int
    record: dict
    n_points: int


class Trainer:
    """Owns every trainable array plus optimizer, window and densify stats."""

    def __init__(self, config: TrainConfig, cloud: GaussianCloud, net: DeformNet,
                 field: HashColorField, extent: float, iteration: int = 0):
        self.config = config
        self.cloud = cloud
        self.net = net
        self.field = field
        self.extent = extent
        self.iteration = iteration
        self.weights = config.loss_weights
        ss = np.random.SeedSequence(config.seed)
        self._order_rng, self._densify_rng = (np.random.default_rng(s) for s in ss.spawn(2))
        self._epoch: list[int] = []
        self.window = SlidingWindowStats(config.window_capacity, config.window_stride)
        self.adam = Adam(config.beta1, config.beta2, config.adam_eps)
        self._register_point_groups()
        self.adam.add_group("deform", net.params)
        self.adam.add_group("hash", field.params)
        self._reset_densify_stats()
        self.history: list[dict] = []
        # persistent identities: survivors keep theirs, new points get fresh ones
        self.point_ids = np.arange(len(cloud), dtype=np.int64)
        self._next_id = len(cloud)

    # ------------------------------------------------------------ set-up

    @classmethod
    def create(cls, config: TrainConfig, cameras, points=None, aabb=None) -> "Trainer":
        ss = np.random.SeedSequence(config.seed)
        init_rng, net_rng, hash_rng = (np.random.default_rng(s) for s in ss.spawn(5)[2:])
        cloud = init_scene(points, config, init_rng, aabb)
        if aabb is None:
            aabb = HashColorField.aabb_from_points(cloud.mu)
        net = DeformNet.create(net_rng, config.deform_depth, config.deform_width, config.deform_skip,
                               config.pos_freqs, config.time_freqs)
        fld = HashColorField.create(hash_rng, aabb, n_levels=config.hash_levels,
                                    min_res=config.hash_min_res, max_res=config.hash_max_res,
                                    log2_table=config.hash_log2_table, feat_dim=config.hash_feat_dim,
                                    hidden=config.hash_hidden, n_hidden=config.hash_layers)
        return cls(config, cloud, net, fld, scene_extent(cameras))

    def _register_point_groups(self):
        for name in POINT_GROUPS:
            self.adam.add_group(name, {name: getattr(self.cloud, name)})

    def _sync_point_groups(self):
        for name in POINT_GROUPS:
            self.adam.groups[name]["params"] = {name: getattr(self.cloud, name)}

    def _reset_densify_stats(self):
        n = len(self.cloud)
        self.grad_accum = np.zeros(n)
        self.grad_dir = np.zeros((n, 3))
        self.denom = np.zeros(n)
        self.max_radii = np.zeros(n)

    # ------------------------------------------------------------- model

    def learning_rates(self, iteration: int) -> dict:
        c = self.config
        return {
            "mu": lr_at(iteration, c.position_lr_start * self.extent, c.position_lr_end * self.extent,
                        c.total_iters),
            "rot": c.rotation_lr, "log_scale": c.scale_lr, "opacity_logit": c.opacity_lr,
            "mask_logit": c.mask_lr,
            "deform": lr_at(iteration, c.deform_lr_start, c.deform_lr_end, c.total_iters),
            "hash": lr_at(iteration, c.hash_lr_start, c.hash_lr_end, c.total_iters),
        }

    def deform_active(self, iteration: int) -> bool:
        return self.config.deform_enabled and iteration >= self.config.warmup_iters

    def leaf_tensors(self, requires_grad: bool = True) -> dict:
        T = {name: Tensor(getattr(self.cloud, name), requires_grad) for name in POINT_GROUPS}
        T["deform"] = {k: Tensor(v, requires_grad) for k, v in self.net.params.items()}
        T["hash"] = {k: Tensor(v, requires_grad) for k, v in self.field.params.items()}
        return T

    def forward(self, cam: Camera, T: dict, iteration: int, baked_colors=None):
        """deform -> mask -> compose -> hash color -> render."""
        c = self.config
        n = T["mu"].shape[0]
        if self.deform_active(iteration):
            offs = deform(T["mu"], cam.time, self.net, iteration, c.warmup_iters, params=T["deform"])
        else:
            offs = DeformOffsets.zeros(n)
        mv = binary_mask(T["mask_logit"], c.mask_epsilon)
        g = compose_deformed(T["mu"], T["rot"], T["log_scale"], T["opacity_logit"], offs, mv.M)
        if baked_colors is not None:
            base = Tensor(baked_colors)
        else:
            # the hash lookup position is detached: color gradients do not move points
            lookup = dk.stop_gradient(g.mu if c.color_lookup == "deformed" else T["mu"])
            base = self.field.base_color_tensor(lookup, T["hash"])
        g.color = dk.clamp(base + offs.d_color, 0.0, 1.0)
        img, splats, ctx = render_gaussians(g, cam, c.background)
        return img, dict(offsets=offs, mask=mv, gaussians=g, splats=splats, ctx=ctx, base_color=base)

    def losses(self, img: Tensor, target, aux: dict, iteration: int, T: dict):
        c = self.config
        on = active_terms(self.weights, iteration)
        g, offs = aux["gaussians"], aux["offsets"]
        terms = {"photometric": photometric_loss(img[..., :3], target, c.lambda_dssim),
                 "mask": mask_loss(T["mask_logit"])}
        if on["static"] and c.static_enabled:
            terms["static"] = static_loss(offs.d_mu, c.static_threshold)
        if on["consistency"] and c.consistency_enabled:
            terms["consistency"] = consistency_loss(offs.d_mu)
        if on["denoise"] and c.denoise_enabled:
            terms["denoise"] = denoise_loss(g.scale, g.opacity, self.window)
        return total_loss(terms, self.weights, iteration)

    def render(self, cam: Camera, iteration: int | None = None, baked_colors=None) -> RenderOutput:
        it = self.iteration if iteration is None else iteration
        img, _ = self.forward(cam, self.leaf_tensors(False), it, baked_colors)
        d = img.data
        return RenderOutput(d[..., :3], d[..., 3], d[..., 4], np.zeros(d.shape[:2], dtype=np.int64))

    # ---------------------------------------------------------- training

    def next_frame_index(self, n_frames: int) -> int:
        if not self._epoch:
            self._epoch = list(self._order_rng.permutation(n_frames))
        return int(self._epoch.pop(0))

    def train_step(self, frame: Frame) -> StepResult:
        it = self.iteration
        with dk.Tape() as tape:
            T = self.leaf_tensors(True)
            img, aux = self.forward(frame.camera, T, it)
            loss, record = self.losses(img, frame.image, aux, it, T)
            if not np.isfinite(loss.data):
                raise NonFiniteLoss(f"non-finite loss at iteration {it}: {record}")
            tape.backward(loss)
        lrs = self.learning_rates(it)
        for name in POINT_GROUPS:
            self.adam.step(name, {name: T[name].grad}, lrs[name])
        self.adam.step("deform", {k: t.grad for k, t in T["deform"].items()}, lrs["deform"])
        self.adam.step("hash", {k: t.grad for k, t in T["hash"].items()}, lrs["hash"])
        g = aux["gaussians"]
        self.window.maybe_record(it, g.scale, g.opacity)
        self._accumulate_densify_stats(aux, T, frame.camera)
        self.iteration = it + 1
        record["n_points"] = len(self.cloud)
        record["iteration"] = it
        self.history.append(record)
        self._post_step()
        return StepResult(it, record, len(self.cloud))

    def _accumulate_densify_stats(self, aux, T, cam: Camera):
        ctx, splats = aux["ctx"], aux["splats"]
        idx = splats.index[ctx.visible]
        g2 = ctx.grad_mu2d[ctx.visible] * np.array([0.5 * cam.width, 0.5 * cam.height])
        self.grad_accum[idx] += np.linalg.norm(g2, axis=1)
        self.denom[idx] += 1
        if T["mu"].grad is not None:
            self.grad_dir += T["mu"].grad
        self.max_radii[idx] = np.maximum(self.max_radii[idx], ctx.radius[ctx.visible])

    def _post_step(self):
        c, it = self.config, self.iteration
        if it < c.densify_until:
            if it > c.densify_from and it % c.densify_interval == 0:
                size_threshold = 20.0 if it > c.opacity_reset_interval else None
                self.densify_and_prune(size_threshold)
            if it % c.opacity_reset_interval == 0:
                self.reset_opacity()
        if it >= c.mask_prune_from and it % c.mask_prune_interval == 0:
            self.prune_masked_points()

    def fit(self, frames, iters: int | None = None, callback=None):
        stop = self.config.total_iters if iters is None else self.iteration + iters
        while self.iteration < stop:
            res = self.train_step(frames[self.next_frame_index(len(frames))])
            if callback is not None:
                callback(self, res)
        return self.history

    # ------------------------------------------------------- point edits

    def apply_point_map(self, source: np.ndarray, new_cloud: GaussianCloud, fresh: np.ndarray | None = None):
        """Replace the cloud; rows keep moments/history of ``source`` rows.

        ``fresh`` marks rows that start with zero optimizer moments (their
        window history still follows ``source``).
        """
        source = np.asarray(source, dtype=np.int64)
        self.cloud = new_cloud
        mom_src = source.copy()
        if fresh is not None:
            mom_src[fresh] = -1
        self._remap_ids(mom_src)
        for name in POINT_GROUPS:
            self.adam.remap_rows(name, mom_src)
        self._sync_point_groups()
        if len(self.window):
            self.window.remap(source)
        for attr in ("grad_accum", "denom", "max_radii", "grad_dir"):
            arr = getattr(self, attr)
            new = np.zeros((len(source),) + arr.shape[1:])
            ok = source >= 0
            new[ok] = arr[source[ok]]
            setattr(self, attr, new)

    def _remap_ids(self, source: np.ndarray):
        ids = np.empty(len(source), dtype=np.int64)
        ok = source >= 0
        ids[ok] = self.point_ids[source[ok]]
        ids[~ok] = self._next_id + np.arange(int((~ok).sum()))
        self._next_id += int((~ok).sum())
        self.point_ids = ids

    def densify_and_prune(self, max_screen_size=None) -> dict:
        c = self.config
        grads = np.where(self.denom > 0, self.grad_accum / np.maximum(self.denom, 1), 0.0)
        cloud = self.cloud
        n = len(cloud)
        scale_max = cloud.scale.max(axis=1)
        high = grads >= c.densify_grad_threshold
        clone = high & (scale_max <= c.percent_dense * self.extent)
        split = high & (scale_max > c.percent_dense * self.extent)
        n_new = int(clone.sum() + 2 * split.sum())
        if n + n_new > c.max_points:
            log.warning("point cap %d reached; skipping densification", c.max_points)
            clone[:] = False
            split[:] = False
        parts, sources, fresh = [cloud], [np.arange(n)], [np.zeros(n, dtype=bool)]
        ci = np.flatnonzero(clone)
        if ci.size:
            cl = cloud.subset(ci)
            d = self.grad_dir[ci]
            nrm = np.linalg.norm(d, axis=1, keepdims=True)
            step = np.where(nrm > 0, d / np.where(nrm > 0, nrm, 1), 0.0)
            cl.mu = cl.mu - 0.5 * scale_max[ci, None] * step
            parts.append(cl)
            sources.append(ci)
            fresh.append(np.ones(ci.size, dtype=bool))
        si = np.flatnonzero(split)
        if si.size:
            rep = np.repeat(si, 2)
            child = cloud.subset(rep)
            samples = self._densify_rng.normal(size=(rep.size, 3)) * cloud.scale[rep]
            R = quat_to_rotmat(cloud.rot[rep])
            child.mu = cloud.mu[rep] + np.einsum("nij,nj->ni", R, samples)
            child.log_scale = np.log(cloud.scale[rep] / 1.6)
            parts.append(child)
            sources.append(rep)
            fresh.append(np.ones(rep.size, dtype=bool))
        merged = GaussianCloud(*(np.concatenate([getattr(p, f) for p in parts]) for f in GaussianCloud.FIELDS))
        source = np.concatenate(sources)
        fresh_all = np.concatenate(fresh)
        self.apply_point_map(source, merged, fresh_all)
        # drop split parents, transparent points and masked points
        drop = np.zeros(len(merged), dtype=bool)
        drop[si] = True
        drop |= merged.opacity < c.min_opacity
        drop |= dk.sigmoid_np(merged.mask_logit) <= c.mask_epsilon
        if max_screen_size is not None:
            drop |= self.max_radii > max_screen_size
            drop |= merged.scale.max(axis=1) > 0.1 * self.extent
        if drop.all():
            raise ValueError("densify_and_prune would remove every point")
        keep = np.flatnonzero(~drop)
        self.apply_point_map(keep, merged.subset(keep))
        self._reset_densify_stats()
        return {"cloned": int(ci.size), "split": int(si.size), "pruned": int(drop.sum())}

    def prune_masked_points(self) -> np.ndarray:
        keep, index_map = prune_masked(self.cloud.mask_logit, self.config.mask_epsilon)
        if keep.size < len(self.cloud):
            self.apply_point_map(keep, self.cloud.subset(keep))
        return index_map

    def reset_opacity(self):
        cap = np.log(0.01 / 0.99)
        self.cloud.opacity_logit = np.minimum(self.cloud.opacity_logit, cap)
        self._sync_point_groups()
        self.adam.reset_rows("opacity_logit", "opacity_logit")

    def add_points(self, extra: GaussianCloud):
        """Append points with zero moments and no window history of their own."""
        n = len(self.cloud)
        merged = GaussianCloud(*(np.concatenate([getattr(self.cloud, f), getattr(extra, f)])
                                 for f in GaussianCloud.FIELDS))
        source = np.concatenate([np.arange(n), np.full(len(extra), -1)])
        self.cloud = merged
        self._remap_ids(source)
        for name in POINT_GROUPS:
            self.adam.remap_rows(name, source)
        self._sync_point_groups()
        if len(self.window):
            self.window.remap_with_fill(source)
        for attr in ("grad_accum", "denom", "max_radii", "grad_dir"):
            arr = getattr(self, attr)
            setattr(self, attr, np.concatenate([arr, np.zeros((len(extra),) + arr.shape[1:])]))
