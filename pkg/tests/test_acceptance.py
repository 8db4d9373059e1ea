"""End-to-end acceptance checks.  Each test prints one PASS/FAIL line.

The toy training runs are shared through module fixtures; the whole file
takes roughly an hour on one CPU core.
"""
import hashlib
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from hashsplat import diffkernel as dk
from hashsplat.cli import main
from hashsplat.dataio import (PROFILE_EXPORT, checkpoint_from_trainer, decode_checkpoint, encode_checkpoint,
                              make_toy_scene, storage_report, trainer_from_checkpoint)
from hashsplat.deform import deform
from hashsplat.diffkernel import Tensor
from hashsplat.gaussians import Camera, DeformedGaussians, GaussianCloud, covariance_3d
from hashsplat.losses import consistency_loss
from hashsplat.metrics import psnr
from hashsplat.rasterizer import (ALPHA_MAX, RenderablePointSet, render_gaussians, render_reference, render_tiled,
                                  screen_splats)
from hashsplat.trainer import POINT_GROUPS, Trainer, preset

AABB = [[-1.6] * 3, [1.6] * 3]


def report(n, ok, detail):
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- shared runs

@pytest.fixture(scope="module")
def toy():
    return make_toy_scene(0)


def train_toy(toy, **overrides):
    frames = toy.frames("train")
    tr = Trainer.create(preset("toy", **overrides), [f.camera for f in frames], toy.seed_points, aabb=AABB)
    t0 = time.time()
    tr.fit(frames)
    tr.wall_seconds = time.time() - t0
    return tr


@pytest.fixture(scope="module")
def run_a(toy):
    return train_toy(toy)


@pytest.fixture(scope="module")
def run_a_bytes(run_a):
    return encode_checkpoint(checkpoint_from_trainer(run_a))


def mean_psnr(tr, frames):
    return float(np.mean([psnr(tr.render(f.camera).rgb, f.image) for f in frames]))


# ------------------------------------------------------------------ criteria

def test_01_rasterizer_equivalence():
    t0 = time.time()
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        p = RenderablePointSet.random(rng, int(rng.integers(1, 201)), 32, 32)
        cam = Camera(np.eye(4), 30.0, 30.0, 16.0, 16.0, 32, 32)
        a, b = render_tiled(p, cam), render_reference(p, cam)
        worst = max(worst, np.abs(a.rgb - b.rgb).max(), np.abs(a.alpha - b.alpha).max())
    dt = time.time() - t0
    report(1, worst <= 1e-5 and dt < 60, f"max |tiled - reference| = {worst:.2e} over 100 scenes ({dt:.1f}s)")


PRIMITIVES = {
    "add": lambda x: x + dk.sin(x), "sub": lambda x: x - x * x, "mul": lambda x: x * dk.cos(x),
    "div": lambda x: x / (x * x + 1.0), "neg": dk.neg, "exp": dk.exp, "log": lambda x: dk.log(x * x + 1.0),
    "sqrt": lambda x: dk.sqrt(x * x + 1.0), "power": lambda x: dk.power(x * x + 1.0, 1.5),
    "sin": dk.sin, "cos": dk.cos, "sigmoid": dk.sigmoid, "relu": dk.relu, "abs": dk.abs_,
    "clamp": lambda x: dk.clamp(x, -0.5, 0.5), "sum": lambda x: dk.sum_(x, axis=1),
    "mean": lambda x: dk.mean(x, axis=0), "norm_l1": lambda x: dk.norm_l1(x, axis=1),
    "norm_l2": lambda x: dk.norm_l2(x, axis=1), "matmul": lambda x: x @ Tensor(np.arange(8.0).reshape(4, 2)),
    "bmm": lambda x: dk.reshape(x, (3, 2, 2)) @ dk.reshape(x, (3, 2, 2)),
    "transpose": lambda x: dk.transpose(x) * Tensor(np.arange(12.0).reshape(4, 3)),
    "getitem": lambda x: x[1:, ::2] * 3.0, "gather": lambda x: dk.index_gather(x, np.array([0, 2, 2])) * 2.0,
    "concat": lambda x: dk.concat([x, x * x], axis=1), "stack": lambda x: dk.stack([x, dk.sin(x)], axis=-1),
    "where": lambda x: dk.where(np.arange(12).reshape(3, 4) % 2 == 0, x * x, dk.sin(x)),
    "stop_gradient": lambda x: x * dk.stop_gradient(x * x),
}


def composite_trainer(rng):
    cfg = preset("toy", deform_depth=2, deform_width=8, deform_skip=0, pos_freqs=2, time_freqs=2, hash_levels=2,
                 hash_min_res=2, hash_max_res=4, hash_log2_table=6, hash_hidden=8, warmup_iters=1,
                 static_from=2, consistency_from=2, denoise_from=3, default_scale=0.3)
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 1.0, 8, 8).at_time(0.4)
    tr = Trainer.create(cfg, [cam], rng.uniform(-0.4, 0.4, (5, 3)), aabb=[[-1] * 3, [1] * 3])
    tr.cloud.opacity_logit[:] = rng.uniform(-1, 2, 5)
    tr.cloud.rot[:] = rng.normal(size=(5, 4))
    for k, v in tr.net.params.items():
        if k.endswith("_W"):
            v[:] = rng.normal(size=v.shape) * 0.05     # non-zero offsets: mixes static and dynamic points
    tr.window.maybe_record(0, tr.cloud.scale * rng.uniform(0.8, 1.2, (5, 3)),
                           tr.cloud.opacity * rng.uniform(0.8, 1.2, 5))
    return tr, cam, rng.uniform(size=(8, 8, 3))


def test_02_gradient_audit():
    t0 = time.time()
    rng = np.random.default_rng(0)
    errs = {}
    for name, f in PRIMITIVES.items():
        x = rng.normal(size=(3, 4))
        x = np.where(np.abs(x) < 0.05, 0.3, x)
        x = np.where(np.abs(np.abs(x) - 0.5) < 0.05, 0.7, x)
        errs[f"op:{name}"] = dk.check_gradients(f, x)
    tr, cam, target = composite_trainer(rng)
    it = 10

    def pipeline(group, key=None):
        def f(x):
            T = tr.leaf_tensors(False)
            if key is None:
                T[group] = x
            else:
                T[group] = {**T[group], key: x}
            img, aux = tr.forward(cam, T, it)
            return tr.losses(img, target, aux, it, T)[0]
        return f

    for g in POINT_GROUPS:
        errs[f"pipeline:{g}"] = dk.check_gradients(pipeline(g), getattr(tr.cloud, g))
    for k, v in tr.net.params.items():
        errs[f"pipeline:deform.{k}"] = dk.check_gradients(pipeline("deform", k), v)
    for k, v in tr.field.params.items():
        errs[f"pipeline:hash.{k}"] = dk.check_gradients(pipeline("hash", k), v)
    worst = max(errs, key=errs.get)
    dt = time.time() - t0
    report(2, errs[worst] <= 1e-4 and dt < 300,
           f"{len(errs)} checks, worst rel err {errs[worst]:.2e} ({worst}), {dt:.1f}s")


def test_03_toy_overfit(toy, run_a):
    p_train = mean_psnr(run_a, toy.frames("train"))
    p_test = mean_psnr(run_a, toy.frames("test"))
    minutes = run_a.wall_seconds / 60
    report(3, p_train >= 30 and p_test >= 25 and minutes <= 30,
           f"train PSNR {p_train:.2f} dB, held-out {p_test:.2f} dB, {len(run_a.cloud)} points, {minutes:.1f} min")


def inject_spurious(tr, fraction, rng, lo=-1.2, hi=1.2):
    """Append random Gaussians (attributes copied from random existing points) at uniform positions."""
    c = tr.cloud
    n = len(c)
    k = int(round(fraction * n))
    src = rng.integers(0, n, k)
    extra = GaussianCloud(rng.uniform(lo, hi, (k, 3)), c.rot[src].copy(), c.log_scale[src].copy(),
                          c.opacity_logit[src].copy(), np.full(k, np.log(tr.config.mask_init / (1 - tr.config.mask_init))))
    tr.add_points(extra)
    return tr.point_ids[n:].copy()


def test_04_denoising_mask(toy, run_a_bytes):
    frames = toy.frames("train")
    tr = trainer_from_checkpoint(decode_checkpoint(run_a_bytes))
    before = mean_psnr(tr, frames)
    injected = inject_spurious(tr, 0.2, np.random.default_rng(123))
    tr.fit(frames, iters=2000)
    on = tr.point_ids[dk.sigmoid_np(tr.cloud.mask_logit) > tr.config.mask_epsilon]
    removed = 1.0 - np.isin(injected, on).mean()
    after = mean_psnr(tr, frames)
    report(4, removed >= 0.9 and before - after <= 0.5,
           f"{removed:.1%} of {len(injected)} injected points masked/pruned, PSNR {before:.2f} -> {after:.2f} dB")


def static_offset_l1(tr, toy, radius=2.0):
    """Mean |d_mu|_1 over training timestamps of Gaussians inside a static blob (canonical space)."""
    mu = tr.cloud.mu
    sel = np.zeros(len(mu), dtype=bool)
    for b in toy.blobs:
        if not b.static:
            continue
        inv = np.linalg.inv(covariance_3d(b.rot, b.scale))
        d = mu - b.mu0
        sel |= np.einsum("ni,ij,nj->n", d, inv, d) <= radius ** 2
    sel &= dk.sigmoid_np(tr.cloud.mask_logit) > tr.config.mask_epsilon
    vals = [np.abs(deform(mu[sel], float(t), tr.net, tr.iteration, tr.config.warmup_iters).d_mu.data).sum(axis=1)
            for t in toy.times]
    return float(np.mean(vals)), int(sel.sum())


def test_05_constraints(toy, run_a):
    free = train_toy(toy, static_enabled=False)
    with_s, n_with = static_offset_l1(run_a, toy)
    without_s, n_without = static_offset_l1(free, toy)
    ratio = with_s / without_s
    z = np.zeros((4, 3))
    z[:, 0] = 0.7
    equal = float(consistency_loss(Tensor(z)).data)
    d = np.zeros((2, 3))
    d[:, 0] = [1.0, 3.0]
    hand = float(consistency_loss(Tensor(d)).data)
    report(5, ratio <= 0.25 and equal == 0.0 and hand == 1.0,
           f"(a) static |d_mu|_1 {with_s:.2e} ({n_with} pts) vs {without_s:.2e} ({n_without} pts) without, "
           f"ratio {ratio:.3f}; (b) equal offsets -> {equal}, {{1,3}} -> {hand}")


def test_06_schedule_gating(toy):
    frames = toy.frames("train")
    tr = Trainer.create(preset("full", hash_log2_table=12), [f.camera for f in frames], toy.seed_points, aabb=AABB)
    rng = np.random.default_rng(0)
    for k, v in tr.net.params.items():
        if k.endswith("_W"):
            v[:] = rng.normal(size=v.shape) * 1e-2
    tr.window.maybe_record(0, tr.cloud.scale * 1.1, tr.cloud.opacity * 0.9)
    T = tr.leaf_tensors(False)
    bad = []
    for it in (1500, 2000, 2999, 3000, 4000, 4999, 5000, 6000):
        img, aux = tr.forward(frames[0].camera, T, it)
        total, rec = tr.losses(img, frames[0].image, aux, it, T)
        s, con, dn = rec.get("static", 0.0), rec.get("consistency", 0.0), rec.get("denoise", 0.0)
        if it < 3000 and (s != 0.0 or con != 0.0):
            bad.append(f"s/con at {it}")
        if it >= 3000 and not (s > 0 and con > 0):
            bad.append(f"s/con missing at {it}")
        if it < 5000 and dn != 0.0:
            bad.append(f"dn at {it}")
        if it >= 5000 and not dn > 0:
            bad.append(f"dn missing at {it}")
        expect = rec["photometric"] + rec["mask"]      # records hold weighted contributions
        if it < 3000 and float(total.data) != expect:
            bad.append(f"total at {it}")
    report(6, not bad, "L_s/L_con exactly 0 before 3000, L_dn exactly 0 before 5000" if not bad else str(bad))


def test_07_storage(capsys):
    rep = storage_report(n_points=63_000)
    code = main(["info", "--points", "63000"])
    out = capsys.readouterr().out
    ok = (rep.ratio <= 0.24 and abs(rep.point_mb - 3.5) <= 0.2 * 3.5 and code == 0
          and f"{rep.point_mb:.3f} MB" in out and f"{rep.ratio:.4f}" in out)
    report(7, ok, f"ratio {rep.ratio:.4f}, N=63k point payload {rep.point_mb:.3f} MB (14 f32 per point)")


def test_08_determinism(toy, run_a_bytes):
    again = encode_checkpoint(checkpoint_from_trainer(train_toy(toy)))
    rt = encode_checkpoint(decode_checkpoint(run_a_bytes))
    ck = decode_checkpoint(run_a_bytes)
    ck.profile = PROFILE_EXPORT
    exp = encode_checkpoint(ck)
    report(8, again == run_a_bytes and rt == run_a_bytes and encode_checkpoint(decode_checkpoint(exp)) == exp,
           f"two runs bit-identical ({len(run_a_bytes)} bytes, sha256 {hashlib.sha256(run_a_bytes).hexdigest()[:12]}), "
           f"round trip bit-exact")


def digest(tr):
    h = hashlib.sha256()
    for f in GaussianCloud.FIELDS:
        h.update(getattr(tr.cloud, f).tobytes())
    for d in (tr.field.params, tr.net.params):
        for k in sorted(d):
            h.update(d[k].tobytes())
    return h.hexdigest()


def test_09_warmup_equivalence(toy):
    frames = toy.frames("train")
    trails = []
    for enabled in (True, False):
        cfg = preset("toy", warmup_iters=1500, static_from=3000, consistency_from=3000, denoise_from=5000,
                     deform_enabled=enabled)
        tr = Trainer.create(cfg, [f.camera for f in frames], toy.seed_points, aabb=AABB)
        trail = []
        tr.fit(frames, iters=1500, callback=lambda t, r: trail.append(digest(t)) if t.iteration % 10 == 0 else None)
        trails.append((trail, [h["total"] for h in tr.history], len(tr.cloud)))
    (a, la, na), (b, lb, nb) = trails
    report(9, a == b and la == lb,
           f"1500 warm-up iterations: {len(a)} parameter digests and all losses identical to the deform-ablated "
           f"run ({na} points)")


def stack_transmittance(g, cam):
    """Per-pixel product of (1 - alpha) over all splats, from the closed-form splat alpha."""
    sp = screen_splats(g, cam)
    ys, xs = np.mgrid[0:cam.height, 0:cam.width] + 0.5
    T = np.ones((cam.height, cam.width))
    for m, (a, b, c), o in zip(sp.mu2d.data, sp.conic.data, sp.opacity.data):
        dx, dy = xs - m[0], ys - m[1]
        al = np.minimum(ALPHA_MAX, o * np.exp(-0.5 * (a * dx * dx + 2 * b * dx * dy + c * dy * dy)))
        T *= 1 - np.where(al < 1 / 255, 0.0, al)
    return T


def test_10_depth():
    cam = Camera.look_at([0, 0, 0], [0, 0, 1], [0, -1, 0], np.deg2rad(50), 48, 48)
    blobs = [(np.array([0.15, 0.0, 2.0]), 0.35, 8), (np.array([-0.3, 0.1, 5.0]), 0.9, 4)]

    def stack(center, scale, k):
        q = np.tile([0.9, 0.1, 0.2, 0.0], (k, 1))
        cols = (np.tile(center, (k, 1)), q, np.tile([scale, 0.8 * scale, scale], (k, 1)), np.full(k, 0.999),
                np.tile([1.0, 0.5, 0.2], (k, 1)))
        return cols

    def gaussians(parts):
        return DeformedGaussians(*(Tensor(np.concatenate([p[i] for p in parts])) for i in range(5)))

    near, far = gaussians([stack(*blobs[0])]), gaussians([stack(*blobs[1])])
    both = render_gaussians(gaussians([stack(*blobs[0]), stack(*blobs[1])]), cam)[0].data
    # the near blob is opaque where its transmittance falls below the compositing cut-off
    opaque = stack_transmittance(near, cam) < 1e-4
    covered = render_gaussians(far, cam)[0].data[..., 4] > 1 / 255
    overlap = opaque & covered
    pc = cam.world_to_cam[:3, :3] @ blobs[0][0] + cam.world_to_cam[:3, 3]
    err = np.abs(both[..., 3][overlap] - pc[2]).max() if overlap.any() else np.inf
    report(10, overlap.sum() >= 20 and err <= 1e-3,
           f"{overlap.sum()} overlap pixels, max |depth - {pc[2]:.3f}| = {err:.2e}")
