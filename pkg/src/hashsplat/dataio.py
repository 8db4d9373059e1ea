"""Datasets, toy scenes, images, checkpoints and storage accounting.

Byte layouts are described in docs/formats.md.
"""
from __future__ import annotations

import csv
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .gaussians import Camera, GaussianCloud, covariance_3d, project
from .rasterizer import RenderablePointSet, render_reference

# ---------------------------------------------------------------- images


def _to_uint8(img) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img):
    """Write RGB (float in [0, 1] or uint8) as PNG or binary PPM (P6).

    ``.npy`` stores the float64 array unquantized.
    """
    path = Path(path)
    if path.suffix.lower() == ".npy":
        np.save(path, np.asarray(img, dtype=np.float64))
        return
    arr = _to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    ext = path.suffix.lower()
    if ext == ".png":
        Image.fromarray(arr, "RGB").save(path)
    elif ext == ".ppm":
        h, w = arr.shape[:2]
        path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr[..., :3]).tobytes())
    else:
        raise ValueError(f"unsupported image format {ext!r} (use .png, .ppm or .npy)")


def _ppm_tokens(data: bytes, count: int):
    toks, pos = [], 0
    while len(toks) < count:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        toks.append(data[start:pos])
    return toks, pos + 1


def read_image_uint8(path) -> np.ndarray:
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".png":
        return np.asarray(Image.open(path).convert("RGB"))
    if ext == ".ppm":
        data = path.read_bytes()
        (magic, w, h, maxval), pos = _ppm_tokens(data, 4)
        if magic != b"P6" or int(maxval) != 255:
            raise ValueError(f"{path}: only 8-bit binary P6 PPM is supported")
        w, h = int(w), int(h)
        raw = data[pos:pos + w * h * 3]
        if len(raw) != w * h * 3:
            raise ValueError(f"{path}: truncated PPM")
        return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()
    raise ValueError(f"unsupported image format {ext!r} (use .png or .ppm)")


def read_image(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".npy":
        return np.load(path).astype(np.float64)
    return read_image_uint8(path).astype(np.float64) / 255.0


# -------------------------------------------------------------- manifest

class ManifestError(ValueError):
    pass


# alias -> canonical field name (D-NeRF transforms layout)
ALIASES = {"file_path": "image", "transform_matrix": "camera_to_world", "time": "t",
           "camera_angle_x": "fov_x", "fl_x": "fx", "fl_y": "fy"}

GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


@dataclass
class FrameSpec:
    image: Path
    camera_to_world: np.ndarray
    t: float
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    split: str = "train"

    def camera(self, near: float = 0.01, far: float = 100.0) -> Camera:
        return Camera(np.linalg.inv(self.camera_to_world), self.fx, self.fy, self.cx, self.cy,
                      self.width, self.height, near, far, self.t)


@dataclass
class SceneManifest:
    frames: list
    root: Path = Path(".")
    seed_points: Path | None = None
    aabb: np.ndarray | None = None
    near: float = 0.01
    far: float = 100.0
    background: tuple = (0.0, 0.0, 0.0)

    def split(self, name: str) -> list:
        return [f for f in self.frames if f.split == name]

    def load_frames(self, split: str = "train"):
        from .trainer import Frame
        out = []
        for f in self.split(split):
            img = read_image(f.image)
            if img.shape[:2] != (f.height, f.width):
                raise ManifestError(f"{f.image}: image is {img.shape[1]}x{img.shape[0]}, "
                                    f"manifest says {f.width}x{f.height}")
            out.append(Frame(f.camera(self.near, self.far), img, f.image.stem))
        return out

    def load_points(self):
        if self.seed_points is None:
            return None
        return read_points(self.seed_points)[0]


def _canon(entry: dict) -> dict:
    out = {}
    for k, v in entry.items():
        out[ALIASES.get(k, k)] = v
    return out


def _image_size(path: Path):
    if path.suffix.lower() in (".ppm", ".npy"):
        return read_image(path).shape[1::-1]
    with Image.open(path) as im:
        return im.size


def parse_manifest(doc: dict, root: Path, default_split: str = "train") -> SceneManifest:
    if not isinstance(doc, dict) or "frames" not in doc:
        raise ManifestError("manifest: missing 'frames' list")
    top = _canon({k: v for k, v in doc.items() if k != "frames"})
    dnerf = any(k in doc for k in ("camera_angle_x",)) or any(
        isinstance(f, dict) and "transform_matrix" in f for f in doc["frames"])
    convention = top.get("convention", "opengl" if dnerf else "opencv")
    if convention not in ("opencv", "opengl"):
        raise ManifestError(f"manifest: convention must be opencv or opengl, got {convention!r}")
    raw = doc["frames"]
    if not raw:
        raise ManifestError("manifest: 'frames' is empty")
    uses_index = any(isinstance(f, dict) and "frame_index" in f for f in raw)
    max_index = max((f.get("frame_index", 0) for f in raw if isinstance(f, dict)), default=0)
    frames = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ManifestError(f"frame {i}: entry is not an object")
        f = {**{k: top[k] for k in ("fov_x", "fx", "fy", "cx", "cy", "width", "height") if k in top},
             **_canon(entry)}

        def need(name):
            if name not in f:
                raise ManifestError(f"frame {i}: missing field '{name}'")
            return f[name]

        img = Path(str(need("image")))
        if not img.suffix:
            img = img.with_suffix(".png")
        img = img if img.is_absolute() else (root / img)
        try:
            c2w = np.asarray(need("camera_to_world"), dtype=np.float64)
        except (TypeError, ValueError):
            raise ManifestError(f"frame {i}: field 'camera_to_world' is not numeric") from None
        if c2w.shape == (3, 4):
            c2w = np.vstack([c2w, [0, 0, 0, 1]])
        if c2w.shape != (4, 4):
            raise ManifestError(f"frame {i}: field 'camera_to_world' must be 4x4, got {c2w.shape}")
        R = c2w[:3, :3]
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-6) or np.linalg.det(R) < 0:
            raise ManifestError(f"frame {i}: field 'camera_to_world' rotation is not orthonormal")
        if convention == "opengl":
            c2w = c2w @ GL_TO_CV
        if uses_index:
            if "frame_index" not in f:
                raise ManifestError(f"frame {i}: missing field 'frame_index'")
            t = f["frame_index"] / max_index if max_index > 0 else 0.0
        else:
            t = float(need("t"))
        if not 0.0 <= t <= 1.0:
            raise ManifestError(f"frame {i}: field 't' = {t} outside [0, 1]")
        if "width" in f and "height" in f:
            w, h = int(f["width"]), int(f["height"])
        else:
            if not img.exists():
                raise ManifestError(f"frame {i}: field 'image' file not found: {img}")
            w, h = _image_size(img)
        if "fx" in f:
            fx = float(f["fx"])
            fy = float(f.get("fy", fx))
        elif "fov_x" in f:
            fx = fy = 0.5 * w / np.tan(0.5 * float(f["fov_x"]))
        else:
            raise ManifestError(f"frame {i}: missing field 'fov_x' (or 'fx')")
        split = f.get("split", default_split)
        if split not in ("train", "test"):
            raise ManifestError(f"frame {i}: field 'split' must be train or test")
        frames.append(FrameSpec(img, c2w, t, fx, fy, float(f.get("cx", w / 2.0)),
                                float(f.get("cy", h / 2.0)), w, h, split))
    seed = top.get("seed_points")
    aabb = top.get("aabb")
    if aabb is not None:
        aabb = np.asarray(aabb, dtype=np.float64)
        if aabb.shape != (2, 3) or np.any(aabb[0] >= aabb[1]):
            raise ManifestError("manifest: 'aabb' must be [[xmin,ymin,zmin],[xmax,ymax,zmax]]")
    return SceneManifest(frames, root, (root / seed) if seed else None, aabb,
                         float(top.get("near", 0.01)), float(top.get("far", 100.0)),
                         tuple(top.get("background", (0.0, 0.0, 0.0))))


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if path.is_dir():
        path = next((path / n for n in ("manifest.json", "transforms_train.json") if (path / n).exists()),
                    path / "manifest.json")
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path}: invalid JSON ({e})") from None
    split = "test" if any(s in path.stem for s in ("test", "val")) else "train"
    return parse_manifest(doc, path.parent, split)


def read_points(path):
    """xyz-rgb text table (one point per line, '#' comments); rgb optional."""
    rows = np.loadtxt(path, comments="#", ndmin=2)
    if rows.shape[1] not in (3, 6):
        raise ValueError(f"{path}: expected 3 or 6 columns, got {rows.shape[1]}")
    rgb = rows[:, 3:6] if rows.shape[1] == 6 else None
    return rows[:, :3], rgb


def write_points(path, xyz, rgb=None):
    data = xyz if rgb is None else np.hstack([xyz, rgb])
    np.savetxt(path, data, fmt="%.17g", header="x y z" + ("" if rgb is None else " r g b"))


# ------------------------------------------------------------- toy scene

TOY_PRESETS = {
    "default": dict(n_blobs=12, n_static=4, n_cameras=20, n_test_cameras=4, n_times=8,
                    resolution=64, radius=4.0, fov_x=np.deg2rad(45.0)),
    "tiny": dict(n_blobs=4, n_static=2, n_cameras=6, n_test_cameras=2, n_times=3,
                 resolution=32, radius=4.0, fov_x=np.deg2rad(45.0)),
}


@dataclass
class ToyBlob:
    mu0: np.ndarray
    direction: np.ndarray
    amplitude: float
    phase: float
    rot: np.ndarray
    scale: np.ndarray
    opacity: float
    color: np.ndarray
    static: bool

    def position(self, t: float) -> np.ndarray:
        if self.static:
            return self.mu0.copy()
        return self.mu0 + self.amplitude * (np.sin(2 * np.pi * t + self.phase) - np.sin(self.phase)) * self.direction


@dataclass
class ToyScene:
    blobs: list
    train_cameras: list
    test_cameras: list
    times: np.ndarray
    seed_points: np.ndarray
    train_images: list = field(default_factory=list)   # [(camera_index, t_index, image)]
    test_images: list = field(default_factory=list)
    background: tuple = (0.0, 0.0, 0.0)

    def trajectories(self) -> np.ndarray:
        """(n_times, n_blobs, 3) true blob centres."""
        return np.array([[b.position(t) for b in self.blobs] for t in self.times])

    @property
    def static_mask(self) -> np.ndarray:
        return np.array([b.static for b in self.blobs])

    def frames(self, split: str = "train"):
        from .trainer import Frame
        cams = self.train_cameras if split == "train" else self.test_cameras
        imgs = self.train_images if split == "train" else self.test_images
        return [Frame(cams[c].at_time(float(self.times[k])), img, f"{split}_{c:03d}_{k:02d}")
                for c, k, img in imgs]


def fibonacci_sphere(n: int, offset: float = 0.5) -> np.ndarray:
    i = np.arange(n) + offset
    phi = np.arccos(1 - 2 * i / (n + 2 * offset - 1 if offset != 0.5 else n))
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)


def blob_points(blobs, t: float) -> tuple:
    mu = np.array([b.position(t) for b in blobs])
    cov = np.array([covariance_3d(b.rot, b.scale) for b in blobs])
    return mu, cov


def render_blobs(blobs, cam: Camera, background=(0.0, 0.0, 0.0)):
    """Ground-truth render of blobs at ``cam.time`` with the reference rasterizer."""
    mu2d, cov2d, depth, keep = [], [], [], []
    mu, cov = blob_points(blobs, cam.time)
    for i in range(len(blobs)):
        p = project(mu[i], cov[i], cam)
        if p is None:
            continue
        mu2d.append(p[0])
        cov2d.append(p[1])
        depth.append(p[2])
        keep.append(i)
    keep = np.array(keep, dtype=np.int64)
    pts = RenderablePointSet.from_covariance(
        np.array(mu2d).reshape(-1, 2), np.array(cov2d).reshape(-1, 2, 2),
        np.array([blobs[i].opacity for i in keep]), np.array([blobs[i].color for i in keep]).reshape(-1, 3),
        np.array(depth))
    return render_reference(pts, cam, background)


def make_toy_scene(seed: int = 0, preset: str = "default", **overrides) -> ToyScene:
    if preset not in TOY_PRESETS:
        raise ValueError(f"unknown toy preset {preset!r}; choose from {sorted(TOY_PRESETS)}")
    cfg = {**TOY_PRESETS[preset], **overrides}
    rng = np.random.default_rng(seed)
    blobs = []
    for i in range(cfg["n_blobs"]):
        direction = rng.normal(size=3)
        q = rng.normal(size=4)
        blobs.append(ToyBlob(mu0=rng.uniform(-0.9, 0.9, 3), direction=direction / np.linalg.norm(direction),
                             amplitude=float(rng.uniform(0.2, 0.4)), phase=float(rng.uniform(0, 2 * np.pi)),
                             rot=q / np.linalg.norm(q), scale=rng.uniform(0.08, 0.2, 3),
                             opacity=float(rng.uniform(0.85, 0.98)), color=rng.uniform(0.1, 0.95, 3),
                             static=i < cfg["n_static"]))
    res, r, fov = cfg["resolution"], cfg["radius"], cfg["fov_x"]

    def cams(dirs):
        out = []
        for d in dirs:
            up = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.95 else np.array([0.0, 1.0, 0.0])
            out.append(Camera.look_at(r * d, np.zeros(3), up, fov, res, res))
        return out

    train = cams(fibonacci_sphere(cfg["n_cameras"]))
    test = cams(fibonacci_sphere(cfg["n_test_cameras"], offset=0.25) @ _rot_z(0.7).T)
    n_t = cfg["n_times"]
    times = np.linspace(0.0, 1.0, n_t) if n_t > 1 else np.zeros(1)
    seeds = [b.mu0 + rng.normal(scale=0.5 * b.scale.mean(), size=(6, 3)) for b in blobs]
    seeds.append(rng.uniform(-1.2, 1.2, size=(16, 3)))
    scene = ToyScene(blobs, train, test, times, np.concatenate(seeds))
    for split, cl, store in (("train", train, scene.train_images), ("test", test, scene.test_images)):
        for c, cam in enumerate(cl):
            for k, t in enumerate(times):
                store.append((c, k, render_blobs(blobs, cam.at_time(float(t))).rgb))
    return scene


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def write_toy_scene(scene: ToyScene, outdir, image_ext: str = ".png") -> Path:
    outdir = Path(outdir)
    (outdir / "images").mkdir(parents=True, exist_ok=True)
    frames = []
    for split in ("train", "test"):
        cams = scene.train_cameras if split == "train" else scene.test_cameras
        imgs = scene.train_images if split == "train" else scene.test_images
        for c, k, img in imgs:
            name = f"images/{split}_{c:03d}_{k:02d}{image_ext}"
            write_image(outdir / name, img)
            cam = cams[c]
            frames.append({"image": name, "camera_to_world": np.linalg.inv(cam.world_to_cam).tolist(),
                           "t": float(scene.times[k]), "fx": cam.fx, "fy": cam.fy, "cx": cam.cx,
                           "cy": cam.cy, "width": cam.width, "height": cam.height, "split": split})
    write_points(outdir / "points.txt", scene.seed_points)
    traj = scene.trajectories()
    np.savetxt(outdir / "trajectories.csv",
               np.column_stack([np.repeat(scene.times, len(scene.blobs)),
                                np.tile(np.arange(len(scene.blobs)), len(scene.times)),
                                np.tile(scene.static_mask.astype(int), len(scene.times)),
                                traj.reshape(-1, 3)]),
               delimiter=",", header="t,blob,static,x,y,z", comments="", fmt="%.17g")
    doc = {"convention": "opencv", "seed_points": "points.txt",
           "aabb": [[-1.6] * 3, [1.6] * 3], "background": list(scene.background), "frames": frames}
    (outdir / "manifest.json").write_text(json.dumps(doc, indent=1))
    return outdir / "manifest.json"


# ------------------------------------------------------------ checkpoint

MAGIC = b"DSPL"
FORMAT_VERSION = 1
PROFILE_TRAIN, PROFILE_EXPORT = 0, 1

SEC_CLOUD, SEC_DEFORM, SEC_HASH, SEC_CONFIG, SEC_ITER, SEC_OPTIM, SEC_WINDOW = 1, 2, 3, 4, 5, 6, 7

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}

POINT_FLOATS = 14          # 3 + 4 + 3 + 1 + 1 + 2 reserved
SH_BASELINE_FLOATS = 59    # 11 geometric + 48 SH coefficients


class CheckpointError(ValueError):
    pass


def _pack_arrays(arrays: dict, dtype=None) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if dtype is not None and arr.dtype.kind == "f":
            arr = arr.astype(dtype)
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_CODES:
            raise CheckpointError(f"array {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out.write(struct.pack("<H", len(nb)) + nb)
        out.write(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype=dt).tobytes())
    return out.getvalue()


def _unpack_arrays(data: bytes) -> dict:
    pos = 4
    (count,) = struct.unpack_from("<I", data, 0)
    out = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + ln].decode("utf-8")
        pos += ln
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        out[name] = np.frombuffer(data[pos:pos + nbytes], dtype=dt).reshape(shape).copy()
        pos += nbytes
    return out


@dataclass
class Checkpoint:
    cloud: GaussianCloud
    deform: dict
    hash_params: dict
    aabb: np.ndarray
    config: dict
    iteration: int
    optimizer: dict | None = None
    window: dict | None = None
    profile: int = PROFILE_TRAIN


def checkpoint_from_trainer(trainer, profile: int = PROFILE_TRAIN) -> Checkpoint:
    train = profile == PROFILE_TRAIN
    return Checkpoint(trainer.cloud.copy(), dict(trainer.net.params), dict(trainer.field.params),
                      trainer.field.aabb.copy(), {**trainer.config.to_dict(), "extent": trainer.extent},
                      trainer.iteration, trainer.adam.state() if train else None,
                      trainer.window.state() if train else None, profile)


def _cloud_records(c: GaussianCloud) -> np.ndarray:
    n = len(c)
    return np.hstack([c.mu, c.rot, c.log_scale, c.opacity_logit[:, None], c.mask_logit[:, None], np.zeros((n, 2))])


def encode_checkpoint(ck: Checkpoint) -> bytes:
    export = ck.profile == PROFILE_EXPORT
    dtype = np.dtype("<f4") if export else np.dtype("<f8")
    if export:
        cloud = _pack_arrays({"points": _cloud_records(ck.cloud)}, dtype)
    else:
        cloud = _pack_arrays({f: getattr(ck.cloud, f) for f in GaussianCloud.FIELDS}, dtype)
    sections = [(SEC_CLOUD, cloud),
                (SEC_DEFORM, _pack_arrays(ck.deform, dtype)),
                (SEC_HASH, _pack_arrays({**{f"p.{k}": v for k, v in ck.hash_params.items()}, "aabb": ck.aabb}, dtype)),
                (SEC_CONFIG, json.dumps(ck.config, sort_keys=True).encode("utf-8")),
                (SEC_ITER, struct.pack("<Q", ck.iteration))]
    if not export:
        if ck.optimizer is not None:
            sections.append((SEC_OPTIM, _pack_arrays(ck.optimizer)))
        if ck.window is not None:
            sections.append((SEC_WINDOW, _pack_arrays(ck.window)))
    out = io.BytesIO()
    out.write(MAGIC + struct.pack("<III", FORMAT_VERSION, ck.profile, len(sections)))
    for sid, payload in sections:
        out.write(struct.pack("<IQ", sid, len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def decode_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 16 or data[:4] != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, profile, n_sec = struct.unpack_from("<III", data, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    pos, secs = 16, {}
    for _ in range(n_sec):
        if pos + 12 > len(data):
            raise CheckpointError("checkpoint truncated in section header")
        sid, ln = struct.unpack_from("<IQ", data, pos)
        pos += 12
        if pos + ln + 4 > len(data):
            raise CheckpointError(f"checkpoint truncated in section {sid}")
        payload = data[pos:pos + ln]
        (crc,) = struct.unpack_from("<I", data, pos + ln)
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"checksum mismatch in section {sid}")
        secs[sid] = payload
        pos += ln + 4
    if pos != len(data):
        raise CheckpointError("trailing bytes after last section")
    for sid in (SEC_CLOUD, SEC_DEFORM, SEC_HASH, SEC_CONFIG, SEC_ITER):
        if sid not in secs:
            raise CheckpointError(f"missing section {sid}")
    f64 = lambda d: {k: v.astype(np.float64) if v.dtype.kind == "f" else v for k, v in d.items()}
    cl = f64(_unpack_arrays(secs[SEC_CLOUD]))
    if profile == PROFILE_EXPORT:
        r = cl["points"]
        cloud = GaussianCloud(r[:, 0:3], r[:, 3:7], r[:, 7:10], r[:, 10], r[:, 11])
    else:
        cloud = GaussianCloud(*(cl[f] for f in GaussianCloud.FIELDS))
    hp = f64(_unpack_arrays(secs[SEC_HASH]))
    return Checkpoint(cloud, f64(_unpack_arrays(secs[SEC_DEFORM])),
                      {k[2:]: v for k, v in hp.items() if k.startswith("p.")}, hp["aabb"],
                      json.loads(secs[SEC_CONFIG].decode("utf-8")), struct.unpack("<Q", secs[SEC_ITER])[0],
                      _unpack_arrays(secs[SEC_OPTIM]) if SEC_OPTIM in secs else None,
                      _unpack_arrays(secs[SEC_WINDOW]) if SEC_WINDOW in secs else None, profile)


def save_checkpoint(path, ck: Checkpoint):
    Path(path).write_bytes(encode_checkpoint(ck))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def trainer_from_checkpoint(ck: Checkpoint):
    from .deform import DeformNet, FreqEncoding
    from .hashenc import HashColorField
    from .trainer import TrainConfig, Trainer
    cfgd = dict(ck.config)
    extent = float(cfgd.pop("extent", 1.0))
    cfg = TrainConfig.from_dict(cfgd)
    net = DeformNet(dict(ck.deform), cfg.deform_depth, cfg.deform_width, cfg.deform_skip,
                    FreqEncoding(cfg.pos_freqs, True), FreqEncoding(cfg.time_freqs, False))
    fld = HashColorField(dict(ck.hash_params), ck.aabb, n_levels=cfg.hash_levels, min_res=cfg.hash_min_res,
                         max_res=cfg.hash_max_res, log2_table=cfg.hash_log2_table, feat_dim=cfg.hash_feat_dim,
                         hidden=cfg.hash_hidden, n_hidden=cfg.hash_layers)
    tr = Trainer(cfg, ck.cloud.copy(), net, fld, extent, ck.iteration)
    if ck.optimizer is not None:
        tr.adam.load_state(ck.optimizer)
    if ck.window is not None and ck.window["scales"].size:
        tr.window.load_state(ck.window)
    return tr


# -------------------------------------------------------------- storage

@dataclass
class StorageReport:
    n_points: int
    point_bytes: int
    deform_bytes: int
    hash_bytes: int
    bytes_per_value: int = 4

    @property
    def network_bytes(self) -> int:
        return self.deform_bytes + self.hash_bytes

    @property
    def total_bytes(self) -> int:
        return self.point_bytes + self.network_bytes

    @property
    def total_mb(self) -> float:
        return self.total_bytes / 1e6

    @property
    def point_mb(self) -> float:
        return self.point_bytes / 1e6

    @property
    def baseline_bytes(self) -> int:
        return self.n_points * SH_BASELINE_FLOATS * self.bytes_per_value

    @property
    def ratio(self) -> float:
        """Per-point payload relative to the SH baseline."""
        return POINT_FLOATS / SH_BASELINE_FLOATS

    def as_dict(self) -> dict:
        return {"n_points": self.n_points, "per_point_floats": POINT_FLOATS,
                "point_bytes": self.point_bytes, "point_mb": self.point_mb,
                "deform_bytes": self.deform_bytes, "hash_bytes": self.hash_bytes,
                "network_bytes": self.network_bytes, "total_bytes": self.total_bytes,
                "total_mb": self.total_mb, "sh_baseline_floats": SH_BASELINE_FLOATS,
                "sh_baseline_bytes": self.baseline_bytes, "ratio_vs_sh": self.ratio}

    def lines(self):
        yield f"points            {self.n_points}"
        yield f"point payload     {self.point_bytes} B ({POINT_FLOATS} f32 per point, {self.point_mb:.3f} MB)"
        yield f"deform network    {self.deform_bytes} B"
        yield f"hash grid + MLP   {self.hash_bytes} B"
        yield f"total             {self.total_bytes} B ({self.total_mb:.3f} MB)"
        yield f"SH baseline       {self.baseline_bytes} B ({SH_BASELINE_FLOATS} f32 per point)"
        yield f"ratio vs SH       {self.ratio:.4f}"


def storage_report(ck: Checkpoint | None = None, n_points: int | None = None) -> StorageReport:
    """Export-profile (f32) accounting; ``n_points`` alone gives the point-only
    report for a hypothetical cloud size."""
    if ck is None:
        if n_points is None:
            raise ValueError("storage_report needs a checkpoint or a point count")
        return StorageReport(n_points, n_points * POINT_FLOATS * 4, 0, 0)
    n = len(ck.cloud)
    nbytes = lambda d: int(sum(np.asarray(v).size for v in d.values())) * 4
    return StorageReport(n, n * POINT_FLOATS * 4, nbytes(ck.deform), nbytes(ck.hash_params) + ck.aabb.size * 4)


# ------------------------------------------------------------- loss csv

LOSS_COLUMNS = ("iteration", "total", "photometric", "mask", "static", "consistency", "denoise", "n_points")


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_COLUMNS)
        for rec in history:
            w.writerow([rec.get(c, "") if c in ("iteration", "n_points") else repr(float(rec.get(c, 0.0)))
                        for c in LOSS_COLUMNS])
