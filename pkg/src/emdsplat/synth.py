"""Scripted dynamic street scenes and their on-disk dataset format.

Directory layout::

    <root>/manifest.json              cameras, frames, objects, noise, seed, scenario
    <root>/scene.npz                  ground-truth Gaussians (static + object-local)
    <root>/frames/cam{c}_f{idx}.png   8-bit RGB ground-truth renders
    <root>/masks/obj{o}_cam{c}_f{idx}.png   object footprints (object-only alpha > 0.5)

World axes match the default camera: x right, y down, z forward. All float
arrays are rounded to float32 at generation time so a float32 checkpoint can
reproduce the scene exactly.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import scene as sc
from .errors import ConfigError, FormatError
from .pose import quat_exp, so3_exp
from .rasterizer import render

FORMAT_VERSION = 1
INDEX_DIGITS = 4
BACKGROUND = (0.62, 0.74, 0.88)
GROUND_Y = 1.0


@dataclass
class ObjectSpec:
    name: str
    kind: str = "vehicle"
    start: tuple = (0.0, 0.0, 5.0)
    velocity: tuple = (1.0, 0.0, 0.0)
    waypoints: list | None = None
    yaw: float = 0.0
    tracked_frames: tuple | None = None


@dataclass
class ScenarioConfig:
    name: str = "dual-speed"
    n_frames: int = 40
    width: int = 96
    height: int = 64
    n_cameras: int = 1
    focal: float = 80.0
    sh_degree: int = 1
    ground_grid: tuple = (40, 25)
    backdrop_grid: tuple = (40, 25)
    fast_speed: float = 0.6
    speed_ratio: float = 5.0
    objects: list | None = None
    sigma_rot_deg: float = 0.0
    sigma_trans: float = 0.0
    view_dependence: float = 0.05

    def __post_init__(self):
        if self.n_frames < 1 or self.width < 1 or self.height < 1:
            raise ConfigError("frame count and resolution must be positive")
        if not 1 <= self.n_cameras <= 3:
            raise ConfigError("camera rig supports 1 to 3 cameras")
        if self.speed_ratio <= 0 or self.fast_speed < 0:
            raise ConfigError("speeds must be non-negative and the ratio positive")
        if self.objects is not None:
            self.objects = [o if isinstance(o, ObjectSpec) else ObjectSpec(**o) for o in self.objects]

    @classmethod
    def preset(cls, name, **overrides):
        presets = {
            "dual-speed": {},
            "static": {"objects": []},
            "toy-supervised": {
                "n_frames": 12, "width": 96, "height": 72, "focal": 84.0, "n_cameras": 3,
                "ground_grid": (20, 12), "backdrop_grid": (20, 12),
                "objects": [ObjectSpec("vehicle", "vehicle", (-0.4, GROUND_Y - 0.2, 3.0), (0.8, 0.0, 0.0))],
                "sigma_rot_deg": 2.0, "sigma_trans": 0.1,
            },
        }
        if name not in presets:
            raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(presets)}")
        cfg = dict(presets[name])
        cfg.update(overrides)
        return cls(name=name, **cfg)

    def resolved_objects(self):
        if self.objects is not None:
            return list(self.objects)
        fast = self.fast_speed
        slow = fast / self.speed_ratio
        return [
            ObjectSpec("vehicle", "vehicle", (-0.5 * fast, GROUND_Y - 0.2, 5.0), (fast, 0.0, 0.0)),
            ObjectSpec("pedestrian", "pedestrian", (1.5, GROUND_Y - 0.35, 3.5), (-slow, 0.0, 0.0)),
        ]


@dataclass
class ScriptedObject:
    spec: ObjectSpec
    local: sc.GaussianSet
    frame: np.ndarray = field(default_factory=lambda: np.eye(3))

    def position(self, t):
        s = self.spec
        if s.waypoints:
            pts = np.asarray(s.waypoints, dtype=np.float64)
            knots = np.linspace(0.0, 1.0, len(pts))
            return np.array([np.interp(t, knots, pts[:, i]) for i in range(3)])
        return np.asarray(s.start, dtype=np.float64) + t * np.asarray(s.velocity, dtype=np.float64)

    def pose(self, t):
        rot = so3_exp(np.array([0.0, self.spec.yaw, 0.0]))
        return rot, self.position(t)

    @property
    def speed(self):
        s = self.spec
        if s.waypoints:
            pts = np.asarray(s.waypoints, dtype=np.float64)
            return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
        return float(np.linalg.norm(s.velocity))


@dataclass
class ScriptedScene:
    config: ScenarioConfig
    seed: int
    static: sc.GaussianSet
    objects: list
    cameras: list
    timestamps: np.ndarray

    def object_world(self, index, t):
        from .pose import place_gaussians

        obj = self.objects[index]
        rot, trans = obj.pose(t)
        return place_gaussians(obj.local, rot, trans)

    def world_gaussians(self, t, include_static=True, objects=None):
        idx = range(len(self.objects)) if objects is None else objects
        parts = ([self.static] if include_static else []) + [self.object_world(i, t) for i in idx]
        if not parts:
            return sc.GaussianSet.empty(self.config.sh_degree)
        return sc.GaussianSet.concat(parts)

    def tracked_frames(self, index):
        f = self.objects[index].spec.tracked_frames
        return (0, self.config.n_frames - 1) if f is None else tuple(int(v) for v in f)

    def render_frame(self, cam, frame):
        t = float(self.timestamps[frame])
        visible = [i for i in range(len(self.objects)) if _in_range(frame, self.tracked_frames(i))]
        return render(self.world_gaussians(t, objects=visible), self.cameras[cam], BACKGROUND).image

    def object_mask(self, index, cam, frame):
        if not _in_range(frame, self.tracked_frames(index)):
            return np.zeros((self.config.height, self.config.width), dtype=bool)
        t = float(self.timestamps[frame])
        out = render(self.object_world(index, t), self.cameras[cam], (0.0, 0.0, 0.0))
        return (1.0 - out.final_transmittance) > 0.5


def _in_range(frame, span):
    return span[0] <= frame <= span[1]


def _f32(a):
    return np.asarray(a, dtype=np.float64).astype(np.float32).astype(np.float64)


def _gaussian_block(mu, scale, colors, opacity, sh_degree, rng, view_dep):
    k = mu.shape[0]
    nc = sc.num_sh_coeffs(sh_degree)
    sh = np.zeros((k, nc, 3))
    sh[:, 0, :] = colors / sc.SH_C0
    if nc > 1:
        sh[:, 1:, :] = rng.normal(0.0, view_dep, size=(k, nc - 1, 3))
    quat = np.zeros((k, 4))
    quat[:, 0] = 1.0
    return sc.GaussianSet(_f32(mu), _f32(scale), quat, _f32(np.full(k, opacity)), _f32(sh))


def _ground(cfg, rng):
    nx, nz = cfg.ground_grid
    xs = np.linspace(-3.0, 3.0, nx)
    zs = np.linspace(2.2, 9.0, nz)
    gx, gz = np.meshgrid(xs, zs, indexing="xy")
    mu = np.stack([gx.ravel(), np.full(gx.size, GROUND_Y), gz.ravel()], axis=1)
    dx = xs[1] - xs[0]
    dz = zs[1] - zs[0]
    scale = np.tile([0.6 * dx, 0.01, 0.6 * dz], (mu.shape[0], 1))
    base = 0.32 + 0.06 * rng.standard_normal(mu.shape[0])
    colors = np.repeat(base[:, None], 3, axis=1) + np.array([0.0, 0.0, 0.02])
    lane = (np.abs(mu[:, 0]) < 0.5 * dx + 1e-9) & (np.floor(mu[:, 2] / 0.8) % 2 == 0)
    colors[lane] = 0.9
    curb = np.abs(np.abs(mu[:, 0]) - 2.4) < 0.6 * dx
    colors[curb] = [0.7, 0.66, 0.55]
    return _gaussian_block(mu, scale, np.clip(colors, 0, 1), 0.95, cfg.sh_degree, rng, cfg.view_dependence)


def _backdrop(cfg, rng):
    nx, ny = cfg.backdrop_grid
    xs = np.linspace(-5.0, 5.0, nx)
    ys = np.linspace(-3.0, GROUND_Y, ny)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    mu = np.stack([gx.ravel(), gy.ravel(), np.full(gx.size, 9.0)], axis=1)
    dx = xs[1] - xs[0]
    dy = ys[1] - ys[0]
    scale = np.tile([0.6 * dx, 0.6 * dy, 0.01], (mu.shape[0], 1))
    building = np.floor((mu[:, 0] + 5.0) / 1.4).astype(int)
    palette = rng.uniform(0.25, 0.8, size=(building.max() + 1, 3))
    colors = palette[building]
    window = (np.floor(mu[:, 0] / 0.5) % 2 == 0) & (np.floor(mu[:, 1] / 0.5) % 2 == 0)
    colors[window] *= 0.55
    colors += 0.03 * rng.standard_normal(colors.shape)
    return _gaussian_block(mu, scale, np.clip(colors, 0, 1), 0.95, cfg.sh_degree, rng, cfg.view_dependence)


def _box_surface(size, spacing):
    """Points covering the surface of an axis-aligned box centred at the origin."""
    pts = []
    half = np.asarray(size) / 2.0
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        n0 = max(2, int(round(size[others[0]] / spacing)) + 1)
        n1 = max(2, int(round(size[others[1]] / spacing)) + 1)
        u, v = np.meshgrid(np.linspace(-half[others[0]], half[others[0]], n0),
                           np.linspace(-half[others[1]], half[others[1]], n1), indexing="ij")
        for sign in (-1.0, 1.0):
            p = np.zeros((u.size, 3))
            p[:, axis] = sign * half[axis]
            p[:, others[0]] = u.ravel()
            p[:, others[1]] = v.ravel()
            pts.append(p)
    pts = np.concatenate(pts)
    _, keep = np.unique(np.round(pts, 6), axis=0, return_index=True)
    return pts[np.sort(keep)]


def _vehicle(cfg, rng):
    size = (0.9, 0.4, 0.45)
    mu = _box_surface(size, 0.1)
    colors = np.tile([0.78, 0.12, 0.1], (mu.shape[0], 1))
    windows = (mu[:, 1] < -0.05) & (np.abs(mu[:, 0]) < 0.3)
    colors[windows] = [0.15, 0.2, 0.3]
    wheels = (mu[:, 1] > 0.12) & (np.abs(np.abs(mu[:, 0]) - 0.3) < 0.09)
    colors[wheels] = [0.05, 0.05, 0.05]
    colors[np.abs(mu[:, 0]) > 0.44] = [0.95, 0.9, 0.6]
    colors = np.clip(colors + 0.03 * rng.standard_normal(colors.shape), 0, 1)
    scale = np.full((mu.shape[0], 3), 0.06)
    return _gaussian_block(mu, scale, colors, 0.95, cfg.sh_degree, rng, cfg.view_dependence)


def _pedestrian(cfg, rng):
    size = (0.24, 0.7, 0.2)
    mu = _box_surface(size, 0.08)
    colors = np.tile([0.15, 0.3, 0.75], (mu.shape[0], 1))
    colors[mu[:, 1] > 0.05] = [0.12, 0.12, 0.15]
    colors[mu[:, 1] < -0.25] = [0.85, 0.65, 0.5]
    colors = np.clip(colors + 0.03 * rng.standard_normal(colors.shape), 0, 1)
    scale = np.full((mu.shape[0], 3), 0.05)
    return _gaussian_block(mu, scale, colors, 0.95, cfg.sh_degree, rng, cfg.view_dependence)


def _camera_rig(cfg):
    cams = []
    offsets = [(0.0, 0.0), (-0.35, -0.25), (0.35, 0.25)][:cfg.n_cameras]
    for dx, yaw in offsets:
        rot = so3_exp(np.array([0.0, yaw, 0.0])).T
        eye = np.array([dx, 0.0, 0.0])
        cams.append(sc.Camera(cfg.focal, cfg.focal, (cfg.width - 1) / 2.0, (cfg.height - 1) / 2.0,
                              cfg.width, cfg.height, rot, -rot @ eye))
    return cams


def generate_scene(seed, config: ScenarioConfig | None = None) -> ScriptedScene:
    """Deterministic scripted scene for ``seed``."""
    cfg = config or ScenarioConfig()
    specs = cfg.resolved_objects()
    if cfg.ground_grid[0] * cfg.ground_grid[1] + cfg.backdrop_grid[0] * cfg.backdrop_grid[1] == 0 and not specs:
        raise ConfigError("scenario contains no Gaussians")
    rng = np.random.default_rng(seed)
    static = sc.GaussianSet.concat([_ground(cfg, rng), _backdrop(cfg, rng)])
    makers = {"vehicle": _vehicle, "pedestrian": _pedestrian}
    objects = []
    for spec in specs:
        if spec.kind not in makers:
            raise ConfigError(f"unknown object kind {spec.kind!r}")
        objects.append(ScriptedObject(spec, makers[spec.kind](cfg, rng)))
    timestamps = np.linspace(0.0, 1.0, cfg.n_frames) if cfg.n_frames > 1 else np.zeros(1)
    return ScriptedScene(cfg, int(seed), static, objects, _camera_rig(cfg), timestamps)


# ---------------------------------------------------------------------------
# dataset I/O

def frame_name(cam, frame):
    return f"frames/cam{cam}_f{frame:0{INDEX_DIGITS}d}.png"


def mask_name(obj, cam, frame):
    return f"masks/obj{obj}_cam{cam}_f{frame:0{INDEX_DIGITS}d}.png"


def noisy_poses(true_poses, sigma_rot_deg, sigma_trans, rng):
    out = []
    sr = np.deg2rad(sigma_rot_deg)
    for rot, trans in true_poses:
        omega = rng.normal(0.0, sr, size=3) if sr > 0 else np.zeros(3)
        dt = rng.normal(0.0, sigma_trans, size=3) if sigma_trans > 0 else np.zeros(3)
        noisy_rot = rot @ sc.quat_to_rotmat(quat_exp(omega)) if sr > 0 else rot
        out.append((noisy_rot, trans + dt))
    return out


def _pose_json(rot, trans):
    return {"R": np.asarray(rot).tolist(), "T": np.asarray(trans).tolist()}


def _to_uint8(image):
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(scene: ScriptedScene, out_dir, noise_seed=None):
    """Render and write the dataset; returns the manifest dict."""
    root = Path(out_dir)
    try:
        (root / "frames").mkdir(parents=True, exist_ok=True)
        if scene.objects:
            (root / "masks").mkdir(exist_ok=True)
    except OSError as exc:
        raise FormatError(f"cannot create dataset directory {root}: {exc}") from exc
    cfg = scene.config
    noise_rng = np.random.default_rng([scene.seed, 1] if noise_seed is None else noise_seed)
    objects = []
    for i, obj in enumerate(scene.objects):
        f0, f1 = scene.tracked_frames(i)
        true = [obj.pose(float(scene.timestamps[f])) for f in range(f0, f1 + 1)]
        tracked = noisy_poses(true, cfg.sigma_rot_deg, cfg.sigma_trans, noise_rng)
        objects.append({
            "id": i, "name": obj.spec.name, "kind": obj.spec.kind,
            "speed": obj.speed, "n_gaussians": obj.local.count,
            "tracked_frames": [f0, f1],
            "true_poses": [_pose_json(*p) for p in true],
            "tracked_poses": [_pose_json(*p) for p in tracked],
        })
    speeds = sorted((o["speed"] for o in objects), reverse=True)
    manifest = {
        "format_version": FORMAT_VERSION,
        "seed": scene.seed,
        "scenario": _config_json(cfg),
        "background": list(BACKGROUND),
        "cameras": [c.to_dict() for c in scene.cameras],
        "frames": [{"index": f, "t": float(scene.timestamps[f]),
                    "images": [frame_name(c, f) for c in range(len(scene.cameras))]}
                   for f in range(cfg.n_frames)],
        "objects": objects,
        "speed_ratio": (speeds[0] / speeds[-1]) if len(speeds) >= 2 and speeds[-1] > 0 else None,
        "noise": {"sigma_rot_deg": cfg.sigma_rot_deg, "sigma_trans": cfg.sigma_trans,
                  "model": "axis-angle normal per axis; translation normal per axis"},
    }
    for f in range(cfg.n_frames):
        for c in range(len(scene.cameras)):
            Image.fromarray(_to_uint8(scene.render_frame(c, f)), "RGB").save(root / frame_name(c, f))
            for i in range(len(scene.objects)):
                m = scene.object_mask(i, c, f).astype(np.uint8) * 255
                Image.fromarray(m, "L").save(root / mask_name(i, c, f))
    arrays = {f"static.{n}": getattr(scene.static, n) for n in sc.GaussianSet.field_names()}
    for i, obj in enumerate(scene.objects):
        arrays.update({f"object{i}.{n}": getattr(obj.local, n) for n in sc.GaussianSet.field_names()})
    np.savez(root / "scene.npz", **arrays)
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _config_json(cfg):
    d = asdict(cfg)
    d["objects"] = [asdict(o) for o in cfg.objects] if cfg.objects is not None else None
    return d


@dataclass
class Dataset:
    root: Path
    manifest: dict
    cameras: list
    timestamps: np.ndarray
    images: np.ndarray
    masks: dict
    static: sc.GaussianSet
    objects_local: list

    @property
    def n_frames(self):
        return len(self.timestamps)

    @property
    def n_cameras(self):
        return len(self.cameras)

    @property
    def background(self):
        return np.array(self.manifest.get("background", BACKGROUND))

    @property
    def objects(self):
        return self.manifest["objects"]

    def poses(self, obj, which="tracked_poses"):
        return [(np.array(p["R"]), np.array(p["T"])) for p in self.objects[obj][which]]


def _read_png(path, mode):
    if not path.is_file():
        raise FormatError(f"missing file {path}")
    try:
        with Image.open(path) as im:
            if im.mode != mode:
                raise FormatError(f"{path} has mode {im.mode}, expected {mode}")
            return np.asarray(im)
    except OSError as exc:
        raise FormatError(f"cannot decode {path}: {exc}") from exc


def read_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FormatError(f"missing file {mpath}")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath} is not valid JSON: {exc}") from exc
    for key in ("cameras", "frames", "objects", "noise", "seed"):
        if key not in manifest:
            raise FormatError(f"{mpath} lacks key {key!r}")
    cameras = [sc.Camera.from_dict(c) for c in manifest["cameras"]]
    frames = manifest["frames"]
    n_cam = len(cameras)
    for c in range(n_cam):
        on_disk = sorted((root / "frames").glob(f"cam{c}_f*.png"))
        if len(on_disk) != len(frames):
            raise FormatError(f"camera {c}: manifest lists {len(frames)} frames, "
                              f"{root / 'frames'} holds {len(on_disk)} images")
    images = np.zeros((n_cam, len(frames), cameras[0].height, cameras[0].width, 3))
    for f, fr in enumerate(frames):
        for c, name in enumerate(fr["images"]):
            images[c, f] = _read_png(root / name, "RGB") / 255.0
    masks = {}
    for obj in manifest["objects"]:
        for c in range(n_cam):
            for f in range(len(frames)):
                masks[(obj["id"], c, f)] = _read_png(root / mask_name(obj["id"], c, f), "L") > 127
    spath = root / "scene.npz"
    if not spath.is_file():
        raise FormatError(f"missing file {spath}")
    with np.load(spath) as data:
        static = sc.GaussianSet(*(data[f"static.{n}"] for n in sc.GaussianSet.field_names()))
        locals_ = [sc.GaussianSet(*(data[f"object{o['id']}.{n}"] for n in sc.GaussianSet.field_names()))
                   for o in manifest["objects"]]
    timestamps = np.array([fr["t"] for fr in frames])
    return Dataset(root, manifest, cameras, timestamps, images, masks, static, locals_)
