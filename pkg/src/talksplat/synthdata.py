"""Procedural "talking blob" dataset: an oracle Gaussian head whose mouth follows an
audio envelope and whose eyes blink, rendered with the repo's own rasterizer."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from . import diffcore as dc
from .diffcore import fgt
from .encoders import AUDIO_DIM, AUDIO_WINDOW, EXPR_DIM, audio_windows
from .fusion import fuse_maps
from .gaussians import REGION_ID, REGIONS, SH_C0, GaussianCloud
from .rasterizer import Camera, render, to_uint8

MANIFEST_VERSION = 1
TRAIN_FRACTION = 0.909
HEAD_DISTANCE = 4.0
SCENE_BBOX = ((-1.5, -1.5, -1.5), (1.5, 1.5, 1.5))

SKIN = np.array([0.85, 0.62, 0.48])
LIP = np.array([0.72, 0.22, 0.28])
MOUTH_INSIDE = np.array([0.22, 0.04, 0.06])
SCLERA = np.array([0.95, 0.95, 0.92])
IRIS = np.array([0.12, 0.18, 0.35])

# image y grows downward, so "below" means larger y
MOUTH_CENTER = (0.0, 0.55)
EYE_CENTERS = ((-0.38, -0.28), (0.38, -0.28))
FACE_RADII = (1.0, 1.25, 0.8)


class DatasetError(ValueError):
    pass


@dataclass
class SceneSpec:
    seed: int = 0
    frames: int = 400
    height: int = 64
    width: int = 64
    focal: float = 80.0
    n_face: int = 200
    n_mouth: int = 40
    n_eyes: int = 30
    sway_degrees: float = 5.0
    sway_period: float = 120.0
    mouth_amplitude: float = 0.25
    blink_interval: tuple = (70, 110)
    blink_frames: int = 4
    valence_period: float = 200.0
    audio_noise: float = 0.05

    def __post_init__(self):
        self.blink_interval = tuple(int(v) for v in self.blink_interval)
        if self.frames <= 20:
            raise ValueError(f"frame count must exceed 20, got {self.frames}")
        if min(self.n_face, self.n_mouth, self.n_eyes) <= 0:
            raise ValueError("Gaussian counts must be positive")
        if self.n_mouth != 40 or self.n_eyes != 30:
            raise ValueError("the oracle scene layout is fixed at 40 mouth and 2x15 eye Gaussians")
        if self.height < 32 or self.width < 32:
            raise ValueError("images must be at least 32x32")


@dataclass
class FrameSample:
    index: int
    image: np.ndarray               # (H, W, 3) float32 in [0, 1]
    masks: dict                     # region -> (H, W) bool
    camera: Camera
    audio_window: np.ndarray        # (T_w, 29)
    expr: np.ndarray                # (8,)
    split: str


# -- motion tracks ---------------------------------------------------------

def aperture_track(n: int, rng: np.random.Generator) -> np.ndarray:
    # condition tokens carry no position, so the current frame is only recoverable
    # from window statistics; periods of at least one window keep that well posed
    periods = rng.uniform(16.0, 32.0, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)
    t = np.arange(n)[:, None]
    s = (0.5 * np.sin(2 * np.pi * t / periods + phases)).sum(axis=1)
    return np.clip(s, 0.0, 1.0)


def blink_track(n: int, rng: np.random.Generator, interval=(70, 110), length: int = 4) -> np.ndarray:
    b = np.zeros(n)
    t = int(rng.integers(interval[0] // 2, interval[1] // 2 + 1))
    while t < n:
        b[t:t + length] = 1.0
        t += int(rng.integers(interval[0], interval[1] + 1))
    return b


def camera_for(spec: SceneSpec, t: int) -> Camera:
    """Camera orbiting the head at the origin; the head-pose sway is a yaw of the view."""
    yaw = np.deg2rad(spec.sway_degrees) * np.sin(2 * np.pi * t / spec.sway_period)
    r = Rotation.from_euler("y", yaw).as_matrix()
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = (0.0, 0.0, HEAD_DISTANCE)
    return Camera(spec.focal, spec.focal, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0,
                  spec.width, spec.height, m)


# -- oracle scene ------------------------------------------------------------

def _surface_z(x, y):
    rx, ry, rz = FACE_RADII
    q = np.clip(1.0 - (x / rx) ** 2 - (y / ry) ** 2, 0.0, None)
    return -rz * np.sqrt(q)


def _normal_quat(p: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) turning local z onto the ellipsoid normal at ``p``."""
    n = p / np.asarray(FACE_RADII) ** 2
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    z = np.array([0.0, 0.0, 1.0])
    out = np.zeros((len(p), 4))
    for i, v in enumerate(n):
        axis = np.cross(z, v)
        s = np.linalg.norm(axis)
        ang = np.arctan2(s, z @ v)
        rv = axis / s * ang if s > 1e-12 else np.zeros(3)
        x, y, zz, w = Rotation.from_rotvec(rv).as_quat()
        out[i] = (w, x, y, zz)
    return out


def _in_hole(x, y, margin: float = 0.0) -> np.ndarray:
    mx, my = MOUTH_CENTER
    hole = ((x - mx) / (0.34 + margin)) ** 2 + ((y - my) / (0.22 + margin)) ** 2 < 1.0
    for ex, ey in EYE_CENTERS:
        hole |= ((x - ex) / (0.15 + margin)) ** 2 + ((y - ey) / (0.1 + margin)) ** 2 < 1.0
    return hole


@dataclass
class OracleScene:
    """Canonical arrays per region plus per-primitive motion roles."""
    face: dict
    mouth: dict
    eyes: dict
    mouth_role: np.ndarray = field(default_factory=lambda: np.zeros(0))   # 0 upper, 1 lower, 2 inside, 3 chin
    eye_role: np.ndarray = field(default_factory=lambda: np.zeros(0))     # 0 eyeball, 1 lid


def _pack(mu, s_log, rgb, alpha, rot=None):
    n = len(mu)
    if rot is None:
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    sh = ((np.asarray(rgb) - 0.5) / SH_C0).reshape(n, 1, 3)
    return {"mu": np.asarray(mu, float), "rot": np.asarray(rot, float), "s_log": np.asarray(s_log, float),
            "sh": sh, "alpha_logit": np.log(alpha / (1 - alpha)) * np.ones(n)}


def build_scene(spec: SceneSpec, rng: np.random.Generator) -> OracleScene:
    # face shell: front half of an ellipsoid minus mouth / eye holes, spread by farthest-point sampling
    cand = np.column_stack([rng.uniform(-1.0, 1.0, 4000), rng.uniform(-1.25, 1.25, 4000)])
    keep = ((cand[:, 0] / 1.0) ** 2 + (cand[:, 1] / 1.25) ** 2 < 0.95) & ~_in_hole(cand[:, 0], cand[:, 1], 0.07)
    cand = cand[keep]
    chosen = [int(np.argmin((cand ** 2).sum(1)))]
    dist = ((cand - cand[chosen[0]]) ** 2).sum(1)
    while len(chosen) < spec.n_face:
        i = int(np.argmax(dist))
        chosen.append(i)
        dist = np.minimum(dist, ((cand - cand[i]) ** 2).sum(1))
    xy = cand[chosen]
    fmu = np.column_stack([xy, _surface_z(xy[:, 0], xy[:, 1])])
    shade = 0.75 + 0.25 * (-fmu[:, 2] / FACE_RADII[2])
    frgb = SKIN[None] * shade[:, None] + rng.normal(0, 0.03, size=(spec.n_face, 3))
    fs = np.tile(np.log([0.1, 0.1, 0.03]), (spec.n_face, 1)) + rng.normal(0, 0.08, size=(spec.n_face, 3))
    face = _pack(fmu, fs, np.clip(frgb, 0.05, 0.95), 0.95, _normal_quat(fmu))

    # mouth: upper lip 10, lower lip 10, inside 8, chin 12
    mx, my = MOUTH_CENTER
    xs10 = np.linspace(-0.3, 0.3, 10)
    upper = np.stack([mx + xs10, my - 0.12 + 0.05 * (xs10 / 0.3) ** 2, np.zeros(10)], 1)
    lower = np.stack([mx + xs10, my + 0.08 - 0.05 * (xs10 / 0.3) ** 2, np.zeros(10)], 1)
    xs8 = np.linspace(-0.22, 0.22, 8)
    inside = np.stack([mx + xs8, np.full(8, my - 0.02), np.zeros(8)], 1)
    xs12 = np.tile(np.linspace(-0.28, 0.28, 6), 2)
    chin = np.stack([mx + xs12, my + np.repeat([0.18, 0.26], 6), np.zeros(12)], 1)
    mmu = np.concatenate([upper, lower, inside, chin])
    mmu[:, 2] = _surface_z(mmu[:, 0], mmu[:, 1]) - 0.03
    mmu[20:28, 2] += 0.08  # inside sits behind the lips
    role = np.repeat([0, 1, 2, 3], [10, 10, 8, 12])
    mrgb = np.concatenate([np.tile(LIP, (20, 1)), np.tile(MOUTH_INSIDE, (8, 1)),
                           np.tile(SKIN * 0.92, (12, 1))])
    ms = np.concatenate([np.tile(np.log([0.07, 0.045, 0.03]), (20, 1)),
                         np.tile(np.log([0.07, 0.07, 0.03]), (8, 1)),
                         np.tile(np.log([0.07, 0.07, 0.03]), (12, 1))])
    mouth = _pack(mmu, ms, mrgb + rng.normal(0, 0.02, size=(40, 3)), 0.97)

    # eyes: 6 sclera + 3 iris + 6 lid per eye
    emu, ergb, es, erole = [], [], [], []
    for ex, ey in EYE_CENTERS:
        ang = np.linspace(0, 2 * np.pi, 6, endpoint=False)
        sclera = np.stack([ex + 0.1 * np.cos(ang), ey + 0.06 * np.sin(ang)], 1)
        iris = np.stack([ex + np.array([-0.03, 0.03, 0.0]), ey + np.array([0.0, 0.0, 0.03])], 1)
        lid = np.stack([ex + np.linspace(-0.13, 0.13, 6), ey - 0.13 + 0.02 * np.abs(np.linspace(-1, 1, 6))], 1)
        emu += [sclera, iris, lid]
        ergb += [np.tile(SCLERA, (6, 1)), np.tile(IRIS, (3, 1)), np.tile(SKIN * 0.9, (6, 1))]
        es += [np.tile(np.log([0.05, 0.04, 0.02]), (6, 1)), np.tile(np.log([0.035, 0.035, 0.02]), (3, 1)),
               np.tile(np.log([0.05, 0.04, 0.02]), (6, 1))]
        erole.append(np.repeat([0, 0, 1], [6, 3, 6]))
    exy = np.concatenate(emu)
    ez = _surface_z(exy[:, 0], exy[:, 1]) - 0.02
    erole = np.concatenate(erole)
    ez[erole == 0] += 0.01  # eyeballs sit behind the lids, irises just in front of the sclera
    is_iris = np.tile(np.repeat([False, True, False], [6, 3, 6]), 2)
    ez[is_iris] -= 0.005
    eyes = _pack(np.column_stack([exy, ez]), np.concatenate(es), np.concatenate(ergb), 0.97)
    return OracleScene(face, mouth, eyes, role, erole)


def pose_scene(scene: OracleScene, spec: SceneSpec, a: float, blink: float, valence: float) -> dict:
    """Per-region arrays for one frame of motion."""
    face = {k: v.copy() for k, v in scene.face.items()}
    # slow cheek raise driven by valence
    for cx in (-0.5, 0.5):
        w = np.exp(-((face["mu"][:, 0] - cx) ** 2 + (face["mu"][:, 1] - 0.25) ** 2) / 0.08)
        face["mu"][:, 1] -= 0.05 * valence * w
    mouth = {k: v.copy() for k, v in scene.mouth.items()}
    amp = spec.mouth_amplitude
    shift = np.select([scene.mouth_role == 1, scene.mouth_role == 2, scene.mouth_role == 3],
                      [amp * a, 0.5 * amp * a, 0.6 * amp * a], 0.0)
    mouth["mu"][:, 1] += shift
    mouth["mu"][scene.mouth_role == 0, 1] -= 0.15 * amp * a
    eyes = {k: v.copy() for k, v in scene.eyes.items()}
    lid = scene.eye_role == 1
    eyes["mu"][lid, 1] += 0.12 * blink
    eyes["s_log"][~lid, 1] += np.log(1.0 - 0.85 * blink)
    return {"face": face, "mouth": mouth, "eyes": eyes}


def _cloud(arrays: dict, region: str) -> GaussianCloud:
    n = len(arrays["mu"])
    return GaussianCloud.from_arrays(arrays["mu"], arrays["rot"], arrays["s_log"], arrays["sh"],
                                     arrays["alpha_logit"], np.full(n, REGION_ID[region]), dtype=np.float64)


def render_oracle(posed: dict, cam: Camera):
    """Fused frame (H, W, 3) and region alphas, rendered in double precision on black."""
    with dc.precision("double"), dc.no_grad():
        renders = {r: render(_cloud(posed[r], r), cam, region=r) for r in REGIONS}
        fused = fuse_maps(renders["face"].color, renders["face"].alpha, renders["eyes"].color,
                          renders["mouth"].color, renders["mouth"].alpha)
    return fused.data, {r: renders[r].alpha.data for r in REGIONS}


# -- generation ----------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, arr: np.ndarray) -> None:
    Image.fromarray(arr).save(path, format="PNG", optimize=False, compress_level=6)


def split_indices(n: int) -> tuple[np.ndarray, np.ndarray]:
    n_train = int(np.floor(TRAIN_FRACTION * n))
    return np.arange(n_train), np.arange(n_train, n)


def spec_dict(spec: SceneSpec) -> dict:
    d = asdict(spec)
    d["blink_interval"] = list(spec.blink_interval)
    return d


def dump_manifest(manifest: dict) -> bytes:
    return (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode()


def generate(spec: SceneSpec, out_dir) -> dict:
    """Render the oracle scene for every frame and write the dataset; returns the manifest."""
    out = Path(out_dir)
    try:
        for sub in ("frames", "masks/face", "masks/mouth", "masks/eyes"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        probe = out / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as e:
        raise DatasetError(f"cannot write dataset to {out}: {e}") from e

    rng = np.random.default_rng(spec.seed)
    scene = build_scene(spec, rng)
    n = spec.frames
    a = aperture_track(n, rng)
    blink = blink_track(n, rng, spec.blink_interval, spec.blink_frames)
    valence = np.sin(2 * np.pi * np.arange(n) / spec.valence_period + rng.uniform(0, 2 * np.pi))

    w_audio = rng.uniform(0.5, 1.5, size=6)
    audio = rng.normal(0.0, 0.3, size=(n, AUDIO_DIM))
    audio[:, :6] = a[:, None] * w_audio[None] + rng.normal(0.0, spec.audio_noise, size=(n, 6))
    expr = np.zeros((n, EXPR_DIM))
    expr[:, 0] = blink
    expr[:, 1] = valence
    expr[:, 2:] = rng.normal(0.0, 0.05, size=(n, EXPR_DIM - 2))

    cams = np.zeros((n, 16))
    cams_k = np.zeros((n, 4))
    files = []
    for t in range(n):
        cam = camera_for(spec, t)
        cams[t] = cam.world_to_camera.reshape(-1)
        cams_k[t] = cam.intrinsics()
        img, alphas = render_oracle(pose_scene(scene, spec, a[t], blink[t], valence[t]), cam)
        u8 = to_uint8(img)
        _write_png(out / "frames" / f"{t:05d}.png", u8)
        fgt.save(out / "frames" / f"{t:05d}.fgt", (u8.astype(np.float32) / 255.0))
        files += [f"frames/{t:05d}.png", f"frames/{t:05d}.fgt"]
        for r in REGIONS:
            _write_png(out / "masks" / r / f"{t:05d}.png", np.where(alphas[r] > 0.5, 255, 0).astype(np.uint8))
            files.append(f"masks/{r}/{t:05d}.png")

    fgt.save(out / "cams.fgt", cams)
    fgt.save(out / "cams_k.fgt", cams_k)
    fgt.save(out / "audio.fgt", audio_windows(audio.astype(np.float32), AUDIO_WINDOW))
    fgt.save(out / "expr.fgt", expr.astype(np.float32))
    fgt.save(out / "aperture.fgt", np.stack([a, blink, valence], axis=1))
    files += ["cams.fgt", "cams_k.fgt", "audio.fgt", "expr.fgt", "aperture.fgt"]

    train, test = split_indices(n)
    manifest = {
        "version": MANIFEST_VERSION,
        "spec": spec_dict(spec),
        "files": {f: _sha256(out / f) for f in sorted(files)},
        "split": {"train": train.tolist(), "test": test.tolist()},
        "scene_bbox": [list(SCENE_BBOX[0]), list(SCENE_BBOX[1])],
        "audio_window": AUDIO_WINDOW,
    }
    (out / "manifest.json").write_bytes(dump_manifest(manifest))
    return manifest


# -- loading ---------------------------------------------------------------------

def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DatasetError(f"{path}: manifest not found")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetError(f"{path}: invalid manifest ({e})") from e
    if m.get("version") != MANIFEST_VERSION:
        raise DatasetError(f"{path}: unsupported manifest version {m.get('version')!r}")
    train, test = set(m["split"]["train"]), set(m["split"]["test"])
    n = m["spec"]["frames"]
    if train & test or train | test != set(range(n)):
        raise DatasetError(f"{path}: split is not a partition of {n} frames")
    return m


def verify(directory, manifest: dict | None = None) -> None:
    d = Path(directory)
    manifest = manifest or read_manifest(d)
    for rel, digest in manifest["files"].items():
        p = d / rel
        if not p.exists():
            raise DatasetError(f"{p}: missing dataset file")
        if _sha256(p) != digest:
            raise DatasetError(f"{p}: checksum mismatch")


class Dataset:
    """A loaded dataset held in memory; iterating yields :class:`FrameSample` in index order."""

    def __init__(self, directory, check: bool = True):
        self.root = Path(directory)
        self.manifest = read_manifest(self.root)
        if check:
            verify(self.root, self.manifest)
        s = self.manifest["spec"]
        self.spec = SceneSpec(**s)
        n = self.spec.frames
        self.frames = np.stack([fgt.load(self.root / "frames" / f"{t:05d}.fgt") for t in range(n)])
        self.masks = {r: np.stack([np.asarray(Image.open(self.root / "masks" / r / f"{t:05d}.png")) > 127
                                   for t in range(n)]) for r in REGIONS}
        cams = fgt.load(self.root / "cams.fgt")
        ks = fgt.load(self.root / "cams_k.fgt")
        self.cameras = [Camera(k[0], k[1], k[2], k[3], self.spec.width, self.spec.height, m.reshape(4, 4))
                        for m, k in zip(cams, ks)]
        self.windows = as_windows(fgt.load(self.root / "audio.fgt"), self.manifest.get("audio_window", AUDIO_WINDOW))
        self.expr = fgt.load(self.root / "expr.fgt")
        self.train_idx = np.asarray(self.manifest["split"]["train"], dtype=np.int64)
        self.test_idx = np.asarray(self.manifest["split"]["test"], dtype=np.int64)
        lo, hi = self.manifest["scene_bbox"]
        self.bbox = (tuple(lo), tuple(hi))

    def __len__(self):
        return self.spec.frames

    def sample(self, t: int) -> FrameSample:
        split = "train" if t < len(self.train_idx) else "test"
        return FrameSample(int(t), self.frames[t], {r: self.masks[r][t] for r in REGIONS}, self.cameras[t],
                           self.windows[t], self.expr[t], split)

    def __iter__(self):
        for t in range(len(self)):
            yield self.sample(t)

    def png_frame(self, t: int) -> np.ndarray:
        return np.asarray(Image.open(self.root / "frames" / f"{t:05d}.png"))


def as_windows(audio: np.ndarray, window: int = AUDIO_WINDOW) -> np.ndarray:
    """Accept per-frame windows (N, T_w, D) as-is or window a raw (N, D) token track."""
    audio = np.asarray(audio)
    if audio.ndim == 2:
        return audio_windows(audio, window)
    if audio.ndim != 3:
        raise DatasetError(f"audio track must be (N, D) tokens or (N, T_w, D) windows, got {audio.shape}")
    return audio


def load(directory, check: bool = True) -> Dataset:
    return Dataset(directory, check)
