"""Staged training (static -> frequency-aware motion -> fusion -> sync refinement),
checkpoints, evaluation and the ablation harness."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import binary_dilation

from . import diffcore as dc
from .deformnet import MODES, DeformationModel
from .diffcore import AdamState, ParamStore, Tensor, adam_step
from .encoders import TriplaneHashConfig
from .fusion import fuse_maps
from .gaussians import REGION_ID, REGIONS, SH_C0, GaussianCloud, apply_deformation, concat_clouds, num_sh_coeffs
from .losses import LossWeights, PerceptualFeatures, loss_fam, loss_fusion, loss_static, metrics
from .rasterizer import render
from .synthdata import Dataset
from .syncnet import SYNC_FRAMES, SyncScorer, loss_lip, mouth_boxes, sync_confidence, train_sync_scorer

STAGES = ("static", "fam", "fusion", "hrpa")
PRESETS = {
    # ~15x fewer iterations than "long"; network rates scaled 10x with their ratio kept
    "desk": {"iters_static": 500, "iters_fam": 3000, "iters_fusion": 1000, "iters_hrpa": 500,
             "lr_fusion": 1e-3, "lr_mlp": 1e-4},
    "long": {"iters_static": 3000, "iters_fam": 47000, "iters_fusion": 10000, "iters_hrpa": 2000},
    "smoke": {"iters_static": 20, "iters_fam": 20, "iters_fusion": 10, "iters_hrpa": 4, "sync_epochs": 2},
}


class NumericalError(RuntimeError):
    def __init__(self, message: str, dump_dir: Path | None = None):
        super().__init__(message)
        self.dump_dir = dump_dir


@dataclass
class StageConfig:
    preset: str = "desk"
    mode: str = "full"
    seed: int = 0
    iters_static: int = 500
    iters_fam: int = 3000
    iters_fusion: int = 1000
    iters_hrpa: int = 500
    lr_fusion: float = 1e-4
    lr_mlp: float = 1e-5
    lr_hash: float = 1e-3
    lr_mu: float = 1.6e-4
    lr_mu_decay: float = 0.01
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_sh: float = 2.5e-3
    lr_alpha: float = 5e-2
    lambda1: float = 0.20
    lambda2: float = 0.50
    lambda3: float = 0.03
    n_face: int = 200
    n_mouth: int = 60
    n_eyes: int = 40
    sh_degree: int = 1
    init_scale: float = 0.05
    init_depth_near: float = 3.2
    init_depth_far: float = 4.0
    mask_dilation: int = 2
    hash_levels: int = 8
    hash_table_size: int = 2 ** 14
    hash_features: int = 2
    sync_epochs: int = 60
    perceptual_weights: str = ""
    threads: int = 1
    precision: str = "single"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown ablation mode {self.mode!r}; choose from {', '.join(MODES)}")
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name.startswith("iters_") and v <= 0:
                raise ValueError(f"{f.name} must be positive")
            if f.name.startswith("lr_") and v <= 0:
                raise ValueError(f"{f.name} must be positive")
        if min(self.n_face, self.n_mouth, self.n_eyes) <= 0:
            raise ValueError("Gaussian counts must be positive")
        if self.precision not in ("single", "double"):
            raise ValueError("precision must be 'single' or 'double'")
        self.loss_weights()

    @classmethod
    def from_preset(cls, preset: str = "desk", **overrides) -> "StageConfig":
        if preset not in PRESETS:
            raise ValueError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
        return cls(preset=preset, **{**PRESETS[preset], **overrides})

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3)

    def hash_config(self, bbox) -> TriplaneHashConfig:
        return TriplaneHashConfig(levels=self.hash_levels, table_size=self.hash_table_size,
                                  features_per_level=self.hash_features,
                                  bbox_min=tuple(bbox[0]), bbox_max=tuple(bbox[1]))

    def counts(self) -> dict[str, int]:
        return {"face": self.n_face, "mouth": self.n_mouth, "eyes": self.n_eyes}

    def to_dict(self) -> dict:
        return asdict(self)


# -- model state ---------------------------------------------------------------

GAUSS_ATTRS = ("mu", "rot", "s_log", "sh_dc", "sh_rest", "alpha_logit")


class State:
    """Every trainable tensor (Gaussians of all regions, hash tables, networks) in one ParamStore."""

    def __init__(self, config: StageConfig, bbox):
        self.config = config
        self.mode = config.mode
        self.params = ParamStore()
        rng = np.random.default_rng([config.seed, 1])
        k = num_sh_coeffs(config.sh_degree)
        for r, n in config.counts().items():
            for attr, shape in (("mu", (n, 3)), ("rot", (n, 4)), ("s_log", (n, 3)), ("sh_dc", (n, 1, 3)),
                                ("sh_rest", (n, k - 1, 3)), ("alpha_logit", (n,))):
                self.params.add(f"gauss.{r}.{attr}", np.zeros(shape), group=f"gauss.{attr}")
        self.model = DeformationModel(self.params, config.hash_config(bbox), rng, mode=config.mode)

    def cloud(self, region: str) -> GaussianCloud:
        p = self.params
        t = {a: p[f"gauss.{region}.{a}"] for a in GAUSS_ATTRS}
        return GaussianCloud(region=np.full(t["mu"].shape[0], REGION_ID[region]), **t)

    def unified(self) -> GaussianCloud:
        return concat_clouds([self.cloud(r) for r in REGIONS])

    def names(self, stage: str) -> list[str]:
        if stage == "static":
            return self.params.names("gauss.")
        if stage == "hrpa":
            net = "net.all." if self.mode == "no_fad" else "net.mouth."
            return self.params.names(net) + [f"gauss.{r}.sh_dc" for r in REGIONS]
        return list(self.params)

    def save(self, directory, stage: str) -> None:
        self.params.save(directory, meta={"kind": "checkpoint", "stage": stage, "config": self.config.to_dict()})

    @classmethod
    def load(cls, directory, bbox) -> tuple["State", str]:
        arrays, meta = dc.fgt.load_archive(directory)
        if meta.get("kind") != "checkpoint":
            raise ValueError(f"{directory}: not a training checkpoint")
        cfg = StageConfig(**meta["config"])
        dtype = np.float64 if cfg.precision == "double" else np.float32
        with dc.precision(cfg.precision):
            state = cls(cfg, bbox)
        state.params.astype(dtype)
        state.params.load_state_dict(arrays)
        return state, meta["stage"]


def _adam(state: State, cfg: StageConfig) -> AdamState:
    lr = {"fusion": cfg.lr_fusion, "mlp": cfg.lr_mlp, "hash": cfg.lr_hash, "gauss.mu": cfg.lr_mu,
          "gauss.rot": cfg.lr_rot, "gauss.s_log": cfg.lr_scale, "gauss.sh_dc": cfg.lr_sh,
          "gauss.sh_rest": cfg.lr_sh / 20.0, "gauss.alpha_logit": cfg.lr_alpha}
    return AdamState(lr=lr)


def _mu_lr(cfg: StageConfig, it: int, total: int) -> float:
    frac = it / max(total - 1, 1)
    return cfg.lr_mu * cfg.lr_mu_decay ** frac


def _step(state: State, adam: AdamState, names: list[str]) -> None:
    adam_step(state.params, adam, [n for n in names if state.params[n].grad is not None])


# -- data helpers ----------------------------------------------------------------

class Targets:
    """Dataset arrays in the working precision plus dilated region masks."""

    def __init__(self, dataset: Dataset, cfg: StageConfig):
        dtype = np.float64 if cfg.precision == "double" else np.float32
        self.dataset = dataset
        self.frames = dataset.frames.astype(dtype)
        self.masks = dataset.masks
        struct = np.ones((1, 3, 3), dtype=bool)
        self.dilated = {r: binary_dilation(m, structure=struct, iterations=cfg.mask_dilation)
                        if cfg.mask_dilation > 0 else m.copy() for r, m in dataset.masks.items()}
        self.windows = dataset.windows.astype(dtype)
        self.expr = dataset.expr.astype(dtype)
        self.dtype = dtype
        empty = [r for r in REGIONS if not dataset.masks[r][dataset.train_idx].any()]
        if empty:
            raise ValueError(f"region mask {empty[0]!r} is empty across all training frames")

    def masked(self, region: str, t: int) -> Tensor:
        return Tensor(self.frames[t] * self.masks[region][t][..., None].astype(self.dtype))

    def dilation(self, region: str, t: int) -> Tensor:
        return Tensor(self.dilated[region][t][..., None].astype(self.dtype))


def _check(loss: Tensor, state: State, run_dir: Path | None, stage: str, it: int, t) -> float:
    v = float(loss.data)
    if np.isfinite(v):
        return v
    dump = None
    if run_dir is not None:
        dump = run_dir / f"nan_dump_{stage}_{it}"
        grads = {f"grad.{n}": state.params[n].grad for n in state.params if state.params[n].grad is not None}
        dc.fgt.save_archive(dump, {**state.params.state_dict(), **grads},
                            {"stage": stage, "iteration": it, "frame": np.asarray(t).tolist()})
    raise NumericalError(f"non-finite loss in stage {stage!r} at iteration {it}", dump)


class LossLog:
    def __init__(self, path: Path | None, terms: tuple[str, ...]):
        self.rows: list[list[float]] = []
        self.terms = terms
        self.path = path

    def add(self, it: int, total: float, *terms: float) -> None:
        self.rows.append([it, total, *terms])

    def write(self) -> None:
        if self.path is None:
            return
        with open(self.path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "loss_total", *self.terms])
            for row in self.rows:
                w.writerow([row[0], *(repr(float(x)) for x in row[1:])])

    @property
    def totals(self) -> np.ndarray:
        return np.array([r[1] for r in self.rows])


# -- stage 1: static ---------------------------------------------------------------

def initialize_static(state: State, targets: Targets, cfg: StageConfig) -> None:
    """Seeded positions inside each region's mask back-projected between the depth bounds."""
    rng = np.random.default_rng([cfg.seed, 2])
    ds = targets.dataset
    k = num_sh_coeffs(cfg.sh_degree)
    for r, n in cfg.counts().items():
        frames = rng.choice(ds.train_idx, size=n)
        mu = np.zeros((n, 3))
        rgb = np.zeros((n, 3))
        for i, t in enumerate(frames):
            ys, xs = np.nonzero(ds.masks[r][t])
            if ys.size == 0:
                ys, xs = np.nonzero(ds.masks[r][ds.train_idx].any(axis=0))
            j = rng.integers(ys.size)
            cam = ds.cameras[t]
            px = xs[j] + rng.uniform(-0.5, 0.5)
            py = ys[j] + rng.uniform(-0.5, 0.5)
            depth = rng.uniform(cfg.init_depth_near, cfg.init_depth_far)
            pc = np.array([(px - cam.cx) / cam.fx * depth, (py - cam.cy) / cam.fy * depth, depth])
            mu[i] = cam.R.T @ (pc - cam.t)
            rgb[i] = ds.frames[t][ys[j], xs[j]]
        p = state.params
        dtype = targets.dtype
        p[f"gauss.{r}.mu"].data = mu.astype(dtype)
        rot = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)) + rng.normal(0, 0.01, size=(n, 4))
        p[f"gauss.{r}.rot"].data = rot.astype(dtype)
        p[f"gauss.{r}.s_log"].data = np.full((n, 3), np.log(cfg.init_scale), dtype=dtype)
        p[f"gauss.{r}.sh_dc"].data = ((rgb - 0.5) / SH_C0).reshape(n, 1, 3).astype(dtype)
        p[f"gauss.{r}.sh_rest"].data = np.zeros((n, k - 1, 3), dtype=dtype)
        p[f"gauss.{r}.alpha_logit"].data = np.zeros(n, dtype=dtype)


def stage_static(state: State, targets: Targets, cfg: StageConfig, run_dir: Path | None = None) -> LossLog:
    initialize_static(state, targets, cfg)
    rng = np.random.default_rng([cfg.seed, 10])
    adam = _adam(state, cfg)
    names = state.names("static")
    log = LossLog(run_dir / "loss_static.csv" if run_dir else None, tuple(f"loss_{r}" for r in REGIONS))
    ds = targets.dataset
    for it in range(cfg.iters_static):
        t = int(rng.choice(ds.train_idx))
        adam.lr["gauss.mu"] = _mu_lr(cfg, it, cfg.iters_static)
        state.params.zero_grad()
        parts = []
        for r in REGIONS:
            out = render(state.cloud(r), ds.cameras[t], region=r, threads=cfg.threads)
            parts.append(loss_static(targets.masked(r, t), out.color * targets.dilation(r, t), cfg.lambda1))
        loss = parts[0] + parts[1] + parts[2]
        v = _check(loss, state, run_dir, "static", it, t)
        loss.backward()
        _step(state, adam, names)
        log.add(it, v, *(float(p.data) for p in parts))
    log.write()
    return log


# -- rendering a frame -----------------------------------------------------------

@dataclass
class FrameRender:
    color: Tensor                   # fused (H, W, 3)
    regions: dict = field(default_factory=dict)   # region -> RegionalRender (mouth always present)
    deltas: dict = field(default_factory=dict)


def deformed_regions(state: State, window, expr, dynamic: bool = True) -> tuple[dict, dict]:
    """Per-region deformed clouds (or the unified cloud for no_fad) and their deltas."""
    if not dynamic:
        return {r: state.cloud(r) for r in REGIONS}, {}
    f_a, f_e = state.model.encode_conditions(window, expr)
    if state.mode == "no_fad":
        cloud = state.unified()
        delta = state.model.region_delta("face", cloud, f_a, f_e)
        return {"all": apply_deformation(cloud, delta)}, {"all": delta}
    clouds, deltas = {}, {}
    for r in REGIONS:
        c = state.cloud(r)
        d = state.model.region_delta(r, c, f_a, f_e)
        clouds[r] = apply_deformation(c, d)
        deltas[r] = d
    return clouds, deltas


def render_frame(state: State, cam, window, expr, threads: int = 1, dynamic: bool = True,
                 with_mouth: bool = True) -> FrameRender:
    clouds, deltas = deformed_regions(state, window, expr, dynamic)
    if "all" in clouds:
        whole = render(clouds["all"], cam, region=None, threads=threads)
        regions = {"all": whole}
        if with_mouth:
            mouth = clouds["all"].subset(clouds["all"].region_indices("mouth"))
            with dc.no_grad():
                regions["mouth"] = render(mouth, cam, region="mouth", threads=threads)
        return FrameRender(dc.clip(whole.color, 0.0, 1.0), regions, deltas)
    rr = {r: render(clouds[r], cam, region=r, threads=threads) for r in REGIONS}
    fused = fuse_maps(rr["face"].color, rr["face"].alpha, rr["eyes"].color, rr["mouth"].color, rr["mouth"].alpha)
    return FrameRender(fused, rr, deltas)


def render_region_dynamic(state: State, region: str, t: int, targets: Targets, threads: int = 1):
    ds = targets.dataset
    f_a, f_e = state.model.encode_conditions(targets.windows[t], targets.expr[t])
    c = state.cloud(region)
    d = state.model.region_delta(region, c, f_a, f_e)
    return render(apply_deformation(c, d), ds.cameras[t], region=region, threads=threads)


# -- stage 2: frequency-aware motion --------------------------------------------------

def stage_fam(state: State, targets: Targets, cfg: StageConfig, run_dir: Path | None = None) -> LossLog:
    rng = np.random.default_rng([cfg.seed, 20])
    adam = _adam(state, cfg)
    names = state.names("fam")
    ds = targets.dataset
    unified = state.mode == "no_fad"
    log = LossLog(run_dir / "loss_fam.csv" if run_dir else None,
                  ("loss_all",) if unified else tuple(f"loss_{r}" for r in REGIONS))
    for it in range(cfg.iters_fam):
        t = int(rng.choice(ds.train_idx))
        adam.lr["gauss.mu"] = _mu_lr(cfg, it, cfg.iters_fam)
        state.params.zero_grad()
        if unified:
            clouds, _ = deformed_regions(state, targets.windows[t], targets.expr[t])
            out = render(clouds["all"], ds.cameras[t], threads=cfg.threads)
            parts = [loss_fam(Tensor(targets.frames[t]), out.color, cfg.lambda1)]
        else:
            parts = []
            clouds, _ = deformed_regions(state, targets.windows[t], targets.expr[t])
            for r in REGIONS:
                out = render(clouds[r], ds.cameras[t], region=r, threads=cfg.threads)
                parts.append(loss_fam(targets.masked(r, t), out.color * targets.dilation(r, t), cfg.lambda1))
        loss = parts[0]
        for p in parts[1:]:
            loss = loss + p
        v = _check(loss, state, run_dir, "fam", it, t)
        loss.backward()
        _step(state, adam, names)
        log.add(it, v, *(float(p.data) for p in parts))
    log.write()
    return log


# -- stage 3: fusion ------------------------------------------------------------

_PATCH_STEP = {"fusion": 3_000_000, "hrpa": 4_000_000}


def fusion_objective(state: State, targets: Targets, cfg: StageConfig, t: int, step_key: int,
                     perceptual: PerceptualFeatures | None) -> tuple[Tensor, FrameRender]:
    ds = targets.dataset
    fr = render_frame(state, ds.cameras[t], targets.windows[t], targets.expr[t], cfg.threads, with_mouth=False)
    loss = loss_fusion(Tensor(targets.frames[t]), fr.color, cfg.loss_weights(), cfg.seed, step_key, perceptual)
    return loss, fr


def _perceptual(cfg: StageConfig) -> PerceptualFeatures:
    return PerceptualFeatures(cfg.perceptual_weights or None)


def stage_fusion(state: State, targets: Targets, cfg: StageConfig, run_dir: Path | None = None) -> LossLog:
    rng = np.random.default_rng([cfg.seed, 30])
    adam = _adam(state, cfg)
    names = state.names("fusion")
    ds = targets.dataset
    net = _perceptual(cfg)
    log = LossLog(run_dir / "loss_fusion.csv" if run_dir else None, ())
    for it in range(cfg.iters_fusion):
        t = int(rng.choice(ds.train_idx))
        adam.lr["gauss.mu"] = _mu_lr(cfg, it, cfg.iters_fusion)
        state.params.zero_grad()
        loss, _ = fusion_objective(state, targets, cfg, t, _PATCH_STEP["fusion"] + it, net)
        v = _check(loss, state, run_dir, "fusion", it, t)
        loss.backward()
        _step(state, adam, names)
        log.add(it, v)
    log.write()
    return log


# -- stage 4: sync refinement --------------------------------------------------------

def hrpa_window_starts(targets: Targets, cfg: StageConfig) -> np.ndarray:
    n_train = len(targets.dataset.train_idx)
    if n_train < SYNC_FRAMES:
        raise ValueError("training split is shorter than the sync window")
    rng = np.random.default_rng([cfg.seed, 40])
    return rng.integers(0, n_train - SYNC_FRAMES + 1, size=cfg.iters_hrpa)


def hrpa_loss(state: State, targets: Targets, cfg: StageConfig, start: int, it: int, scorer: SyncScorer | None,
              perceptual: PerceptualFeatures | None) -> tuple[Tensor, Tensor, Tensor | None]:
    """Mean fusion objective over a 5-frame window plus lambda3 times the sync loss."""
    frames = list(range(start, start + SYNC_FRAMES))
    fu_terms, fused = [], []
    for k, t in enumerate(frames):
        l, fr = fusion_objective(state, targets, cfg, t, _PATCH_STEP["hrpa"] + it * SYNC_FRAMES + k, perceptual)
        fu_terms.append(l)
        fused.append(fr.color)
    l_fu = fu_terms[0]
    for l in fu_terms[1:]:
        l_fu = l_fu + l
    l_fu = l_fu * (1.0 / SYNC_FRAMES)
    if cfg.lambda3 == 0 or scorer is None:
        return l_fu, l_fu, None
    boxes = mouth_boxes(targets.masks["mouth"][start:start + SYNC_FRAMES])
    l_lip = loss_lip(fused, targets.windows[start:start + SYNC_FRAMES], boxes, scorer)
    return l_fu + cfg.lambda3 * l_lip, l_fu, l_lip


def stage_hrpa(state: State, targets: Targets, scorer: SyncScorer | None, cfg: StageConfig,
               run_dir: Path | None = None) -> LossLog:
    if cfg.lambda3 > 0 and (scorer is None or not scorer.trained or not scorer.frozen):
        raise ValueError("sync refinement needs a trained, frozen sync scorer")
    adam = _adam(state, cfg)
    names = state.names("hrpa")
    net = _perceptual(cfg)
    log = LossLog(run_dir / "loss_hrpa.csv" if run_dir else None, ("loss_fusion", "loss_lip"))
    for it, start in enumerate(hrpa_window_starts(targets, cfg)):
        s = int(targets.dataset.train_idx[start])
        state.params.zero_grad()
        loss, l_fu, l_lip = hrpa_loss(state, targets, cfg, s, it, scorer, net)
        v = _check(loss, state, run_dir, "hrpa", it, s)
        loss.backward()
        _step(state, adam, names)
        log.add(it, v, float(l_fu.data), float(l_lip.data) if l_lip is not None else 0.0)
    log.write()
    return log


# -- scorer / evaluation -----------------------------------------------------------

def prepare_scorer(dataset: Dataset, cfg: StageConfig, directory: Path | None = None):
    tr, te = dataset.train_idx, dataset.test_idx
    m = dataset.masks["mouth"]
    scorer, log = train_sync_scorer((dataset.frames[tr], dataset.windows[tr], m[tr]),
                                    (dataset.frames[te], dataset.windows[te], m[te]),
                                    seed=cfg.seed, max_epochs=cfg.sync_epochs)
    if directory is not None:
        scorer.save(directory)
    return scorer, log


def render_sequence(state: State, dataset: Dataset, indices, windows=None, expr=None, threads: int = 1):
    """Fused colors and mouth alphas for ``indices`` (optionally with substitute condition tracks)."""
    dtype = state.params["gauss.face.mu"].dtype
    windows = dataset.windows if windows is None else windows
    expr = dataset.expr if expr is None else expr
    colors, mouth = [], []
    with dc.no_grad():
        for t in indices:
            fr = render_frame(state, dataset.cameras[t], windows[t].astype(dtype), expr[t].astype(dtype), threads)
            colors.append(fr.color.data)
            mouth.append(fr.regions["mouth"].alpha.data)
    return np.stack(colors), np.stack(mouth)


def evaluate(state: State, dataset: Dataset, scorer: SyncScorer, threads: int = 1) -> dict[str, float]:
    idx = dataset.test_idx
    colors, mouth = render_sequence(state, dataset, idx, threads=threads)
    gt = dataset.frames[idx]
    masks = dataset.masks["mouth"][idx]
    conf = sync_confidence(scorer, colors, dataset.windows[idx], masks)
    return metrics(gt, colors, masks, mouth, conf)


def region_psnr(state: State, dataset: Dataset, region: str, dynamic: bool, indices=None) -> float:
    """Held-out PSNR of one regional render against the masked ground truth."""
    from .losses import psnr
    idx = dataset.test_idx if indices is None else indices
    dtype = state.params["gauss.face.mu"].dtype
    vals = []
    with dc.no_grad():
        for t in idx:
            clouds, _ = deformed_regions(state, dataset.windows[t].astype(dtype), dataset.expr[t].astype(dtype),
                                         dynamic)
            out = render(clouds[region], dataset.cameras[t], region=region)
            m = dataset.masks[region][t][..., None]
            vals.append(psnr(dataset.frames[t] * m, out.color.data * m))
    return float(np.mean(vals))


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- full runs ------------------------------------------------------------------------

@dataclass
class RunResult:
    state: State
    metrics: dict
    logs: dict
    seconds: dict


def train(dataset: Dataset, cfg: StageConfig, run_dir=None, scorer: SyncScorer | None = None,
          static_from: Path | None = None, snapshots: dict | None = None) -> RunResult:
    """Run every stage for ``cfg.mode`` and evaluate on the held-out split.

    ``static_from`` reuses a static-stage checkpoint; ``snapshots`` (stage -> dir)
    requests extra checkpoint copies, e.g. the pre-refinement state.
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        write_json(run_dir / "config.json", cfg.to_dict())
    logs, secs = {}, {}
    with dc.precision(cfg.precision):
        targets = Targets(dataset, cfg)
        state = State(cfg, dataset.bbox)
        if static_from is not None:
            loaded, _ = State.load(static_from, dataset.bbox)
            for n in state.params.names("gauss."):
                state.params[n].data = loaded.params[n].data.copy()
        else:
            t0 = time.perf_counter()
            logs["static"] = stage_static(state, targets, cfg, run_dir)
            secs["static"] = time.perf_counter() - t0
        stages = [("fam", stage_fam), ("fusion", stage_fusion)]
        if run_dir is not None:
            state.save(run_dir / "ckpt_static", "static")
        for name, fn in stages:
            t0 = time.perf_counter()
            logs[name] = fn(state, targets, cfg, run_dir)
            secs[name] = time.perf_counter() - t0
            if run_dir is not None:
                state.save(run_dir / f"ckpt_{name}", name)
        if snapshots and "fusion" in snapshots:
            state.save(snapshots["fusion"], "fusion")
        if scorer is None:
            t0 = time.perf_counter()
            scorer, _ = prepare_scorer(dataset, cfg, run_dir / "scorer" if run_dir else None)
            secs["scorer"] = time.perf_counter() - t0
        if cfg.mode != "no_hrpa":
            t0 = time.perf_counter()
            logs["hrpa"] = stage_hrpa(state, targets, scorer, cfg, run_dir)
            secs["hrpa"] = time.perf_counter() - t0
            if run_dir is not None:
                state.save(run_dir / "ckpt_hrpa", "hrpa")
        report = evaluate(state, dataset, scorer, cfg.threads)
    report = {"mode": cfg.mode, **report}
    if run_dir is not None:
        write_json(run_dir / "metrics.json", report)
    return RunResult(state, report, logs, secs)


def run_ablation(mode: str, dataset: Dataset, cfg: StageConfig, run_dir=None, scorer=None,
                 static_from=None) -> dict:
    return train(dataset, replace(cfg, mode=mode), run_dir, scorer, static_from).metrics


def ablation_suite(dataset: Dataset, cfg: StageConfig, seeds, out_dir, modes=MODES) -> dict:
    """Every mode for every seed; static stage, sync scorer and the no_hrpa state are shared per seed."""
    out = Path(out_dir)
    results: dict = {}
    for seed in seeds:
        c = replace(cfg, seed=seed, mode="full")
        sdir = out / f"seed{seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        scorer, _ = prepare_scorer(dataset, c, sdir / "scorer")
        res = {}
        full = train(dataset, c, sdir / "full", scorer, snapshots={"fusion": sdir / "pre_hrpa"})
        res["full"] = full.metrics
        static = sdir / "full" / "ckpt_static"
        if "no_hrpa" in modes:
            with dc.precision(c.precision):
                pre, _ = State.load(sdir / "pre_hrpa", dataset.bbox)
                m = evaluate(pre, dataset, scorer, c.threads)
            res["no_hrpa"] = {"mode": "no_hrpa", **m}
            write_json(sdir / "no_hrpa_metrics.json", res["no_hrpa"])
        for mode in modes:
            if mode in ("full", "no_hrpa"):
                continue
            res[mode] = run_ablation(mode, dataset, c, sdir / mode, scorer, static_from=static)
        results[seed] = res
    write_json(out / "ablation.json", {str(k): v for k, v in results.items()})
    return results
