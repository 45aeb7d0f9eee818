import json
from dataclasses import replace

import numpy as np
import pytest

from talksplat import diffcore as dc
from talksplat.diffcore import Tensor
from talksplat.losses import METRIC_KEYS, loss_static
from talksplat.pipeline import (PRESETS, NumericalError, StageConfig, State, Targets, _PATCH_STEP, deformed_regions,
                                fusion_objective, hrpa_loss, initialize_static, render_frame, stage_fusion,
                                stage_hrpa, stage_static, train)
from talksplat.rasterizer import render
from talksplat.syncnet import SYNC_FRAMES, SyncScorer


def smoke(**kw):
    return StageConfig.from_preset("smoke", **kw)


@pytest.fixture(scope="module")
def smoke_run(small_data, tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    res = train(small_data, smoke(), out / "run")
    return res, out / "run"


def test_stage_config_validation():
    c = StageConfig()
    assert (c.lr_fusion, c.lr_mlp, c.lambda1, c.lambda2, c.lambda3) == (1e-4, 1e-5, 0.20, 0.50, 0.03)
    assert PRESETS["long"]["iters_static"] + PRESETS["long"]["iters_fam"] + PRESETS["long"]["iters_fusion"] == 60000
    desk = StageConfig.from_preset("desk")
    assert desk.lr_fusion / desk.lr_mlp == pytest.approx(c.lr_fusion / c.lr_mlp)
    with pytest.raises(ValueError, match="iters_fam"):
        StageConfig(iters_fam=0)
    with pytest.raises(ValueError, match="lr_mlp"):
        StageConfig(lr_mlp=-1.0)
    with pytest.raises(ValueError, match="preset"):
        StageConfig.from_preset("huge")
    with pytest.raises(ValueError, match="ablation mode"):
        StageConfig(mode="no_everything")


def test_static_loss_decreases(small_data):
    cfg = StageConfig(iters_static=500)
    drops = []
    for seed in range(3):
        c = replace(cfg, seed=seed)
        state = State(c, small_data.bbox)
        log = stage_static(state, Targets(small_data, c), c)
        drops.append(log.totals[9] - log.totals[499])
    assert np.median(drops) > 0


def test_face_loss_ignores_pixels_outside_dilated_mask(small_data):
    cfg = smoke()
    targets = Targets(small_data, cfg)
    state = State(cfg, small_data.bbox)
    initialize_static(state, targets, cfg)
    t = int(small_data.train_idx[3])
    out = render(state.cloud("face"), small_data.cameras[t]).color.data
    outside = ~targets.dilated["face"][t]
    assert outside.any()
    noisy = out.copy()
    noisy[outside] = np.random.default_rng(0).uniform(size=(outside.sum(), 3))
    dil = targets.dilation("face", t)
    a = loss_static(targets.masked("face", t), Tensor(out) * dil).data
    b = loss_static(targets.masked("face", t), Tensor(noisy) * dil).data
    assert a == b


def test_empty_region_is_named(small_data):
    class Hollow:
        pass
    fake = Hollow()
    fake.__dict__.update(small_data.__dict__)
    fake.masks = {**small_data.masks, "eyes": np.zeros_like(small_data.masks["eyes"])}
    with pytest.raises(ValueError, match="eyes"):
        Targets(fake, smoke())


def test_zero_init_dynamic_equals_static(small_data):
    cfg = smoke()
    with dc.precision(cfg.precision):
        state = State(cfg, small_data.bbox)
        targets = Targets(small_data, cfg)
        initialize_static(state, targets, cfg)
        t = int(small_data.train_idx[0])
        cam, win, ex = small_data.cameras[t], targets.windows[t], targets.expr[t]
        dyn = render_frame(state, cam, win, ex, dynamic=True)
        sta = render_frame(state, cam, win, ex, dynamic=False)
    assert np.array_equal(dyn.color.data, sta.color.data)


def test_checkpoints_round_trip(smoke_run, small_data, tmp_path):
    res, run = smoke_run
    for stage in ("static", "fam", "fusion", "hrpa"):
        ck = run / f"ckpt_{stage}"
        state, name = State.load(ck, small_data.bbox)
        assert name == stage
        state.save(tmp_path / stage, stage)
        for f in ck.iterdir():
            assert f.read_bytes() == (tmp_path / stage / f.name).read_bytes(), f.name
    final, _ = State.load(run / "ckpt_hrpa", small_data.bbox)
    t = int(small_data.test_idx[0])
    args = (small_data.cameras[t], small_data.windows[t], small_data.expr[t])
    with dc.no_grad():
        assert np.array_equal(render_frame(final, *args).color.data, render_frame(res.state, *args).color.data)


def test_run_directory_contents(smoke_run):
    res, run = smoke_run
    for name in ("config.json", "metrics.json", "loss_static.csv", "loss_fam.csv", "loss_fusion.csv",
                 "loss_hrpa.csv", "scorer"):
        assert (run / name).exists(), name
    header = (run / "loss_hrpa.csv").read_text().splitlines()[0]
    assert header == "iter,loss_total,loss_fusion,loss_lip"
    m = json.loads((run / "metrics.json").read_text())
    assert set(METRIC_KEYS) <= set(m)


def test_fusion_patch_sampling_is_seeded(small_data):
    cfg = smoke(iters_fusion=3)
    curves = []
    for _ in range(2):
        with dc.precision(cfg.precision):
            state = State(cfg, small_data.bbox)
            targets = Targets(small_data, cfg)
            initialize_static(state, targets, cfg)
            curves.append(stage_fusion(state, targets, cfg).totals)
    assert np.array_equal(curves[0], curves[1])


def test_fusion_gradients_reach_every_region_network(small_data):
    cfg = smoke()
    with dc.precision(cfg.precision):
        state = State(cfg, small_data.bbox)
        targets = Targets(small_data, cfg)
        initialize_static(state, targets, cfg)
        rng = np.random.default_rng(0)
        for n in state.params.names("net."):
            if n.endswith((".head.w", ".deform.3.w")):
                state.params[n].data = rng.normal(0, 1e-3, state.params[n].shape).astype(np.float32)
        state.params.zero_grad()
        loss, _ = fusion_objective(state, targets, cfg, int(small_data.train_idx[2]), 0, None)
        loss.backward()
    for r in ("face", "mouth", "eyes"):
        grads = [state.params[n].grad for n in state.params.names(f"net.{r}.")]
        assert any(g is not None and np.any(g) for g in grads), r


def test_hrpa_needs_trained_scorer(small_data):
    cfg = smoke()
    state = State(cfg, small_data.bbox)
    with pytest.raises(ValueError, match="scorer"):
        stage_hrpa(state, Targets(small_data, cfg), SyncScorer(0), cfg)
    with pytest.raises(ValueError, match="scorer"):
        stage_hrpa(state, Targets(small_data, cfg), None, cfg)


def test_hrpa_only_updates_its_parameters(smoke_run, small_data):
    res, run = smoke_run
    before, _ = State.load(run / "ckpt_fusion", small_data.bbox)
    after, _ = State.load(run / "ckpt_hrpa", small_data.bbox)
    allowed = set(after.names("hrpa"))
    changed = [n for n in after.params if not np.array_equal(after.params[n].data, before.params[n].data)]
    assert changed and set(changed) <= allowed
    for n in after.params.names("net.face."):
        assert np.array_equal(after.params[n].data, before.params[n].data)


def test_hrpa_without_sync_term_is_the_fusion_objective(small_data):
    cfg = smoke(lambda3=0.0)
    with dc.precision(cfg.precision):
        state = State(cfg, small_data.bbox)
        targets = Targets(small_data, cfg)
        initialize_static(state, targets, cfg)
        start, it = 4, 2
        total, l_fu, l_lip = hrpa_loss(state, targets, cfg, start, it, None, None)
        terms = [fusion_objective(state, targets, cfg, start + k, _PATCH_STEP["hrpa"] + it * SYNC_FRAMES + k, None)[0]
                 for k in range(SYNC_FRAMES)]
        ref = terms[0]
        for t in terms[1:]:
            ref = ref + t
        ref = ref * (1.0 / SYNC_FRAMES)
    assert l_lip is None
    assert total.data.tobytes() == ref.data.tobytes()


def test_nan_loss_raises_and_dumps(small_data, tmp_path):
    cfg = smoke()
    targets = Targets(small_data, cfg)
    targets.frames = np.full_like(targets.frames, np.nan)
    state = State(cfg, small_data.bbox)
    with pytest.raises(NumericalError) as err:
        stage_static(state, targets, cfg, tmp_path)
    assert err.value.dump_dir is not None and (err.value.dump_dir / "manifest.json").exists()


def test_every_mode_reports_the_same_keys(small_data, tmp_path):
    keys = []
    for mode in ("full", "no_fad", "no_fam", "no_hrpa"):
        m = train(small_data, smoke(mode=mode, iters_static=5, iters_fam=5, iters_fusion=3, iters_hrpa=2),
                  tmp_path / mode).metrics
        keys.append(tuple(sorted(m)))
        assert m["mode"] == mode
        assert (tmp_path / mode / "ckpt_hrpa").exists() == (mode != "no_hrpa")
    assert len(set(keys)) == 1


def test_no_fad_uses_one_cloud(small_data):
    cfg = smoke(mode="no_fad")
    state = State(cfg, small_data.bbox)
    targets = Targets(small_data, cfg)
    initialize_static(state, targets, cfg)
    clouds, deltas = deformed_regions(state, targets.windows[0], targets.expr[0])
    assert list(clouds) == ["all"] and len(clouds["all"]) == sum(cfg.counts().values())
