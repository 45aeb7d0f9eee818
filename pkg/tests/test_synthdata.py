import json

import numpy as np
import pytest

from talksplat import diffcore as dc
from talksplat.diffcore import fgt
from talksplat.synthdata import (DatasetError, SceneSpec, as_windows, build_scene, camera_for, generate, load,
                                 pose_scene, read_manifest, render_oracle, split_indices)


def test_split_follows_ten_to_one_rule():
    for n in (21, 48, 400, 1000):
        train, test = split_indices(n)
        assert len(train) == int(np.floor(0.909 * n)) and len(train) + len(test) == n


def test_dataset_contents(small_data):
    ds = small_data
    n = ds.spec.frames
    assert len(list((ds.root / "frames").glob("*.png"))) == n
    assert ds.frames.shape == (n, 64, 64, 3)
    assert ds.windows.shape == (n, 16, 29) and ds.expr.shape == (n, 8)
    assert len(ds.train_idx) == int(np.floor(0.909 * n))
    # the PNG and the FGT1 copy hold the same pixels
    assert np.array_equal(np.round(ds.frames[5] * 255).astype(np.uint8), ds.png_frame(5))
    sample = ds.sample(n - 1)
    assert sample.split == "test" and sample.masks["mouth"].shape == (64, 64)


def test_mouth_and_eye_masks_are_disjoint(small_data):
    assert not np.any(small_data.masks["mouth"] & small_data.masks["eyes"])
    assert small_data.masks["mouth"].any(axis=(1, 2)).all()


def test_aperture_is_visible_in_the_mouth_mask(small_data):
    a = fgt.load(small_data.root / "aperture.fgt")[:, 0]
    m = small_data.masks["mouth"]
    extent = np.array([np.ptp(np.nonzero(f)[0]) for f in m])
    assert np.corrcoef(extent, a)[0, 1] > 0.9


def test_masks_lie_inside_rendered_regions():
    spec = SceneSpec(seed=5, frames=24)
    rng = np.random.default_rng(spec.seed)
    scene = build_scene(spec, rng)
    _, alphas = render_oracle(pose_scene(scene, spec, 0.8, 0.0, 0.3), camera_for(spec, 3))
    for r, a in alphas.items():
        mask = a > 0.5
        assert mask.any() and np.all(a[mask] > 0), r


def test_generation_is_deterministic(tmp_path):
    spec = SceneSpec(seed=11, frames=22, height=32, width=32)
    m1 = generate(spec, tmp_path / "a")
    m2 = generate(spec, tmp_path / "b")
    assert m1["files"] == m2["files"]
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_load_round_trips_frames(tmp_path):
    spec = SceneSpec(seed=2, frames=22, height=32, width=32)
    generate(spec, tmp_path)
    ds = load(tmp_path)
    arr = fgt.load(tmp_path / "frames" / "00007.fgt")
    assert np.array_equal(ds.frames[7], arr)
    assert [s.index for s in ds] == list(range(22))


def test_corrupted_file_is_named(tmp_path):
    generate(SceneSpec(seed=1, frames=22, height=32, width=32), tmp_path)
    target = tmp_path / "masks" / "mouth" / "00003.png"
    target.write_bytes(target.read_bytes() + b"\0")
    with pytest.raises(DatasetError, match="00003.png"):
        load(tmp_path)


def test_manifest_validation(tmp_path):
    with pytest.raises(DatasetError, match="manifest not found"):
        read_manifest(tmp_path)
    generate(SceneSpec(seed=1, frames=22, height=32, width=32), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["split"]["test"] = m["split"]["test"][:-1]
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(DatasetError, match="partition"):
        read_manifest(tmp_path)


def test_manifest_round_trip_is_byte_identical(small_data, tmp_path):
    from talksplat.synthdata import dump_manifest
    raw = (small_data.root / "manifest.json").read_bytes()
    assert dump_manifest(json.loads(raw)) == raw


def test_scene_spec_preconditions():
    with pytest.raises(ValueError, match="exceed 20"):
        SceneSpec(frames=5)
    with pytest.raises(ValueError):
        SceneSpec(height=16)


def test_unwritable_output(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError, match="cannot write"):
        generate(SceneSpec(frames=22), blocker / "sub")


def test_as_windows_accepts_tokens_and_windows():
    tokens = np.random.default_rng(0).normal(size=(30, 29))
    w = as_windows(tokens)
    assert w.shape == (30, 16, 29)
    assert as_windows(w) is w or np.array_equal(as_windows(w), w)
    with pytest.raises(DatasetError):
        as_windows(np.zeros(5))


def test_oracle_frames_are_rendered_in_double():
    spec = SceneSpec(seed=0, frames=22)
    scene = build_scene(spec, np.random.default_rng(0))
    img, _ = render_oracle(pose_scene(scene, spec, 0.0, 0.0, 0.0), camera_for(spec, 0))
    assert img.dtype == np.float64 and dc.default_dtype() == np.float32
