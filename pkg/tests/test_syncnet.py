import numpy as np
import pytest

from talksplat import diffcore as dc
from talksplat.diffcore import Tensor, grad_check
from talksplat.syncnet import (CROP, SYNC_FRAMES, TAU, SyncScorer, crop_stack, evaluate_auc, loss_lip, mouth_boxes,
                               sync_confidence, train_sync_scorer, window_starts)


class _AlignedStub:
    frozen = True

    def cosine(self, crops, windows):
        return Tensor(np.ones(1, dtype=crops.dtype))


def test_perfect_alignment_loss_value(double):
    frames = [Tensor(np.zeros((32, 32, 3))) for _ in range(SYNC_FRAMES)]
    boxes = np.zeros((SYNC_FRAMES, 2), dtype=int)
    v = float(loss_lip(frames, np.zeros((SYNC_FRAMES, 16, 29)), boxes, _AlignedStub()).data)
    assert v == pytest.approx(-np.log(1 / (1 + np.exp(-TAU))), rel=1e-12)
    assert v == pytest.approx(4.54e-5, rel=1e-3)


def test_cosine_of_identical_embeddings(double):
    e = Tensor(np.random.default_rng(0).normal(size=(3, 64)))
    v = dc.l2_normalize(e, axis=-1)
    assert np.allclose((v * v).sum(axis=-1).data, 1.0, atol=1e-15)


def test_untrained_scorer_is_at_chance(small_data):
    ds = small_data
    boxes = mouth_boxes(ds.masks["mouth"])
    aucs = [evaluate_auc(SyncScorer(seed=s), ds.frames, ds.windows, boxes, seed=s) for s in range(3)]
    assert abs(np.mean(aucs) - 0.5) < 0.1


def test_lip_loss_needs_a_frozen_scorer(small_data):
    s = SyncScorer(0)
    with pytest.raises(RuntimeError, match="frozen"):
        loss_lip([Tensor(f) for f in small_data.frames[:5]], small_data.windows[:5],
                 np.zeros((5, 2), dtype=int), s)


def test_lip_loss_pixel_gradients_and_frozen_params(double):
    rng = np.random.default_rng(1)
    s = SyncScorer(2)
    s.freeze()
    frames = [Tensor(rng.uniform(size=(24, 24, 3))) for _ in range(SYNC_FRAMES)]
    boxes = np.array([[1, 2], [2, 2], [0, 3], [4, 4], [2, 1]])
    audio = rng.normal(size=(SYNC_FRAMES, 16, 29))
    coords = [rng.choice(24 * 24 * 3, 25, replace=False) for _ in frames]
    rep = grad_check(lambda *f: loss_lip(list(f), audio, boxes, s), frames, coords=coords)
    assert rep.median < 1e-5 and rep.max < 1e-4
    for n in s.params:
        assert s.params[n].grad is None


def test_crop_stack_layout(double):
    frames = [np.full((30, 30, 3), float(k)) for k in range(SYNC_FRAMES)]
    out = crop_stack(frames, np.array([[0, 0], [1, 1], [2, 2], [3, 3], [4, 4]])).data
    assert out.shape == (3 * SYNC_FRAMES, CROP, CROP)
    assert [out[3 * k, 0, 0] for k in range(SYNC_FRAMES)] == list(range(SYNC_FRAMES))


def test_mouth_boxes_centre_and_clip():
    m = np.zeros((2, 64, 64), dtype=bool)
    m[0, 40:46, 28:36] = True
    m[1, 60:64, 60:64] = True
    b = mouth_boxes(m)
    assert b[0].tolist() == [(40 + 45) // 2 - 10, (28 + 35) // 2 - 10]
    assert b[1].tolist() == [44, 44]


def test_short_sequences_are_rejected():
    with pytest.raises(ValueError, match="shorter"):
        window_starts(4)


def test_training_improves_auc_and_saves(small_data, tmp_path):
    ds = small_data
    tr = ds.train_idx
    # few held-out frames in the small set, so score on the training split as well
    train = (ds.frames[tr], ds.windows[tr], ds.masks["mouth"][tr])
    scorer, log = train_sync_scorer(train, train, seed=0, max_epochs=40, target_auc=0.8)
    assert scorer.frozen and scorer.trained
    assert log.aucs[-1] >= 0.8 and log.aucs[-1] > log.aucs[0]
    scorer.save(tmp_path / "s")
    back = SyncScorer.load(tmp_path / "s")
    assert back.frozen and back.held_out_auc == scorer.held_out_auc
    a = sync_confidence(scorer, ds.frames, ds.windows, ds.masks["mouth"])
    b = sync_confidence(back, ds.frames, ds.windows, ds.masks["mouth"])
    assert a == b
