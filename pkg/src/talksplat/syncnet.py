"""Toy audio-visual sync scorer: contrastive embeddings of mouth crops and audio windows."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.metrics import roc_auc_score

from . import diffcore as dc
from .diffcore import Linear, ParamStore, Tensor
from .encoders import AUDIO_DIM, AUDIO_WINDOW

SYNC_FRAMES = 5
CROP = 20
D_SYNC = 64
TAU = 10.0
MIN_SHIFT = 5


class SyncScorer:
    def __init__(self, seed: int = 0, audio_window: int = AUDIO_WINDOW, audio_dim: int = AUDIO_DIM):
        rng = np.random.default_rng(seed)
        p = self.params = ParamStore()
        self.audio_window, self.audio_dim = audio_window, audio_dim
        c0 = 3 * SYNC_FRAMES

        def conv(name, cin, cout):
            bound = np.sqrt(6.0 / ((cin + cout) * 9))
            p.add(f"{name}.w", rng.uniform(-bound, bound, size=(cout, cin, 3, 3)), "sync")
            p.add(f"{name}.b", np.zeros(cout), "sync")
        conv("v.conv1", c0, 16)
        conv("v.conv2", 16, 32)
        side = CROP // 4
        self.v_fc = Linear(p, "v.fc", 32 * side * side, D_SYNC, rng, "sync")
        self.a_tok = Linear(p, "a.tok", audio_dim, 4, rng, "sync")
        self.a_fc1 = Linear(p, "a.fc1", SYNC_FRAMES * audio_window * 4, D_SYNC, rng, "sync")
        self.a_fc2 = Linear(p, "a.fc2", D_SYNC, D_SYNC, rng, "sync")
        self.frozen = False
        self.trained = False
        self.held_out_auc: float | None = None

    def freeze(self) -> None:
        for name in self.params:
            self.params[name].requires_grad = False
        self.frozen = True

    def visual(self, crops) -> Tensor:
        """(B, 15, 20, 20) crop stacks -> (B, D_SYNC)."""
        p = self.params
        x = dc.relu(dc.conv2d(dc.as_tensor(crops), p["v.conv1.w"], p["v.conv1.b"], padding=1))
        x = dc.avg_pool2d(x, 2)
        x = dc.relu(dc.conv2d(x, p["v.conv2.w"], p["v.conv2.b"], padding=1))
        x = dc.avg_pool2d(x, 2)
        return self.v_fc(x.reshape(x.shape[0], -1))

    def audio(self, windows) -> Tensor:
        """(B, 5, T_w, 29) -> (B, D_SYNC)."""
        w = dc.as_tensor(windows)
        if w.shape[-3:] != (SYNC_FRAMES, self.audio_window, self.audio_dim):
            raise dc.ShapeError("sync_audio", w.shape, (SYNC_FRAMES, self.audio_window, self.audio_dim))
        tok = dc.tanh(self.a_tok(w))
        flat = tok.reshape(w.shape[0], -1)
        return self.a_fc2(dc.relu(self.a_fc1(flat)))

    def cosine(self, crops, windows) -> Tensor:
        v = dc.l2_normalize(self.visual(crops), axis=-1)
        s = dc.l2_normalize(self.audio(windows), axis=-1)
        return (v * s).sum(axis=-1)

    def save(self, directory) -> None:
        self.params.save(directory, meta={"kind": "sync_scorer", "trained": self.trained,
                                          "held_out_auc": self.held_out_auc,
                                          "audio_window": self.audio_window, "audio_dim": self.audio_dim})

    @classmethod
    def load(cls, directory) -> "SyncScorer":
        s = cls()
        meta = s.params.load(directory)
        s.trained = bool(meta.get("trained", False))
        s.held_out_auc = meta.get("held_out_auc")
        s.freeze()
        return s


def mouth_boxes(masks: np.ndarray, size: int = CROP) -> np.ndarray:
    """Top-left (y, x) of a size x size crop centred on each mask's bounding box, clipped to the image."""
    n, h, w = masks.shape
    out = np.zeros((n, 2), dtype=np.int64)
    last = np.array([(h - size) // 2, (w - size) // 2])
    for i in range(n):
        ys, xs = np.nonzero(masks[i])
        if ys.size:
            cy = (ys.min() + ys.max()) // 2
            cx = (xs.min() + xs.max()) // 2
            last = np.array([cy - size // 2, cx - size // 2])
        out[i] = np.clip(last, 0, [h - size, w - size])
    return out


def crop_stack(frames, boxes, size: int = CROP) -> Tensor:
    """5 frames (H, W, 3) plus their crop corners -> (15, size, size)."""
    parts = []
    for f, (y, x) in zip(frames, boxes):
        f = dc.as_tensor(f)
        parts.append(f[y:y + size, x:x + size, :].transpose(2, 0, 1))
    return dc.concat(parts, axis=0)


def _crop_array(frames: np.ndarray, boxes: np.ndarray, start: int, size: int = CROP) -> np.ndarray:
    parts = [frames[start + k, y:y + size, x:x + size, :].transpose(2, 0, 1)
             for k, (y, x) in enumerate(boxes[start:start + SYNC_FRAMES])]
    return np.concatenate(parts, axis=0)


def window_starts(n: int) -> np.ndarray:
    if n < SYNC_FRAMES:
        raise ValueError(f"sequence of {n} frames is shorter than the sync window ({SYNC_FRAMES})")
    return np.arange(n - SYNC_FRAMES + 1)


def _pairs(frames, audio, boxes, rng: np.random.Generator, min_shift: int = MIN_SHIFT):
    """Aligned and shifted (crop, audio) pairs over every window of a sequence."""
    starts = window_starts(len(frames))
    if len(starts) <= min_shift:
        raise ValueError(f"need more than {min_shift + SYNC_FRAMES - 1} frames to draw shifted negatives")
    crops = np.stack([_crop_array(frames, boxes, s) for s in starts])
    pos = np.stack([audio[s:s + SYNC_FRAMES] for s in starts])
    neg_starts = []
    for s in starts:
        cand = starts[np.abs(starts - s) >= min_shift]
        neg_starts.append(rng.choice(cand))
    neg = np.stack([audio[s:s + SYNC_FRAMES] for s in neg_starts])
    x = np.concatenate([crops, crops])
    a = np.concatenate([pos, neg])
    y = np.concatenate([np.ones(len(starts)), np.zeros(len(starts))])
    return x, a, y


def score_pairs(scorer: SyncScorer, crops: np.ndarray, windows: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    with dc.no_grad():
        for i in range(0, len(crops), batch):
            out.append(scorer.cosine(crops[i:i + batch], windows[i:i + batch]).data)
    return np.concatenate(out)


def evaluate_auc(scorer: SyncScorer, frames, audio, boxes, seed: int = 0) -> float:
    x, a, y = _pairs(frames, audio, boxes, np.random.default_rng(seed))
    return float(roc_auc_score(y, score_pairs(scorer, x, a)))


@dataclass
class SyncTrainLog:
    epochs: int
    losses: list
    aucs: list


def train_sync_scorer(train, test, seed: int = 0, max_epochs: int = 60, target_auc: float = 0.9,
                      lr: float = 1e-3, batch: int = 64):
    """Contrastive training on (frames, audio_windows, mouth_masks) tuples for the two splits.

    Stops once the held-out AUC reaches ``target_auc`` or after ``max_epochs``.
    Returns the frozen scorer and a log.
    """
    tr_frames, tr_audio, tr_masks = train
    te_frames, te_audio, te_masks = test
    tr_boxes, te_boxes = mouth_boxes(tr_masks), mouth_boxes(te_masks)
    window_starts(len(tr_frames))
    with dc.precision("single"):
        tr_frames = np.asarray(tr_frames, dtype=np.float32)
        te_frames = np.asarray(te_frames, dtype=np.float32)
        tr_audio = np.asarray(tr_audio, dtype=np.float32)
        te_audio = np.asarray(te_audio, dtype=np.float32)
        scorer = SyncScorer(seed, audio_window=tr_audio.shape[1], audio_dim=tr_audio.shape[2])
        scorer.params.astype(np.float32)
        rng = np.random.default_rng([seed, 77])
        state = dc.AdamState(lr={"sync": lr})
        losses, aucs = [], []
        epoch = 0
        for epoch in range(1, max_epochs + 1):
            x, a, y = _pairs(tr_frames, tr_audio, tr_boxes, rng)
            order = rng.permutation(len(y))
            total = 0.0
            for i in range(0, len(order), batch):
                idx = order[i:i + batch]
                scorer.params.zero_grad()
                logit = scorer.cosine(x[idx], a[idx]) * TAU
                t = Tensor(y[idx].astype(np.float32))
                # BCE on sigmoid(logit)
                loss = -(t * dc.log_sigmoid(logit) + (1.0 - t) * dc.log_sigmoid(-logit)).mean()
                loss.backward()
                dc.adam_step(scorer.params, state)
                total += float(loss.data) * len(idx)
            losses.append(total / len(order))
            auc = evaluate_auc(scorer, te_frames, te_audio, te_boxes, seed)
            aucs.append(auc)
            if auc >= target_auc:
                break
    scorer.trained = True
    scorer.held_out_auc = aucs[-1]
    scorer.freeze()
    return scorer, SyncTrainLog(epoch, losses, aucs)


def loss_lip(frames, audio_window, boxes, scorer: SyncScorer) -> Tensor:
    """-log sigmoid(tau * cos) for one 5-frame window; the scorer must be frozen."""
    if not scorer.frozen:
        raise RuntimeError("sync scorer must be trained and frozen before use as a loss")
    crops = crop_stack(frames, boxes).reshape(1, 3 * SYNC_FRAMES, CROP, CROP)
    aw = dc.as_tensor(np.asarray(audio_window)[None].astype(crops.dtype))
    cos = scorer.cosine(crops, aw)
    return -dc.log_sigmoid(cos * TAU).sum()


def sync_confidence(scorer: SyncScorer, frames: np.ndarray, audio: np.ndarray, masks: np.ndarray,
                    shift: int = 0) -> float:
    """Mean scorer cosine over every 5-frame window; ``shift`` offsets the audio track (wrapping)."""
    frames = np.asarray(frames)
    n = len(frames)
    starts = window_starts(n)
    boxes = mouth_boxes(np.asarray(masks))
    if shift:
        audio = np.roll(audio, shift, axis=0)
    dtype = scorer.params[scorer.params.names()[0]].dtype
    crops = np.stack([_crop_array(frames, boxes, s) for s in starts]).astype(dtype)
    wins = np.stack([audio[s:s + SYNC_FRAMES] for s in starts]).astype(dtype)
    return float(score_pairs(scorer, crops, wins).mean())
