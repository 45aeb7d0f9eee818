"""Command-line entry point: synth, train, render, eval, gradcheck, ablation."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import diffcore as dc
from .diffcore.fgt import FormatError
from .pipeline import MODES, PRESETS, NumericalError, StageConfig, State, evaluate, prepare_scorer, render_sequence
from .synthdata import DatasetError, SceneSpec, as_windows, generate, load
from .syncnet import SYNC_FRAMES, SyncScorer, sync_confidence
from .losses import metrics
from .rasterizer import to_uint8

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

STAGE_KEYS = {f.name: f.type for f in fields(StageConfig)}
SCENE_KEYS = {f.name: f.type for f in fields(SceneSpec)}
RUN_KEYS = {"data", "out"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _coerce(value: str, kind):
    kind = kind if isinstance(kind, str) else getattr(kind, "__name__", str(kind))
    try:
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "tuple":
            return tuple(int(v) for v in value.split(","))
    except ValueError as e:
        raise UsageError(f"bad value {value!r}: {e}") from e
    return value


def parse_config(text: str) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment.  Unknown keys are rejected."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def resolve(pairs: dict) -> tuple[dict, dict, dict]:
    """Split flat pairs into (run, stage, scene) settings; scene keys carry a ``scene.`` prefix."""
    run, stage, scene = {}, {}, {}
    for key, value in pairs.items():
        if key in RUN_KEYS:
            run[key] = value
        elif key in STAGE_KEYS:
            stage[key] = _coerce(value, STAGE_KEYS[key])
        elif key.startswith("scene.") and key[6:] in SCENE_KEYS:
            scene[key[6:]] = _coerce(value, SCENE_KEYS[key[6:]])
        else:
            raise UsageError(f"unknown config key {key!r}")
    return run, stage, scene


def echo(path: Path, pairs: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{k} = {pairs[k]}\n" for k in sorted(pairs)))


def _pairs(args) -> dict:
    pairs = {}
    if getattr(args, "config", None):
        try:
            pairs.update(parse_config(Path(args.config).read_text()))
        except OSError as e:
            raise UsageError(f"cannot read config {args.config}: {e}") from e
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _out(args, path) -> Path:
    p = Path(path)
    return p if p.is_absolute() or args.out is None else Path(args.out) / p


# -- commands ---------------------------------------------------------------------

def cmd_synth(args) -> int:
    pairs = _pairs(args)
    for key, val in (("seed", args.seed), ("frames", args.frames), ("height", args.size), ("width", args.size)):
        if val is not None:
            pairs[f"scene.{key}"] = str(val)
    run, stage, scene = resolve(pairs)
    if stage:
        raise UsageError(f"synth does not take training keys: {', '.join(sorted(stage))}")
    try:
        spec = SceneSpec(**scene)
    except ValueError as e:
        raise UsageError(str(e)) from e
    if spec.frames < SYNC_FRAMES:
        raise UsageError(f"--frames {spec.frames} is shorter than the {SYNC_FRAMES}-frame sync window")
    out = Path(args.out or run.get("out", "data"))
    manifest = generate(spec, out)
    echo(out / "synth_config.txt", {f"scene.{k}": v for k, v in manifest["spec"].items()})
    print(f"wrote {spec.frames} frames to {out}")
    return EXIT_OK


def _stage_config(args, stage_pairs: dict) -> StageConfig:
    preset = args.preset or stage_pairs.pop("preset", "desk")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    over = dict(stage_pairs)
    if getattr(args, "ablation", None):
        over["mode"] = args.ablation
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        over["threads"] = args.threads
    if getattr(args, "precision", None):
        over["precision"] = args.precision
    try:
        return StageConfig.from_preset(preset, **over)
    except (TypeError, ValueError) as e:
        raise UsageError(str(e)) from e


def cmd_train(args) -> int:
    from .pipeline import train
    run, stage, _ = resolve(_pairs(args))
    cfg = _stage_config(args, stage)
    data = args.data or run.get("data")
    if not data:
        raise UsageError("train needs --data")
    out = Path(args.out or run.get("out", "run"))
    ds = load(data)
    echo(out / "run_config.txt", {"data": str(data), "out": str(out),
                                  **{k: v for k, v in cfg.to_dict().items()}})
    result = train(ds, cfg, out)
    print(json.dumps(result.metrics, sort_keys=True))
    return EXIT_OK


def _load_state(path, ds):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DatasetError(f"{p}: checkpoint not found")
    state, stage = State.load(p, ds.bbox)
    return state, stage


def _indices(ds, split: str) -> np.ndarray:
    if split == "test":
        return ds.test_idx
    if split == "train":
        return ds.train_idx
    return np.arange(len(ds))


def cmd_render(args) -> int:
    ds = load(args.data)
    state, _ = _load_state(args.checkpoint, ds)
    windows = None
    if args.audio:
        windows = as_windows(dc.fgt.load(args.audio), ds.windows.shape[1])
        if len(windows) < len(ds):
            raise DatasetError(f"{args.audio}: {len(windows)} frames of audio for {len(ds)} frames")
    idx = _indices(ds, args.split)
    with dc.precision(state.config.precision):
        colors, mouth = render_sequence(state, ds, idx, windows=windows, threads=args.threads or 1)
    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "mouth_alpha").mkdir(parents=True, exist_ok=True)
    for t, c, m in zip(idx, colors, mouth):
        Image.fromarray(to_uint8(c)).save(out / "frames" / f"{t:05d}.png")
        dc.fgt.save(out / "frames" / f"{t:05d}.fgt", c)
        dc.fgt.save(out / "mouth_alpha" / f"{t:05d}.fgt", m)
    (out / "index.json").write_text(json.dumps({"frames": [int(t) for t in idx],
                                                "checkpoint": str(args.checkpoint),
                                                "audio": args.audio or ""}, indent=1) + "\n")
    echo(out / "render_config.txt", {"data": args.data, "checkpoint": args.checkpoint,
                                     "audio": args.audio or "", "split": args.split})
    print(f"rendered {len(idx)} frames to {out}")
    return EXIT_OK


def _scorer(args, ds, cfg: StageConfig | None = None) -> SyncScorer:
    if args.scorer:
        return SyncScorer.load(args.scorer)
    if args.checkpoint:
        cand = Path(args.checkpoint).parent / "scorer"
        if (cand / "manifest.json").exists():
            return SyncScorer.load(cand)
    scorer, _ = prepare_scorer(ds, cfg or StageConfig())
    return scorer


def cmd_eval(args) -> int:
    ds = load(args.data)
    idx = _indices(ds, args.split)
    gt = ds.frames[idx]
    masks = ds.masks["mouth"][idx]
    scorer = _scorer(args, ds)
    audio = ds.windows[idx]
    if args.shift:
        audio = np.roll(audio, args.shift, axis=0)
    if args.pred == "gt":
        colors, mouth = gt, masks.astype(np.float32)
    elif args.pred:
        p = Path(args.pred)
        try:
            colors = np.stack([dc.fgt.load(p / "frames" / f"{t:05d}.fgt") for t in idx])
            mouth = np.stack([dc.fgt.load(p / "mouth_alpha" / f"{t:05d}.fgt") for t in idx])
        except FileNotFoundError as e:
            raise DatasetError(f"{p}: missing rendered frame ({e.filename})") from e
    elif args.checkpoint:
        state, _ = _load_state(args.checkpoint, ds)
        with dc.precision(state.config.precision):
            colors, mouth = render_sequence(state, ds, idx, threads=args.threads or 1)
    else:
        raise UsageError("eval needs --pred DIR, --pred gt or --checkpoint DIR")
    conf = sync_confidence(scorer, colors, audio, masks)
    report = metrics(gt, colors, masks, mouth, conf)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import MAX_TOL, MEDIAN_TOL, run_suite
    ok = True
    for r in run_suite(seed=args.seed or 0):
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status} {r.name:24s} checked={int(r.report.checked.sum()):5d} "
              f"median={r.report.median:.2e} max={r.report.max:.2e} ({r.seconds:.1f}s)")
        for i, a, n, e in r.report.worst(args.worst):
            print(f"     coord {i}: analytic={a:+.6e} numeric={n:+.6e} rel={e:.2e}")
    print(f"tolerances: median < {MEDIAN_TOL:g}, max < {MAX_TOL:g}")
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_ablation(args) -> int:
    from .pipeline import ablation_suite
    run, stage, _ = resolve(_pairs(args))
    cfg = _stage_config(args, stage)
    ds = load(args.data or run.get("data"))
    seeds = [int(s) for s in args.seeds.split(",")]
    out = Path(args.out or run.get("out", "ablation"))
    echo(out / "ablation_config.txt", {"seeds": args.seeds, **cfg.to_dict()})
    res = ablation_suite(ds, cfg, seeds, out)
    for seed, per in res.items():
        for mode, m in per.items():
            print(seed, mode, json.dumps({k: v for k, v in m.items() if k != "mode"}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="talksplat", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--seed", type=int)
    s.add_argument("--frames", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(fn=cmd_synth)

    for name, fn, helptext in (("train", cmd_train, "run all training stages"),
                               ("ablation", cmd_ablation, "train every ablation mode over several seeds")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data")
        t.add_argument("--out")
        t.add_argument("--preset")
        t.add_argument("--ablation", choices=MODES)
        t.add_argument("--seed", type=int)
        t.add_argument("--threads", type=int)
        t.add_argument("--precision", choices=("single", "double"))
        t.add_argument("--config")
        t.add_argument("--set", action="append", metavar="KEY=VALUE")
        if name == "ablation":
            t.add_argument("--seeds", default="0,1,2")
        t.set_defaults(fn=fn)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--data", required=True)
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--audio", help="substitute audio track (N x T_w x 29 windows or N x 29 tokens)")
    r.add_argument("--split", choices=("test", "train", "all"), default="test")
    r.add_argument("--threads", type=int)
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="compute the metric report")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--pred", help="render directory, or 'gt' to score the ground truth itself")
    e.add_argument("--checkpoint")
    e.add_argument("--scorer")
    e.add_argument("--shift", type=int, default=0, help="offset the audio track by this many frames")
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--threads", type=int)
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--worst", type=int, default=3)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.fn(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as e:
        where = f" (tensors dumped to {e.dump_dir})" if e.dump_dir else ""
        print(f"numerical failure: {e}{where}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
