"""Command-line entry point.

Every subcommand reads an optional JSON config file (``--config``) whose
keys are the model, training and data settings; flags override file
values, and the effective configuration is written next to the outputs.
Exit codes: 0 success, 2 usage or config error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .anchors import AnchorSpec, kmeans_anchor_shapes
from .data import GoPClip, generate_clips, list_clips, read_clip, write_clip, write_ppm
from .geometry import Tube, to_corners, union_corners
from .pipeline.config import ModelConfig
from .pipeline.detect import evaluate_clips, detect_gop, load_model, save_model
from .pipeline.network import TrackNet
from .pipeline.train import TrainConfig, Trainer


class UsageError(Exception):
    """Bad flags or configuration; maps to exit code 2."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class DataConfig:
    clips: int = 200
    frames: int = 16
    min_objects: int = 1
    max_objects: int = 4
    speed_range: tuple[float, float] = (1.0, 4.0)
    size_range: tuple[int, int] = (12, 28)
    curvature: float = 0.0

    def __post_init__(self):
        self.speed_range = tuple(float(v) for v in self.speed_range)
        self.size_range = tuple(int(v) for v in self.size_range)
        if self.clips < 0 or self.frames < 1 or not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("invalid data settings")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @classmethod
    def from_flat(cls, flat: dict[str, Any]) -> "RunConfig":
        owners = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}
        parts: dict[str, dict] = {k: {} for k in owners}
        for key, value in flat.items():
            for sec, typ in owners.items():
                if key in {f.name for f in fields(typ)}:
                    parts[sec][key] = value
                    break
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(ModelConfig.from_dict(parts["model"]), TrainConfig.from_dict(parts["train"]),
                   DataConfig(**parts["data"]))

    def to_flat(self) -> dict[str, Any]:
        out: dict[str, Any] = {}
        out.update(self.model.to_dict())
        out.update(self.train.to_dict())
        d = asdict(self.data)
        d["speed_range"] = list(self.data.speed_range)
        d["size_range"] = list(self.data.size_range)
        out.update(d)
        return out


def dump_json(obj: Any, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def load_config(path: str | None, overrides: dict[str, Any]) -> RunConfig:
    flat: dict[str, Any] = {}
    if path is not None:
        try:
            flat = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise UsageError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        if not isinstance(flat, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
    flat.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_flat(flat)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _parse_set(items: Sequence[str]) -> dict[str, Any]:
    out = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


# flag dest -> config key
_FLAG_KEYS = {
    "seed": "seed", "iterations": "iterations", "lr": "lr", "lr_drop_at": "lr_drop_at",
    "tpn_mode": "tpn_mode", "post_mode": "post_mode", "anchor_sets": "anchor_sets",
    "motion_source": "motion_source", "skip_range": "skip_range", "clips": "clips",
    "frames": "frames", "gop_len": "gop_len", "num_anchor_shapes": "num_anchor_shapes",
}


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    out = _parse_set(getattr(args, "set", None) or [])
    for dest, key in _FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            out[key] = v
    if getattr(args, "no_flip", False):
        out["flip"] = False
    if getattr(args, "objects", None) is not None:
        out["min_objects"], out["max_objects"] = args.objects
    return out


def _sidecar(path: Path) -> Path:
    """Config file echoed next to a single-file output."""
    return path.with_name(path.stem + ".config.json")


def _model_config(model_path: Path, config_path: str | None, overrides: dict) -> RunConfig:
    if config_path is None:
        side = model_path.parent / "config.json"
        if not side.exists():
            raise UsageError(f"no --config given and no config.json beside {model_path}")
        config_path = str(side)
    return load_config(config_path, overrides)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, cfg: RunConfig) -> int:
    out = Path(args.out)
    d = cfg.data
    clips = generate_clips(d.clips, cfg.train.seed, (d.min_objects, d.max_objects),
                           h=cfg.model.image_h, w=cfg.model.image_w, t_len=d.frames,
                           speed_range=d.speed_range, size_range=d.size_range, curvature=d.curvature,
                           n_classes=cfg.model.num_classes)
    for i, clip in enumerate(clips):
        write_clip(clip, out / f"clip_{i:05d}")
    dump_json(cfg.to_flat(), out / "config.json")
    print(f"wrote {len(clips)} clips to {out}")
    return 0


def _load_dataset(root: str) -> list[GoPClip]:
    paths = list_clips(root)
    if not paths:
        raise FileNotFoundError(f"no clip_* directories under {root}")
    return [read_clip(p) for p in paths]


def dataset_anchors(clips: Sequence[GoPClip], m: int, seed: int) -> list[AnchorSpec]:
    boxes = [np.stack([o.box for o in frame]) for c in clips for frame in c.objects if frame]
    if not boxes:
        raise ValueError("dataset has no annotated boxes to cluster")
    return kmeans_anchor_shapes(np.concatenate(boxes), m, seed=seed)


def write_anchors(specs: Sequence[AnchorSpec], path: Path) -> None:
    dump_json([{"w": s.w, "h": s.h} for s in specs], path)


def read_anchors(path: str | Path) -> list[AnchorSpec]:
    try:
        items = json.loads(Path(path).read_text(encoding="utf-8"))
        return [AnchorSpec(float(i["w"]), float(i["h"])) for i in items]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: anchors file must be a list of {{w, h}} objects") from exc


def cmd_anchors(args, cfg: RunConfig) -> int:
    clips = _load_dataset(args.data)
    specs = dataset_anchors(clips, cfg.model.num_anchor_shapes, cfg.train.seed)
    out = Path(args.out)
    write_anchors(specs, out)
    dump_json(cfg.to_flat(), _sidecar(out))
    print(f"wrote {len(specs)} anchor shapes to {out}")
    return 0


def _format_log(iteration: int, lr: float, loss) -> str:
    rec = {"iteration": iteration, "lr": lr}
    rec.update(loss.as_dict())
    return json.dumps(rec)


def cmd_train(args, cfg: RunConfig) -> int:
    clips = _load_dataset(args.data)
    specs = (read_anchors(args.anchors) if args.anchors
             else dataset_anchors(clips, cfg.model.num_anchor_shapes, cfg.train.seed))
    if len(specs) != cfg.model.num_anchor_shapes:
        # duplicates removed by clustering shrink the shape count
        cfg.model.num_anchor_shapes = len(specs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(cfg.to_flat(), out / "config.json")
    write_anchors(specs, out / "anchors.json")
    model = TrackNet(cfg.model, specs, seed=cfg.train.seed)
    trainer = Trainer(model, clips, cfg.train)
    with open(out / "train_log.jsonl", "w", encoding="utf-8") as log:
        def progress(it, lr, loss):
            log.write(_format_log(it, lr, loss) + "\n")
            log.flush()
            if not args.quiet and (it % 50 == 0 or it == cfg.train.iterations - 1):
                print(f"iter {it:5d}  lr {lr:.2e}  total {loss.total:.4f}", file=sys.stderr)

        trainer.run(callback=progress)
    save_model(model, out / "model.tbnt")
    print(f"wrote {out / 'model.tbnt'}")
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_model(args.model, cfg.model)
    report = evaluate_clips(model, _load_dataset(args.data))
    out = Path(args.report)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json(), encoding="utf-8")
    dump_json(cfg.to_flat(), _sidecar(out))
    print(f"AP@0.50 {report.ap_at['0.50']:.4f}  AP {report.ap_mean:.4f}  wrote {out}")
    return 0


def tubes_payload(dets, classes: Sequence[str]) -> list[dict]:
    return [{"class": classes[d.class_id], "score": d.score, "track_id": i,
             "boxes": [[float(v) for v in b] for b in d.tube.boxes]} for i, d in enumerate(dets)]


def _gop_of(clip: GoPClip, start: int, t_len: int) -> GoPClip:
    if start < 0 or start + t_len > len(clip):
        raise ValueError(f"GoP [{start}, {start + t_len}) does not fit the {len(clip)}-frame clip")
    return clip.subclip(range(start, start + t_len))


def cmd_detect(args, cfg: RunConfig) -> int:
    model = load_model(args.model, cfg.model)
    gop = _gop_of(read_clip(args.clip), args.start, cfg.model.gop_len)
    dets = detect_gop(model, gop.frames, clip=gop)
    out = Path(args.out)
    dump_json(tubes_payload(dets, cfg.model.classes), out)
    dump_json(cfg.to_flat(), _sidecar(out))
    print(f"{len(dets)} tubes -> {out}")
    return 0


# -- rendering

_COLORS = np.array([[255, 64, 64], [64, 255, 64], [64, 160, 255], [255, 220, 0],
                    [255, 64, 255], [0, 255, 255], [255, 140, 0], [200, 200, 200]], dtype=np.uint8)


def _rect(img: np.ndarray, corners, color, step: int = 1) -> None:
    h, w = img.shape[:2]
    x1, y1, x2, y2 = corners
    x1, x2 = int(np.clip(round(x1 * w), 0, w - 1)), int(np.clip(round(x2 * w) - 1, 0, w - 1))
    y1, y2 = int(np.clip(round(y1 * h), 0, h - 1)), int(np.clip(round(y2 * h) - 1, 0, h - 1))
    xs = np.arange(x1, x2 + 1)[::step]
    ys = np.arange(y1, y2 + 1)[::step]
    img[y1, xs] = color
    img[y2, xs] = color
    img[ys, x1] = color
    img[ys, x2] = color


def _line(img: np.ndarray, p, q, color) -> None:
    h, w = img.shape[:2]
    n = int(max(abs(q[0] - p[0]) * w, abs(q[1] - p[1]) * h)) + 2
    xs = np.clip(np.rint(np.linspace(p[0], q[0], n) * w - 0.5), 0, w - 1).astype(int)
    ys = np.clip(np.rint(np.linspace(p[1], q[1], n) * h - 0.5), 0, h - 1).astype(int)
    img[ys, xs] = color


def render_frames(frames: np.ndarray, tubes: Sequence[Tube]) -> np.ndarray:
    """Per-frame boxes, the dotted whole-GoP union box and the centroid tracklet up to each frame."""
    out = frames.copy()
    for k, tube in enumerate(tubes):
        color = _COLORS[k % len(_COLORS)]
        corners = to_corners(tube.boxes)
        union = union_corners(tube.boxes[None])[0]
        centers = tube.centers()
        for f in range(len(out)):
            _rect(out[f], union, color, step=3)
            _rect(out[f], corners[f], color)
            for a in range(f):
                _line(out[f], centers[a], centers[a + 1], color)
    return out


def cmd_render(args, cfg: RunConfig) -> int:
    clip = read_clip(args.clip)
    try:
        items = json.loads(Path(args.tubes).read_text(encoding="utf-8"))
        tubes = [Tube(np.asarray(i["boxes"], dtype=np.float64), score=float(i["score"])) for i in items]
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ValueError(f"{args.tubes}: not a tubes file") from exc
    t_len = len(tubes[0]) if tubes else cfg.model.gop_len
    gop = _gop_of(clip, args.start, t_len)
    if args.gt:
        tubes = tubes + list(gop.gt_tubes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, img in enumerate(render_frames(gop.frames, tubes)):
        write_ppm(out / f"render_{f:05d}.ppm", img)
    dump_json(cfg.to_flat(), out / "config.json")
    print(f"rendered {t_len} frames to {out}")
    return 0


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .verify import TOLERANCE, run_suite

    results = run_suite(cfg.train.seed, full_model=not args.nodes_only)
    ok = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        ok &= r.passed
        print(f"{status}  {r.name:<18} max_rel_err={r.report.max_rel_error:.3e}  "
              f"checked={r.report.checked}  restepped={r.report.restepped}  {r.seconds:.1f}s")
    print(f"gradcheck {'passed' if ok else 'FAILED'} (tolerance {TOLERANCE:g})")
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tracknet", description="Tube proposal detection on synthetic GoP clips.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def common(sp, seed=True):
        sp.add_argument("--config", help="JSON config file; flags override its values")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (value parsed as JSON when possible)")
        if seed:
            sp.add_argument("--seed", type=int, help="random seed")

    g = sub.add_parser("gen-data", help="generate synthetic clips")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--clips", type=int, help="number of clips")
    g.add_argument("--frames", type=int, help="frames per clip")
    g.add_argument("--objects", type=int, nargs=2, metavar=("MIN", "MAX"), help="objects per clip")
    g.set_defaults(func=cmd_gen_data)

    a = sub.add_parser("anchors", help="cluster dataset box shapes into anchor shapes")
    common(a)
    a.add_argument("--data", required=True, help="dataset directory")
    a.add_argument("--out", required=True, help="anchors.json path")
    a.add_argument("--num-anchor-shapes", dest="num_anchor_shapes", type=int, help="number of shapes M")
    a.set_defaults(func=cmd_anchors)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--out", required=True, help="output directory (model.tbnt, config.json, train_log.jsonl)")
    t.add_argument("--anchors", help="anchors.json (default: cluster the dataset)")
    t.add_argument("--iterations", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-drop-at", dest="lr_drop_at", type=int)
    t.add_argument("--skip-range", dest="skip_range", type=int, nargs=2, metavar=("LO", "HI"))
    t.add_argument("--no-flip", dest="no_flip", action="store_true", help="disable flip augmentation")
    t.add_argument("--tpn-mode", dest="tpn_mode", choices=("interpolate", "predict_all"))
    t.add_argument("--post-mode", dest="post_mode", choices=("interpolate", "predict_all"))
    t.add_argument("--anchor-sets", dest="anchor_sets", choices=("stationary", "tilted", "both"))
    t.add_argument("--motion-source", dest="motion_source", choices=("estimate", "gt"))
    t.add_argument("--num-anchor-shapes", dest="num_anchor_shapes", type=int)
    t.add_argument("--gop-len", dest="gop_len", type=int)
    t.add_argument("--quiet", action="store_true", help="no progress on stderr")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="frame-level AP/AR report")
    common(e, seed=False)
    e.add_argument("--data", required=True)
    e.add_argument("--model", required=True, help="model.tbnt (config.json beside it unless --config)")
    e.add_argument("--report", required=True, help="report JSON path")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("detect", help="detect tubes in one GoP of a clip")
    common(d, seed=False)
    d.add_argument("--model", required=True)
    d.add_argument("--clip", required=True, help="clip directory")
    d.add_argument("--out", required=True, help="tubes.json path")
    d.add_argument("--start", type=int, default=0, help="first frame of the GoP")
    d.set_defaults(func=cmd_detect)

    r = sub.add_parser("render", help="draw tubes and tracklets onto frames (P6 images)")
    common(r, seed=False)
    r.add_argument("--clip", required=True)
    r.add_argument("--tubes", required=True, help="tubes.json from detect")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--start", type=int, default=0)
    r.add_argument("--gt", action="store_true", help="also draw ground-truth tubes")
    r.set_defaults(func=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference verification of every node kind and the model")
    common(c)
    c.add_argument("--nodes-only", dest="nodes_only", action="store_true", help="skip the full-model check")
    c.set_defaults(func=cmd_gradcheck)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        overrides = _overrides(args)
        if args.command in ("eval", "detect"):
            cfg = _model_config(Path(args.model), args.config, overrides)
        else:
            cfg = load_config(args.config, overrides)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args, cfg)
    except (OSError, ValueError, RuntimeError, FloatingPointError) as exc:
        print(f"tracknet {args.command}: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
