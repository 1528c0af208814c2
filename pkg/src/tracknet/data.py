"""Synthetic clips, clip files on disk, GoP sampling and motion fields.

On disk a clip is a directory of binary PPM frames ``frame_00001.ppm`` ...
plus ``clip.json``::

    {"width": W, "height": H,
     "frames": [{"index": 1, "objects": [{"track_id": 0, "class": 1,
                                          "bbox": [cx, cy, w, h]}]}, ...]}

with normalized boxes.  Unknown fields are ignored when reading.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import kernels
from .anchors import MotionField, dominant_motion_batch
from .geometry import Tube

MIN_VISIBLE_AREA = 1e-4


class ClipError(Exception):
    """Base class for clip I/O problems."""


class ClipNotFoundError(ClipError, FileNotFoundError):
    pass


class FrameFormatError(ClipError):
    pass


class AnnotationSchemaError(ClipError):
    pass


class FrameObject(NamedTuple):
    track_id: int
    class_id: int
    box: tuple[float, float, float, float]


@dataclass
class GoPClip:
    """``T`` RGB frames with per-frame annotations.

    ``gt_tubes`` holds the tracks visible in every frame; ``objects`` keeps
    every per-frame annotation, including tracks that enter or leave.
    """

    frames: np.ndarray
    objects: list[list[FrameObject]]
    width: int = field(init=False)
    height: int = field(init=False)
    gt_tubes: list[Tube] = field(init=False)

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.uint8)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ValueError(f"frames must be (T, H, W, 3), got {self.frames.shape}")
        if len(self.objects) != len(self.frames):
            raise ValueError("need one annotation list per frame")
        self.height, self.width = self.frames.shape[1:3]
        self.gt_tubes = tubes_from_objects(self.objects)

    def __len__(self) -> int:
        return len(self.frames)

    def subclip(self, indices: Sequence[int]) -> "GoPClip":
        idx = list(indices)
        return GoPClip(self.frames[idx], [self.objects[i] for i in idx])

    def flipped(self) -> "GoPClip":
        objs = [[FrameObject(o.track_id, o.class_id, (1.0 - o.box[0],) + tuple(o.box[1:]))
                 for o in frame] for frame in self.objects]
        return GoPClip(self.frames[:, :, ::-1].copy(), objs)


def tubes_from_objects(objects: list[list[FrameObject]]) -> list[Tube]:
    if not objects:
        return []
    per_track: dict[int, list[FrameObject]] = {}
    for frame in objects:
        for o in frame:
            per_track.setdefault(o.track_id, []).append(o)
    tubes = []
    for tid in sorted(per_track):
        seq = per_track[tid]
        if len(seq) == len(objects):
            tubes.append(Tube(np.array([o.box for o in seq]), class_id=seq[0].class_id, track_id=tid))
    return tubes


# ---------------------------------------------------------------------------
# synthetic generation


def _value_noise(rng: np.random.Generator, h: int, w: int, cell: int) -> np.ndarray:
    gh, gw = h // cell + 2, w // cell + 2
    grid = rng.random((gh, gw, 3))
    ys = np.arange(h) / cell
    xs = np.arange(w) / cell
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x0 + 1] * fx
    bot = grid[y0 + 1][:, x0] * (1 - fx) + grid[y0 + 1][:, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


def _background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = _value_noise(rng, h, w, 16)
    fine = _value_noise(rng, h, w, 4)
    gray = 0.6 * coarse.mean(axis=2, keepdims=True) + 0.4 * fine
    return np.clip(70 + 110 * gray, 0, 255)


def _palette(rng: np.random.Generator, n: int) -> np.ndarray:
    hues = (rng.random() + np.arange(n) / max(n, 1)) % 1.0
    out = []
    for hue in hues:
        k = (np.array([5.0, 3.0, 1.0]) + hue * 6) % 6
        rgb = 1 - np.clip(np.minimum(k, 4 - k), 0, 1)
        out.append(40 + 200 * rgb)
    return np.array(out)


def trajectory(x0: float, y0: float, vx: float, vy: float, acc=(0.0, 0.0),
               t_len: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Whole-pixel top-left positions for frames ``0 .. t_len-1`` under constant acceleration."""
    t = np.arange(t_len, dtype=np.float64)
    xs = np.rint(x0 + vx * t + 0.5 * acc[0] * t * t).astype(int)
    ys = np.rint(y0 + vy * t + 0.5 * acc[1] * t * t).astype(int)
    return xs, ys


def generate_clip(seed: int, h: int = 128, w: int = 128, t_len: int = 8, n_objects: int = 2,
                  speed_range: tuple[float, float] = (1.0, 4.0),
                  size_range: tuple[int, int] = (12, 28), curvature: float = 0.0,
                  n_classes: int = 1, keep_inside: bool = True) -> GoPClip:
    """Render moving textured rectangles over seeded value noise.

    Each object has a random constant velocity (``speed_range`` px/frame)
    plus a constant acceleration of up to ``curvature`` px/frame^2 per axis.
    Positions are rounded to whole pixels; annotations are the rendered
    rectangles.  With ``keep_inside`` the trajectory is re-drawn until the
    object stays fully visible; otherwise boxes are clipped to the frame and
    dropped below ``MIN_VISIBLE_AREA`` normalized area.
    """
    if h < 8 or w < 8 or t_len < 1 or n_objects < 0 or n_classes < 1:
        raise ValueError("invalid clip dimensions or counts")
    lo_v, hi_v = speed_range
    lo_s, hi_s = size_range
    if not (0 <= lo_v <= hi_v) or not (1 <= lo_s <= hi_s) or curvature < 0:
        raise ValueError(f"invalid ranges: speed {speed_range}, size {size_range}, curvature {curvature}")
    if keep_inside and (hi_s >= min(h, w)):
        raise ValueError("object sizes must be smaller than the frame")
    rng = np.random.default_rng(seed)
    frames = np.repeat(_background(rng, h, w)[None], t_len, axis=0)
    colors = _palette(rng, n_objects)
    objects: list[list[FrameObject]] = [[] for _ in range(t_len)]

    for k in range(n_objects):
        ow, oh = (int(v) for v in rng.integers(lo_s, hi_s + 1, size=2))
        cls = int(rng.integers(1, n_classes + 1))
        for _ in range(1000):
            angle = rng.uniform(0, 2 * math.pi)
            speed = rng.uniform(lo_v, hi_v)
            acc = rng.uniform(-curvature, curvature, size=2) if curvature > 0 else np.zeros(2)
            x0 = rng.uniform(0, w - ow)
            y0 = rng.uniform(0, h - oh)
            xs, ys = trajectory(x0, y0, speed * math.cos(angle), speed * math.sin(angle), acc, t_len)
            inside = xs.min() >= 0 and ys.min() >= 0 and xs.max() + ow <= w and ys.max() + oh <= h
            if inside or not keep_inside:
                break
        else:
            raise ValueError("could not place an object inside the frame; shrink speed or size")
        texture = rng.uniform(-25, 25, size=(oh, ow, 1))
        patch = np.clip(colors[k][None, None] + texture, 0, 255)
        for f in range(t_len):
            x1, y1 = max(xs[f], 0), max(ys[f], 0)
            x2, y2 = min(xs[f] + ow, w), min(ys[f] + oh, h)
            if x2 <= x1 or y2 <= y1:
                continue
            frames[f, y1:y2, x1:x2] = patch[y1 - ys[f] : y2 - ys[f], x1 - xs[f] : x2 - xs[f]]
            box = ((x1 + x2) / 2 / w, (y1 + y2) / 2 / h, (x2 - x1) / w, (y2 - y1) / h)
            if box[2] * box[3] >= MIN_VISIBLE_AREA:
                objects[f].append(FrameObject(k, cls, box))

    return GoPClip(np.rint(frames).astype(np.uint8), objects)


def clip_seed(seed: int, index: int) -> int:
    """Independent per-clip seed derived from a dataset seed."""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def generate_clips(n: int, seed: int, objects: tuple[int, int] = (1, 4), **kwargs) -> list[GoPClip]:
    """``n`` clips with an object count drawn uniformly from ``objects``; extra keywords go to :func:`generate_clip`."""
    lo, hi = objects
    if n < 0 or not 0 <= lo <= hi:
        raise ValueError(f"invalid clip count {n} or object range {objects}")
    rng = np.random.default_rng(seed)
    counts = rng.integers(lo, hi + 1, size=n)
    return [generate_clip(clip_seed(seed, i), n_objects=int(k), **kwargs) for i, k in enumerate(counts)]


# ---------------------------------------------------------------------------
# motion fields


def cell_centers_px(size: int, cells: int) -> np.ndarray:
    return np.floor((np.arange(cells) + 0.5) * size / cells).astype(np.int64)


def gt_motion_field(clip: GoPClip, grid_w: int, grid_h: int) -> MotionField:
    """Per transition, the motion of the topmost object covering each cell center.

    Transitions are aggregated per axis with the dominant-motion vote.
    """
    t_len = len(clip)
    if t_len < 2:
        return MotionField.zeros(grid_w, grid_h)
    w, h = clip.width, clip.height
    cx = (cell_centers_px(w, grid_w) + 0.5) / w
    cy = (cell_centers_px(h, grid_h) + 0.5) / h
    gx, gy = np.meshgrid(cx, cy)
    mvx = np.zeros((grid_h, grid_w, t_len - 1))
    mvy = np.zeros((grid_h, grid_w, t_len - 1))
    for f in range(t_len - 1):
        nxt = {o.track_id: o for o in clip.objects[f + 1]}
        for o in clip.objects[f]:  # render order, later objects on top
            if o.track_id not in nxt:
                continue
            cx0, cy0, bw, bh = o.box
            cover = (np.abs(gx - cx0) <= bw / 2) & (np.abs(gy - cy0) <= bh / 2)
            n = nxt[o.track_id].box
            mvx[..., f][cover] = n[0] - cx0
            mvy[..., f][cover] = n[1] - cy0
    agg_x = dominant_motion_batch(mvx.reshape(-1, t_len - 1)).reshape(grid_h, grid_w)
    agg_y = dominant_motion_batch(mvy.reshape(-1, t_len - 1)).reshape(grid_h, grid_w)
    return MotionField(grid_w, grid_h, agg_x, agg_y)


def block_motion_transitions(frames: np.ndarray, grid_w: int, grid_h: int, search_radius: int = 4,
                             block: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Per-transition pixel displacements ``(grid_h, grid_w, T-1)`` for x and y."""
    frames = np.asarray(frames)
    if frames.ndim == 3:
        frames = frames[..., None]
    t_len, h, w = frames.shape[:3]
    if t_len < 2:
        raise ValueError("block matching needs at least two frames")
    pad = search_radius + block
    padded = np.pad(frames.astype(np.float32), ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="edge")
    ys = cell_centers_px(h, grid_h) + pad
    xs = cell_centers_px(w, grid_w) + pad
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    gy = np.ascontiguousarray(gy.ravel())
    gx = np.ascontiguousarray(gx.ravel())
    dx_all = np.zeros((grid_h * grid_w, t_len - 1))
    dy_all = np.zeros((grid_h * grid_w, t_len - 1))
    for f in range(t_len - 1):
        dy, dx = kernels.block_match(np.ascontiguousarray(padded[f]), np.ascontiguousarray(padded[f + 1]),
                                     gy, gx, int(search_radius), int(block))
        dx_all[:, f] = dx
        dy_all[:, f] = dy
    return dx_all.reshape(grid_h, grid_w, -1), dy_all.reshape(grid_h, grid_w, -1)


def estimate_motion_block_matching(frames: Sequence[np.ndarray] | np.ndarray, grid: tuple[int, int],
                                   search_radius: int = 4, block: int = 8) -> MotionField:
    """Exhaustive SAD block search per cell and transition, then dominant-motion vote.

    ``grid`` is ``(grid_w, grid_h)``.  Returned motion is normalized by the
    frame size; search saturates at ``search_radius`` pixels.
    """
    if not isinstance(frames, np.ndarray):
        shapes = {np.shape(f) for f in frames}
        if len(shapes) > 1:
            raise ValueError(f"frames differ in size: {sorted(shapes)}")
        frames = np.stack(frames)
    grid_w, grid_h = grid
    h, w = frames.shape[1:3]
    dx, dy = block_motion_transitions(frames, grid_w, grid_h, search_radius, block)
    n = dx.shape[-1]
    mvx = dominant_motion_batch(dx.reshape(-1, n)).reshape(grid_h, grid_w) / w
    mvy = dominant_motion_batch(dy.reshape(-1, n)).reshape(grid_h, grid_w) / h
    return MotionField(grid_w, grid_h, mvx, mvy)


# ---------------------------------------------------------------------------
# GoP sampling


def sample_gop_indices(start: int, t_len: int, s: int, total_frames: int) -> list[int]:
    if start < 0 or s < 0 or t_len < 1:
        raise ValueError(f"invalid sampling request start={start}, t_len={t_len}, s={s}")
    last = start + (t_len - 1) * (s + 1)
    if last >= total_frames:
        raise ValueError(f"GoP ending at frame {last} does not fit in {total_frames} frames")
    return list(range(start, last + 1, s + 1))


def draw_gop(rng: np.random.Generator, t_len: int, total_frames: int,
             skip_range: tuple[int, int] = (0, 5)) -> list[int]:
    """Random start and skip factor; skips that cannot fit are excluded from the draw."""
    lo, hi = skip_range
    fits = [s for s in range(lo, hi + 1) if (t_len - 1) * (s + 1) < total_frames]
    if not fits:
        raise ValueError(f"no skip factor in {skip_range} fits a {total_frames}-frame clip")
    s = int(fits[rng.integers(len(fits))])
    span = (t_len - 1) * (s + 1)
    start = int(rng.integers(total_frames - span))
    return sample_gop_indices(start, t_len, s, total_frames)


# ---------------------------------------------------------------------------
# clip I/O

_FRAME_NAME = "frame_{:05d}.ppm"


def write_ppm(path: Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    h, w = image.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


_PPM_HEADER = re.compile(rb"P6(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    buf = path.read_bytes()
    m = _PPM_HEADER.match(buf)
    if not m:
        raise FrameFormatError(f"{path.name}: not a binary P6 image")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise FrameFormatError(f"{path.name}: only 8-bit PPM is supported (maxval {maxval})")
    data = buf[m.end():]
    if len(data) < w * h * 3:
        raise FrameFormatError(f"{path.name}: truncated pixel data ({len(data)} of {w * h * 3} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3).reshape(h, w, 3).copy()


def write_clip(clip: GoPClip, path: str | Path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(clip.frames):
        write_ppm(path / _FRAME_NAME.format(i + 1), frame)
    doc = {
        "width": clip.width,
        "height": clip.height,
        "frames": [
            {"index": i + 1,
             "objects": [{"track_id": o.track_id, "class": o.class_id, "bbox": list(o.box)} for o in frame]}
            for i, frame in enumerate(clip.objects)
        ],
    }
    (path / "clip.json").write_text(json.dumps(doc, indent=1), encoding="utf-8")


def read_clip(path: str | Path) -> GoPClip:
    path = Path(path)
    ann = path / "clip.json"
    if not path.is_dir() or not ann.is_file():
        raise ClipNotFoundError(f"no clip.json in {path}")
    try:
        doc = json.loads(ann.read_text(encoding="utf-8"))
        width, height, frame_docs = int(doc["width"]), int(doc["height"]), doc["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise AnnotationSchemaError(f"{ann}: malformed annotation file ({exc})") from exc
    frames, objects = [], []
    for fd in sorted(frame_docs, key=lambda d: d["index"]):
        idx = int(fd["index"])
        fpath = path / _FRAME_NAME.format(idx)
        if not fpath.is_file():
            raise ClipNotFoundError(f"missing frame file {fpath.name}")
        img = read_ppm(fpath)
        if img.shape[:2] != (height, width):
            raise FrameFormatError(f"{fpath.name}: size {img.shape[1]}x{img.shape[0]} != {width}x{height}")
        frames.append(img)
        objs = []
        for od in fd.get("objects", []):
            try:
                tid, cls = int(od["track_id"]), int(od["class"])
                box = tuple(float(v) for v in od["bbox"])
            except (KeyError, TypeError, ValueError) as exc:
                raise AnnotationSchemaError(f"frame {idx}: malformed object ({exc})") from exc
            if len(box) != 4 or not all(0.0 <= v <= 1.0 for v in box) or box[2] <= 0 or box[3] <= 0:
                raise AnnotationSchemaError(f"frame {idx}, track {tid}: bbox {list(box)} outside [0, 1]")
            objs.append(FrameObject(tid, cls, box))
        objects.append(objs)
    if not frames:
        raise AnnotationSchemaError(f"{ann}: no frames listed")
    return GoPClip(np.stack(frames), objects)


def list_clips(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "clip.json").is_file():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "clip.json").is_file())
