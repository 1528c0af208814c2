import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from tracknet.data import (AnnotationSchemaError, ClipNotFoundError, FrameFormatError, FrameObject,
                           GoPClip, _background, block_motion_transitions, cell_centers_px, draw_gop,
                           estimate_motion_block_matching, generate_clip, generate_clips, gt_motion_field,
                           list_clips, read_clip, sample_gop_indices, trajectory, write_clip)


def moving_rect_clip(step=(3, -2), t_len=8, size=(26, 30), start=(30, 60), seed=0, hw=128):
    """Textured rectangle translating by a whole number of pixels per frame."""
    rng = np.random.default_rng(seed)
    bg = _background(rng, hw, hw)
    ow, oh = size
    tex = rng.uniform(40, 220, (oh, ow, 3))
    frames, objs = [], []
    x, y = start
    for _ in range(t_len):
        fr = bg.copy()
        fr[y:y + oh, x:x + ow] = tex
        frames.append(np.rint(fr).astype(np.uint8))
        objs.append([FrameObject(0, 1, ((x + ow / 2) / hw, (y + oh / 2) / hw, ow / hw, oh / hw))])
        x += step[0]
        y += step[1]
    return GoPClip(np.stack(frames), objs)


def clean_cells(clip, grid, radius, block):
    """Cells whose search window never straddles an object edge."""
    w, h = clip.width, clip.height
    cs_x, cs_y = cell_centers_px(w, grid), cell_centers_px(h, grid)
    clean = np.ones((grid, grid), dtype=bool)
    half, reach = block // 2, block // 2 + radius
    for f in range(len(clip) - 1):
        rects = []
        for o in (clip.objects[f][0], clip.objects[f + 1][0]):
            cx, cy, bw, bh = o.box
            rects.append(((cx - bw / 2) * w, (cy - bh / 2) * h, (cx + bw / 2) * w, (cy + bh / 2) * h))
        x0, y0, x1, y1 = rects[0]
        for i, yc in enumerate(cs_y):
            for j, xc in enumerate(cs_x):
                inside = xc - half >= x0 and xc + half <= x1 and yc - half >= y0 and yc + half <= y1
                away = all(xc + reach <= a0 or xc - reach >= a1 or yc + reach <= b0 or yc - reach >= b1
                           for a0, b0, a1, b1 in rects)
                clean[i, j] &= inside or away
    return clean


class TestGenerator:
    def test_deterministic(self):
        a, b = generate_clip(11, n_objects=3), generate_clip(11, n_objects=3)
        assert a.frames.tobytes() == b.frames.tobytes()
        assert a.objects == b.objects

    def test_empty(self):
        c = generate_clip(4, n_objects=0)
        assert c.gt_tubes == [] and c.frames.shape == (8, 128, 128, 3)

    def test_kinematics(self):
        xs, ys = trajectory(10, 20, 2.0, 0.0, t_len=5)
        assert xs[4] == 18 and np.all(ys == 20)

    def test_invalid_ranges(self):
        with pytest.raises(ValueError):
            generate_clip(0, speed_range=(3.0, 1.0))
        with pytest.raises(ValueError):
            generate_clip(0, size_range=(0, 5))
        with pytest.raises(ValueError):
            generate_clip(0, n_objects=-1)

    def test_track_ids_unique(self):
        c = generate_clip(2, n_objects=4)
        for frame in c.objects:
            ids = [o.track_id for o in frame]
            assert len(ids) == len(set(ids))

    @pytest.mark.parametrize("seed", range(6))
    def test_boxes_bound_rendered_pixels(self, seed):
        # the background is drawn first from the seed, so the empty clip isolates the object
        obj = generate_clip(seed, n_objects=1, speed_range=(1.0, 3.0))
        bg = generate_clip(seed, n_objects=0)
        for f in range(len(obj)):
            ys, xs = np.nonzero(np.any(obj.frames[f] != bg.frames[f], axis=2))
            (o,) = obj.objects[f]
            cx, cy, bw, bh = o.box
            x0, x1 = round((cx - bw / 2) * 128), round((cx + bw / 2) * 128)
            y0, y1 = round((cy - bh / 2) * 128), round((cy + bh / 2) * 128)
            assert (xs.min(), xs.max() + 1, ys.min(), ys.max() + 1) == (x0, x1, y0, y1)

    def test_objects_may_leave_frame(self):
        c = generate_clip(3, n_objects=3, speed_range=(6, 8), size_range=(10, 14), keep_inside=False,
                          t_len=16)
        for frame in c.objects:
            for o in frame:
                cx, cy, w, h = o.box
                assert w * h >= 1e-4
                assert cx - w / 2 >= -1e-9 and cx + w / 2 <= 1 + 1e-9

    def test_generate_clips_counts(self):
        clips = generate_clips(5, seed=3, objects=(1, 4), t_len=4)
        assert len(clips) == 5
        assert all(1 <= len(c.gt_tubes) <= 4 for c in clips)
        again = generate_clips(5, seed=3, objects=(1, 4), t_len=4)
        assert all(a.frames.tobytes() == b.frames.tobytes() for a, b in zip(clips, again))


class TestMotion:
    def test_static_gt_zero(self):
        c = generate_clip(1, n_objects=2, speed_range=(0.0, 0.0))
        f = gt_motion_field(c, 32, 32)
        assert np.all(f.mvx == 0) and np.all(f.mvy == 0)

    def test_single_object_gt(self):
        c = moving_rect_clip(step=(2, 0))
        f = gt_motion_field(c, 32, 32)
        # cell centres land on pixels 4k+2; the object starts at x 30..56, y 60..90
        assert f.mvx[18, 10] == pytest.approx(2 / 128) and f.mvy[18, 10] == 0
        assert f.mvx[0, 0] == 0

    def test_topmost_object_wins(self):
        bg = np.zeros((2, 64, 64, 3), dtype=np.uint8)
        a = FrameObject(0, 1, (0.5, 0.5, 0.5, 0.5))
        b = FrameObject(1, 1, (0.5, 0.5, 0.25, 0.25))
        a2 = FrameObject(0, 1, (0.5 + 2 / 64, 0.5, 0.5, 0.5))
        b2 = FrameObject(1, 1, (0.5, 0.5 + 3 / 64, 0.25, 0.25))
        f = gt_motion_field(GoPClip(bg, [[a, b], [a2, b2]]), 16, 16)
        assert f.mvy[8, 8] == pytest.approx(3 / 64) and f.mvx[8, 8] == 0
        assert f.mvx[5, 5] == pytest.approx(2 / 64)

    def test_static_block_matching_zero(self):
        bg = _background(np.random.default_rng(0), 64, 64)
        frames = np.repeat(np.rint(bg)[None].astype(np.uint8), 3, axis=0)
        f = estimate_motion_block_matching(frames, (16, 16))
        assert np.all(f.mvx == 0) and np.all(f.mvy == 0)

    def test_global_translation(self):
        bg = np.rint(_background(np.random.default_rng(1), 96, 96)).astype(np.uint8)
        frames = np.stack([bg, np.roll(bg, 3, axis=1)])
        dx, dy = block_motion_transitions(frames, 12, 12, search_radius=4, block=8)
        interior = (slice(2, -2), slice(2, -2))
        assert np.all(dx[interior] == 3) and np.all(dy[interior] == 0)

    def test_saturates_at_radius(self):
        bg = np.rint(_background(np.random.default_rng(2), 96, 96)).astype(np.uint8)
        frames = np.stack([bg, np.roll(bg, 6, axis=1)])
        dx, _ = block_motion_transitions(frames, 12, 12, search_radius=4, block=8)
        assert np.all(np.abs(dx) <= 4)
        assert np.all(dx[2:-2, 2:-2] == 4)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            estimate_motion_block_matching([np.zeros((8, 8, 3)), np.zeros((8, 9, 3))], (2, 2))

    @pytest.mark.parametrize("step", [(3, -2), (-2, 1), (4, 4), (0, -3)])
    def test_matches_gt_field(self, step):
        c = moving_rect_clip(step=step, start=(40, 50))
        g = gt_motion_field(c, 32, 32)
        e = estimate_motion_block_matching(c.frames, (32, 32), 4, 8)
        clean = clean_cells(c, 32, 4, 8)
        assert clean.mean() > 0.7
        assert np.max(np.abs(g.mvx - e.mvx)[clean]) * 128 <= 1
        assert np.max(np.abs(g.mvy - e.mvy)[clean]) * 128 <= 1


class TestSampling:
    def test_skip_one(self):
        assert sample_gop_indices(0, 8, 1, 100) == [0, 2, 4, 6, 8, 10, 12, 14]

    def test_gap_four_sequence(self):
        # a gap of four frames is skip factor 3 under the gap = s + 1 rule
        assert sample_gop_indices(13, 8, 3, 100) == [13, 17, 21, 25, 29, 33, 37, 41]
        assert sample_gop_indices(13, 8, 4, 100) == [13, 18, 23, 28, 33, 38, 43, 48]

    def test_consecutive(self):
        assert sample_gop_indices(5, 4, 0, 20) == [5, 6, 7, 8]

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            sample_gop_indices(10, 8, 1, 24)

    @given(st.integers(0, 30), st.integers(1, 10), st.integers(0, 5))
    def test_constant_gap(self, start, t, s):
        idx = sample_gop_indices(start, t, s, start + (t - 1) * (s + 1) + 1)
        assert len(idx) == t and all(b - a == s + 1 for a, b in zip(idx, idx[1:]))

    def test_draw_excludes_unfit_skips(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            idx = draw_gop(rng, 8, 16)
            assert idx[-1] < 16 and len({b - a for a, b in zip(idx, idx[1:])}) == 1
            assert idx[1] - idx[0] in (1, 2)

    def test_draw_impossible(self):
        with pytest.raises(ValueError):
            draw_gop(np.random.default_rng(0), 8, 7)


class TestClipIO:
    def test_roundtrip(self, tmp_path):
        c = generate_clip(5, n_objects=3, t_len=4)
        write_clip(c, tmp_path / "c")
        back = read_clip(tmp_path / "c")
        assert np.array_equal(back.frames, c.frames)
        assert back.objects == c.objects
        assert (tmp_path / "c" / "frame_00001.ppm").is_file()
        assert (tmp_path / "c" / "frame_00004.ppm").is_file()

    def test_truncated_frame(self, tmp_path):
        write_clip(generate_clip(5, t_len=3), tmp_path / "c")
        p = tmp_path / "c" / "frame_00002.ppm"
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(FrameFormatError, match="frame_00002.ppm"):
            read_clip(tmp_path / "c")

    def test_bad_magic(self, tmp_path):
        write_clip(generate_clip(5, t_len=2), tmp_path / "c")
        (tmp_path / "c" / "frame_00001.ppm").write_bytes(b"P3\n1 1\n255\n0 0 0")
        with pytest.raises(FrameFormatError):
            read_clip(tmp_path / "c")

    def test_bbox_outside(self, tmp_path):
        write_clip(generate_clip(5, t_len=2, n_objects=1), tmp_path / "c")
        ann = tmp_path / "c" / "clip.json"
        doc = json.loads(ann.read_text())
        doc["frames"][1]["objects"][0]["bbox"][0] = 1.3
        ann.write_text(json.dumps(doc))
        with pytest.raises(AnnotationSchemaError, match="frame 2, track 0"):
            read_clip(tmp_path / "c")

    def test_unknown_fields_ignored(self, tmp_path):
        c = generate_clip(6, t_len=2, n_objects=1)
        write_clip(c, tmp_path / "c")
        ann = tmp_path / "c" / "clip.json"
        doc = json.loads(ann.read_text())
        doc["note"] = "extra"
        doc["frames"][0]["objects"][0]["color"] = "red"
        ann.write_text(json.dumps(doc))
        assert read_clip(tmp_path / "c").objects == c.objects

    def test_missing(self, tmp_path):
        with pytest.raises(ClipNotFoundError):
            read_clip(tmp_path / "nothing")
        write_clip(generate_clip(5, t_len=2), tmp_path / "c")
        (tmp_path / "c" / "frame_00002.ppm").unlink()
        with pytest.raises(ClipNotFoundError):
            read_clip(tmp_path / "c")

    def test_list_clips(self, tmp_path):
        for name in ("clip_00001", "clip_00000"):
            write_clip(generate_clip(1, t_len=2), tmp_path / name)
        (tmp_path / "junk").mkdir()
        assert [p.name for p in list_clips(tmp_path)] == ["clip_00000", "clip_00001"]
        assert list_clips(tmp_path / "clip_00000") == [tmp_path / "clip_00000"]

    def test_flip(self):
        c = generate_clip(8, n_objects=2, t_len=3)
        f = c.flipped()
        assert np.array_equal(f.frames[:, :, ::-1], c.frames)
        for a, b in zip(c.gt_tubes, f.gt_tubes):
            assert np.allclose(b.boxes[:, 0], 1 - a.boxes[:, 0])
