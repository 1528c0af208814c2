"""Network assembly, proposal generation, refinement and GoP detection."""

import numpy as np
import pytest
from conftest import small_clip, small_config, small_specs
from hypothesis import given, settings
from hypothesis import strategies as st

from tracknet.anchors import AnchorSpec
from tracknet.encoding import decode_array, expand_endpoint_offsets, interpolation_kernel, smoothness_penalty
from tracknet.geometry import tube_iou_matrix
from tracknet.pipeline import (ModelConfig, TrackNet, anchor_tubes, build_network, detect_gop,
                               generate_proposals, load_model, post_tpn_refine, save_model,
                               tpn_heads_forward)
from tracknet.pipeline.detect import propose, select_detections


def _spec_list(m):
    return [AnchorSpec(0.05 + 0.02 * i, 0.06 + 0.015 * i) for i in range(m)]


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert (cfg.gop_len, cfg.image_h, cfg.image_w) == (8, 128, 128)
        assert (cfg.grid_h, cfg.grid_w) == (32, 32)
        assert cfg.num_anchor_shapes == 9
        assert cfg.tpn_mode == "interpolate" and cfg.post_mode == "predict_all"
        assert cfg.test_proposal_count == 300
        assert cfg.proposal_batch == 256 and cfg.proposal_max_positive == 128

    @pytest.mark.parametrize("bad", [dict(gop_len=1), dict(image_h=130), dict(squash_channels=0),
                                     dict(tpn_mode="spline"), dict(loss_weights=(1, 1, 1))])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            ModelConfig(**bad)

    def test_dict_roundtrip(self):
        cfg = small_config(post_mode="interpolate")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_wrong_spec_count(self):
        with pytest.raises(ValueError, match="anchor shapes"):
            TrackNet(small_config(), small_specs()[:1])


class TestHeads:
    @pytest.mark.parametrize("mode,per_anchor", [("interpolate", 8), ("predict_all", 32)])
    def test_offset_channels(self, mode, per_anchor):
        cfg = ModelConfig(tpn_mode=mode, stream_channels=2, squash_channels=2, fc_width=8)
        m = TrackNet(cfg, _spec_list(9))
        assert m.tpn.reg.weight.shape[-1] == per_anchor * cfg.anchors_per_cell
        assert cfg.anchors_per_cell == 18

    @pytest.mark.parametrize("t_len", [2, 4, 8, 16])
    @pytest.mark.parametrize("m", [1, 3, 9])
    def test_parameter_ratio(self, t_len, m):
        def count(mode):
            cfg = ModelConfig(gop_len=t_len, num_anchor_shapes=m, tpn_mode=mode, stream_channels=2,
                              squash_channels=2, fc_width=8)
            head = TrackNet(cfg, _spec_list(m)).tpn.reg
            return head.weight.data.size + head.bias.data.size

        from fractions import Fraction

        assert Fraction(count("interpolate"), count("predict_all")) == Fraction(2, t_len)

    def test_same_seed_identical(self):
        a = TrackNet(small_config(), small_specs(), seed=5).state_dict()
        b = TrackNet(small_config(), small_specs(), seed=5).state_dict()
        c = TrackNet(small_config(), small_specs(), seed=6).state_dict()
        assert list(a) == list(b)
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)

    def test_objectness_map(self):
        cfg = ModelConfig(stream_channels=2, squash_channels=4, fc_width=8)
        m = TrackNet(cfg, _spec_list(9))
        clip = small_clip(0, t_len=8)
        frames = np.zeros((8, 128, 128, 3), dtype=np.uint8)
        frames[:, :64, :64] = clip.frames
        v, _ = m.features(m.prepare_frames(frames))
        probs, reg = tpn_heads_forward(m, v)
        assert probs.shape == (32, 32, 18)
        assert np.all((probs > 0) & (probs < 1))
        assert reg.shape == (32, 32, 8 * 18)
        assert np.all(np.isfinite(reg))

    def test_wrong_frame_shape(self):
        m = TrackNet(small_config(), small_specs())
        with pytest.raises(ValueError, match="frames of shape"):
            m.prepare_frames(np.zeros((4, 32, 32, 3)))


class TestProposals:
    def _anchors(self, n=20, t_len=4, seed=0):
        rng = np.random.default_rng(seed)
        c = rng.uniform(0.2, 0.8, size=(n, 1, 2)).repeat(t_len, axis=1)
        s = rng.uniform(0.05, 0.2, size=(n, 1, 2)).repeat(t_len, axis=1)
        return np.concatenate([c, s], axis=-1)

    def test_argmax(self):
        anchors = self._anchors()
        scores = np.full(20, 1e-4)
        scores[7] = 0.99
        offsets = np.random.default_rng(1).normal(0, 0.1, size=(20, 4, 4))
        props = generate_proposals(scores, offsets, anchors, top_k=1, nms_thr=0.7)
        assert len(props) == 1
        np.testing.assert_array_equal(props[0].boxes, decode_array(anchors[7:8], offsets[7:8])[0])
        assert props[0].score == 0.99

    def test_duplicates_collapse(self):
        anchors = np.repeat(self._anchors(1), 5, axis=0)
        scores = np.array([0.5, 0.9, 0.7, 0.6, 0.8])
        props = generate_proposals(scores, np.zeros((5, 4, 4)), anchors, top_k=10, nms_thr=0.7)
        assert len(props) == 1 and props[0].score == 0.9

    def test_sorted_and_truncated(self):
        anchors = self._anchors(40)
        scores = np.random.default_rng(2).random(40)
        boxes, s = propose(scores, np.zeros((40, 4, 4)), anchors, top_k=5, nms_thr=0.7)
        assert len(s) <= 5
        assert np.all(np.diff(s) <= 0)
        iou = tube_iou_matrix(boxes, boxes)
        assert np.all(iou[np.triu_indices(len(boxes), 1)] < 0.7)

    def test_top_k_positive(self):
        with pytest.raises(ValueError):
            propose(np.ones(2), np.zeros((2, 4, 4)), self._anchors(2), top_k=0, nms_thr=0.7)

    @pytest.mark.parametrize("seed", range(10))
    def test_anchor_order_invariance(self, seed):
        rng = np.random.default_rng(seed)
        anchors = self._anchors(60, seed=seed)
        scores = rng.permutation(60) / 60.0 + 0.001  # distinct scores
        offsets = rng.normal(0, 0.2, size=(60, 4, 4))
        perm = rng.permutation(60)
        a = propose(scores, offsets, anchors, 10, 0.6)
        b = propose(scores[perm], offsets[perm], anchors[perm], 10, 0.6)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


class TestAnchorSet:
    def test_stationary_then_tilted(self):
        cfg = small_config()
        anchors = anchor_tubes(cfg, small_specs(), None)
        a = cfg.anchors_per_cell
        assert anchors.shape == (cfg.grid_h * cfg.grid_w * a, cfg.gop_len, 4)
        cell = anchors[:a]
        # with a zero field the tilted copies coincide with the stationary ones
        np.testing.assert_array_equal(cell[:2], cell[2:])

    def test_single_sets(self):
        cfg = small_config(anchor_sets="stationary")
        assert anchor_tubes(cfg, small_specs(), None).shape[0] == 16 * 16 * 2


class TestRefine:
    def _model_and_v(self, post_mode="predict_all"):
        m = TrackNet(small_config(post_mode=post_mode), small_specs(), seed=1)
        v, _ = m.features(m.prepare_frames(small_clip(1).frames))
        return m, v

    @pytest.mark.parametrize("post_mode", ["predict_all", "interpolate"])
    def test_zero_offsets_identity(self, post_mode):
        m, v = self._model_and_v(post_mode)
        m.post.reg.weight.data[...] = 0
        m.post.reg.bias.data[...] = 0
        props = TestProposals()._anchors(6)
        _, refined = post_tpn_refine(m, v, props)
        np.testing.assert_array_equal(refined, props)

    def test_distribution_sums_to_one(self):
        m, v = self._model_and_v()
        probs, refined = post_tpn_refine(m, v, TestProposals()._anchors(9))
        assert probs.shape == (9, 2) and refined.shape == (9, 4, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_empty(self):
        m, v = self._model_and_v()
        probs, refined = post_tpn_refine(m, v, np.zeros((0, 4, 4)))
        assert probs.shape == (0, 2) and refined.shape == (0, 4, 4)


class TestDetect:
    @pytest.mark.parametrize("seed", range(3))
    def test_untrained_invariants(self, seed):
        cfg = small_config(motion_source="estimate")
        m = TrackNet(cfg, small_specs(), seed=seed)
        dets = detect_gop(m, small_clip(seed).frames)
        assert len(dets) <= cfg.test_proposal_count
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert 0.0 <= d.score <= 1.0
            assert d.class_id >= 1
            assert d.tracklet.shape == (cfg.gop_len, 2)
            np.testing.assert_array_equal(d.tracklet, d.tube.boxes[:, :2])
            assert np.all(d.tube.boxes[:, 2:] > 0)

    def test_wrong_frame_count(self):
        m = TrackNet(small_config(), small_specs())
        with pytest.raises(ValueError, match="expected 4 frames"):
            detect_gop(m, small_clip(0, t_len=5).frames)

    def test_background_dropped(self):
        probs = np.array([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4]])
        tubes = TestProposals()._anchors(3)
        dets = select_detections(probs, tubes, small_config())
        assert len(dets) == 1 and dets[0].score == 0.8

    def test_gt_field_with_clip(self):
        m = TrackNet(small_config(), small_specs())
        clip = small_clip(2)
        assert detect_gop(m, clip.frames, clip=clip) is not None


class TestSmoothness:
    @settings(max_examples=60)
    @given(st.integers(2, 12), st.integers(0, 2**31 - 1))
    def test_interpolation_minimises_tv(self, t_len, seed):
        rng = np.random.default_rng(seed)
        first, last = rng.normal(size=4), rng.normal(size=4)
        interp = expand_endpoint_offsets(first, last, t_len)
        free = rng.normal(size=(t_len, 4)) * 2
        free[0], free[-1] = first, last
        assert smoothness_penalty(interp) <= smoothness_penalty(free) + 1e-12

    def test_kernel_shape(self):
        assert interpolation_kernel(8).shape == (2, 8)


class TestPersistence:
    def test_roundtrip(self, tmp_path):
        m = TrackNet(small_config(), small_specs(), seed=3)
        path = tmp_path / "m.tbnt"
        save_model(m, path)
        m2 = load_model(path, small_config())
        a, b = m.state_dict(), m2.state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert m2.specs == m.specs
        clip = small_clip(4)
        d1, d2 = detect_gop(m, clip.frames, clip=clip), detect_gop(m2, clip.frames, clip=clip)
        assert [d.score for d in d1] == [d.score for d in d2]

    def test_build_network_default_specs(self):
        m = build_network(small_config())
        assert len(m.specs) == 2
