"""Target assignment, the loss graph and the update loop."""

import numpy as np
import pytest
from conftest import small_clip, small_config, small_specs

from tracknet.encoding import AnchorLabel, LossBreakdown, total_loss
from tracknet.nn import AdamState
from tracknet.nn.tensor import NonFiniteError
from tracknet.pipeline import TrackNet, TrainConfig, Trainer, train_step
from tracknet.pipeline.detect import anchor_tubes, motion_for_clip, softmax
from tracknet.pipeline.train import (TERMS, _check_terms, assign_targets, gop_loss, gt_array,
                                     loss_terms, sample_anchors)

POS, NEG, IGN = AnchorLabel.POSITIVE, AnchorLabel.NEGATIVE, AnchorLabel.IGNORE


def _model(seed=0, **kw):
    return TrackNet(small_config(**kw), small_specs(), seed=seed)


class TestTrainConfig:
    def test_lr_drop(self):
        cfg = TrainConfig(lr=1e-3, lr_drop_at=10)
        assert cfg.lr_at(9) == 1e-3
        assert cfg.lr_at(10) == pytest.approx(1e-4)

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            TrainConfig.from_dict({"iterations": 2, "momentum": 0.9})

    def test_roundtrip(self):
        cfg = TrainConfig(iterations=7, skip_range=(1, 3))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg

    @pytest.mark.parametrize("bad", [dict(lr=0), dict(skip_range=(3, 1)), dict(clips_per_step=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


class TestSampling:
    def test_positive_cap_and_padding(self, rng):
        labels = np.array([POS] * 50 + [NEG] * 300 + [IGN] * 20)
        idx, npos = sample_anchors(labels, 64, 16, rng)
        assert npos == 16 and len(idx) == 64
        assert np.all(labels[idx[:16]] == POS) and np.all(labels[idx[16:]] == NEG)
        assert len(set(idx.tolist())) == 64

    def test_ignored_never_sampled(self, rng):
        labels = np.array([POS] * 3 + [NEG] * 5 + [IGN] * 100)
        idx, npos = sample_anchors(labels, 64, 32, rng)
        assert npos == 3 and len(idx) == 8

    def test_targets_layout(self, rng):
        m = _model()
        clip = small_clip(3)
        anchors = anchor_tubes(m.cfg, m.specs, motion_for_clip(m.cfg, clip))
        gts, gcls = gt_array(clip, 1)
        v, _ = m.features(m.prepare_frames(clip.frames))
        logits, offsets = m.tpn_outputs(v)
        t = assign_targets(m, anchors, gts, gcls, softmax(logits.data)[:, 1], offsets.data, rng)
        assert t.n_anchor_pos >= len(gts)  # every gt claims an anchor
        assert t.anchor_obj[: t.n_anchor_pos].all() and not t.anchor_obj[t.n_anchor_pos:].any()
        assert t.n_prop_pos >= 1  # gt tubes join the proposal pool
        assert np.all(t.prop_cls[: t.n_prop_pos] == 1) and np.all(t.prop_cls[t.n_prop_pos:] == 0)
        assert len(t.prop_cls) <= m.cfg.proposal_batch
        assert t.tpn_targets.shape == (t.n_anchor_pos, 4, 4)


class TestLoss:
    def test_five_terms(self):
        out = train_step(_model(), [small_clip(0)], AdamState(), np.random.default_rng(0), 1e-3)
        assert isinstance(out, LossBreakdown)
        d = out.as_dict()
        assert set(TERMS) <= set(d)
        assert all(np.isfinite(v) for v in d.values())
        w = small_config().loss_weights
        assert d["total"] == pytest.approx(sum(wi * d[k] for wi, k in zip(w, TERMS)))

    @pytest.mark.parametrize("modes", [("interpolate", "predict_all"), ("predict_all", "predict_all"),
                                       ("interpolate", "interpolate")])
    def test_graph_matches_reference(self, modes):
        m = _model(1, tpn_mode=modes[0], post_mode=modes[1])
        m.astype(np.float64)
        clip = small_clip(5)
        cfg = m.cfg
        anchors = anchor_tubes(cfg, m.specs, motion_for_clip(cfg, clip))
        gts, gcls = gt_array(clip, 1)
        v, _ = m.features(m.prepare_frames(clip.frames))
        logits, offsets = m.tpn_outputs(v)
        t = assign_targets(m, anchors, gts, gcls, softmax(logits.data)[:, 1], offsets.data,
                           np.random.default_rng(0))
        terms = {k: float(x.data) for k, x in loss_terms(m, v, logits, offsets, t).items()}

        post_logits, post_off = m.post_outputs(v, t.prop_regions)
        n_a, n_p = len(t.anchor_idx), len(t.prop_cls)
        tpn_t = np.zeros((n_a, 4, 4))
        tpn_t[: t.n_anchor_pos] = t.tpn_targets
        post_t = np.zeros((n_p, 4, 4))
        post_t[: t.n_prop_pos] = t.post_targets
        ref = total_loss(post_logits.data, logits.data[t.anchor_idx], post_off.data,
                         offsets.data[t.anchor_idx], (t.prop_cls, t.anchor_obj), (post_t, tpn_t),
                         cfg.loss_weights, smooth_post=modes[1] == "predict_all",
                         smooth_tpn=modes[0] == "predict_all")
        for k in TERMS:
            assert terms[k] == pytest.approx(getattr(ref, k), rel=1e-9, abs=1e-12), k

    def test_non_finite_term_named(self):
        with pytest.raises(NonFiniteError, match="reg_tpn=nan"):
            _check_terms({"cls": 0.3, "reg": 0.1, "cls_tpn": 0.2, "reg_tpn": float("nan"), "smooth": 0.0})

    def test_non_finite_weight(self):
        m = _model()
        m.post.cls.weight.data[0, 0] = np.inf
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            train_step(m, [small_clip(0)], AdamState(), np.random.default_rng(0), 1e-3)

    def test_replay_matches(self):
        m = _model(2)
        loss, _, replay = gop_loss(m, small_clip(2), None, np.random.default_rng(4))
        assert float(replay().data) == float(loss.data)


class TestTrainStep:
    def test_deterministic(self):
        outs = []
        for _ in range(2):
            m, st = _model(3), AdamState()
            rng = np.random.default_rng(11)
            outs.append([train_step(m, [small_clip(1)], st, rng, 1e-3).total for _ in range(3)])
            outs[-1].append(m.state_dict())
        assert outs[0][:3] == outs[1][:3]
        a, b = outs[0][3], outs[1][3]
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_updates_parameters(self):
        m = _model(4)
        before = m.state_dict()
        train_step(m, [small_clip(0)], AdamState(), np.random.default_rng(0), 1e-3)
        after = m.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            train_step(_model(), [], AdamState(), np.random.default_rng(0), 1e-3)

    def test_overfit_single_clip(self):
        m = _model(0)
        clip = small_clip(7)
        field = motion_for_clip(m.cfg, clip)
        st, rng = AdamState(), np.random.default_rng(0)
        hist = [train_step(m, [(clip, field)], st, rng, 1e-3).total for _ in range(200)]
        assert hist[-1] < hist[0]
        assert np.mean(hist[-20:]) < 0.5 * hist[0]


class TestTrainer:
    def test_run_and_callback(self):
        clips = [small_clip(s, t_len=12) for s in range(3)]
        tr = Trainer(_model(), clips, TrainConfig(iterations=4, lr_drop_at=2, seed=1))
        seen = []
        hist = tr.run(callback=lambda it, lr, b: seen.append((it, lr)))
        assert len(hist) == 4 and tr.iteration == 4
        assert seen == [(0, 1e-3), (1, 1e-3), (2, pytest.approx(1e-4)), (3, pytest.approx(1e-4))]

    def test_sample_shapes(self):
        clips = [small_clip(s, t_len=12) for s in range(2)]
        tr = Trainer(_model(), clips, TrainConfig(seed=2))
        for _ in range(10):
            gop, field = tr.sample()
            assert gop.frames.shape == (4, 64, 64, 3)
            assert (field.width, field.height) == (16, 16)

    def test_flipped_sample_uses_mirrored_field(self):
        clip = small_clip(0, t_len=12)
        tr = Trainer(_model(motion_source="estimate"), [clip], TrainConfig(seed=0, flip=True))
        flips = 0
        for _ in range(20):
            gop, field = tr.sample()
            for (_, idx), cached in tr._motion.items():
                plain = clip.subclip(list(idx))
                if np.array_equal(gop.frames, plain.frames):
                    np.testing.assert_array_equal(field.mvx, cached.mvx)
                    break
                if np.array_equal(gop.frames, plain.flipped().frames):
                    np.testing.assert_array_equal(field.mvx, cached.flipped().mvx)
                    flips += 1
                    break
            else:
                pytest.fail("sample matches no cached GoP")
        assert 0 < flips < 20

    def test_rejects_mismatched_clips(self):
        from tracknet.data import generate_clip

        with pytest.raises(ValueError, match="expects"):
            Trainer(_model(), [generate_clip(0, h=32, w=32, t_len=4)], TrainConfig())
        with pytest.raises(ValueError, match="fewer"):
            Trainer(_model(), [small_clip(0, t_len=3)], TrainConfig())
