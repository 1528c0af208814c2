import numpy as np
import pytest

from tracknet import _fallback, kernels
from tracknet.geometry import to_corners

compiled = pytest.importorskip("tracknet._ckernels")


def random_tubes(rng, n, t_len=3):
    c = rng.uniform(0.3, 0.7, size=(n, t_len, 2))
    wh = rng.uniform(0.05, 0.3, size=(n, t_len, 2))
    return np.concatenate([c, wh], axis=-1)


class TestBackend:
    def test_compiled_selected(self):
        assert kernels.BACKEND == "compiled"


class TestNMSKernel:
    @pytest.mark.parametrize("seed", range(10))
    def test_agrees(self, seed):
        rng = np.random.default_rng(seed)
        tubes = random_tubes(rng, 60)
        order = np.argsort(-rng.uniform(size=60), kind="stable").astype(np.int64)
        corners = np.ascontiguousarray(to_corners(tubes))
        for thr in (0.3, 0.5, 0.7):
            np.testing.assert_array_equal(compiled.tube_nms(corners, order, thr),
                                          _fallback.tube_nms(corners, order, thr))


class TestRoiKernel:
    @pytest.mark.parametrize("seed", range(5))
    def test_forward_backward_agree(self, seed):
        rng = np.random.default_rng(seed)
        feat = rng.normal(size=(16, 12, 5)).astype(np.float32)
        # quantize to force ties, which both must break to the first index
        feat = np.round(feat, 1)
        regions = np.array([[0, 16, 0, 12], [3, 9, 2, 5], [5, 6, 7, 8], [1, 15, 10, 12]], dtype=np.int64)
        out_c, arg_c = compiled.roi_pool_forward(feat, regions, 7)
        out_f, arg_f = _fallback.roi_pool_forward(feat, regions, 7)
        np.testing.assert_array_equal(out_c, out_f)
        np.testing.assert_array_equal(arg_c, arg_f)
        g = rng.normal(size=out_c.shape).astype(np.float32)
        np.testing.assert_allclose(compiled.roi_pool_backward(g, arg_c, 16, 12),
                                   _fallback.roi_pool_backward(g, arg_f, 16, 12), atol=1e-5)


class TestBlockMatchKernel:
    def test_agrees(self):
        rng = np.random.default_rng(3)
        r, b = 4, 8
        pad = r + b
        prev = rng.uniform(0, 255, size=(40 + 2 * pad, 40 + 2 * pad, 3)).astype(np.float32)
        nxt = np.roll(prev, (2, -3), axis=(0, 1))
        ys = np.array([pad + 10, pad + 20, pad + 30], dtype=np.int64)
        xs = np.array([pad + 10, pad + 25, pad + 30], dtype=np.int64)
        res_c = compiled.block_match(prev, nxt, ys, xs, r, b)
        res_f = _fallback.block_match(prev, nxt, ys, xs, r, b)
        for a, f in zip(res_c, res_f):
            np.testing.assert_array_equal(a, f)
        assert res_c[0].tolist() == [2, 2, 2] and res_c[1].tolist() == [-3, -3, -3]
