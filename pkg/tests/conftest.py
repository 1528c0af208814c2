import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def raster_masks(boxes, n=512):
    """Cell-center rasterization of ``(T, 4)`` boxes on an ``n x n`` grid."""
    c = (np.arange(n) + 0.5) / n
    out = []
    for cx, cy, w, h in np.asarray(boxes, dtype=np.float64):
        mx = (c >= cx - w / 2) & (c < cx + w / 2)
        my = (c >= cy - h / 2) & (c < cy + h / 2)
        out.append(my[:, None] & mx[None, :])
    return out


def raster_tube_iou(a, b, n=512):
    inter = union = 0
    for ma, mb in zip(raster_masks(a, n), raster_masks(b, n)):
        inter += int(np.sum(ma & mb))
        union += int(np.sum(ma | mb))
    return inter / union if union else 0.0


def ref_iou(a, b):
    """Scalar volumetric IoU from corner arithmetic, one frame at a time."""
    inter = union = 0.0
    for (ax, ay, aw, ah), (bx, by, bw, bh) in zip(a, b):
        iw = max(0.0, min(ax + aw / 2, bx + bw / 2) - max(ax - aw / 2, bx - bw / 2))
        ih = max(0.0, min(ay + ah / 2, by + bh / 2) - max(ay - ah / 2, by - bh / 2))
        inter += iw * ih
        union += aw * ah + bw * bh - iw * ih
    return inter / union


def lattice_tube(rng, t_len, n=512, min_side=40, max_side=200):
    """Random tube whose box edges all lie on the ``1/n`` lattice inside the unit square."""
    rows = []
    for _ in range(t_len):
        w, h = rng.integers(min_side, max_side, size=2)
        x0 = rng.integers(0, n - w)
        y0 = rng.integers(0, n - h)
        rows.append([(x0 + w / 2) / n, (y0 + h / 2) / n, w / n, h / n])
    return np.array(rows)


def overlapping_lattice_pair(rng, t_len, n=512):
    """Two lattice tubes drawn around common centres so that most pairs overlap."""
    a, b = [], []
    for _ in range(t_len):
        cx, cy = rng.integers(150, n - 150, size=2)
        for out in (a, b):
            w, h = 2 * rng.integers(20, 100, size=2)
            dx, dy = rng.integers(-40, 41, size=2)
            out.append([(cx + dx) / n, (cy + dy) / n, w / n, h / n])
    return np.array(a), np.array(b)


def small_config(**overrides):
    """A 64x64, T=4 model small enough to train for a few hundred steps in a test."""
    from tracknet.pipeline import ModelConfig

    base = dict(gop_len=4, image_h=64, image_w=64, stream_channels=4, squash_channels=8,
                num_anchor_shapes=2, stn_channels=4, fc_width=32, tpn_batch=64, tpn_max_positive=32,
                proposal_batch=32, proposal_max_positive=16, train_proposal_count=50,
                test_proposal_count=20, pre_nms_top_n=200, motion_source="gt")
    base.update(overrides)
    return ModelConfig(**base)


def small_clip(seed=0, n_objects=2, t_len=4):
    from tracknet.data import generate_clip

    return generate_clip(seed, h=64, w=64, t_len=t_len, n_objects=n_objects, size_range=(10, 18),
                         speed_range=(1.0, 2.5))



def small_specs():
    from tracknet.anchors import AnchorSpec

    return [AnchorSpec(0.2, 0.2), AnchorSpec(0.25, 0.15)]
