import math

import numpy as np
import pytest

import endodepth as ed


def test_soft_weight_at_sigma():
    assert abs(ed.soft_weight(7, 7.0) - (1.0 - math.exp(-1.0))) < 1e-12


def test_scale_depth_two_points():
    pred = np.ones((4, 5))
    sparse = np.zeros((4, 5))
    mask = np.zeros((4, 5))
    sparse[1, 1], sparse[2, 3] = 2.0, 2.0
    mask[1, 1], mask[2, 3] = 1.0, 1.0
    scaled, s = ed.scale_depth(pred, sparse, mask)
    assert abs(s - 2.0) < 1e-12
    assert np.allclose(scaled, 2.0)


def test_identity_flow_is_zero():
    k = ed.CameraIntrinsics(100.0, 100.0, 40.0, 32.0, 80, 64)
    rel = ed.RelativeTransform(np.eye(3), np.zeros(3))
    flow, valid = ed.flow_from_depth(np.full((64, 80), 2.0), rel, k)
    assert flow.shape == (64, 80, 2)
    assert valid.all()
    assert np.all(flow == 0.0)


def test_pure_translation_flow():
    k = ed.CameraIntrinsics(100.0, 100.0, 160.0, 128.0, 320, 256)
    rel = ed.RelativeTransform(np.eye(3), np.array([-0.1, 0.0, 0.0]))
    flow, _ = ed.flow_from_depth(np.full((256, 320), 2.0), rel, k)
    assert np.allclose(flow[..., 0], -0.015625, atol=1e-12)
    assert np.allclose(flow[..., 1], 0.0, atol=1e-12)


def test_empty_mask_raises():
    with pytest.raises(ed.EmptySupportError):
        ed.scale_depth(np.ones((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_metrics_scale_free_for_equal_inputs():
    m = ed.compute_metrics([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
    assert m["abs_rel"] == 0.0
    assert m["thresh_1_25"] == 1.0
    assert m["n_valid"] == 3


def test_network_shape_and_parameter_count():
    net = ed.DepthNet(height=64, width=80)
    assert 400_000 < net.parameter_count() < 700_000
    depth = net.predict(np.full((64, 80, 3), 0.5, dtype=np.float32))
    assert depth.shape == (64, 80)
    assert np.isfinite(depth).all()
    assert not any("transpose" in layer for layer in net.architecture())


def test_render_and_warp_identity():
    scene = ed.synth.Scene(frames=3)
    k = ed.synth.default_intrinsics(16, 20)
    image, depth = scene.render(0, k)
    assert image.shape == (16, 20, 3)
    assert np.nanmin(depth) > 0.0
    rel = ed.RelativeTransform(np.eye(3), np.zeros(3))
    warped = ed.warp_depth(depth, depth, rel, k)
    inner = warped[1:-1, 1:-1]
    ok = np.isfinite(inner)
    assert ok.mean() > 0.9
    assert np.allclose(inner[ok], depth[1:-1, 1:-1][ok], atol=1e-9)


def test_synthetic_dataset_roundtrip(tmp_path):
    ed.synth.write_dataset(tmp_path / "raw", frames=12)
    recon = ed.parse_reconstruction(tmp_path / "raw")
    assert len(recon.frame_ids) == 12
    assert recon.points.shape[1] == 3
    vis = recon.visibility
    assert list(vis.sum(axis=1)) == recon.track_lengths
    depth, mask = ed.rasterize_frame(recon, recon.frame_ids[0], recon.mean_track_length())
    assert depth.shape == (64, 80)
    assert ((depth > 0) == (mask > 0)).all()
