import json

import numpy as np
import pytest

from emdsplat import pose as ps
from emdsplat import synth
from emdsplat.errors import ConfigError, FormatError


def _tiny(**kw):
    base = dict(n_frames=3, width=24, height=16, focal=20.0, ground_grid=(6, 4), backdrop_grid=(6, 4))
    base.update(kw)
    return synth.ScenarioConfig(**base)


def test_same_seed_identical_scenes():
    a = synth.generate_scene(11, _tiny())
    b = synth.generate_scene(11, _tiny())
    for name in a.static.field_names():
        np.testing.assert_array_equal(getattr(a.static, name), getattr(b.static, name))
    for oa, ob in zip(a.objects, b.objects):
        np.testing.assert_array_equal(oa.local.mu, ob.local.mu)
    np.testing.assert_array_equal(a.render_frame(0, 1), b.render_frame(0, 1))
    assert not np.array_equal(a.static.sh, synth.generate_scene(12, _tiny()).static.sh)


def test_linear_motion():
    spec = synth.ObjectSpec("box", "vehicle", (0.0, 0.0, 5.0), (10.0, 0.0, 0.0))
    scene = synth.generate_scene(0, _tiny(objects=[spec]))
    obj = scene.objects[0]
    np.testing.assert_allclose(obj.position(0.5) - obj.position(0.0), [5.0, 0.0, 0.0], atol=1e-12)
    w0, w1 = scene.object_world(0, 0.0), scene.object_world(0, 0.5)
    np.testing.assert_allclose(w1.mu - w0.mu, np.broadcast_to([5.0, 0, 0], w0.mu.shape), atol=1e-12)


def test_default_speed_ratio_from_trajectories():
    scene = synth.generate_scene(0, synth.ScenarioConfig())
    ts = scene.timestamps
    speeds = []
    for obj in scene.objects:
        pos = np.array([obj.position(t) for t in ts])
        speeds.append(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum() / (ts[-1] - ts[0]))
    speeds.sort()
    assert len(speeds) >= 2
    assert speeds[-1] / speeds[0] == pytest.approx(5.0, rel=1e-9)


def test_timestamps_normalized_and_increasing():
    ts = synth.generate_scene(0, _tiny(n_frames=7)).timestamps
    assert ts[0] == 0.0 and ts[-1] == 1.0 and np.all(np.diff(ts) > 0)


def test_empty_scenario_rejected():
    with pytest.raises(ConfigError):
        synth.generate_scene(0, _tiny(ground_grid=(0, 0), backdrop_grid=(0, 0), objects=[]))
    with pytest.raises(ConfigError):
        synth.ScenarioConfig.preset("nope")


def test_round_trip(tmp_path):
    scene = synth.generate_scene(5, _tiny(sigma_rot_deg=1.0, sigma_trans=0.05))
    manifest = synth.write_dataset(scene, tmp_path)
    ds = synth.read_dataset(tmp_path)
    assert ds.manifest == json.loads(json.dumps(manifest))
    assert ds.manifest["noise"]["sigma_rot_deg"] == 1.0
    for c in range(ds.n_cameras):
        for f in range(ds.n_frames):
            expected = synth._to_uint8(scene.render_frame(c, f))
            np.testing.assert_array_equal(np.rint(ds.images[c, f] * 255).astype(np.uint8), expected)
            for o in range(len(scene.objects)):
                np.testing.assert_array_equal(ds.masks[(o, c, f)], scene.object_mask(o, c, f))
    np.testing.assert_array_equal(ds.static.mu, scene.static.mu)
    np.testing.assert_array_equal(ds.timestamps, scene.timestamps)


def test_zero_noise_tracked_equals_true(tmp_path):
    synth.write_dataset(synth.generate_scene(2, _tiny()), tmp_path)
    ds = synth.read_dataset(tmp_path)
    for o in range(len(ds.objects)):
        for (ra, ta), (rb, tb) in zip(ds.poses(o), ds.poses(o, "true_poses")):
            np.testing.assert_array_equal(ra, rb)
            np.testing.assert_array_equal(ta, tb)


def test_pose_noise_statistics():
    sigma_deg, sigma_t, n = 2.0, 0.1, 4000
    true = [(np.eye(3), np.zeros(3))] * n
    noisy = synth.noisy_poses(true, sigma_deg, sigma_t, np.random.default_rng(0))
    # each axis is normal(0, sigma): the per-axis sample std must land within 3 standard errors
    omegas = np.array([ps.so3_log(r) for r, _ in noisy])
    trans = np.array([t for _, t in noisy])
    se = 1.0 / np.sqrt(2 * n)
    for values, sigma in ((omegas, np.deg2rad(sigma_deg)), (trans, sigma_t)):
        assert np.all(np.abs(values.mean(axis=0)) < 3 * sigma / np.sqrt(n))
        assert np.all(np.abs(values.std(axis=0) / sigma - 1.0) < 3 * se)


def test_stored_pose_error_within_noise(tmp_path):
    cfg = synth.ScenarioConfig.preset("toy-supervised", width=32, height=24, focal=28.0)
    synth.write_dataset(synth.generate_scene(1, cfg), tmp_path)
    ds = synth.read_dataset(tmp_path)
    angles = [ps.geodesic_angle(ra, rb) for (ra, _), (rb, _) in zip(ds.poses(0), ds.poses(0, "true_poses"))]
    offsets = [np.linalg.norm(ta - tb) for (_, ta), (_, tb) in zip(ds.poses(0), ds.poses(0, "true_poses"))]
    assert 0 < np.mean(angles) < 3 * np.deg2rad(2.0) * np.sqrt(3)
    assert 0 < np.mean(offsets) < 3 * 0.1 * np.sqrt(3)


def test_missing_image_names_file(tmp_path):
    synth.write_dataset(synth.generate_scene(0, _tiny(objects=[])), tmp_path)
    (tmp_path / "frames" / synth.frame_name(0, 1).split("/")[-1]).unlink()
    with pytest.raises(FormatError) as err:
        synth.read_dataset(tmp_path)
    assert "frames" in str(err.value)


def test_missing_manifest(tmp_path):
    with pytest.raises(FormatError) as err:
        synth.read_dataset(tmp_path)
    assert "manifest.json" in str(err.value)
