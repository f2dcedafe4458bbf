import numpy as np
import pytest

from cvloc.geometry import CameraIntrinsics, CanvasSpec, RigidPose
from cvloc.synth import (
    make_scene,
    make_trajectory,
    render_ground,
    render_satellite,
    render_sequence,
    stack_channels,
    value_noise,
)


def test_value_noise_deterministic_and_normalized():
    a = value_noise(64, seed=5)
    assert np.array_equal(a, value_noise(64, seed=5))
    assert a.min() == 0.0 and a.max() == 1.0


def test_seeds_differ():
    a = make_scene(1, texture_size=128).texture
    b = make_scene(2, texture_size=128).texture
    assert np.mean(np.abs(a - b) > 1e-3) > 0.01


def test_checker_flips_across_cells():
    scene = make_scene(0, extent_m=16, texture_size=64, kind="checker", cell_m=2.0)
    assert scene.sample(0.5, 0.5) != scene.sample(2.5, 0.5)
    assert scene.sample(0.5, 0.5) == scene.sample(2.5, 2.5)


def test_unknown_kind():
    with pytest.raises(ValueError):
        make_scene(0, kind="stripes")


def test_scene_wraps_periodically():
    scene = make_scene(3, extent_m=100, texture_size=64)
    assert scene.sample(1.3, -7.2) == pytest.approx(scene.sample(101.3, 92.8))


def test_satellite_center_pixel_samples_center_world():
    scene = make_scene(4, extent_m=200, texture_size=256)
    canvas = CanvasSpec(32, 0.5)
    sat = render_satellite(scene, canvas, (3.0, -2.0))
    assert sat.data[16, 16, 0] == pytest.approx(scene.sample(3.0, -2.0))


def test_satellite_shift_by_one_pixel():
    scene = make_scene(4, extent_m=200, texture_size=256)
    canvas = CanvasSpec(32, 0.5)
    a = render_satellite(scene, canvas, (0.0, 0.0))
    # moving the center east by one pixel shifts content up by one row
    b = render_satellite(scene, canvas, (0.0, 0.5))
    assert np.allclose(b.data[:-1], a.data[1:])
    c = render_satellite(scene, canvas, (0.5, 0.0))
    assert np.allclose(c.data[:, :-1], a.data[:, 1:])


def test_doubling_resolution_halves_checker_run():
    scene = make_scene(0, extent_m=64, texture_size=256, kind="checker", cell_m=4.0)

    def run_length(lam):
        row = render_satellite(scene, CanvasSpec(64, lam), (0.1, 0.1)).data[32, :, 0] > 0.5
        flips = np.flatnonzero(np.diff(row.astype(int)))
        return np.diff(flips).mean()

    assert run_length(0.5) == pytest.approx(2 * run_length(1.0))


def test_straight_down_camera_matches_direct_sampling():
    scene = make_scene(6, extent_m=100, texture_size=512)
    K = CameraIntrinsics.from_fov(33, 33, 60.0)
    # camera looking straight down: optical axis -z, image rows run south
    R = np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, -1.0]])
    pose = RigidPose(R, np.zeros(3))
    img = render_ground(scene, K, pose)
    assert img.mask.all()
    h = 1.65
    rows, cols = np.meshgrid(np.arange(33.0), np.arange(33.0), indexing="ij")
    x = h * (rows - K.cy) / K.fy
    y = h * (cols - K.cx) / K.fx
    assert np.allclose(img.data[:, :, 0], scene.sample(x, y))


def test_horizon_rows_masked_for_level_camera():
    scene = make_scene(6, extent_m=100, texture_size=128)
    K = CameraIntrinsics.from_fov(64, 32, 90.0)
    img = render_ground(scene, K, RigidPose.from_heading([0.0, 0.0], 0.3))
    assert not img.mask[: int(K.cy)].any()
    assert img.mask[int(K.cy) + 2:].all()
    assert np.all(img.data[~img.mask] == 0)


def test_camera_below_ground_rejected():
    scene = make_scene(6, texture_size=64)
    pose = RigidPose(np.eye(3), np.array([0.0, 0.0, 5.0]))  # center at z = -5
    with pytest.raises(ValueError):
        render_ground(scene, CameraIntrinsics.from_fov(16, 16), pose)


def test_trajectory_layout():
    traj = make_trajectory(4, 5.0, heading_rad=0.0)
    centers = traj.centers
    assert np.allclose(centers[-1], 0.0)
    # heading 0 drives north (-x), so earlier frames lie to the south
    assert np.allclose(centers[:, 0], [15.0, 10.0, 5.0, 0.0])
    assert np.allclose(centers[:, 1:], 0.0)
    assert [p.timestamp_index for p in traj.poses] == [1, 2, 3, 4]


def test_trajectory_east_heading():
    traj = make_trajectory(3, 2.0, heading_rad=np.pi / 2)
    assert np.allclose(traj.centers[:, 1], [-4.0, -2.0, 0.0])
    assert np.allclose(traj.centers[:, 0], 0.0, atol=1e-12)


def test_trajectory_rejects_bad_arguments():
    with pytest.raises(ValueError):
        make_trajectory(0, 5.0)
    with pytest.raises(ValueError):
        make_trajectory(3, 0.0)


def test_render_sequence_relocates():
    scene = make_scene(8, extent_m=200, texture_size=256)
    K = CameraIntrinsics.from_fov(32, 16, 90.0)
    traj = make_trajectory(2, 3.0, 1.0)
    frames = render_sequence(scene, K, traj, location=(7.0, -4.0))
    direct = render_ground(scene, K, RigidPose.from_heading([7.0, -4.0], 1.0))
    assert np.allclose(frames[-1].data, direct.data)
    assert np.array_equal(frames[-1].mask, direct.mask)


def test_stack_channels():
    scene = make_scene(1, texture_size=64)
    a = render_satellite(scene, CanvasSpec(8, 1.0))
    b = render_satellite(scene, CanvasSpec(8, 2.0))
    s = stack_channels([a, b])
    assert s.channels == 2
    assert np.array_equal(s.data[:, :, 1], b.data[:, :, 0])
