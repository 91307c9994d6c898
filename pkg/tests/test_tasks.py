import math

import numpy as np
import pytest

from se3flow import geometry as geo
from se3flow.errors import FormatError, InvalidArgument
from se3flow.tasks import (
    CLOUD_SIZE,
    HORIZON,
    TASKS,
    dataset_bytes,
    dataset_from_json,
    dataset_to_json,
    door_trajectory,
    generate_door_opening,
    generate_painting,
    generate_rotating_triangle,
    load_dataset,
    make_dataset,
    painting_trajectory,
    parse_dataset,
    save_dataset,
    serpentine_length,
    triangle_trajectory,
)


@pytest.mark.parametrize("task", TASKS)
def test_generated_demos_validate(task):
    ds = make_dataset(task, 4, 3407)
    assert len(ds) == 4 and ds.task == task
    for d in ds:
        d.validate()
        assert d.cloud.shape == (CLOUD_SIZE[task], 3)
        assert d.trajectory.shape == (HORIZON, 4, 4)


@pytest.mark.parametrize("gen", [generate_rotating_triangle, generate_door_opening, generate_painting])
def test_generators_deterministic(gen):
    a = gen(np.random.default_rng(5), 1)
    b = gen(np.random.default_rng(5), 1)
    assert dataset_bytes(a) == dataset_bytes(b)


def test_train_and_test_streams_differ():
    train = make_dataset("rotating_triangle", 3, 1, "train")
    test = make_dataset("rotating_triangle", 3, 1, "test")
    assert not np.allclose(train[0].cloud, test[0].cloud)
    with pytest.raises(InvalidArgument):
        make_dataset("juggling", 1, 1)
    with pytest.raises(InvalidArgument):
        make_dataset("painting", 0, 1)


def test_triangle_geodesic_spacing_and_additivity():
    for d in generate_rotating_triangle(np.random.default_rng(8), 5):
        steps = geo.d_geo(d.trajectory[:-1], d.trajectory[1:])
        assert np.max(np.abs(steps - steps[0])) < 1e-9
        rel = np.swapaxes(d.trajectory[:-1, :3, :3], -1, -2) @ d.trajectory[1:, :3, :3]
        per_step = geo.rotation_angle(rel)
        total_rel = d.trajectory[0, :3, :3].T @ d.trajectory[-1, :3, :3]
        assert abs(geo.rotation_angle(total_rel) - per_step.sum()) < 1e-9


def test_triangle_trajectory_builder():
    grasp = geo.translation(0.1, 0, 0)
    traj = triangle_trajectory(np.eye(4), math.pi / 2, grasp)
    assert np.allclose(traj[-1], geo.rot_z(math.pi / 2) @ grasp)


def test_door_on_circle_and_arc_length(rng):
    hinge = geo.random_pose(rng)
    radius, swing, height = 0.7, math.radians(50), 0.4
    traj = door_trajectory(hinge, radius, swing, height)
    local = geo.transform_points(geo.inverse(hinge), traj[:, :3, 3])
    assert np.max(np.abs(np.hypot(local[:, 0], local[:, 1]) - radius)) < 1e-9
    angles = np.unwrap(np.arctan2(local[:, 1], local[:, 0]))
    assert abs(radius * (angles[-1] - angles[0]) - radius * swing) < 1e-9
    for d in generate_door_opening(np.random.default_rng(2), 3):
        d.validate()


def test_painting_orientation_bounds_and_length(rng):
    canvas = geo.random_pose(rng)
    w, h, margin = 0.4, 0.3, 0.04
    traj = painting_trajectory(canvas, w, h, margin, 0.005)
    assert np.max(np.abs(traj[:, :3, :3] - traj[0, :3, :3])) < 1e-9
    local = geo.transform_points(geo.inverse(canvas), traj[:, :3, 3])
    assert np.all(np.abs(local[:, 0]) <= w / 2 + 0.01)
    assert np.all(np.abs(local[:, 1]) <= h / 2 + 0.01)
    length = np.sum(np.linalg.norm(np.diff(local[:, :2], axis=0), axis=1))
    assert abs(length - serpentine_length(w, h, margin)) < 1e-6
    for d in generate_painting(np.random.default_rng(3), 3):
        rots = d.trajectory[:, :3, :3]
        assert np.max(np.abs(rots - rots[0])) < 1e-9


def test_test_split_offsets_are_rigid():
    a = generate_rotating_triangle(np.random.default_rng(np.random.SeedSequence([9, 1]).spawn(2)[0]), 2)
    b = make_dataset("rotating_triangle", 2, 9, "test")
    for da, db in zip(a, b):
        # same demo up to a rigid motion: pairwise point distances agree
        dist_a = np.linalg.norm(da.cloud[:, None] - da.cloud[None], axis=-1)
        dist_b = np.linalg.norm(db.cloud[:, None] - db.cloud[None], axis=-1)
        assert np.allclose(dist_a, dist_b, atol=1e-12)


@pytest.mark.parametrize("task", TASKS)
def test_binary_roundtrip(tmp_path, task):
    ds = make_dataset(task, 3, 77, "test")
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.task == task and back.split == "test" and back.seed == 77
    assert dataset_bytes(back) == dataset_bytes(ds)
    assert dataset_bytes(dataset_from_json(dataset_to_json(ds))) == dataset_bytes(ds)


def test_minimal_dataset():
    ds = make_dataset("rotating_triangle", 1, 0)
    assert len(parse_dataset(dataset_bytes(ds))) == 1


def test_corrupt_files():
    data = dataset_bytes(make_dataset("painting", 2, 1))
    with pytest.raises(FormatError):
        parse_dataset(data[:20])
    with pytest.raises(FormatError) as info:
        parse_dataset(data[:-8])
    assert info.value.offset is not None
    bad_count = bytearray(data)
    bad_count[12] = 3  # header now announces 3 demonstrations
    with pytest.raises(FormatError):
        parse_dataset(bytes(bad_count))
    with pytest.raises(FormatError):
        parse_dataset(b"XXXXXXXX" + data[8:])
