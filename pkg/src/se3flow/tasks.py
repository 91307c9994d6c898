"""Synthetic manipulation demonstrations and their on-disk format.

Three task families share one record layout: a point cloud of the scene
and a length-10 end-effector pose trajectory with a gripper channel.

Binary dataset layout (little-endian)::

    offset  size  field
    0       8     magic b"SE3FDSET"
    8       2     uint16 format version (1)
    10      1     uint8 task code (0 painting, 1 door_opening, 2 rotating_triangle)
    11      1     uint8 split code (0 train, 1 test)
    12      4     uint32 number of demonstrations D
    16      4     uint32 points per cloud N
    20      4     uint32 trajectory length L
    24      8     int64 generation seed
    32      ...   D records of float64: cloud (N*3), poses (L*16, row-major 4x4),
                  gripper (L)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import geometry as geo
from .errors import FormatError, InvalidArgument
from .model import frame_is_degenerate, observation_frame

TASKS = ("painting", "door_opening", "rotating_triangle")
SPLITS = ("train", "test")
HORIZON = 10
CLOUD_SIZE = {"painting": 256, "door_opening": 128, "rotating_triangle": 100}
DEFAULT_COUNT = {"painting": 31, "door_opening": 10, "rotating_triangle": 500}
# bound on the relative rotation between consecutive poses
MAX_STEP_ANGLE = 0.9 * math.pi

# held-out object poses for test splits
TEST_MAX_ANGLE = math.pi / 3
TEST_MAX_TRANS = 0.3

DATASET_MAGIC = b"SE3FDSET"
DATASET_VERSION = 1
_HEADER = struct.Struct("<8sHBBIIIq")


@dataclass
class Demonstration:
    task: str
    cloud: np.ndarray        # (N, 3) meters
    trajectory: np.ndarray   # (L, 4, 4)
    gripper: np.ndarray      # (L,)

    def transformed(self, g) -> "Demonstration":
        g = np.asarray(g, dtype=np.float64)
        return Demonstration(self.task, geo.transform_points(g, self.cloud),
                             g @ self.trajectory, self.gripper.copy())

    def validate(self) -> None:
        n = CLOUD_SIZE[self.task]
        if self.cloud.shape != (n, 3):
            raise InvalidArgument(f"{self.task} cloud must be ({n}, 3), got {self.cloud.shape}")
        if self.trajectory.shape != (HORIZON, 4, 4) or self.gripper.shape != (HORIZON,):
            raise InvalidArgument("trajectory must hold 10 poses and 10 gripper values")
        if not geo.is_pose(self.trajectory):
            raise InvalidArgument("trajectory contains an invalid pose")
        if np.any((self.gripper < 0) | (self.gripper > 1)):
            raise InvalidArgument("gripper values must lie in [0, 1]")
        rel = np.swapaxes(self.trajectory[:-1, :3, :3], -1, -2) @ self.trajectory[1:, :3, :3]
        if np.any(geo.rotation_angle(rel) > MAX_STEP_ANGLE):
            raise InvalidArgument("consecutive poses rotate by more than 0.9 pi")


@dataclass
class Dataset:
    task: str
    split: str
    seed: int
    demonstrations: list[Demonstration] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.demonstrations)

    def __iter__(self):
        return iter(self.demonstrations)

    def __getitem__(self, i):
        return self.demonstrations[i]

    def transformed(self, g) -> "Dataset":
        return Dataset(self.task, self.split, self.seed,
                       [d.transformed(g) for d in self.demonstrations])


# -- trajectory builders (pure geometry, reused by tests) -----------------------

def triangle_trajectory(frame, total_angle: float, grasp, length: int = HORIZON) -> np.ndarray:
    """Poses rotating ``grasp`` (given in ``frame``) about the frame's z axis.

    Consecutive poses are separated by ``total_angle / (length - 1)``.
    """
    step = total_angle / (length - 1)
    return np.stack([frame @ geo.rot_z(k * step) @ grasp for k in range(length)])


def door_trajectory(hinge, radius: float, swing: float, height: float,
                    length: int = HORIZON) -> np.ndarray:
    """Handle poses on a circular arc about the hinge z axis."""
    handle = geo.make_pose(geo.rot_x(math.pi / 2)[:3, :3] @ geo.rot_z(math.pi / 2)[:3, :3],
                           (radius, 0.0, height))
    return np.stack([hinge @ geo.rot_z(swing * k / (length - 1)) @ handle
                     for k in range(length)])


def serpentine_waypoints(width: float, height: float, margin: float,
                         rows: int = 2, length: int = HORIZON) -> np.ndarray:
    """Canvas-frame (x, y) waypoints of a boustrophedon stroke."""
    cols = length // rows
    xs = np.linspace(-width / 2 + margin, width / 2 - margin, cols)
    ys = np.linspace(height / 2 - margin, -height / 2 + margin, rows)
    pts = []
    for r, y in enumerate(ys):
        row = xs if r % 2 == 0 else xs[::-1]
        pts.extend((x, y) for x in row)
    return np.array(pts)


def serpentine_length(width: float, height: float, margin: float, rows: int = 2) -> float:
    return rows * (width - 2 * margin) + (height - 2 * margin)


def painting_trajectory(canvas, width: float, height: float, margin: float,
                        standoff: float, length: int = HORIZON) -> np.ndarray:
    tool = geo.rot_x(math.pi)[:3, :3]  # tool z axis faces the canvas
    poses = []
    for x, y in serpentine_waypoints(width, height, margin, length=length):
        poses.append(canvas @ geo.make_pose(tool, (x, y, standoff)))
    return np.stack(poses)


# -- generators -------------------------------------------------------------------

def _scene_pose(rng: np.random.Generator) -> np.ndarray:
    trans = rng.uniform([-0.3, -0.3, 0.0], [0.3, 0.3, 0.3])
    return geo.make_pose(geo.random_rotation(rng), trans)


def _triangle_demo(rng: np.random.Generator) -> Demonstration:
    while True:
        verts = rng.uniform(-0.12, 0.12, size=(3, 2))
        e1, e2 = verts[1] - verts[0], verts[2] - verts[0]
        if abs(e1[0] * e2[1] - e1[1] * e2[0]) / 2 < 4e-3:
            continue
        u = rng.uniform(size=(CLOUD_SIZE["rotating_triangle"], 2))
        flip = u.sum(axis=1) > 1
        u[flip] = 1 - u[flip]
        planar = verts[0] + u[:, :1] * e1 + u[:, 1:] * e2
        planar = planar + rng.normal(scale=0.002, size=planar.shape)
        local = np.column_stack([planar, np.zeros(len(planar))])
        cloud = geo.transform_points(_scene_pose(rng), local)
        if not frame_is_degenerate(cloud):
            break
    frame = observation_frame(cloud)
    total = rng.uniform(math.pi / 4, 3 * math.pi / 4)
    # side grasp: tool axis along the triangle plane, clear of the log cut locus
    grasp = geo.make_pose(geo.rot_x(math.pi / 2)[:3, :3], (0.03, 0.0, 0.05))
    traj = triangle_trajectory(frame, total, grasp)
    return Demonstration("rotating_triangle", cloud, traj, np.ones(HORIZON))


def _door_demo(rng: np.random.Generator) -> Demonstration:
    width = rng.uniform(0.5, 0.9)
    door_h = rng.uniform(0.8, 1.0)
    swing = math.radians(rng.uniform(30.0, 80.0))
    n = CLOUD_SIZE["door_opening"]
    n_door = 96
    # door panel in the hinge x-z plane, frame panel perpendicular along y
    door = np.column_stack([rng.uniform(0, width, n_door), np.zeros(n_door),
                            rng.uniform(0, door_h, n_door)])
    n_frame = n - n_door
    frame_panel = np.column_stack([np.zeros(n_frame), rng.uniform(-0.25, 0.0, n_frame),
                                   rng.uniform(0, door_h, n_frame)])
    scene = _scene_pose(rng)
    cloud = geo.transform_points(scene, np.concatenate([door, frame_panel]))
    traj = door_trajectory(scene, width, swing, 0.5 * door_h)
    return Demonstration("door_opening", cloud, traj, np.ones(HORIZON))


def _painting_demo(rng: np.random.Generator) -> Demonstration:
    width = rng.uniform(0.3, 0.5)
    height = rng.uniform(0.2, 0.4)
    n = CLOUD_SIZE["painting"]
    local = np.column_stack([rng.uniform(-width / 2, width / 2, n),
                             rng.uniform(-height / 2, height / 2, n), np.zeros(n)])
    canvas = _scene_pose(rng)
    cloud = geo.transform_points(canvas, local)
    traj = painting_trajectory(canvas, width, height, margin=0.04, standoff=0.005)
    return Demonstration("painting", cloud, traj, np.ones(HORIZON))


_DEMO_BUILDERS: dict[str, Callable[[np.random.Generator], Demonstration]] = {
    "painting": _painting_demo,
    "door_opening": _door_demo,
    "rotating_triangle": _triangle_demo,
}


def _generate(task: str, rng: np.random.Generator, n: int) -> Dataset:
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    # one independent stream per demonstration
    streams = rng.spawn(n)
    return Dataset(task, "train", -1, [_DEMO_BUILDERS[task](s) for s in streams])


def generate_rotating_triangle(rng: np.random.Generator, n: int) -> Dataset:
    """Triangle clouds with the gripper turning about the triangle normal.

    The total turn is drawn from [pi/4, 3pi/4] and split into equal steps.
    """
    return _generate("rotating_triangle", rng, n)


def generate_door_opening(rng: np.random.Generator, n: int) -> Dataset:
    return _generate("door_opening", rng, n)


def generate_painting(rng: np.random.Generator, n: int) -> Dataset:
    return _generate("painting", rng, n)


GENERATORS = {
    "painting": generate_painting,
    "door_opening": generate_door_opening,
    "rotating_triangle": generate_rotating_triangle,
}


def make_dataset(task: str, n: int, seed: int, split: str = "train") -> Dataset:
    """Seeded dataset; train and test draw from disjoint seed streams.

    Test demonstrations are additionally moved by a random rigid offset
    (rotation <= 60 degrees, translation <= 0.3 m).
    """
    if task not in TASKS:
        raise InvalidArgument(f"unknown task {task!r}; choose from {TASKS}")
    if split not in SPLITS:
        raise InvalidArgument(f"unknown split {split!r}")
    root = np.random.SeedSequence([seed % 2**63, SPLITS.index(split)])
    gen_seq, offset_seq = root.spawn(2)
    ds = GENERATORS[task](np.random.default_rng(gen_seq), n)
    ds.split, ds.seed = split, seed
    if split == "test":
        rng = np.random.default_rng(offset_seq)
        ds.demonstrations = [
            d.transformed(geo.random_pose(rng, TEST_MAX_ANGLE, TEST_MAX_TRANS))
            for d in ds.demonstrations
        ]
    return ds


# -- serialization --------------------------------------------------------------------

def dataset_bytes(ds: Dataset) -> bytes:
    if not ds.demonstrations:
        raise InvalidArgument("cannot serialize an empty dataset")
    n_points = ds.demonstrations[0].cloud.shape[0]
    length = ds.demonstrations[0].trajectory.shape[0]
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, TASKS.index(ds.task),
                          SPLITS.index(ds.split), len(ds), n_points, length, ds.seed)]
    for d in ds.demonstrations:
        if d.cloud.shape != (n_points, 3) or d.trajectory.shape != (length, 4, 4):
            raise InvalidArgument("all demonstrations must share cloud size and horizon")
        parts.append(np.concatenate([d.cloud.ravel(), d.trajectory.ravel(),
                                     d.gripper.ravel()]).astype("<f8").tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_bytes(ds))


def parse_dataset(data: bytes) -> Dataset:
    if len(data) < _HEADER.size:
        raise FormatError("file truncated inside the header", offset=len(data))
    magic, version, task, split, count, n_points, length, seed = _HEADER.unpack_from(data)
    if magic != DATASET_MAGIC:
        raise FormatError("bad dataset magic", offset=0)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported dataset version {version}", offset=8)
    if task >= len(TASKS):
        raise FormatError(f"unknown task code {task}", offset=10)
    if split >= len(SPLITS):
        raise FormatError(f"unknown split code {split}", offset=11)
    record = 3 * n_points + 17 * length
    expected = _HEADER.size + 8 * record * count
    if len(data) != expected:
        raise FormatError(
            f"header announces {count} demonstrations ({expected} bytes) "
            f"but the file has {len(data)} bytes",
            offset=min(len(data), expected),
        )
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(count, record)
    demos = []
    for row in body:
        cloud = row[:3 * n_points].reshape(n_points, 3).copy()
        traj = row[3 * n_points:3 * n_points + 16 * length].reshape(length, 4, 4).copy()
        grip = row[3 * n_points + 16 * length:].copy()
        demos.append(Demonstration(TASKS[task], cloud, traj, grip))
    return Dataset(TASKS[task], SPLITS[split], seed, demos)


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


def dataset_to_json(ds: Dataset) -> str:
    """Lossless JSON: every float as its shortest round-tripping decimal string."""
    def enc(arr):
        return [repr(float(v)) for v in np.asarray(arr).ravel()]

    return json.dumps({
        "task": ds.task, "split": ds.split, "seed": ds.seed,
        "demonstrations": [
            {"cloud": enc(d.cloud), "trajectory": enc(d.trajectory), "gripper": enc(d.gripper),
             "n_points": d.cloud.shape[0], "horizon": d.trajectory.shape[0]}
            for d in ds.demonstrations
        ],
    }, indent=1)


def dataset_from_json(text: str) -> Dataset:
    raw = json.loads(text)
    demos = []
    for d in raw["demonstrations"]:
        n, length = d["n_points"], d["horizon"]
        demos.append(Demonstration(
            raw["task"],
            np.array([float(v) for v in d["cloud"]]).reshape(n, 3),
            np.array([float(v) for v in d["trajectory"]]).reshape(length, 4, 4),
            np.array([float(v) for v in d["gripper"]]),
        ))
    return Dataset(raw["task"], raw["split"], raw["seed"], demos)
