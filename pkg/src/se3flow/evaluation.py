"""Trajectory-level pose-error evaluation and report tables."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from itertools import groupby
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import geometry as geo
from .errors import FormatError, IntegrationFailure, InvalidArgument
from .integrator import SolverSpec, integrate, straightness
from .model import DriftModel, Observation, observation_frame
from .tasks import Dataset
from .training import sample_noise_twist

log = logging.getLogger(__name__)

BASE_SEED = 3407
DEFAULT_SEEDS = tuple(BASE_SEED + i for i in range(10))
DEFAULT_STEPS = (1, 2, 10, 50, 100)


@dataclass
class EvalRun:
    model: str
    stage: int
    task: str
    solver: str
    steps: int
    seed: int
    per_action: np.ndarray
    trajectory_mean: float
    failed: bool = False
    external: bool = False
    noise_scale: float = 0.5
    straightness: float = float("nan")


@dataclass
class AggregateReport:
    task: str
    model: str
    steps: int
    mean: float
    std: float
    n_seeds: int
    n_failed: int = 0
    external: bool = False


def evaluate_trajectory(pred, truth) -> tuple[np.ndarray, float]:
    """Per-action d_geo and their average."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape or pred.ndim != 3:
        raise InvalidArgument(f"trajectory shapes differ: {pred.shape} vs {truth.shape}")
    per_action = np.asarray(geo.d_geo(pred, truth), dtype=np.float64).reshape(-1)
    return per_action, float(np.mean(per_action))


@dataclass
class Rollout:
    """Predicted trajectories for every test demonstration under one seed."""

    poses: np.ndarray        # (D, L, 4, 4)
    start_poses: np.ndarray  # (D, L, 4, 4)
    straightness: np.ndarray  # (D, L)


def rollout(model: DriftModel, dataset: Dataset, spec: SolverSpec, seed: int,
            noise_scale: float = 0.5, mode: str = "chained",
            measure_straightness: bool = False) -> Rollout:
    """Generate every action of every test demonstration.

    ``chained``: action ``k`` starts from noise around the predicted pose
    ``k-1`` (action 0 from the cloud frame). ``joint``: each action starts
    from noise around the demonstrated pose ``k-1``.
    """
    if mode not in ("chained", "joint"):
        raise InvalidArgument(f"unknown rollout mode {mode!r}")
    demos = dataset.demonstrations
    if not demos:
        raise InvalidArgument("test set is empty")
    length = demos[0].trajectory.shape[0]
    rng = np.random.default_rng(seed)
    noise = sample_noise_twist(rng, noise_scale, len(demos) * length).reshape(len(demos), length, 6)
    base = model.encode_many([Observation(d.cloud) for d in demos])
    frames = np.stack([observation_frame(d.cloud) for d in demos])
    truth = np.stack([d.trajectory for d in demos])
    poses = np.empty_like(truth)
    starts = np.empty_like(truth)
    straight = np.zeros((len(demos), length))
    record = measure_straightness
    for k in range(length):
        if k == 0:
            anchors = frames
        else:
            anchors = poses[:, k - 1] if mode == "chained" else truth[:, k - 1]
        enc = base.with_anchors(anchors, k / length)
        z0 = anchors @ geo.exp_map(noise[:, k])
        path = integrate(model, z0, enc, spec, record=record)
        starts[:, k] = z0
        poses[:, k] = path.terminal
        if measure_straightness:
            straight[:, k] = straightness(path)
    return Rollout(poses, starts, straight)


def run_eval(model: DriftModel, dataset: Dataset, spec: SolverSpec,
             seeds: Sequence[int] = DEFAULT_SEEDS, model_id: str | None = None,
             noise_scale: float = 0.5, mode: str = "chained",
             measure_straightness: bool = False) -> list[EvalRun]:
    """One :class:`EvalRun` per seed; per-action errors average over test demos."""
    if len(dataset) == 0:
        raise InvalidArgument("test set is empty")
    model_id = model_id or f"flow{model.stage}"
    spec_n = spec.normalized()
    runs = []
    for seed in seeds:
        try:
            out = rollout(model, dataset, spec, seed, noise_scale, mode, measure_straightness)
        except IntegrationFailure as exc:
            log.warning("seed %d failed: %s", seed, exc)
            runs.append(EvalRun(model_id, model.stage, dataset.task, spec_n.kind, spec.steps,
                                seed, np.full(dataset[0].trajectory.shape[0], np.nan),
                                float("nan"), failed=True, noise_scale=noise_scale))
            continue
        truth = np.stack([d.trajectory for d in dataset])
        errors = np.asarray(geo.d_geo(out.poses, truth))
        per_action = errors.mean(axis=0)
        runs.append(EvalRun(model_id, model.stage, dataset.task, spec_n.kind, spec.steps, seed,
                            per_action, float(np.mean(per_action)), noise_scale=noise_scale,
                            straightness=float(out.straightness.mean())))
    return runs


def _sample_std(values: np.ndarray) -> float:
    return 0.0 if len(values) < 2 else float(np.std(values, ddof=1))


def aggregate(runs: Iterable[EvalRun], mix_external: bool = False) -> list[AggregateReport]:
    """Mean and sample std of trajectory means per (task, model, steps).

    External runs form their own groups unless ``mix_external`` is set.
    Failed runs are counted, not averaged.
    """
    runs = list(runs)
    if not runs:
        raise InvalidArgument("nothing to aggregate")

    def key(r):
        return (r.task, r.model, r.steps, False if mix_external else r.external)

    reports = []
    for (task, model, steps, external), group in groupby(sorted(runs, key=key), key=key):
        group = list(group)
        ok = np.array([r.trajectory_mean for r in group if not r.failed])
        n_failed = len(group) - len(ok)
        mean = float(np.mean(ok)) if len(ok) else float("nan")
        reports.append(AggregateReport(task, model, steps, mean, _sample_std(ok), len(ok),
                                       n_failed, external))
    return reports


def error_reduction(baseline: float, ours: float) -> float:
    """Percentage by which ``ours`` improves on ``baseline``."""
    if not baseline > 0:
        raise InvalidArgument("baseline must be positive")
    return 100.0 * (baseline - ours) / baseline


def step_ablation(model: DriftModel, dataset: Dataset, steps_list: Sequence[int],
                  seeds: Sequence[int] = DEFAULT_SEEDS, kind: str = "rk4",
                  model_id: str | None = None, noise_scale: float = 0.5,
                  ) -> tuple[list[AggregateReport], list[EvalRun]]:
    if not steps_list:
        raise InvalidArgument("steps_list is empty")
    runs = []
    for steps in steps_list:
        runs.extend(run_eval(model, dataset, SolverSpec(kind, int(steps)), seeds,
                             model_id, noise_scale))
    return aggregate(runs), runs


# -- files -------------------------------------------------------------------------------

PER_ACTION_COLUMNS = ("task", "model", "steps", "seed", "action_index", "d_geo")
AGGREGATE_COLUMNS = ("task", "model", "steps", "mean", "std", "n")
EXTERNAL_COLUMNS = ("task", "model", "steps", "seed", "trajectory_mean")


def per_action_csv(runs: Iterable[EvalRun]) -> str:
    buf = io.StringIO()
    buf.write(",".join(PER_ACTION_COLUMNS) + "\n")
    for r in runs:
        if r.failed:
            continue
        for k, value in enumerate(r.per_action):
            buf.write(f"{r.task},{r.model},{r.steps},{r.seed},{k},{float(value)!r}\n")
    return buf.getvalue()


def aggregate_csv(reports: Iterable[AggregateReport]) -> str:
    buf = io.StringIO()
    buf.write(",".join(AGGREGATE_COLUMNS) + "\n")
    for r in reports:
        buf.write(f"{r.task},{r.model},{r.steps},{r.mean!r},{r.std!r},{r.n_seeds}\n")
    return buf.getvalue()


def import_external_results(path) -> list[EvalRun]:
    """Read trajectory means produced elsewhere (e.g. a baseline's published table).

    Columns: task, model, steps, seed, trajectory_mean. ``steps`` and
    ``seed`` may be empty. A header row naming the columns is optional.
    """
    text = Path(path).read_text()
    runs = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if lineno == 1 and [c.strip() for c in row] == list(EXTERNAL_COLUMNS):
            continue
        if len(row) != len(EXTERNAL_COLUMNS):
            raise FormatError(
                f"expected {len(EXTERNAL_COLUMNS)} columns, found {len(row)}", line=lineno
            )
        task, model, steps, seed, value = (c.strip() for c in row)
        try:
            mean = float(value)
            steps_i = int(steps) if steps else 0
            seed_i = int(seed) if seed else -1
        except ValueError as exc:
            raise FormatError(f"unparseable number: {exc}", line=lineno) from exc
        if not math.isfinite(mean) or mean < 0:
            raise FormatError("trajectory_mean must be a finite non-negative number", line=lineno)
        runs.append(EvalRun(model, 0, task, "external", steps_i, seed_i, np.array([mean]),
                            mean, external=True))
    return runs


def side_by_side(reports: Sequence[AggregateReport], digits: int = 3) -> str:
    """Plain-text table with one row per model and one column per task."""
    tasks = sorted({r.task for r in reports})
    rows: dict[str, dict[str, str]] = {}
    for r in sorted(reports, key=lambda r: (r.external is False, r.model, r.steps)):
        label = r.model if r.steps == 0 else f"{r.model} ({r.steps} steps)"
        cell = f"{r.mean:.{digits}f}"
        if r.n_seeds > 1:
            cell += f" ± {r.std:.{digits}f}"
        rows.setdefault(label, {})[r.task] = cell
    header = ["model"] + tasks
    table = [header] + [[label] + [cells.get(t, "-") for t in tasks]
                        for label, cells in rows.items()]
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    lines = []
    for j, row in enumerate(table):
        lines.append(" | ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip())
        if j == 0:
            lines.append("-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
