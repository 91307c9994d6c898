"""Lie-group ODE solvers for flows on SE(3).

All solvers advance poses by exponential-map steps, so every state stays
exactly on the group up to round-off. Multi-stage methods work in the
Runge-Kutta-Munthe-Kaas style: stages live in the Lie algebra, anchored
at the pose at the start of the step, and the algebra increment is
mapped back with ``exp``.

A field is any callable ``field(poses (B,4,4), t (B,)) -> twists (B,6)``.
Integration is batched: ``z0`` may be a single pose or a stack of them.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import geometry as geo
from .errors import IntegrationFailure, InvalidArgument
from .model import DriftModel, Observation, drift_batch

Field = Callable[[np.ndarray, np.ndarray], np.ndarray]

SOLVER_KINDS = ("euler", "rk4", "rk45")
MIN_STEP = 1e-12


@dataclass(frozen=True)
class SolverSpec:
    """``steps`` fixes the grid for euler/rk4 and the first trial step for rk45."""

    kind: str = "rk4"
    steps: int = 100
    rtol: float = 1e-6
    atol: float = 1e-8
    max_steps: int = 10000

    def __post_init__(self):
        if self.kind not in SOLVER_KINDS:
            raise InvalidArgument(f"unknown solver {self.kind!r}; choose from {SOLVER_KINDS}")
        if self.steps < 1:
            raise InvalidArgument("steps must be >= 1")
        if self.rtol <= 0 or self.atol <= 0:
            raise InvalidArgument("rtol and atol must be positive")
        if self.max_steps < 1:
            raise InvalidArgument("max_steps must be >= 1")

    def normalized(self) -> "SolverSpec":
        """A one-step budget always means a single Euler exponential step."""
        if self.steps == 1 and self.kind != "euler":
            return SolverSpec("euler", 1, self.rtol, self.atol, self.max_steps)
        return self

    @property
    def label(self) -> str:
        return f"{self.kind}-{self.steps}"


@dataclass
class FlowPath:
    """Poses along a flow. ``poses`` is ``(T, 4, 4)`` or ``(T, B, 4, 4)``."""

    times: np.ndarray
    poses: np.ndarray

    @property
    def initial(self) -> np.ndarray:
        return self.poses[0]

    @property
    def terminal(self) -> np.ndarray:
        return self.poses[-1]

    def __len__(self) -> int:
        return len(self.times)

    def member(self, index: int) -> "FlowPath":
        """Path of one batch member."""
        return FlowPath(self.times, self.poses[:, index])

    def to_csv(self, path) -> None:
        if self.poses.ndim != 3:
            raise InvalidArgument("export one batch member at a time (FlowPath.member)")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + [f"m{r}{c}" for r in range(4) for c in range(4)])
            for t, pose in zip(self.times, self.poses):
                writer.writerow([repr(float(t))] + [repr(v) for v in geo.pose_to_row(pose)])


def step_exp(z, xi, h: float, convention: str = "spatial") -> np.ndarray:
    """One exponential step: ``Exp(h xi) z`` (spatial) or ``z Exp(h xi)`` (body)."""
    inc = geo.exp_map(h * np.asarray(xi, dtype=np.float64))
    z = np.asarray(z, dtype=np.float64)
    return inc @ z if convention == "spatial" else z @ inc


def dexpinv(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inverse derivative of exp, Bernoulli series truncated after ad_u^4.

    Truncation error is O(|u|^6), below the order of every solver here.
    """
    a1 = geo.bracket(u, v)
    a2 = geo.bracket(u, a1)
    a4 = geo.bracket(u, geo.bracket(u, a2))
    return v - 0.5 * a1 + a2 / 12.0 - a4 / 720.0


class _Stepper:
    def __init__(self, field: Field, convention: str):
        if convention not in ("spatial", "body"):
            raise InvalidArgument(f"unknown convention {convention!r}")
        self.field = field
        self.convention = convention

    def place(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return step_exp(z, u, 1.0, self.convention)

    def stage(self, z: np.ndarray, u: np.ndarray, t: float) -> np.ndarray:
        tt = np.full(z.shape[0], t)
        if not np.any(u):
            return self.field(z, tt)
        f = self.field(self.place(z, u), tt)
        return dexpinv(u if self.convention == "spatial" else -u, f)


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_B4 = np.array([5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200,
                   187 / 2100, 1 / 40])

_RK4_C = (0.0, 0.5, 0.5, 1.0)
_RK4_A = ([], [0.5], [0.0, 0.5], [0.0, 0.0, 1.0])
_RK4_B = (1 / 6, 1 / 3, 1 / 3, 1 / 6)


def _explicit_step(st: _Stepper, z, t, h, c, a, b):
    ks = []
    for i in range(len(c)):
        u = sum((h * aij * k for aij, k in zip(a[i], ks) if aij != 0.0), np.zeros(z.shape[:1] + (6,)))
        ks.append(st.stage(z, u, t + c[i] * h))
    return ks, sum(h * bi * k for bi, k in zip(b, ks))


def integrate_field(field: Field, z0, spec: SolverSpec = SolverSpec(),
                    convention: str = "spatial", record: bool = True) -> FlowPath:
    """Integrate ``field`` from t=0 to t=1 starting at ``z0``.

    With ``record=False`` only the initial and terminal poses are kept.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    single = z0.ndim == 2
    z = z0[None] if single else z0
    spec = spec.normalized()
    st = _Stepper(field, convention)
    times, poses = [0.0], [z]

    def result():
        p = np.stack(poses)
        return FlowPath(np.array(times), p[:, 0] if single else p)

    if spec.kind in ("euler", "rk4"):
        h = 1.0 / spec.steps
        for n in range(spec.steps):
            t = n * h
            if spec.kind == "euler":
                u = h * st.stage(z, np.zeros(z.shape[:1] + (6,)), t)
            else:
                _, u = _explicit_step(st, z, t, h, _RK4_C, _RK4_A, _RK4_B)
            z = st.place(z, u)
            t_next = 1.0 if n == spec.steps - 1 else (n + 1) * h
            if record or n == spec.steps - 1:
                times.append(t_next)
                poses.append(z)
        return result()

    # adaptive Dormand-Prince on the local algebra increment
    t, h = 0.0, 1.0 / spec.steps
    n_steps = 0
    while t < 1.0:
        if n_steps >= spec.max_steps:
            raise IntegrationFailure(f"rk45 exceeded max_steps={spec.max_steps} at t={t:.6g}",
                                     path=result())
        if h < MIN_STEP:
            raise IntegrationFailure(f"rk45 step size underflow at t={t:.6g}", path=result())
        h = min(h, 1.0 - t)
        ks, u5 = _explicit_step(st, z, t, h, _DP_C, _DP_A, _DP_B5)
        u4 = sum(h * bi * k for bi, k in zip(_DP_B4, ks))
        scale = spec.atol + spec.rtol * np.abs(u5)
        # every component of every batch member must meet its own tolerance
        err = float(np.max(np.abs(u5 - u4) / scale))
        n_steps += 1
        if not math.isfinite(err):
            raise IntegrationFailure(f"non-finite error estimate at t={t:.6g}", path=result())
        if err <= 1.0:
            z = st.place(z, u5)
            t = 1.0 if 1.0 - (t + h) < 1e-14 else t + h
            if record or t == 1.0:
                times.append(t)
                poses.append(z)
        factor = 5.0 if err == 0.0 else min(5.0, max(0.2, 0.9 * err ** -0.2))
        h *= factor
    return result()


def model_field(model: DriftModel, enc) -> Field:
    return lambda z, t: drift_batch(model, z, t, enc)


def integrate(model: DriftModel, z0, obs, spec: SolverSpec = SolverSpec(),
              record: bool = True) -> FlowPath:
    """Integrate the learned flow for one observation or an encoded batch."""
    enc = model.encode(obs) if isinstance(obs, Observation) else obs
    return integrate_field(model_field(model, enc), z0, spec, model.convention, record)


def straightness(path: FlowPath) -> float | np.ndarray:
    """Largest d_geo between interior nodes and the endpoint chord."""
    if len(path) < 3:
        return 0.0 if path.poses.ndim == 3 else np.zeros(path.poses.shape[1])
    z0, z1 = path.poses[0], path.poses[-1]
    worst = None
    for t, pose in zip(path.times[1:-1], path.poses[1:-1]):
        chord = geo.geodesic_interp(z0, z1, np.full(pose.shape[:-2], t))
        d = np.asarray(geo.d_geo(pose, chord))
        worst = d if worst is None else np.maximum(worst, d)
    return float(worst) if worst.ndim == 0 else worst
