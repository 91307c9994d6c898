"""Two-stage rectified-flow training on SE(3).

Stage 1 regresses the drift onto the constant spatial twist of the
geodesic between a noisy start pose and a demonstrated action. Stage 2
(reflow) warm-starts from stage 1 and mixes in pairs whose endpoints were
produced by integrating the stage-1 flow.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import geometry as geo
from .errors import CutLocusError, IntegrationFailure, InvalidArgument, NumericFailure
from .integrator import SolverSpec, integrate
from .model import (
    DriftModel,
    EncodedObservations,
    Gradients,
    Observation,
    drift_batch_vjp,
    observation_frame,
)
from .tasks import HORIZON, MAX_STEP_ANGLE, Dataset

log = logging.getLogger(__name__)

MAX_PAIR_ATTEMPTS = 100


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    batch_size: int = 1
    epochs: int = 5000
    rectified_step_budget: int = 100
    mix_ratio: float = 0.5
    seed: int = 3407
    lr_schedule: str = "cosine"
    noise_scale: float = 0.5
    grad_clip: float | None = None
    hidden: tuple[int, ...] = (64, 64)
    # reflow endpoints: "flow" integrates stage 1, "gaussian" uses fresh noise pairs
    reflow_endpoint: str = "flow"
    synthesis_solver: str = "rk4"
    convention: str = "spatial"

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.rectified_step_budget < 1:
            raise InvalidArgument("batch_size, rectified_step_budget >= 1 and epochs >= 0")
        if not 0.0 <= self.mix_ratio <= 1.0:
            raise InvalidArgument("mix_ratio must lie in [0, 1]")
        if self.lr_schedule not in ("cosine", "constant"):
            raise InvalidArgument(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.noise_scale <= 0:
            raise InvalidArgument("noise_scale must be positive")
        if self.reflow_endpoint not in ("flow", "gaussian"):
            raise InvalidArgument(f"unknown reflow_endpoint {self.reflow_endpoint!r}")

    @classmethod
    def flow1(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def flow2(cls, **overrides) -> "TrainConfig":
        base = dict(learning_rate=8e-5, epochs=3000, mix_ratio=0.5, rectified_step_budget=200)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class TrainingPair:
    h0: np.ndarray
    h1: np.ndarray
    obs: Observation
    source: str = "original"


@dataclass
class LossReport:
    epoch: int
    mean_loss: float
    lr: float
    wall_time: float
    n_samples: int = 0
    n_reflow: int = 0


def cosine_lr(base: float, epoch: int, epochs: int) -> float:
    if epochs <= 0:
        return base
    return base * (1.0 + math.cos(math.pi * epoch / epochs)) / 2.0


def sample_noise_twist(rng: np.random.Generator, scale: float, size: int | None = None) -> np.ndarray:
    """I.i.d. Normal(0, scale^2) twists, angular part resampled into the 0.9 pi ball."""
    if scale <= 0:
        raise InvalidArgument("noise scale must be positive")
    n = 1 if size is None else size
    xi = rng.normal(scale=scale, size=(n, 6))
    bad = np.linalg.norm(xi[:, :3], axis=1) > MAX_STEP_ANGLE
    while np.any(bad):
        xi[bad, :3] = rng.normal(scale=scale, size=(int(bad.sum()), 3))
        bad = np.linalg.norm(xi[:, :3], axis=1) > MAX_STEP_ANGLE
    return xi[0] if size is None else xi


def sample_noise_pose(rng: np.random.Generator, scale: float = 0.5) -> np.ndarray:
    """A pose near the identity drawn from the isotropic se(3) Gaussian."""
    return geo.exp_map(sample_noise_twist(rng, scale))


# -- batched pairs ----------------------------------------------------------------------

@dataclass
class PairBatch:
    """Stacked training pairs, encoded for a model's feature layout."""

    h0: np.ndarray
    h1: np.ndarray
    enc: EncodedObservations
    reflow: np.ndarray  # bool per pair

    def __len__(self) -> int:
        return self.h0.shape[0]

    def take(self, idx) -> "PairBatch":
        return PairBatch(self.h0[idx], self.h1[idx], self.enc.take(idx), self.reflow[idx])

    @staticmethod
    def concat(parts: Sequence["PairBatch"]) -> "PairBatch":
        return PairBatch(np.concatenate([p.h0 for p in parts]),
                         np.concatenate([p.h1 for p in parts]),
                         EncodedObservations.concat([p.enc for p in parts]),
                         np.concatenate([p.reflow for p in parts]))


def _relative_angle(h0: np.ndarray, h1: np.ndarray) -> np.ndarray:
    return geo.rotation_angle(h1[..., :3, :3] @ np.swapaxes(h0[..., :3, :3], -1, -2))


def encode_pairs(model: DriftModel, pairs: Sequence[TrainingPair]) -> PairBatch:
    """Stack pairs that satisfy the rotation bound; reject and log the rest."""
    keep = []
    for i, p in enumerate(pairs):
        angle = float(_relative_angle(np.asarray(p.h0), np.asarray(p.h1)))
        if angle > MAX_STEP_ANGLE:
            log.warning("rejected training pair %d: relative rotation %.4f rad", i, angle)
            continue
        keep.append(p)
    if not keep:
        raise InvalidArgument("no usable training pairs")
    cache: dict[int, EncodedObservations] = {}
    encs = []
    for p in keep:
        key = id(p.obs.cloud)
        if key not in cache:
            cache[key] = model.encode(Observation(p.obs.cloud))
        base = cache[key]
        anchor = base.frames[0] if p.obs.anchor is None else p.obs.anchor
        encs.append(base.with_anchors(np.asarray(anchor)[None], p.obs.progress))
    return PairBatch(np.stack([np.asarray(p.h0, dtype=np.float64) for p in keep]),
                     np.stack([np.asarray(p.h1, dtype=np.float64) for p in keep]),
                     EncodedObservations.concat(encs),
                     np.array([p.source == "reflow" for p in keep]))


class DemoPairs:
    """All (demonstration, action step) targets of a dataset.

    Action ``k`` starts from the previous demonstrated pose; action 0 starts
    from the frame of the cloud. Start poses are the anchor composed with a
    fresh se(3) noise sample each time :meth:`draw` is called.
    """

    def __init__(self, dataset: Dataset):
        if len(dataset) == 0:
            raise InvalidArgument("dataset is empty")
        self.dataset = dataset
        anchors, targets, obs = [], [], []
        for demo in dataset:
            length = demo.trajectory.shape[0]
            for k in range(length):
                anchor = observation_frame(demo.cloud) if k == 0 else demo.trajectory[k - 1]
                anchors.append(anchor)
                targets.append(demo.trajectory[k])
                obs.append(Observation(demo.cloud, anchor, k / length))
        self.anchors = np.stack(anchors)
        self.targets = np.stack(targets)
        self.observations = obs
        self._encoded: dict[tuple, EncodedObservations] = {}

    def __len__(self) -> int:
        return len(self.targets)

    def encoded(self, model: DriftModel) -> EncodedObservations:
        key = (model.n_bins, model.r_max)
        if key not in self._encoded:
            clouds: dict[int, EncodedObservations] = {}
            parts = []
            for o in self.observations:
                if id(o.cloud) not in clouds:
                    clouds[id(o.cloud)] = model.encode(Observation(o.cloud))
                parts.append(clouds[id(o.cloud)].with_anchors(o.anchor[None], o.progress))
            self._encoded[key] = EncodedObservations.concat(parts)
        return self._encoded[key]

    def start_poses(self, rng: np.random.Generator, scale: float,
                    idx: np.ndarray | None = None) -> np.ndarray:
        idx = np.arange(len(self)) if idx is None else idx
        anchors = self.anchors[idx]
        out = np.empty_like(anchors)
        todo = np.arange(len(idx))
        for _ in range(MAX_PAIR_ATTEMPTS):
            out[todo] = anchors[todo] @ geo.exp_map(sample_noise_twist(rng, scale, len(todo)))
            angles = _relative_angle(out[todo], self.targets[idx][todo])
            todo = todo[angles > MAX_STEP_ANGLE]
            if todo.size == 0:
                return out
            log.info("resampling %d start poses beyond the rotation bound", todo.size)
        raise InvalidArgument(
            f"could not draw start poses within the rotation bound after {MAX_PAIR_ATTEMPTS} attempts"
        )

    def draw(self, model: DriftModel, rng: np.random.Generator, scale: float) -> PairBatch:
        return PairBatch(self.start_poses(rng, scale), self.targets, self.encoded(model),
                         np.zeros(len(self), dtype=bool))

    def pairs(self, rng: np.random.Generator, scale: float) -> list[TrainingPair]:
        h0 = self.start_poses(rng, scale)
        return [TrainingPair(a, b, o) for a, b, o in zip(h0, self.targets, self.observations)]


# -- loss ---------------------------------------------------------------------------------

def batch_loss(model: DriftModel, batch: PairBatch, t: np.ndarray,
               with_grad: bool = True) -> tuple[np.ndarray, Gradients | None]:
    """Per-pair squared errors and the gradient of their mean."""
    target = geo.geodesic_diff(batch.h1, batch.h0)
    ht = geo.exp_map(np.asarray(t)[:, None] * target) @ batch.h0
    pred, backward = drift_batch_vjp(model, ht, t, batch.enc)
    resid = pred - target
    losses = np.sum(resid * resid, axis=1)
    grads = backward(2.0 * resid / len(batch)) if with_grad else None
    return losses, grads


def flow1_loss(model: DriftModel, pair: TrainingPair, t: float) -> tuple[float, Gradients]:
    """``|(h1 (-) h0) - drift(h_t, t)|^2`` for one pair, with its gradient."""
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument("t must lie in [0, 1]")
    angle = float(_relative_angle(np.asarray(pair.h0), np.asarray(pair.h1)))
    if angle > math.pi - geo.CUT_LOCUS_MARGIN:
        log.warning("pair rejected: relative rotation %.6f on the cut locus", angle)
        raise CutLocusError(angle)
    losses, grads = batch_loss(model, encode_pairs(model, [pair]), np.array([t]))
    return float(losses[0]), grads


def mean_loss(model: DriftModel, pairs, t: np.ndarray) -> float:
    batch = pairs if isinstance(pairs, PairBatch) else encode_pairs(model, pairs)
    losses, _ = batch_loss(model, batch, np.asarray(t, dtype=np.float64), with_grad=False)
    return float(np.mean(losses))


# -- training loops -----------------------------------------------------------------------

def _source(model: DriftModel, data):
    if isinstance(data, Dataset):
        return DemoPairs(data)
    if isinstance(data, DemoPairs):
        return data
    pairs = list(data)
    if not pairs:
        raise InvalidArgument("no training pairs")
    return encode_pairs(model, pairs)


def _draw(source, model, rng, cfg) -> PairBatch:
    return source.draw(model, rng, cfg.noise_scale) if isinstance(source, DemoPairs) else source


def _run_epochs(model: DriftModel, cfg: TrainConfig, rng: np.random.Generator, epoch_batch) -> list[LossReport]:
    reports = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.learning_rate, epoch, cfg.epochs) if cfg.lr_schedule == "cosine" \
            else cfg.learning_rate
        batch = epoch_batch(epoch)
        n = len(batch)
        order = rng.permutation(n)
        ts = rng.uniform(size=n)
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            try:
                losses, grads = batch_loss(model, batch.take(idx), ts[idx])
            except NumericFailure as exc:
                raise NumericFailure(f"epoch {epoch}, sample {int(idx[0])}: {exc}",
                                     layer=exc.layer, epoch=epoch, sample=int(idx[0])) from exc
            if not np.all(np.isfinite(losses)):
                raise NumericFailure(f"non-finite loss at epoch {epoch}, sample {int(idx[0])}",
                                     epoch=epoch, sample=int(idx[0]))
            if cfg.grad_clip is not None:
                norm = grads.norm()
                if norm > cfg.grad_clip:
                    grads = grads.scale(cfg.grad_clip / norm)
            model.apply_update(grads, lr)
            total += float(losses.sum())
        reports.append(LossReport(epoch, total / n, lr, time.perf_counter() - start,
                                  n, int(batch.reflow.sum())))
    return reports


def train_flow1(data, cfg: TrainConfig, rng: np.random.Generator,
                model: DriftModel | None = None) -> tuple[DriftModel, list[LossReport]]:
    """Stage-1 training by plain SGD with an optional cosine schedule.

    ``data`` is a :class:`Dataset` (start poses resampled every epoch) or a
    fixed sequence of :class:`TrainingPair`.
    """
    if model is None:
        model = DriftModel.initialize(cfg.hidden, rng, convention=cfg.convention)
    else:
        model = model.copy()
    model.stage = 1
    model.train_config = cfg.to_dict()
    source = _source(model, data)
    reports = _run_epochs(model, cfg, rng, lambda epoch: _draw(source, model, rng, cfg))
    return model, reports


class ReflowPairs(list):
    """Synthesized pairs plus counts of what was dropped.

    ``indices[i]`` is the position of pair ``i``'s observation in
    :class:`DemoPairs` order, which is what gets stored on disk.
    """

    def __init__(self, *args):
        super().__init__(*args)
        self.rejected = 0
        self.failed = 0
        self.indices: list[int] = []


def synthesize_reflow_pairs(model1: DriftModel, dataset, n: int, rng: np.random.Generator,
                            spec: SolverSpec | None = None, noise_scale: float = 0.5,
                            endpoint: str = "flow") -> ReflowPairs:
    """Pairs ``(Z0, Z1)`` with ``Z1`` the stage-1 flow integrated from ``Z0``.

    Each pair has its own random stream derived from one draw of ``rng``
    and the pair index, so pairs do not depend on how work is batched.
    """
    if model1.stage != 1:
        raise InvalidArgument("reflow pairs must come from a stage-1 model")
    out = ReflowPairs()
    if n <= 0:
        return out
    spec = spec or SolverSpec("rk4", 100)
    source = dataset if isinstance(dataset, DemoPairs) else DemoPairs(dataset)
    base = int(rng.integers(2**62))
    picks, z0 = np.empty(n, dtype=np.int64), np.empty((n, 4, 4))
    for i in range(n):
        prng = np.random.default_rng([base, i])
        picks[i] = prng.integers(len(source))
        z0[i] = source.anchors[picks[i]] @ geo.exp_map(sample_noise_twist(prng, noise_scale))
    if endpoint == "gaussian":
        z1 = source.targets[picks]
    else:
        enc = source.encoded(model1).take(picks)
        try:
            z1 = integrate(model1, z0, enc, spec, record=False).terminal
        except IntegrationFailure:
            # retry one by one so a single stiff pair does not sink the batch
            z1 = np.full((n, 4, 4), np.nan)
            for i in range(n):
                try:
                    z1[i] = integrate(model1, z0[i], enc.take([i]), spec, record=False).terminal
                except IntegrationFailure as exc:
                    out.failed += 1
                    log.warning("reflow pair %d skipped: %s", i, exc)
    for i in range(n):
        if not np.all(np.isfinite(z1[i])):
            continue
        if float(_relative_angle(z0[i], z1[i])) > MAX_STEP_ANGLE:
            out.rejected += 1
            continue
        out.append(TrainingPair(z0[i], z1[i], source.observations[picks[i]], "reflow"))
        out.indices.append(int(picks[i]))
    if out.rejected or out.failed:
        log.warning("reflow synthesis: %d rejected, %d failed of %d", out.rejected, out.failed, n)
    return out


def train_flow2(model1: DriftModel, data, cfg: TrainConfig, rng: np.random.Generator,
                reflow_pairs: Sequence[TrainingPair] | None = None
                ) -> tuple[DriftModel, list[LossReport]]:
    """Stage-2 training warm-started from ``model1``.

    Every drawn sample is a reflow pair with probability ``cfg.mix_ratio``
    and an original pair otherwise.
    """
    if not 0.0 <= cfg.mix_ratio <= 1.0:
        raise InvalidArgument("mix_ratio must lie in [0, 1]")
    source = data if isinstance(data, DemoPairs) else (
        DemoPairs(data) if isinstance(data, Dataset) else None)
    model = model1.copy(stage=2)
    model.train_config = cfg.to_dict()
    original = source if source is not None else encode_pairs(model, list(data))
    if reflow_pairs is None:
        if source is None:
            raise InvalidArgument("reflow pairs must be given when training from fixed pairs")
        reflow_pairs = synthesize_reflow_pairs(
            model1, source, len(source), rng,
            SolverSpec(cfg.synthesis_solver, cfg.rectified_step_budget),
            cfg.noise_scale, cfg.reflow_endpoint)
    reflow = encode_pairs(model, reflow_pairs) if len(reflow_pairs) else None
    if reflow is None and cfg.mix_ratio > 0:
        raise InvalidArgument("mix_ratio > 0 but no reflow pairs are available")

    def epoch_batch(epoch):
        orig = _draw(original, model, rng, cfg)
        use_reflow = rng.uniform(size=len(orig)) < cfg.mix_ratio
        if not use_reflow.any():
            return orig
        picks = rng.integers(len(reflow), size=int(use_reflow.sum()))
        parts = [orig.take(np.flatnonzero(~use_reflow)), reflow.take(picks)]
        return PairBatch.concat(parts)

    reports = _run_epochs(model, cfg, rng, epoch_batch)
    return model, reports


def save_reflow_pairs(pairs: ReflowPairs, path) -> None:
    """``.npz`` with arrays h0, h1 (P, 4, 4) and index (P,) into DemoPairs order."""
    h0 = np.stack([p.h0 for p in pairs]) if len(pairs) else np.zeros((0, 4, 4))
    h1 = np.stack([p.h1 for p in pairs]) if len(pairs) else np.zeros((0, 4, 4))
    with open(path, "wb") as fh:
        np.savez(fh, h0=h0, h1=h1, index=np.asarray(pairs.indices, dtype=np.int64))


def load_reflow_pairs(path, dataset) -> ReflowPairs:
    source = dataset if isinstance(dataset, DemoPairs) else DemoPairs(dataset)
    with np.load(path) as data:
        h0, h1, index = data["h0"], data["h1"], data["index"]
    if not (len(h0) == len(h1) == len(index)) or np.any(index < 0) or np.any(index >= len(source)):
        raise InvalidArgument("reflow pair file does not match the dataset")
    out = ReflowPairs(TrainingPair(a, b, source.observations[i], "reflow")
                      for a, b, i in zip(h0, h1, index))
    out.indices = [int(i) for i in index]
    return out


def write_loss_csv(reports: Sequence[LossReport], path) -> None:
    with open(path, "w") as fh:
        fh.write("epoch,mean_loss,lr\n")
        for r in reports:
            fh.write(f"{r.epoch},{r.mean_loss!r},{r.lr!r}\n")
