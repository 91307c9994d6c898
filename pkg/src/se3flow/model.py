"""Drift network: a tanh MLP made SE(3)-equivariant by canonicalization.

The network never sees world coordinates. A frame is computed from the
conditioning point cloud (centroid + sign-fixed PCA axes); the anchor pose
(where the current action starts) is described in that frame, the cloud
by a radial histogram around it, and the query pose relative to the
anchor. The network predicts a twist in anchor coordinates, which is
carried back to the world with the adjoint of the anchor. Moving cloud,
anchor and query pose by a common rigid motion ``g`` therefore moves the
prediction by ``adjoint(g)``. Without an anchor the cloud frame is used.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic  b"SE3FCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 header length H
    16      H     UTF-8 JSON header, keys sorted: layer_sizes,
                  time_embed_freqs, n_bins, r_max, activation, convention,
                  stage, train_config
    16+H    8     uint64 parameter count P
    24+H    8*P   float64 parameters; per layer the weight matrix
                  (n_in x n_out, row-major) followed by the bias vector
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import geometry as geo
from .errors import FormatError, InvalidArgument, NumericFailure

TIME_FREQS = (0.5, 1.0, 2.0, 4.0)
N_BINS = 16
R_MAX = 0.5
OUTPUT_CAP = 1e3
# third moments (normalized by variance^1.5) below this are treated as ties
MOMENT_TIE = 1e-9
# relative eigengap under which the PCA frame is considered degenerate
EIGENGAP_TOL = 1e-6

CHECKPOINT_MAGIC = b"SE3FCKPT"
CHECKPOINT_VERSION = 1

CONVENTIONS = ("spatial", "body")


@dataclass(frozen=True)
class Observation:
    """What the drift network is conditioned on.

    ``cloud`` is the scene point cloud. ``anchor`` is the previous
    end-effector pose (the pose the current action starts from) and
    ``progress`` the fraction of the horizon already executed.
    """

    cloud: np.ndarray
    anchor: np.ndarray | None = None
    progress: float = 0.0

    def transformed(self, g: np.ndarray) -> "Observation":
        anchor = None if self.anchor is None else g @ self.anchor
        return Observation(geo.transform_points(g, self.cloud), anchor, self.progress)


def _check_cloud(cloud) -> np.ndarray:
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.ndim != 2 or cloud.shape[1] != 3 or cloud.shape[0] == 0:
        raise InvalidArgument(f"point cloud must be a non-empty (N, 3) array, got {cloud.shape}")
    if not np.all(np.isfinite(cloud)):
        raise InvalidArgument("point cloud has non-finite entries")
    return cloud


def _orient(axis: np.ndarray, proj: np.ndarray, var: float) -> np.ndarray:
    moment = float(np.mean(proj ** 3))
    scale = var ** 1.5 if var > 0 else 1.0
    if abs(moment) / scale < MOMENT_TIE:
        # tie: lexicographic sign (first non-negligible component positive)
        for comp in axis:
            if abs(comp) > 1e-12:
                return axis if comp > 0 else -axis
        return axis
    return axis if moment > 0 else -axis


def frame_is_degenerate(cloud) -> bool:
    cloud = _check_cloud(cloud)
    if cloud.shape[0] < 3:
        return True
    centered = cloud - cloud.mean(axis=0)
    evals = np.linalg.eigvalsh(centered.T @ centered / cloud.shape[0])[::-1]
    top = evals[0]
    if top <= 0.0:
        return True
    return min(evals[0] - evals[1], evals[1] - evals[2]) <= EIGENGAP_TOL * top


def observation_frame(cloud) -> np.ndarray:
    """Pose of the cloud: centroid translation, PCA axes (largest variance first).

    The first two axes are oriented so the third moment of the projections
    is non-negative; the third axis is their cross product, keeping the
    frame right-handed. Degenerate spectra fall back to identity rotation.
    """
    cloud = _check_cloud(cloud)
    centroid = cloud.mean(axis=0)
    if frame_is_degenerate(cloud):
        return geo.make_pose(trans=centroid)
    centered = cloud - centroid
    evals, evecs = np.linalg.eigh(centered.T @ centered / cloud.shape[0])
    order = np.argsort(evals)[::-1]
    e1, e2 = evecs[:, order[0]], evecs[:, order[1]]
    e1 = _orient(e1, centered @ e1, evals[order[0]])
    e2 = _orient(e2, centered @ e2, evals[order[1]])
    e3 = np.cross(e1, e2)
    return geo.make_pose(np.column_stack([e1, e2, e3]), centroid)


def canonicalize(z, cloud) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(frame^-1 @ z, frame)`` for the frame of ``cloud``."""
    frame = observation_frame(cloud)
    return geo.inverse(frame) @ np.asarray(z, dtype=np.float64), frame


def cloud_features(cloud, frame=None, n_bins: int = N_BINS, r_max: float = R_MAX) -> np.ndarray:
    """Normalized histogram of point distances from the frame origin.

    Distances beyond ``r_max`` land in the last bin. Invariant to rigid
    motions of the cloud because the frame origin moves with it.
    """
    cloud = _check_cloud(cloud)
    origin = cloud.mean(axis=0) if frame is None else np.asarray(frame)[:3, 3]
    radii = np.sort(np.linalg.norm(cloud - origin, axis=1))
    idx = np.minimum((radii / r_max * n_bins).astype(np.int64), n_bins - 1)
    return np.bincount(idx, minlength=n_bins).astype(np.float64) / cloud.shape[0]


def time_embedding(t, freqs: Sequence[float] = TIME_FREQS) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    arg = 2.0 * math.pi * t[..., None] * np.asarray(freqs, dtype=np.float64)
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=-1)


def pose_features(pose) -> np.ndarray:
    """First two rotation columns and the translation: 9 smooth numbers per pose."""
    pose = np.asarray(pose, dtype=np.float64)
    return np.concatenate([pose[..., :3, 0], pose[..., :3, 1], pose[..., :3, 3]], axis=-1)


def feature_width(n_freqs: int = len(TIME_FREQS), n_bins: int = N_BINS) -> int:
    # query pose in anchor coords (9) + anchor in cloud frame (9) + progress (1) + cloud (n_bins) + time (2 n_freqs)
    return 19 + n_bins + 2 * n_freqs


@dataclass(frozen=True)
class EncodedObservations:
    """Per-sample observation data, precomputed once and stacked for batching.

    ``anchors`` is the pose each action starts from (the cloud frame when no
    anchor is given); the drift is computed in that pose's coordinates.
    """

    frames: np.ndarray       # (B, 4, 4)
    anchors: np.ndarray      # (B, 4, 4)
    anchors_inv: np.ndarray  # (B, 4, 4)
    static: np.ndarray       # (B, 9 + 1 + n_bins)

    def __len__(self) -> int:
        return self.frames.shape[0]

    def take(self, idx) -> "EncodedObservations":
        return EncodedObservations(self.frames[idx], self.anchors[idx], self.anchors_inv[idx],
                                   self.static[idx])

    def with_anchors(self, anchors: np.ndarray, progress) -> "EncodedObservations":
        anchors = np.broadcast_to(np.asarray(anchors, dtype=np.float64), self.frames.shape)
        static = self.static.copy()
        static[:, :9] = pose_features(geo.inverse(self.frames) @ anchors)
        static[:, 9] = progress
        return EncodedObservations(self.frames, anchors.copy(), geo.inverse(anchors), static)

    @staticmethod
    def concat(parts: Sequence["EncodedObservations"]) -> "EncodedObservations":
        return EncodedObservations(
            np.concatenate([p.frames for p in parts]),
            np.concatenate([p.anchors for p in parts]),
            np.concatenate([p.anchors_inv for p in parts]),
            np.concatenate([p.static for p in parts]),
        )


@dataclass
class Gradients:
    """Parameter gradients, shaped like the model's weights and biases."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    @classmethod
    def zeros_like(cls, model: "DriftModel") -> "Gradients":
        return cls([np.zeros_like(w) for w in model.weights],
                   [np.zeros_like(b) for b in model.biases])

    def flat(self) -> np.ndarray:
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.extend([w.ravel(), b.ravel()])
        return np.concatenate(parts)

    def norm(self) -> float:
        return float(np.linalg.norm(self.flat()))

    def scale(self, factor: float) -> "Gradients":
        return Gradients([w * factor for w in self.weights], [b * factor for b in self.biases])


@dataclass
class DriftModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    time_embed_freqs: tuple[float, ...] = TIME_FREQS
    n_bins: int = N_BINS
    r_max: float = R_MAX
    activation: str = "tanh"
    convention: str = "spatial"
    stage: int = 1
    train_config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.activation not in ("tanh", "identity"):
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.convention not in CONVENTIONS:
            raise InvalidArgument(f"unknown twist convention {self.convention!r}")
        sizes = self.layer_sizes
        if sizes[0] != feature_width(len(self.time_embed_freqs), self.n_bins):
            raise InvalidArgument(
                f"input width {sizes[0]} does not match feature width "
                f"{feature_width(len(self.time_embed_freqs), self.n_bins)}"
            )
        if sizes[-1] != 6:
            raise InvalidArgument("the output layer must have 6 units")
        for w, b in zip(self.weights, self.biases):
            if b.shape != (w.shape[1],):
                raise InvalidArgument("bias shape does not match weight shape")

    @classmethod
    def initialize(cls, hidden: Sequence[int], rng: np.random.Generator,
                   output_scale: float = 0.01, **kwargs) -> "DriftModel":
        """Glorot-uniform weights, zero biases, output layer scaled down."""
        freqs = kwargs.get("time_embed_freqs", TIME_FREQS)
        n_bins = kwargs.get("n_bins", N_BINS)
        sizes = [feature_width(len(freqs), n_bins), *hidden, 6]
        weights, biases = [], []
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            s = math.sqrt(6.0 / (n_in + n_out))
            w = rng.uniform(-s, s, size=(n_in, n_out))
            if i == len(sizes) - 2:
                w *= output_scale
            weights.append(w)
            biases.append(np.zeros(n_out))
        return cls(weights, biases, **kwargs)

    @classmethod
    def zeros(cls, hidden: Sequence[int] = (), **kwargs) -> "DriftModel":
        freqs = kwargs.get("time_embed_freqs", TIME_FREQS)
        sizes = [feature_width(len(freqs), kwargs.get("n_bins", N_BINS)), *hidden, 6]
        return cls([np.zeros((a, b)) for a, b in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(b) for b in sizes[1:]], **kwargs)

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum((w.shape[0] + 1) * w.shape[1] for w in self.weights)

    def get_flat(self) -> np.ndarray:
        return Gradients(self.weights, self.biases).flat()

    def set_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.n_params:
            raise InvalidArgument(f"expected {self.n_params} parameters, got {flat.size}")
        pos = 0
        for w, b in zip(self.weights, self.biases):
            w[...] = flat[pos:pos + w.size].reshape(w.shape)
            pos += w.size
            b[...] = flat[pos:pos + b.size]
            pos += b.size

    def copy(self, **changes) -> "DriftModel":
        return replace(
            self,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            train_config=dict(self.train_config),
            **changes,
        )

    def apply_update(self, grads: Gradients, lr: float) -> None:
        for w, b, gw, gb in zip(self.weights, self.biases, grads.weights, grads.biases):
            w -= lr * gw
            b -= lr * gb

    # -- observation encoding ------------------------------------------------

    def encode(self, obs: Observation) -> EncodedObservations:
        frame = observation_frame(obs.cloud)
        anchor = frame if obs.anchor is None else np.asarray(obs.anchor, dtype=np.float64)
        static = np.concatenate([
            pose_features(geo.inverse(frame) @ anchor), [float(obs.progress)],
            cloud_features(obs.cloud, frame, self.n_bins, self.r_max),
        ])
        return EncodedObservations(frame[None], anchor[None], geo.inverse(anchor)[None],
                                   static[None])

    def encode_many(self, observations: Sequence[Observation]) -> EncodedObservations:
        return EncodedObservations.concat([self.encode(o) for o in observations])


def _forward(model: DriftModel, x: np.ndarray):
    """MLP forward pass; returns output and the activations needed by backward."""
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if i < last and model.activation == "tanh":
            h = np.tanh(h)
        if not np.all(np.isfinite(h)):
            raise NumericFailure(f"non-finite activations in layer {i}", layer=i)
        acts.append(h)
    return h, acts


def _backward(model: DriftModel, acts: list[np.ndarray], upstream: np.ndarray) -> Gradients:
    grads_w, grads_b = [], []
    delta = upstream
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        if i < last and model.activation == "tanh":
            delta = delta * (1.0 - acts[i + 1] ** 2)
        grads_w.append(acts[i].T @ delta)
        grads_b.append(delta.sum(axis=0))
        if i > 0:
            delta = delta @ model.weights[i].T
    return Gradients(grads_w[::-1], grads_b[::-1])


def _features(model: DriftModel, z: np.ndarray, t: np.ndarray, enc: EncodedObservations):
    local = enc.anchors_inv @ z
    x = np.concatenate([pose_features(local), enc.static, time_embedding(t, model.time_embed_freqs)],
                       axis=-1)
    return x, local


def _transport(model: DriftModel, local: np.ndarray, enc: EncodedObservations) -> np.ndarray:
    if model.convention == "spatial":
        return geo.adjoint(enc.anchors)
    # body twists are unchanged by left translations; express the
    # anchor-frame twist in the body frame of the query pose
    return geo.adjoint(geo.inverse(local))


def drift_batch(model: DriftModel, z, t, enc: EncodedObservations) -> np.ndarray:
    """Twists ``(B, 6)`` for poses ``(B, 4, 4)`` at times ``(B,)``."""
    z = np.asarray(z, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), z.shape[:1])
    x, local = _features(model, z, t, enc)
    raw, _ = _forward(model, x)
    out = np.einsum("bij,bj->bi", _transport(model, local, enc), raw)
    _check_output(out)
    return out


def drift_batch_vjp(model: DriftModel, z, t, enc: EncodedObservations):
    """Twists ``(B, 6)`` and a function mapping an upstream ``(B, 6)`` to gradients.

    The returned gradients are those of ``sum_b upstream[b] . twist[b]``.
    """
    z = np.asarray(z, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), z.shape[:1])
    x, local = _features(model, z, t, enc)
    raw, acts = _forward(model, x)
    transport = _transport(model, local, enc)
    out = np.einsum("bij,bj->bi", transport, raw)
    _check_output(out)

    def backward(upstream) -> Gradients:
        raw_upstream = np.einsum("bij,bi->bj", transport, np.asarray(upstream, dtype=np.float64))
        return _backward(model, acts, raw_upstream)

    return out, backward


def drift_batch_with_grad(model: DriftModel, z, t, enc: EncodedObservations,
                          upstream: np.ndarray) -> tuple[np.ndarray, Gradients]:
    out, backward = drift_batch_vjp(model, z, t, enc)
    return out, backward(upstream)


def _check_output(out: np.ndarray) -> None:
    norms = np.linalg.norm(out, axis=-1)
    if not np.all(np.isfinite(norms)) or np.any(norms > OUTPUT_CAP):
        raise NumericFailure(f"drift output exceeds cap {OUTPUT_CAP:g}",
                             layer=None)


def _check_time(t: float) -> None:
    if not 0.0 <= t <= 1.0:
        raise InvalidArgument(f"time must lie in [0, 1], got {t}")


def drift(model: DriftModel, z, t: float, obs: Observation) -> np.ndarray:
    _check_time(t)
    z = np.asarray(z, dtype=np.float64)
    return drift_batch(model, z[None], np.array([t]), model.encode(obs))[0]


def drift_with_grad(model: DriftModel, z, t: float, obs: Observation,
                    upstream) -> tuple[np.ndarray, Gradients]:
    _check_time(t)
    z = np.asarray(z, dtype=np.float64)
    out, grads = drift_batch_with_grad(
        model, z[None], np.array([t]), model.encode(obs), np.asarray(upstream)[None]
    )
    return out[0], grads


# -- checkpoints ---------------------------------------------------------------

def checkpoint_bytes(model: DriftModel) -> bytes:
    header = json.dumps(
        {
            "layer_sizes": model.layer_sizes,
            "time_embed_freqs": list(model.time_embed_freqs),
            "n_bins": model.n_bins,
            "r_max": model.r_max,
            "activation": model.activation,
            "convention": model.convention,
            "stage": model.stage,
            "train_config": model.train_config,
        },
        sort_keys=True,
    ).encode("utf-8")
    params = model.get_flat().astype("<f8")
    return b"".join([
        CHECKPOINT_MAGIC,
        struct.pack("<II", CHECKPOINT_VERSION, len(header)),
        header,
        struct.pack("<Q", params.size),
        params.tobytes(),
    ])


def save_checkpoint(model: DriftModel, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def load_checkpoint(path) -> DriftModel:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError("checkpoint truncated inside the fixed header", offset=len(data))
    if data[:8] != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic", offset=0)
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    if len(data) < 24 + hlen:
        raise FormatError("checkpoint truncated inside the JSON header", offset=len(data))
    try:
        header = json.loads(data[16:16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}", offset=16) from exc
    (count,) = struct.unpack_from("<Q", data, 16 + hlen)
    body = 24 + hlen
    if len(data) != body + 8 * count:
        raise FormatError(
            f"expected {count} parameters, file holds {(len(data) - body) // 8}", offset=body
        )
    sizes = header["layer_sizes"]
    model = DriftModel.zeros(
        hidden=sizes[1:-1],
        time_embed_freqs=tuple(header["time_embed_freqs"]),
        n_bins=header["n_bins"],
        r_max=header["r_max"],
        activation=header["activation"],
        convention=header["convention"],
        stage=header["stage"],
        train_config=header.get("train_config", {}),
    )
    if model.n_params != count:
        raise FormatError("parameter count disagrees with layer_sizes", offset=16 + hlen)
    model.set_flat(np.frombuffer(data, dtype="<f8", count=count, offset=body))
    return model
