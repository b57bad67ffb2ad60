"""Minimal dense-network engine with exact per-example parameter gradients.

Parameters live in one flat float64 vector laid out layer by layer: the
(out x in) weight matrix row-major, then the bias. Reverse mode is a plain
hand-rolled backward pass over the affine/ReLU stack, which keeps the
parameter gradient of any scalar function of the logits exact to roundoff.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .conformal import ScoreKind, score_logit_grad
from .rng import substream

CHECKPOINT_MAGIC = b"CRML"
CHECKPOINT_VERSION = 1
_ACTIVATIONS = ("none", "relu")


class DimensionMismatchError(ValueError):
    """Input/cotangent dimension does not match the model."""

    def __init__(self, what: str, expected: int, actual: int) -> None:
        super().__init__(f"{what}: expected dim {expected}, got {actual}")
        self.expected = expected
        self.actual = actual


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self) -> None:
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}, "
                             f"got {self.activation!r}")

    @property
    def param_count(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int


@dataclass(frozen=True)
class Model:
    topology: tuple[LayerSpec, ...]
    params: np.ndarray

    def __post_init__(self) -> None:
        topo = tuple(self.topology)
        if not topo:
            raise ValueError("model needs at least one layer")
        for a, b in zip(topo, topo[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer chain mismatch: {a.out_dim} -> {b.in_dim}")
        params = np.asarray(self.params, dtype=np.float64)
        expected = sum(l.param_count for l in topo)
        if params.shape != (expected,):
            raise ValueError(f"params must be a flat vector of {expected} "
                             f"entries, got shape {params.shape}")
        object.__setattr__(self, "topology", topo)
        object.__setattr__(self, "params", params)

    @property
    def param_count(self) -> int:
        return self.params.size

    @property
    def input_dim(self) -> int:
        return self.topology[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.topology[-1].out_dim

    def layers(self):
        """Yield (W, b, activation) views into the flat parameter vector."""
        offset = 0
        for spec in self.topology:
            w_size = spec.in_dim * spec.out_dim
            w = self.params[offset:offset + w_size].reshape(spec.out_dim, spec.in_dim)
            b = self.params[offset + w_size:offset + spec.param_count]
            yield w, b, spec.activation
            offset += spec.param_count

    def with_params(self, params: np.ndarray) -> "Model":
        return replace(self, params=params)


def init_model(topology, seed: int) -> Model:
    """Seeded init: every layer uniform in +-1/sqrt(fan_in)."""
    topo = tuple(topology)
    rng = substream(seed, "init")
    chunks = []
    for spec in topo:
        bound = 1.0 / np.sqrt(spec.in_dim)
        chunks.append(rng.uniform(-bound, bound, size=spec.param_count))
    return Model(topo, np.concatenate(chunks))


def _check_input(model: Model, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise DimensionMismatchError("input", model.input_dim, int(np.prod(x.shape)))
    return x


def forward(model: Model, x: np.ndarray) -> np.ndarray:
    """Logits for one input vector."""
    a = _check_input(model, x)
    for w, b, act in model.layers():
        z = w @ a + b
        a = np.maximum(z, 0.0) if act == "relu" else z
    return a


def forward_batch(model: Model, xs: np.ndarray) -> np.ndarray:
    """Logits for a (N, input_dim) matrix of inputs, one row per example."""
    a = np.asarray(xs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != model.input_dim:
        raise DimensionMismatchError("input batch", model.input_dim,
                                     a.shape[1] if a.ndim == 2 else -1)
    for w, b, act in model.layers():
        z = a @ w.T + b
        a = np.maximum(z, 0.0) if act == "relu" else z
    return a


def vjp_params(model: Model, x: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
    """Gradient of cotangent . f_theta(x) with respect to the flat params.

    ReLU's derivative at exactly zero is taken as 0.
    """
    x = _check_input(model, x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != (model.num_classes,):
        raise DimensionMismatchError("cotangent", model.num_classes,
                                     int(np.prod(cot.shape)))
    inputs = []   # activation entering each layer
    pre = []      # pre-activation of each layer
    a = x
    for w, b, act in model.layers():
        inputs.append(a)
        z = w @ a + b
        pre.append(z)
        a = np.maximum(z, 0.0) if act == "relu" else z

    grad = np.zeros(model.param_count)
    delta = cot
    offset = model.param_count
    layer_views = list(model.layers())
    for i in range(len(layer_views) - 1, -1, -1):
        w, _, act = layer_views[i]
        if act == "relu":
            delta = delta * (pre[i] > 0.0)
        spec = model.topology[i]
        offset -= spec.param_count
        w_size = spec.in_dim * spec.out_dim
        grad[offset:offset + w_size] = np.outer(delta, inputs[i]).ravel()
        grad[offset + w_size:offset + spec.param_count] = delta
        if i > 0:
            delta = w.T @ delta
    return grad


def score_grad(model: Model, ex: Example, kind: ScoreKind) -> np.ndarray:
    """dE_theta(x, y)/dtheta for the configured conformity score."""
    logits = forward(model, ex.x)
    cot = score_logit_grad(logits, ex.y, kind)
    return vjp_params(model, ex.x, cot)


def save_model(model: Model, path) -> None:
    """Fixed-layout binary checkpoint (magic CRML, little-endian)."""
    blob = bytearray()
    blob += struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                        len(model.topology))
    for spec in model.topology:
        blob += struct.pack("<III", spec.in_dim, spec.out_dim,
                            _ACTIVATIONS.index(spec.activation))
    blob += struct.pack("<Q", model.param_count)
    blob += model.params.astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def load_model(path) -> Model:
    with open(path, "rb") as fh:
        blob = fh.read()
    header = struct.calcsize("<4sII")
    if len(blob) < header:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, n_layers = struct.unpack_from("<4sII", blob)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected "
                              f"{CHECKPOINT_MAGIC!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if n_layers == 0:
        raise CheckpointError(f"{path}: zero layers")
    offset = header
    layer_fmt = struct.calcsize("<III")
    topo = []
    for _ in range(n_layers):
        if offset + layer_fmt > len(blob):
            raise CheckpointError(f"{path}: truncated layer table")
        in_dim, out_dim, act_code = struct.unpack_from("<III", blob, offset)
        offset += layer_fmt
        if act_code >= len(_ACTIVATIONS):
            raise CheckpointError(f"{path}: unknown activation code {act_code}")
        try:
            topo.append(LayerSpec(in_dim, out_dim, _ACTIVATIONS[act_code]))
        except ValueError as exc:
            raise CheckpointError(f"{path}: {exc}") from exc
    if offset + struct.calcsize("<Q") > len(blob):
        raise CheckpointError(f"{path}: truncated param count")
    (param_count,) = struct.unpack_from("<Q", blob, offset)
    offset += struct.calcsize("<Q")
    expected = sum(l.param_count for l in topo)
    if param_count != expected:
        raise CheckpointError(f"{path}: param count {param_count} inconsistent "
                              f"with topology ({expected})")
    payload = blob[offset:]
    if len(payload) < 8 * expected:
        raise CheckpointError(f"{path}: truncated params "
                              f"({len(payload)} bytes, need {8 * expected})")
    if len(payload) > 8 * expected:
        raise CheckpointError(f"{path}: {len(payload) - 8 * expected} trailing bytes")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    try:
        return Model(tuple(topo), params)
    except ValueError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
