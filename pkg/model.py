# model.py - MLP classifier with exact backprop, synthetic quadratic, and the objectives the engine trains
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Protocol, Tuple, Union

import numpy as np
from scipy.special import expit, log_softmax

from config import Hierarchy, StreamLabel, SyntheticSection, derive_weights, fork_rng
from dataio import LabeledDataset, PartitionedData, sample_batch

logger = logging.getLogger(__name__)

BLOB_MAGIC = b"HSWP"
DEFAULT_CHUNK = 4096


# === SHAPES & PARAMETERS ===
@dataclass(frozen=True)
class ModelShape:
    """Single-hidden-layer MLP: input -> hidden (with bias, activation) -> classes (with bias)."""

    input_dim: int = 784
    hidden_units: int = 30
    num_classes: int = 10
    activation: str = "relu"

    def __post_init__(self):
        if min(self.input_dim, self.hidden_units, self.num_classes) < 1:
            raise ValueError(f"invalid MLP shape {self}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")

    @property
    def dimension(self) -> int:
        return (
            self.input_dim * self.hidden_units
            + self.hidden_units
            + self.hidden_units * self.num_classes
            + self.num_classes
        )

    def slices(self) -> Dict[str, Tuple[slice, Tuple[int, ...]]]:
        """Offsets of each layer tensor inside the flat vector."""
        layout = [
            ("w1", (self.input_dim, self.hidden_units)),
            ("b1", (self.hidden_units,)),
            ("w2", (self.hidden_units, self.num_classes)),
            ("b2", (self.num_classes,)),
        ]
        out, offset = {}, 0
        for name, dims in layout:
            size = int(np.prod(dims))
            out[name] = (slice(offset, offset + size), dims)
            offset += size
        return out

    def unflatten(self, values: np.ndarray) -> Dict[str, np.ndarray]:
        return {name: values[s].reshape(dims) for name, (s, dims) in self.slices().items()}

    def to_dict(self) -> Dict:
        return {"kind": "mlp", "input_dim": self.input_dim, "hidden_units": self.hidden_units,
                "num_classes": self.num_classes, "activation": self.activation}


@dataclass(frozen=True)
class VectorShape:
    """Unstructured parameter vector (synthetic objectives)."""

    size: int

    @property
    def dimension(self) -> int:
        return self.size

    def to_dict(self) -> Dict:
        return {"kind": "vector", "size": self.size}


Shape = Union[ModelShape, VectorShape]


def shape_from_dict(raw: Dict) -> Shape:
    raw = dict(raw)
    kind = raw.pop("kind", "mlp")
    if kind == "vector":
        return VectorShape(int(raw["size"]))
    return ModelShape(**raw)


@dataclass(frozen=True)
class ModelParams:
    values: np.ndarray
    shape: Shape

    def __post_init__(self):
        if self.values.shape != (self.shape.dimension,):
            raise ValueError(f"parameter vector has shape {self.values.shape}, expected ({self.shape.dimension},)")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("parameter vector holds non-finite values")

    @property
    def dimension(self) -> int:
        return self.shape.dimension

    def replace_values(self, values: np.ndarray) -> "ModelParams":
        return ModelParams(np.asarray(values, dtype=np.float64), self.shape)


@dataclass(frozen=True)
class GradientEstimate:
    values: np.ndarray
    batch_indices: Optional[np.ndarray] = None


# === INITIALIZATION & CHECKPOINTS ===
def init_params(shape: ModelShape, rng: np.random.Generator) -> ModelParams:
    """Fan-in uniform weights in [-1/sqrt(fan_in), 1/sqrt(fan_in)], zero biases."""
    values = np.zeros(shape.dimension, dtype=np.float64)
    for name, (s, dims) in shape.slices().items():
        if name.startswith("w"):
            bound = 1.0 / np.sqrt(dims[0])
            values[s] = rng.uniform(-bound, bound, size=int(np.prod(dims)))
    return ModelParams(values, shape)


def save_params(params: ModelParams, path) -> None:
    header = json.dumps(params.shape.to_dict(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(BLOB_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(params.values.astype("<f8").tobytes())


def load_params(path) -> ModelParams:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != BLOB_MAGIC:
        raise ValueError(f"{path} is not a parameter blob")
    (header_len,) = struct.unpack("<I", raw[4:8])
    shape = shape_from_dict(json.loads(raw[8:8 + header_len].decode("utf-8")))
    values = np.frombuffer(raw[8 + header_len:], dtype="<f8").astype(np.float64)
    return ModelParams(values, shape)


def params_digest(values: np.ndarray) -> str:
    """Short stable hash of a parameter vector (for RoundLog snapshots)."""
    return hashlib.blake2b(np.ascontiguousarray(values, dtype="<f8").tobytes(), digest_size=8).hexdigest()


# === MLP FORWARD / BACKWARD ===
def _relu(z):
    return np.maximum(z, 0.0)


def _relu_grad(z, h):
    return (z > 0).astype(np.float64)


def _sigmoid_grad(z, h):
    return h * (1.0 - h)


def _tanh_grad(z, h):
    return 1.0 - h * h


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "sigmoid": (expit, _sigmoid_grad),
    "tanh": (np.tanh, _tanh_grad),
}


def _chunk_sums(values: np.ndarray, shape: ModelShape, x: np.ndarray, y: np.ndarray, want_grad: bool):
    """Summed (not averaged) loss, correct count and optional gradient over one chunk."""
    layers = shape.unflatten(values)
    act, act_grad = _ACTIVATIONS[shape.activation]
    z1 = x @ layers["w1"] + layers["b1"]
    h = act(z1)
    logits = h @ layers["w2"] + layers["b2"]
    logp = log_softmax(logits, axis=1)
    rows = np.arange(len(y))
    loss_sum = -float(logp[rows, y].sum())
    correct = int((np.argmax(logits, axis=1) == y).sum())
    if not want_grad:
        return loss_sum, correct, None

    dlogits = np.exp(logp)
    dlogits[rows, y] -= 1.0
    grad = np.empty(shape.dimension, dtype=np.float64)
    sl = shape.slices()
    grad[sl["w2"][0]] = (h.T @ dlogits).ravel()
    grad[sl["b2"][0]] = dlogits.sum(axis=0)
    dz1 = (dlogits @ layers["w2"].T) * act_grad(z1, h)
    grad[sl["w1"][0]] = (x.T @ dz1).ravel()
    grad[sl["b1"][0]] = dz1.sum(axis=0)
    return loss_sum, correct, grad


def _accumulate(params: ModelParams, dataset: LabeledDataset, indices: np.ndarray, want_grad: bool, chunk: int):
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("cannot evaluate on an empty index set")
    loss, correct = 0.0, 0
    grad = np.zeros(params.dimension) if want_grad else None
    for start in range(0, len(indices), chunk):
        part = indices[start:start + chunk]
        l, c, g = _chunk_sums(params.values, params.shape, dataset.features(part), dataset.targets(part), want_grad)
        loss += l
        correct += c
        if want_grad:
            grad += g
    n = len(indices)
    return loss / n, correct / n, (grad / n if want_grad else None)


def forward_loss(params: ModelParams, dataset: LabeledDataset, indices, chunk: int = DEFAULT_CHUNK) -> float:
    """Mean cross-entropy over the given samples."""
    return _accumulate(params, dataset, indices, False, chunk)[0]


def loss_and_accuracy(params: ModelParams, dataset: LabeledDataset, indices, chunk: int = DEFAULT_CHUNK) -> Tuple[float, float]:
    loss, acc, _ = _accumulate(params, dataset, indices, False, chunk)
    return loss, acc


def backward(params: ModelParams, dataset: LabeledDataset, indices, chunk: int = DEFAULT_CHUNK) -> GradientEstimate:
    """Exact gradient of forward_loss at params over the same indices."""
    _, _, grad = _accumulate(params, dataset, indices, True, chunk)
    return GradientEstimate(grad, np.asarray(indices))


# === OBJECTIVES ===
class Objective(Protocol):
    """What the engine and analysis need from a trainable problem."""

    hierarchy: Hierarchy

    @property
    def dimension(self) -> int: ...

    def init_params(self, rng: np.random.Generator) -> ModelParams: ...

    def device_gradient(self, values: np.ndarray, q: int, k: int, batch_size: int, rng: np.random.Generator) -> GradientEstimate: ...

    def edge_gradient(self, values: np.ndarray, q: int) -> np.ndarray: ...

    def global_gradient(self, values: np.ndarray, rng: np.random.Generator) -> np.ndarray: ...

    def evaluate(self, values: np.ndarray) -> Dict[str, float]: ...


class DatasetObjective:
    """The MLP bound to a partitioned training set (and optional test set)."""

    def __init__(
        self,
        train: LabeledDataset,
        partition: PartitionedData,
        shape: ModelShape,
        test: Optional[LabeledDataset] = None,
        grad_batch: Optional[int] = 4096,
        max_eval_samples: Optional[int] = None,
        chunk: int = DEFAULT_CHUNK,
        eval_seed: int = 0,
    ):
        if train.input_dim != shape.input_dim:
            raise ValueError(f"dataset has {train.input_dim} features, model expects {shape.input_dim}")
        self.train = train
        self.test = test
        self.partition = partition
        self.hierarchy = partition.hierarchy
        self.shape = shape
        self.grad_batch = grad_batch
        self.chunk = chunk
        self._assigned = np.sort(partition.all_indices())
        self._train_eval = self._cap(self._assigned, max_eval_samples, eval_seed, "train")
        self._test_eval = None
        if test is not None:
            self._test_eval = self._cap(np.arange(len(test)), max_eval_samples, eval_seed, "test")

    @staticmethod
    def _cap(indices, cap, seed, purpose):
        if cap is None or cap >= len(indices):
            return indices
        rng = fork_rng(seed, StreamLabel(f"eval-subset-{purpose}"))
        return np.sort(rng.choice(indices, size=cap, replace=False))

    @property
    def dimension(self) -> int:
        return self.shape.dimension

    def params(self, values: np.ndarray) -> ModelParams:
        return ModelParams(values, self.shape)

    def init_params(self, rng):
        return init_params(self.shape, rng)

    def device_gradient(self, values, q, k, batch_size, rng):
        batch = sample_batch(self.partition.shard(q, k), batch_size, rng)
        return backward(self.params(values), self.train, batch, self.chunk)

    def edge_gradient(self, values, q):
        # Mean over the union of equal-weighted samples == sum_k (|D_qk|/D_q) grad f_qk.
        return backward(self.params(values), self.train, self.partition.edge_indices(q), self.chunk).values

    def global_gradient(self, values, rng):
        indices = self._assigned
        if self.grad_batch is not None and self.grad_batch < len(indices):
            indices = np.sort(rng.choice(indices, size=self.grad_batch, replace=False))
        return backward(self.params(values), self.train, indices, self.chunk).values

    def evaluate(self, values):
        params = self.params(values)
        train_loss, train_acc = loss_and_accuracy(params, self.train, self._train_eval, self.chunk)
        metrics = {"train_loss": train_loss, "train_accuracy": train_acc,
                   "test_loss": float("nan"), "test_accuracy": float("nan")}
        if self.test is not None:
            metrics["test_loss"], metrics["test_accuracy"] = loss_and_accuracy(
                params, self.test, self._test_eval, self.chunk
            )
        return metrics


@dataclass
class QuadraticObjective:
    """Separable quadratic with diagonal Hessian; L = max(curvature) is exact."""

    curvature: np.ndarray
    optimum: np.ndarray
    noise_std: float = 0.0
    hierarchy: Hierarchy = field(default_factory=lambda: derive_weights([[1]]))
    # One frozen linear offset per device, rows in Hierarchy.devices() order.
    device_offsets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.curvature = np.asarray(self.curvature, dtype=np.float64)
        self.optimum = np.asarray(self.optimum, dtype=np.float64)
        if self.curvature.shape != self.optimum.shape or self.curvature.ndim != 1:
            raise ValueError("curvature and optimum must be vectors of equal length")
        if np.any(self.curvature <= 0):
            raise ValueError("curvature must be strictly positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        self._rows = {qk: i for i, qk in enumerate(self.hierarchy.devices())}
        if self.device_offsets is not None:
            self.device_offsets = np.asarray(self.device_offsets, dtype=np.float64)
            if self.device_offsets.shape != (len(self._rows), self.dimension):
                raise ValueError("device_offsets must have one row per device")

    @property
    def dimension(self) -> int:
        return len(self.curvature)

    @property
    def smoothness(self) -> float:
        return float(self.curvature.max())

    @property
    def shape(self) -> VectorShape:
        return VectorShape(self.dimension)

    def _offset(self, q: int, k: int) -> np.ndarray:
        if self.device_offsets is None:
            return 0.0
        return self.device_offsets[self._rows[(q, k)]]

    def edge_offset(self, q: int):
        if self.device_offsets is None:
            return 0.0
        weights = self.hierarchy.device_weights[q]
        return sum(w * self._offset(q, k) for k, w in enumerate(weights))

    def mean_offset(self):
        if self.device_offsets is None:
            return 0.0
        return sum(w * self.edge_offset(q) for q, w in enumerate(self.hierarchy.edge_weights))

    def loss(self, values: np.ndarray) -> float:
        diff = values - self.optimum
        return float(0.5 * np.sum(self.curvature * diff * diff) + np.sum(self.mean_offset() * values))

    def minimizer(self) -> np.ndarray:
        return self.optimum - self.mean_offset() / self.curvature

    def optimal_value(self) -> float:
        return self.loss(self.minimizer())

    def init_params(self, rng):
        return ModelParams(np.zeros(self.dimension), self.shape)

    def device_gradient(self, values, q, k, batch_size, rng):
        grad = quadratic_grad(self, ModelParams(values, self.shape), rng, batch_size)
        return GradientEstimate(grad.values + self._offset(q, k))

    def edge_gradient(self, values, q):
        return self.curvature * (values - self.optimum) + self.edge_offset(q)

    def global_gradient(self, values, rng=None):
        return self.curvature * (values - self.optimum) + self.mean_offset()

    def evaluate(self, values):
        return {"train_loss": self.loss(values), "test_loss": float("nan"),
                "train_accuracy": float("nan"), "test_accuracy": float("nan")}


def quadratic_grad(obj: QuadraticObjective, params: ModelParams, rng: np.random.Generator,
                   batch_size: int = 1) -> GradientEstimate:
    """curvature * (params - optimum) plus N(0, noise_std^2 / batch_size) per coordinate."""
    noise = rng.standard_normal(obj.dimension) * (obj.noise_std / np.sqrt(batch_size))
    return GradientEstimate(obj.curvature * (params.values - obj.optimum) + noise)


def make_quadratic(section: SyntheticSection, hierarchy: Hierarchy, seed: int) -> QuadraticObjective:
    """Draw a synthetic quadratic from the config section."""
    rng = fork_rng(seed, StreamLabel("synthetic"))
    d = section.dimension
    curvature = rng.uniform(section.curvature_min, section.curvature_max, size=d)
    optimum = section.optimum_scale * rng.standard_normal(d)
    offsets = None
    if section.device_offset_std > 0:
        offsets = section.device_offset_std * rng.standard_normal((hierarchy.num_devices, d))
    return QuadraticObjective(curvature, optimum, section.noise_std, hierarchy, offsets)
