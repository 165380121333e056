"""Base classifier: frozen feature extractor + linear softmax output layer."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence, Union

import numpy as np

LAYER_MAGIC = b"HEBL"
LAYER_VERSION = 1
_LAYER_HEADER = struct.Struct("<4sHII")  # magic, version, d, n


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


# -- feature extractors --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Identity:
    """Use raw inputs as representations."""

    input_dim: int

    @property
    def output_dim(self) -> int:
        return self.input_dim

    def extract(self, x) -> np.ndarray:
        x = _check_input(x, self.input_dim)
        return x.copy()


@dataclass(frozen=True, eq=False)
class RandomProjection:
    """Fixed random layer ``relu(x @ proj + bias)``; outputs are non-negative."""

    proj: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        proj = np.array(self.proj, dtype=np.float64)
        bias = np.array(self.bias, dtype=np.float64).reshape(-1)
        if proj.ndim != 2 or proj.shape[1] != bias.shape[0]:
            raise ValueError(f"projection shape {proj.shape} incompatible with bias {bias.shape}")
        if not (np.all(np.isfinite(proj)) and np.all(np.isfinite(bias))):
            raise ValueError("projection parameters must be finite")
        proj.setflags(write=False)
        bias.setflags(write=False)
        object.__setattr__(self, "proj", proj)
        object.__setattr__(self, "bias", bias)

    @classmethod
    def from_seed(cls, input_dim: int, output_dim: int, seed: int) -> "RandomProjection":
        rng = np.random.default_rng(seed)
        proj = rng.standard_normal((input_dim, output_dim)) / np.sqrt(input_dim)
        bias = rng.standard_normal(output_dim) / np.sqrt(input_dim)
        return cls(proj, bias)

    @property
    def input_dim(self) -> int:
        return self.proj.shape[0]

    @property
    def output_dim(self) -> int:
        return self.proj.shape[1]

    def extract(self, x) -> np.ndarray:
        x = _check_input(x, self.input_dim)
        return np.maximum(x @ self.proj + self.bias, 0.0)


FeatureExtractor = Union[Identity, RandomProjection]


def extract(fe: FeatureExtractor, x) -> np.ndarray:
    return fe.extract(x)


def _check_input(x, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"input dimension {x.shape[-1]} does not match extractor input_dim {dim}")
    return x


# -- output layer ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OutputLayer:
    """Softmax layer ``softmax(W.T @ h + b)``.

    Column ``j`` of ``W`` belongs to class ``classes[j]``. Instances are treated
    as immutable: every update returns a new layer.
    """

    W: np.ndarray
    b: np.ndarray
    classes: tuple = None

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        b = np.array(self.b, dtype=np.float64).reshape(-1)
        if W.ndim != 2 or W.shape[1] != b.shape[0]:
            raise ValueError(f"W shape {W.shape} incompatible with b shape {b.shape}")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        classes = tuple(range(W.shape[1])) if self.classes is None else tuple(int(c) for c in self.classes)
        if len(classes) != W.shape[1] or len(set(classes)) != len(classes):
            raise ValueError("classes must be distinct and match the number of columns")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "_col", {c: j for j, c in enumerate(classes)})
        lookup = np.full(max(classes, default=-1) + 1, -1, dtype=np.int64)
        lookup[list(classes)] = np.arange(len(classes))
        object.__setattr__(self, "_lookup", lookup)

    @classmethod
    def zeros(cls, d: int, classes: Sequence[int] | int) -> "OutputLayer":
        if isinstance(classes, (int, np.integer)):
            classes = range(int(classes))
        classes = tuple(classes)
        return cls(np.zeros((d, len(classes))), np.zeros(len(classes)), classes)

    @property
    def d(self) -> int:
        return self.W.shape[0]

    @property
    def n(self) -> int:
        return self.W.shape[1]

    def column(self, class_id: int) -> int:
        try:
            return self._col[int(class_id)]
        except KeyError:
            raise KeyError(f"class {class_id} is not registered in the layer") from None

    def columns(self, labels) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        ok = (labels >= 0) & (labels < len(self._lookup))
        cols = np.where(ok, self._lookup[np.where(ok, labels, 0)], -1)
        if np.any(cols < 0):
            raise KeyError(f"class {int(labels[cols < 0][0])} is not registered in the layer")
        return cols

    def has_class(self, class_id: int) -> bool:
        return int(class_id) in self._col

    def logits(self, h) -> np.ndarray:
        h = np.asarray(h, dtype=np.float64)
        if h.shape[-1] != self.d:
            raise ValueError(f"representation dimension {h.shape[-1]} does not match layer d {self.d}")
        return h @ self.W + self.b

    def predict_probs(self, h) -> np.ndarray:
        return softmax(self.logits(h))

    def predict(self, h) -> np.ndarray | int:
        """Predicted class id(s)."""
        cols = np.argmax(self.logits(h), axis=-1)
        ids = np.asarray(self.classes)[cols]
        return int(ids) if np.ndim(ids) == 0 else ids

    def register_class(self, class_id: int) -> "OutputLayer":
        """Append a zero-initialised column for ``class_id``."""
        if self.has_class(class_id):
            raise ValueError(f"class {class_id} is already registered")
        W = np.hstack([self.W, np.zeros((self.d, 1))])
        b = np.append(self.b, 0.0)
        return OutputLayer(W, b, self.classes + (int(class_id),))

    def with_params(self, W, b) -> "OutputLayer":
        return OutputLayer(W, b, self.classes)

    def equals(self, other: "OutputLayer") -> bool:
        """Bitwise parameter equality."""
        return (self.classes == other.classes and self.W.tobytes() == other.W.tobytes()
                and self.b.tobytes() == other.b.tobytes())

    def to_bytes(self) -> bytes:
        head = _LAYER_HEADER.pack(LAYER_MAGIC, LAYER_VERSION, self.d, self.n)
        return b"".join([
            head,
            np.asarray(self.classes, dtype="<u4").tobytes(),
            np.ascontiguousarray(self.W, dtype="<f8").tobytes(),
            np.asarray(self.b, dtype="<f8").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "OutputLayer":
        from .memory import SnapshotError

        if len(data) < _LAYER_HEADER.size:
            raise SnapshotError("truncated layer header")
        magic, version, d, n = _LAYER_HEADER.unpack_from(data, 0)
        if magic != LAYER_MAGIC:
            raise SnapshotError(f"bad magic {magic!r}, expected {LAYER_MAGIC!r}")
        if version != LAYER_VERSION:
            raise SnapshotError(f"unsupported layer version {version}")
        expected = _LAYER_HEADER.size + 4 * n + 8 * d * n + 8 * n
        if len(data) != expected:
            raise SnapshotError(f"layer snapshot is {len(data)} bytes, expected {expected}")
        off = _LAYER_HEADER.size
        classes = np.frombuffer(data, "<u4", n, off).tolist()
        off += 4 * n
        W = np.frombuffer(data, "<f8", d * n, off).reshape(d, n)
        off += 8 * d * n
        b = np.frombuffer(data, "<f8", n, off)
        return cls(W, b, classes)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "OutputLayer":
        return cls.from_bytes(Path(path).read_bytes())


def predict_probs(layer: OutputLayer, h) -> np.ndarray:
    return layer.predict_probs(h)


def register_class(layer: OutputLayer, class_id: int) -> OutputLayer:
    return layer.register_class(class_id)


# -- training ------------------------------------------------------------------------

@dataclass(frozen=True)
class LabeledExample:
    x: np.ndarray
    y: int


def as_arrays(data) -> tuple[np.ndarray, np.ndarray]:
    """Accept ``(X, y)`` or a sequence of :class:`LabeledExample`."""
    if isinstance(data, tuple) and len(data) == 2 and not isinstance(data[0], LabeledExample):
        X, y = data
    else:
        data = list(data)
        if not data:
            return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
        X = np.array([np.asarray(ex.x, dtype=np.float64) for ex in data])
        y = np.array([ex.y for ex in data])
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("inputs must be a 2-d array with one label per row")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    return X, y


def cross_entropy_grad(layer: OutputLayer, H: np.ndarray, y: np.ndarray):
    """Mean cross-entropy over rows of ``H`` and its gradient w.r.t. (W, b)."""
    H = np.asarray(H, dtype=np.float64)
    cols = layer.columns(y)
    Z = layer.logits(H)
    logp = log_softmax(Z)
    m = len(cols)
    loss = -logp[np.arange(m), cols].mean()
    G = np.exp(logp)
    G[np.arange(m), cols] -= 1.0
    G /= m
    return loss, H.T @ G, G.sum(axis=0)


def train(fe: FeatureExtractor, layer: OutputLayer, data, epochs: int = 10, lr: float = 0.1,
          batch_size: int = 32, seed: int = 0, history: list | None = None) -> OutputLayer:
    """Mini-batch SGD on cross-entropy over extracted features.

    The extractor stays frozen. ``history``, if given, receives the mean
    training loss after each epoch.
    """
    X, y = as_arrays(data)
    if len(y) == 0:
        raise ValueError("training data is empty")
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr!r}")
    if batch_size <= 0:
        raise ValueError(f"batch_size must be positive, got {batch_size!r}")
    H = fe.extract(X)
    layer.columns(y)  # every label must be registered
    rng = np.random.default_rng(seed)
    W, b = layer.W.copy(), layer.b.copy()
    cur = layer
    for _ in range(int(epochs)):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch_size):
            idx = order[start:start + batch_size]
            _, gW, gb = cross_entropy_grad(cur, H[idx], y[idx])
            W -= lr * gW
            b -= lr * gb
            cur = layer.with_params(W, b)
        if history is not None:
            history.append(float(cross_entropy_grad(cur, H, y)[0]))
    return cur


def accuracy(fe: FeatureExtractor, layer: OutputLayer, X, y) -> float:
    pred = layer.predict(fe.extract(np.asarray(X, dtype=np.float64)))
    return float(np.mean(np.asarray(pred) == np.asarray(y)))
