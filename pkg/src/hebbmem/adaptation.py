"""Local adaptation of the output layer from retrieved neighbours.

Two update rules produce a transient parameter delta for a single prediction:

* the Hebbian rule, which writes the closeness-weighted mean representation of
  each class's neighbours straight into that class's weights (and the mean
  closeness into its bias), leaving all other classes untouched;
* the MbPA rule, gradient ascent on the closeness-weighted log-likelihood of
  the neighbourhood.

``mixed_update`` blends them per class with a weight that decays with how
often the class has been stored in memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .classifier import OutputLayer, log_softmax, softmax
from .memory import DEFAULT_EPS, Neighborhood

MODES = ("hebb", "mbpa", "hebb_v1", "hebb_v2", "hebb_v3", "mixture")


@dataclass(frozen=True, eq=False)
class AdaptationDelta:
    """Sparse per-class update ``class id -> (dw, db)``.

    Never written into a layer in place; ``apply`` builds a fresh layer and
    ``adapted_predict`` adds the delta on the fly.
    """

    updates: Mapping[int, tuple] = field(default_factory=dict)

    def __post_init__(self):
        frozen = {}
        for i, (dw, db) in self.updates.items():
            dw = np.array(dw, dtype=np.float64).reshape(-1)
            dw.setflags(write=False)
            frozen[int(i)] = (dw, float(db))
        object.__setattr__(self, "updates", frozen)

    @property
    def classes(self) -> set[int]:
        return set(self.updates)

    def __len__(self) -> int:
        return len(self.updates)

    def __contains__(self, i) -> bool:
        return int(i) in self.updates

    def __getitem__(self, i) -> tuple[np.ndarray, float]:
        return self.updates[int(i)]

    def scaled(self, alpha: float) -> "AdaptationDelta":
        return AdaptationDelta({i: (alpha * dw, alpha * db) for i, (dw, db) in self.updates.items()})

    def dense(self, layer: OutputLayer) -> tuple[np.ndarray, np.ndarray]:
        dW, db = np.zeros_like(layer.W), np.zeros_like(layer.b)
        for i, (dw, dbi) in self.updates.items():
            j = layer.column(i)
            dW[:, j] = dw
            db[j] = dbi
        return dW, db

    def apply(self, layer: OutputLayer) -> OutputLayer:
        """A new layer with parameters ``omega + delta``; ``layer`` is untouched."""
        dW, db = self.dense(layer)
        return layer.with_params(layer.W + dW, layer.b + db)

    def allclose(self, other: "AdaptationDelta", rtol=1e-12, atol=1e-12) -> bool:
        if self.classes != other.classes:
            return False
        return all(np.allclose(self[i][0], other[i][0], rtol=rtol, atol=atol)
                   and np.isclose(self[i][1], other[i][1], rtol=rtol, atol=atol) for i in self.updates)


@dataclass(frozen=True)
class AdaptationConfig:
    """Knobs for local adaptation.

    ``fixed_weight`` is only read by the ``hebb_v3`` ablation, which mixes the
    two rules with a constant instead of the frequency-dependent weight.
    """

    k: int = 50
    eps: float = DEFAULT_EPS
    lam: float = 0.05
    steps: int = 5
    eta: float = 0.2
    beta: float = 0.9
    mode: str = "hebb"
    fixed_weight: float = 0.5

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise ValueError(f"k: must be a positive integer, got {self.k!r}")
        for name in ("eps", "lam", "eta"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name}: must be positive, got {getattr(self, name)!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValueError(f"steps: must be an integer >= 1, got {self.steps!r}")
        if not 0 <= self.beta < 1:
            raise ValueError(f"beta: must lie in [0, 1), got {self.beta!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if not 0 <= self.fixed_weight <= 1:
            raise ValueError(f"fixed_weight: must lie in [0, 1], got {self.fixed_weight!r}")


# -- Hebbian rule ----------------------------------------------------------------

def hebbian_update(nbrs: Neighborhood) -> AdaptationDelta:
    """Per class i present in ``nbrs``: dw_i = mean_{k in N_i} c_k h_k, db_i = mean c_k."""
    if len(nbrs) == 0:
        return AdaptationDelta()
    labels, first, inv, sizes = np.unique(nbrs.labels, return_index=True, return_inverse=True,
                                          return_counts=True)
    dw = np.zeros((len(labels), nbrs.dim))
    np.add.at(dw, inv, nbrs.closeness[:, None] * nbrs.keys)
    db = np.bincount(inv, weights=nbrs.closeness, minlength=len(labels))
    dw /= sizes[:, None]
    db /= sizes
    order = np.argsort(first)  # first-appearance order, matching label_set()
    return AdaptationDelta({int(labels[j]): (dw[j], db[j]) for j in order})


# -- MbPA rule ---------------------------------------------------------------------

def _require_nonempty(nbrs: Neighborhood):
    if len(nbrs) == 0:
        raise ValueError("neighborhood is empty")


def mbpa_loss(layer: OutputLayer, nbrs: Neighborhood) -> float:
    """(1/|N|) * sum_k c_k log P(y_k | h_k)."""
    _require_nonempty(nbrs)
    cols = layer.columns(nbrs.labels)
    logp = log_softmax(layer.logits(nbrs.keys))
    return float(np.mean(nbrs.closeness * logp[np.arange(len(cols)), cols]))


def _loss_ascent(W, b, keys, cols, c):
    """Gradient of the weighted log-likelihood w.r.t. (W, b)."""
    m = len(cols)
    G = -softmax(keys @ W + b)
    G[np.arange(m), cols] += 1.0
    G *= (c / m)[:, None]
    return keys.T @ G, G.sum(axis=0)


def mbpa_gradient(layer: OutputLayer, nbrs: Neighborhood) -> tuple[np.ndarray, np.ndarray]:
    """Ascent direction of :func:`mbpa_loss` at ``layer`` as dense (dW, db)."""
    _require_nonempty(nbrs)
    return _loss_ascent(layer.W, layer.b, nbrs.keys, layer.columns(nbrs.labels), nbrs.closeness)


def mbpa_update(layer: OutputLayer, nbrs: Neighborhood, lam: float, steps: int = 1) -> AdaptationDelta:
    """``steps`` plain gradient-ascent steps of size ``lam`` on the neighbourhood likelihood.

    Probabilities are re-evaluated at the adapted parameters on every step.
    The returned delta is cumulative and covers every class in the layer.
    """
    _require_nonempty(nbrs)
    if not lam > 0:
        raise ValueError(f"lam must be positive, got {lam!r}")
    if int(steps) != steps or steps < 1:
        raise ValueError(f"steps must be an integer >= 1, got {steps!r}")
    cols = layer.columns(nbrs.labels)
    dW, db = np.zeros_like(layer.W), np.zeros_like(layer.b)
    for _ in range(int(steps)):
        gW, gb = _loss_ascent(layer.W + dW, layer.b + db, nbrs.keys, cols, nbrs.closeness)
        dW += lam * gW
        db += lam * gb
    return AdaptationDelta({c: (dW[:, j], db[j]) for j, c in enumerate(layer.classes)})


def decompose_mbpa(layer: OutputLayer, nbrs: Neighborhood, i: int) -> tuple[np.ndarray, np.ndarray]:
    """Split the one-step class-i weight gradient into (same-label term, other-label term).

    same  = (1/|N|) sum_{k: y_k = i} c_k (1 - P_{y_k}(h_k)) h_k
    other = -(1/|N|) sum_{j: y_j != i} c_j P_i(h_j) h_j
    """
    _require_nonempty(nbrs)
    m = len(nbrs)
    j_i = layer.column(i)
    P = layer.predict_probs(nbrs.keys)
    cols = layer.columns(nbrs.labels)
    own = nbrs.labels == i
    p_true = P[np.arange(m), cols]
    same = ((nbrs.closeness * (1.0 - p_true))[own, None] * nbrs.keys[own]).sum(axis=0) / m
    other = -((nbrs.closeness * P[:, j_i])[~own, None] * nbrs.keys[~own]).sum(axis=0) / m
    return same, other


# -- interpolation -------------------------------------------------------------------

def dynamic_weight(n_i: int, beta):
    """Hebbian share ``(1 - beta) / (1 - beta**n_i)``; 1 for a class never stored.

    Pass ``beta`` as a :class:`fractions.Fraction` for exact arithmetic; with
    floats, ``beta**n_i`` vanishes below machine precision for large ``n_i`` and
    the weight settles at ``1 - beta``.
    """
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta!r}")
    if n_i < 0:
        raise ValueError(f"n_i must be non-negative, got {n_i!r}")
    if n_i == 0:
        return Fraction(1) if isinstance(beta, Fraction) else 1.0
    return (1 - beta) / (1 - beta ** int(n_i))


def mixed_update(layer: OutputLayer, nbrs: Neighborhood, n_new: Neighborhood,
                 counts: Mapping[int, int], cfg: AdaptationConfig,
                 mbpa: AdaptationDelta | None = None) -> AdaptationDelta:
    """Combine MbPA and (eta-scaled) Hebbian deltas per class according to ``cfg.mode``.

    hebb     (1 - E_i) * mbpa_i + E_i * eta * hebb_i, Hebbian term over ``n_new``
    hebb_v1  eta * hebb_i over ``n_new`` only
    hebb_v2  as ``hebb`` but the Hebbian term is taken over all of ``nbrs``
    hebb_v3  as ``hebb`` with the constant ``cfg.fixed_weight`` in place of E_i
    mbpa     mbpa_i only
    mixture  no parameter change (the mixture baseline adapts predictions instead)

    ``mbpa`` may carry a precomputed ``mbpa_update(layer, nbrs, cfg.lam, cfg.steps)``
    so several modes can share one gradient computation.
    """
    if len(nbrs) == 0 or cfg.mode == "mixture":
        return AdaptationDelta()
    if cfg.mode == "hebb_v1":
        return hebbian_update(n_new).scaled(cfg.eta)
    if mbpa is None:
        mbpa = mbpa_update(layer, nbrs, cfg.lam, cfg.steps)
    if cfg.mode == "mbpa":
        return mbpa
    hebb = hebbian_update(nbrs if cfg.mode == "hebb_v2" else n_new)
    mW, mb = mbpa.dense(layer)
    hW, hb = hebb.dense(layer)
    if cfg.mode == "hebb_v3":
        e = np.full(layer.n, float(cfg.fixed_weight))
    else:
        e = np.array([float(dynamic_weight(counts.get(i, 0), cfg.beta)) for i in layer.classes])
    dW = (1.0 - e) * mW + (e * cfg.eta) * hW
    db = (1.0 - e) * mb + (e * cfg.eta) * hb
    touched = mbpa.classes | hebb.classes
    return AdaptationDelta({i: (dW[:, j], db[j]) for j, i in enumerate(layer.classes) if i in touched})


def adapted_predict(layer: OutputLayer, delta: AdaptationDelta, h) -> np.ndarray:
    """softmax((W + dW).T h + (b + db)) without touching ``layer``."""
    z = layer.logits(h)
    if len(delta):
        h = np.asarray(h, dtype=np.float64)
        z = z.copy()
        ids = list(delta.updates)
        dW = np.column_stack([delta.updates[i][0] for i in ids])
        db = np.array([delta.updates[i][1] for i in ids])
        z[..., layer.columns(ids)] += h @ dW + db
    return softmax(z)
