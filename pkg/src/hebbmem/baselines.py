"""Comparison methods: plain fine-tuning and the parametric/non-parametric mixture."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import FeatureExtractor, OutputLayer, train
from .memory import Neighborhood


@dataclass(frozen=True)
class MixtureConfig:
    gamma: float = 0.1
    theta: float = 1.0
    normalize_terms: bool = False

    def __post_init__(self):
        if not 0 <= self.gamma <= 1:
            raise ValueError(f"gamma: must lie in [0, 1], got {self.gamma!r}")
        if not self.theta > 0:
            raise ValueError(f"theta: must be positive, got {self.theta!r}")


def mixture_predict(layer: OutputLayer, nbrs: Neighborhood, h, cfg: MixtureConfig) -> np.ndarray:
    """Mix softmax scores with kernel votes of the neighbours.

    P(y) is proportional to (1 - gamma) exp(z_y) + gamma * sum_{k: y_k = y} exp(theta h_k.h).
    Each exponential family is shifted by its own maximum before exponentiating,
    so the cross-term ratio is taken between the shifted families. With
    ``normalize_terms`` each family is normalised to a distribution first.
    """
    h = np.asarray(h, dtype=np.float64)
    z = layer.logits(h)
    param = np.exp(z - z.max())
    nonparam = np.zeros_like(param)
    if len(nbrs):
        s = cfg.theta * (nbrs.keys @ h)
        np.add.at(nonparam, layer.columns(nbrs.labels), np.exp(s - s.max()))
    if cfg.normalize_terms:
        param = param / param.sum()
        if nonparam.sum() > 0:
            nonparam = nonparam / nonparam.sum()
    scores = (1.0 - cfg.gamma) * param + cfg.gamma * nonparam
    total = scores.sum()
    if total == 0:
        # gamma == 1 with nothing retrieved: nothing to vote with
        return param / param.sum()
    return scores / total


def parametric_finetune(fe: FeatureExtractor, layer: OutputLayer, data, epochs: int = 1,
                        lr: float = 0.1, batch_size: int = 32, seed: int = 0) -> OutputLayer:
    """Fine-tune the output layer on new data; no memory involved."""
    return train(fe, layer, data, epochs=epochs, lr=lr, batch_size=batch_size, seed=seed)
