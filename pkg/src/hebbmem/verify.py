"""Randomised self-checks of the core invariants, runnable from the CLI.

Each suite draws its own random instances from a fixed seed and compares the
library against an independent reference computed here. ``fault`` lets a test
corrupt one implementation on purpose to prove the suite notices.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np

from .adaptation import decompose_mbpa, dynamic_weight, hebbian_update, mbpa_update
from .classifier import OutputLayer
from .memory import EpisodicMemory, Neighborhood

FD_STEP = 1e-6
FD_RTOL = 1e-5
DECOMP_TOL = 1e-12


@dataclass
class InvariantResult:
    name: str
    passed: int = 0
    total: int = 0
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return self.total > 0 and self.passed == self.total

    def record(self, ok: bool, detail: str = ""):
        self.total += 1
        if ok:
            self.passed += 1
        elif len(self.failures) < 5:
            self.failures.append(detail)

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        out = f"{status}  {self.name:<22} {self.passed}/{self.total}  ({self.seconds:.2f}s)"
        if self.failures:
            out += "\n      first failure: " + self.failures[0]
        return out


def random_instance(rng, nonneg=False, d_max=16, n_max=8, m_max=20):
    """A random layer and neighbourhood within the sizes the suites promise to cover."""
    d = int(rng.integers(1, d_max + 1))
    n = int(rng.integers(2, n_max + 1))
    m = int(rng.integers(1, m_max + 1))
    layer = OutputLayer(rng.normal(size=(d, n)), rng.normal(size=n))
    keys = rng.random((m, d)) if nonneg else rng.normal(size=(m, d))
    closeness = 1.0 / (1e-3 + rng.exponential(2.0, size=m))
    return layer, Neighborhood(keys, rng.integers(0, n, size=m), closeness)


def fd_gradient(W, b, H, cols, c, step=FD_STEP):
    """Central differences of (1/|N|) sum_k c_k log softmax(W.T h_k + b)[y_k], one batch per instance."""
    d, n = W.shape
    P = d * n + n
    theta = np.concatenate([W.ravel(), b])
    E = np.eye(P) * step

    def batch(thetas):
        Ws = thetas[:, : d * n].reshape(-1, d, n)
        Z = np.einsum("md,pdn->pmn", H, Ws) + thetas[:, None, d * n:]
        Z = Z - Z.max(axis=2, keepdims=True)
        logp = Z - np.log(np.exp(Z).sum(axis=2, keepdims=True))
        return (logp[:, np.arange(len(cols)), cols] * c).mean(axis=1)

    g = (batch(theta + E) - batch(theta - E)) / (2 * step)
    return g[: d * n].reshape(d, n), g[d * n:]


# -- suites -------------------------------------------------------------------------

def check_gradient(n: int = 500, seed: int = 0, mbpa=mbpa_update) -> InvariantResult:
    res = InvariantResult("mbpa_gradient")
    rng = np.random.default_rng([seed, 1])
    for t in range(n):
        layer, nb = random_instance(rng)
        lam = float(rng.choice([0.01, 0.05, 1.0]))
        dW, db = mbpa(layer, nb, lam, 1).dense(layer)
        fW, fb = fd_gradient(layer.W, layer.b, nb.keys, layer.columns(nb.labels), nb.closeness)
        g = np.concatenate([dW.ravel(), db])
        f = lam * np.concatenate([fW.ravel(), fb])
        err = np.linalg.norm(g - f) / max(np.linalg.norm(f), 1e-12)
        res.record(err < FD_RTOL, f"instance {t}: relative error {err:.3g}")
    return res


def check_decomposition(n: int = 500, seed: int = 0, mbpa=mbpa_update) -> InvariantResult:
    res = InvariantResult("mbpa_decomposition")
    rng = np.random.default_rng([seed, 2])
    for t in range(n):
        layer, nb = random_instance(rng)
        delta = mbpa(layer, nb, 1.0, 1)
        worst = 0.0
        for i in layer.classes:
            same, other = decompose_mbpa(layer, nb, i)
            worst = max(worst, float(np.max(np.abs(same + other - delta[i][0]))))
        res.record(worst <= DECOMP_TOL, f"instance {t}: max deviation {worst:.3g}")
    return res


def check_magnitude_bound(n: int = 1000, seed: int = 0, hebb=hebbian_update) -> InvariantResult:
    """0 <= same-label MbPA term <= Hebbian delta, componentwise, for nonnegative features."""
    res = InvariantResult("hebb_magnitude_bound")
    rng = np.random.default_rng([seed, 3])
    for t in range(n):
        layer, nb = random_instance(rng, nonneg=True)
        delta = hebb(nb)
        P = layer.predict_probs(nb.keys)
        p_true = P[np.arange(len(nb)), layer.columns(nb.labels)]
        ok, detail = True, ""
        for i in delta.classes:
            same, _ = decompose_mbpa(layer, nb, i)
            hw = delta[i][0]
            if np.any(same < 0) or np.any(same > hw):
                ok, detail = False, f"instance {t}, class {i}: componentwise bound violated"
                break
            strict = np.any(p_true[nb.labels == i] > 0) and np.any(hw != 0)
            if strict and not np.linalg.norm(same) < np.linalg.norm(hw):
                ok, detail = False, f"instance {t}, class {i}: norm bound not strict"
                break
        res.record(ok, detail)
    return res


def check_dynamic_weight(betas=(0.4, 0.5, 0.6, 0.7, 0.8, 0.9), n_max: int = 1000,
                         weight=dynamic_weight) -> InvariantResult:
    """E_1 = 1, strictly decreasing in n (exact arithmetic), and E_n_max close to 1 - beta."""
    res = InvariantResult("dynamic_weight")
    for beta in betas:
        exact = Fraction(beta).limit_denominator(1000)
        res.record(weight(1, exact) == 1 and weight(1, beta) == 1.0, f"beta={beta}: E_1 != 1")
        prev, mono = weight(1, exact), True
        for n in range(2, n_max + 1):
            cur = weight(n, exact)
            if not cur < prev:
                mono = False
                break
            prev = cur
        res.record(mono, f"beta={beta}: not strictly decreasing at n={n}")
        tail = abs(float(weight(n_max, beta)) - (1 - beta))
        res.record(tail < 1e-3, f"beta={beta}: |E_{n_max} - (1 - beta)| = {tail:.3g}")
    return res


def brute_force_knn(keys, seqs, q, k, eps):
    rows = sorted(((float(np.sum((key - q) ** 2)), int(s)) for key, s in zip(keys, seqs)))
    return [(s, 1.0 / (eps + d2)) for d2, s in rows[:k]]


def check_knn(n: int = 200, seed: int = 0, retrieve: Callable | None = None) -> InvariantResult:
    res = InvariantResult("knn_oracle")
    rng = np.random.default_rng([seed, 5])
    for t in range(n):
        grid = t % 2 == 0  # small integer grids force exact distance ties
        size = int(rng.integers(1, 500))
        d = int(rng.integers(1, 17))
        mem = EpisodicMemory(d)
        keys = (rng.integers(-2, 3, size=(size, d)).astype(float) if grid else rng.normal(size=(size, d)))
        mem.write_many(keys, rng.integers(0, 10, size=size))
        q = rng.integers(-2, 3, size=d).astype(float) if grid else rng.normal(size=d)
        k = int(rng.integers(1, 100))
        eps = float(rng.choice([1e-3, 0.1, 1.0]))
        nb = retrieve(mem, q, k, eps) if retrieve else mem.retrieve_knn(q, k, eps)
        k_, _, s_ = mem.arrays()
        expected = brute_force_knn(k_, s_, q, k, eps)
        ok = (nb.seqs.tolist() == [e[0] for e in expected]
              and np.allclose(nb.closeness, [e[1] for e in expected], rtol=1e-12, atol=0))
        res.record(ok, f"case {t}: neighbour list differs from brute force")
    return res


# -- fault injection ----------------------------------------------------------------------

def _bad_mbpa(layer, nbrs, lam, steps=1):
    return mbpa_update(layer, nbrs, lam * (1 + 1e-3), steps)


def _bad_hebb(nbrs):
    delta = hebbian_update(nbrs)
    return delta.scaled(0.0) if len(delta) else delta


def _bad_weight(n, beta):
    return dynamic_weight(min(n, 10), beta)


def _bad_knn(mem, q, k, eps):
    return mem.retrieve_knn(q, k + 1, eps)


SUITES = {
    "mbpa_gradient": (check_gradient, "mbpa", _bad_mbpa),
    "mbpa_decomposition": (check_decomposition, "mbpa", _bad_mbpa),
    "hebb_magnitude_bound": (check_magnitude_bound, "hebb", _bad_hebb),
    "dynamic_weight": (check_dynamic_weight, "weight", _bad_weight),
    "knn_oracle": (check_knn, "retrieve", _bad_knn),
}


def run_all(seed: int = 0, fault: str | None = None, names=None) -> list[InvariantResult]:
    """Run the selected suites (all by default); ``fault`` names a suite whose implementation is corrupted."""
    if fault is not None and fault not in SUITES:
        raise ValueError(f"unknown invariant {fault!r}; choose from {sorted(SUITES)}")
    results = []
    for name in names or SUITES:
        fn, arg, bad = SUITES[name]
        kwargs = {arg: bad} if name == fault else {}
        if name != "dynamic_weight":
            kwargs["seed"] = seed
        t0 = time.perf_counter()
        res = fn(**kwargs)
        res.seconds = time.perf_counter() - t0
        results.append(res)
    return results
