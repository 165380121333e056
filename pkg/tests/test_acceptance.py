"""The ten acceptance criteria, each reported as one PASS/FAIL line.

Criteria 7-9 run the packaged presets with three seeds each.
"""

import time
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from hebbmem.adaptation import (
    AdaptationConfig,
    adapted_predict,
    decompose_mbpa,
    dynamic_weight,
    hebbian_update,
    mbpa_update,
    mixed_update,
)
from hebbmem.classifier import OutputLayer
from hebbmem.config import load_preset
from hebbmem.harness import evaluate, run_scenario, run_training_phase, write_atomic
from hebbmem.memory import DEFAULT_EPS, EpisodicMemory, select_new

from oracles import brute_force_knn, fd_gradient, random_instance, random_memory

pytestmark = pytest.mark.slow


def test_c01_gradient_oracle(criterion):
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(500):
        layer, nb = random_instance(rng)
        lam = float(rng.choice([0.01, 0.05, 0.5, 1.0]))
        dW, db = mbpa_update(layer, nb, lam, 1).dense(layer)
        fW, fb = fd_gradient(layer.W, layer.b, nb.keys, layer.columns(nb.labels), nb.closeness)
        g = np.concatenate([dW.ravel(), db])
        f = lam * np.concatenate([fW.ravel(), fb])
        worst = max(worst, np.linalg.norm(g - f) / max(np.linalg.norm(f), 1e-12))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 10
    assert criterion(1, "MbPA one-step delta vs finite differences", ok,
                     f"500 instances, max rel err {worst:.2e} (< 1e-5), {elapsed:.1f}s (< 10s)")


def test_c02_decomposition_identity(criterion):
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(500):
        layer, nb = random_instance(rng)
        delta = mbpa_update(layer, nb, 1.0, 1)
        for i in layer.classes:
            same, other = decompose_mbpa(layer, nb, i)
            worst = max(worst, float(np.max(np.abs(same + other - delta[i][0]))))
    assert criterion(2, "same-label + other-label terms = one-step delta", worst <= 1e-12,
                     f"500 instances, max abs deviation {worst:.1e} (<= 1e-12)")


def test_c03_magnitude_bound(criterion):
    rng = np.random.default_rng(103)
    violations = strict_checked = 0
    for _ in range(1000):
        layer, nb = random_instance(rng, nonneg=True)
        hebb = hebbian_update(nb)
        P = layer.predict_probs(nb.keys)
        p_true = P[np.arange(len(nb)), layer.columns(nb.labels)]
        for i in hebb.classes:
            same, _ = decompose_mbpa(layer, nb, i)
            hw = hebb[i][0]
            if np.any(same < 0) or np.any(same > hw):
                violations += 1
            if np.any(p_true[nb.labels == i] > 0) and np.any(hw != 0):
                strict_checked += 1
                if not np.linalg.norm(same) < np.linalg.norm(hw):
                    violations += 1
    assert criterion(3, "0 <= same-label MbPA term <= Hebbian delta", violations == 0,
                     f"1000 instances, {strict_checked} strict-norm cases, {violations} violations")


BETAS = (0.4, 0.5, 0.6, 0.7, 0.8, 0.9)


def test_c04_dynamic_weight_law(criterion):
    problems = []
    for beta in BETAS:
        exact = Fraction(str(beta))
        if dynamic_weight(1, beta) != 1.0 or dynamic_weight(1, exact) != 1:
            problems.append(f"E_1 != 1 for beta={beta}")
        # exact rational arithmetic: strict decrease over the whole range
        E = [dynamic_weight(n, exact) for n in range(1, 1001)]
        if not all(a > b for a, b in zip(E, E[1:])):
            problems.append(f"not strictly decreasing for beta={beta}")
        # float arithmetic saturates at 1 - beta but must never increase
        Ef = [dynamic_weight(n, beta) for n in range(1, 1001)]
        if not all(a >= b for a, b in zip(Ef, Ef[1:])):
            problems.append(f"float weights increase for beta={beta}")
        if not abs(Ef[-1] - (1 - beta)) < 1e-3:
            problems.append(f"|E_1000 - (1-beta)| too large for beta={beta}")
    assert criterion(4, "E_1 = 1, strictly decreasing, E_1000 ~ 1 - beta", not problems,
                     "; ".join(problems) or f"beta in {BETAS}, n in [1, 1000]")


def test_c05_knn_oracle(criterion):
    rng = np.random.default_rng(105)
    mismatches = tie_cases = 0
    for trial in range(200):
        grid = trial % 2 == 0
        mem = random_memory(rng, grid)
        keys, values, seqs = mem.arrays()
        q = rng.integers(-2, 3, size=mem.dim).astype(float) if grid else rng.normal(size=mem.dim)
        k = int(rng.integers(1, 300))
        nb = mem.retrieve_knn(q, k, DEFAULT_EPS)
        expected = brute_force_knn(keys, values, seqs, q.tolist(), k, DEFAULT_EPS)
        d2 = np.sum((keys - q) ** 2, axis=1)
        tie_cases += len(np.unique(d2)) < len(d2)
        same = (nb.seqs.tolist() == [e[0] for e in expected]
                and nb.labels.tolist() == [e[1] for e in expected]
                and np.allclose(nb.closeness, [e[2] for e in expected], rtol=1e-12))
        mismatches += not same
    assert criterion(5, "exact KNN equals brute-force sort", mismatches == 0,
                     f"200 cases ({tie_cases} with distance ties), {mismatches} mismatches")


def test_c06_one_shot_acquisition(criterion):
    rng = np.random.default_rng(106)
    d, old = 16, 5
    cfg = AdaptationConfig(mode="hebb_v1")  # default eta, eps = 1e-3
    successes = 0
    for _ in range(100):
        layer = OutputLayer(rng.normal(size=(d, old)), rng.normal(size=old)).register_class(old)
        mem = EpisodicMemory(d)
        mem.write_many(rng.random((60, d)) * 2, rng.integers(0, old, size=60))
        exemplar = rng.random(d)
        exemplar *= max(1.0, 1 / np.linalg.norm(exemplar)) * rng.uniform(1, 3)
        mem.write(exemplar, old)
        ok = True
        for _ in range(5):
            noise = rng.normal(size=d)
            q = exemplar + noise / np.linalg.norm(noise) * rng.uniform(0, 0.01)
            nb = mem.retrieve_knn(q, cfg.k, cfg.eps)
            delta = mixed_update(layer, nb, select_new(nb, range(old)), mem.class_counts, cfg)
            ok &= layer.classes[int(np.argmax(adapted_predict(layer, delta, q)))] == old
        successes += ok
    assert criterion(6, "one stored exemplar teaches a zero-init class", successes == 100,
                     f"{successes}/100 trials, eta={cfg.eta}, eps={cfg.eps}, |perturbation| <= 0.01")


def test_c07_continual_direction(criterion):
    cfg = replace(load_preset("continual"), methods=("parametric", "mbpa", "hebb"))
    t0 = time.perf_counter()
    res = run_scenario(cfg)
    elapsed = time.perf_counter() - t0
    acc = {m: res.final(m).acc_overall for m in cfg.methods}
    ok = (acc["hebb"] >= acc["mbpa"] >= acc["parametric"] and acc["hebb"] - acc["parametric"] >= 0.05
          and elapsed < 300)
    assert criterion(7, "continual: Hebb >= MbPA >= Parametric, Hebb - Parametric >= 5 pts", ok,
                     f"hebb {acc['hebb']:.4f}, mbpa {acc['mbpa']:.4f}, parametric {acc['parametric']:.4f}, "
                     f"{len(cfg.seeds)} seeds, {elapsed:.0f}s (< 300s)")


@pytest.fixture(scope="module")
def online_run():
    cfg = replace(load_preset("online"), methods=("parametric", "mbpa", "hebb", "hebb_v1"))
    t0 = time.perf_counter()
    res = run_scenario(cfg)
    return res, time.perf_counter() - t0


def test_c08_online_new_classes(criterion, online_run):
    res, elapsed = online_run
    f = {m: res.final(m) for m in res.config.methods}
    ok = (f["hebb"].acc_new > f["mbpa"].acc_new and f["hebb"].acc_new > f["parametric"].acc_new
          and f["hebb"].acc_overall >= f["mbpa"].acc_overall and elapsed < 300)
    assert criterion(8, "online: Hebb best on new classes, Hebb overall >= MbPA", ok,
                     f"new: hebb {f['hebb'].acc_new:.4f}, mbpa {f['mbpa'].acc_new:.4f}, "
                     f"parametric {f['parametric'].acc_new:.4f}; overall: hebb {f['hebb'].acc_overall:.4f}, "
                     f"mbpa {f['mbpa'].acc_overall:.4f}; {elapsed:.0f}s (< 300s)")


def test_c09_ablation_order(criterion, online_run):
    res, _ = online_run
    acc = {m: res.final(m).acc_overall for m in res.config.methods}
    ok = acc["hebb"] >= acc["hebb_v1"] and acc["hebb"] >= acc["mbpa"]
    assert criterion(9, "online ablation: Hebb >= Hebb-v1 and Hebb >= MbPA-only", ok,
                     f"hebb {acc['hebb']:.4f}, hebb_v1 {acc['hebb_v1']:.4f}, mbpa {acc['mbpa']:.4f}")


def test_c10_transience_and_determinism(criterion, online_run, tmp_path):
    problems = []
    # 1. every adaptive method predicts a whole test set; the base layer must be bitwise unchanged
    cfg = load_preset("online")
    state = run_training_phase(cfg, 0)
    snapshot = state.layer.to_bytes()
    X = cfg.data.generate().X_test
    evaluate(state, X, ("mixture", "mbpa", "hebb", "hebb_v1", "hebb_v2", "hebb_v3"), cfg)
    restored = OutputLayer.from_bytes(snapshot)
    H = state.fe.extract(X)
    if state.layer.to_bytes() != snapshot or not np.array_equal(restored.predict(H), state.layer.predict(H)):
        problems.append("layer changed by inference")
    # 2. a full run with adaptive methods leaves the same base model as a parametric-only run
    res, _ = online_run
    para = run_scenario(replace(res.config, methods=("parametric",)))
    if para.layers != res.layers or para.memories != res.memories:
        problems.append("final base model depends on adaptive methods")
    if [r for r in res.records if r.method == "parametric"] != para.records:
        problems.append("parametric records depend on adaptive methods")
    for seed, blob in res.layers.items():
        layer = OutputLayer.from_bytes(blob)
        if layer.to_bytes() != blob:
            problems.append(f"layer snapshot of seed {seed} does not round-trip")
    # 3. byte-identical CSV from two runs of the same config
    again = run_scenario(res.config)
    write_atomic(tmp_path / "a.csv", res.to_csv())
    write_atomic(tmp_path / "b.csv", again.to_csv())
    if (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes():
        problems.append("CSV differs between identical runs")
    assert criterion(10, "deltas never leak; identical configs give identical CSV", not problems,
                     "; ".join(problems) or "layer bitwise unchanged, CSV byte-identical")
