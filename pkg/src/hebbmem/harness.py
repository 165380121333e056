"""Scenario engine: training phase, adapted inference, and the three evaluation protocols.

All methods in a scenario share one base model, one memory, and one data
stream per seed. The base model and memory never depend on predictions (labels
are revealed after each prediction), so evaluating the methods in lockstep
gives exactly the same numbers as running them one at a time, and the
comparisons are paired.
"""

from __future__ import annotations

import csv
import io
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .adaptation import AdaptationConfig, adapted_predict, mbpa_update, mixed_update
from .baselines import MixtureConfig, mixture_predict
from .classifier import Identity, OutputLayer, RandomProjection, train
from .data import GaussianBlobs, PermutedFamily, imbalanced_counts
from .memory import EpisodicMemory, Neighborhood, RingBuffer, select_new

log = logging.getLogger(__name__)

KINDS = ("continual", "incremental", "online")
METHODS = ("parametric", "mixture", "mbpa", "hebb", "hebb_v1", "hebb_v2", "hebb_v3")
CSV_COLUMNS = ("scenario", "method", "seed", "position", "acc_overall", "acc_new", "acc_old")


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 30
    lr: float = 0.1
    batch_size: int = 32

    def __post_init__(self):
        if int(self.epochs) != self.epochs or self.epochs < 0:
            raise ValueError(f"epochs: must be a non-negative integer, got {self.epochs!r}")
        if not self.lr > 0:
            raise ValueError(f"lr: must be positive, got {self.lr!r}")
        if int(self.batch_size) != self.batch_size or self.batch_size <= 0:
            raise ValueError(f"batch_size: must be a positive integer, got {self.batch_size!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    """One experiment definition.

    Fields under "continual" only matter for ``kind="continual"`` and so on.
    ``memory_capacity`` switches the memory to a ring buffer of that size.
    ``feature_dim`` is ignored by the identity extractor.
    Per-seed data is generated with seed ``data.seed + seed``.
    """

    kind: str = "online"
    methods: tuple = ("parametric", "mixture", "mbpa", "hebb")
    seeds: tuple = (0, 1, 2)
    data: GaussianBlobs = field(default_factory=GaussianBlobs)
    extractor: str = "random_projection"
    feature_dim: int = 64
    training: TrainingConfig = field(default_factory=TrainingConfig)
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    mixture: MixtureConfig = field(default_factory=MixtureConfig)
    memory_capacity: int | None = None
    # continual
    n_tasks: int = 5
    epochs_per_task: int = 5
    memory_per_task: int | None = None
    # incremental / online
    n_pretrain_classes: int = 5
    pretrain_classes: tuple | None = None
    # incremental
    incremental_epochs: int = 5
    incremental_per_class: int = 10
    imbalance: tuple | None = None
    eval_every: int = 1
    # online
    finetune_cadence: int = 100
    finetune_lr: float = 0.05
    memory_write: bool = True

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if self.pretrain_classes is not None:
            object.__setattr__(self, "pretrain_classes", tuple(int(c) for c in self.pretrain_classes))
        if self.imbalance is not None:
            object.__setattr__(self, "imbalance", tuple(int(r) for r in self.imbalance))
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind: must be one of {KINDS}, got {self.kind!r}")
        if not self.methods:
            raise ValueError("methods: at least one method is required")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"methods: unknown method {m!r}; choose from {METHODS}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError("methods: duplicate entries")
        if not self.seeds:
            raise ValueError("seeds: at least one seed is required")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds: duplicate entries")
        if self.extractor not in ("identity", "random_projection"):
            raise ValueError(f"extractor: must be 'identity' or 'random_projection', got {self.extractor!r}")
        positive = ["feature_dim", "n_tasks", "incremental_epochs", "eval_every", "finetune_cadence",
                    "n_pretrain_classes"]
        for name in positive:
            v = getattr(self, name)
            if int(v) != v or v <= 0:
                raise ValueError(f"{name}: must be a positive integer, got {v!r}")
        if int(self.epochs_per_task) != self.epochs_per_task or self.epochs_per_task < 0:
            raise ValueError(f"epochs_per_task: must be a non-negative integer, got {self.epochs_per_task!r}")
        if int(self.incremental_per_class) != self.incremental_per_class or self.incremental_per_class < 0:
            raise ValueError("incremental_per_class: must be a non-negative integer")
        for name in ("memory_capacity", "memory_per_task"):
            v = getattr(self, name)
            if v is not None and (int(v) != v or v <= 0):
                raise ValueError(f"{name}: must be a positive integer or null, got {v!r}")
        if not self.finetune_lr > 0:
            raise ValueError(f"finetune_lr: must be positive, got {self.finetune_lr!r}")
        if self.imbalance is not None:
            if len(self.imbalance) != 2 or min(self.imbalance) <= 0:
                raise ValueError(f"imbalance: must be [major, minor] with positive entries, got {self.imbalance!r}")
        if self.kind in ("incremental", "online"):
            n = self.data.n_classes
            if self.pretrain_classes is not None:
                pc = set(self.pretrain_classes)
                if len(pc) != len(self.pretrain_classes) or not pc <= set(range(n)):
                    raise ValueError(f"pretrain_classes: must be distinct class ids in [0, {n})")
            elif self.n_pretrain_classes > n:
                raise ValueError(f"n_pretrain_classes: must not exceed data.n_classes ({n})")


@dataclass
class HarnessState:
    fe: Identity | RandomProjection
    layer: OutputLayer
    mem: EpisodicMemory
    pretrain_classes: frozenset


@dataclass(frozen=True)
class RunRecord:
    scenario: str
    method: str
    seed: int | str
    position: int
    acc_overall: float
    acc_new: float | None = None
    acc_old: float | None = None
    per_task: tuple = ()
    n_new: int = 0
    n_old: int = 0

    def csv_row(self) -> list[str]:
        return [self.scenario, self.method, str(self.seed), str(self.position),
                _fmt(self.acc_overall), _fmt(self.acc_new), _fmt(self.acc_old)]


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"


@dataclass
class ScenarioResult:
    """Per-seed records plus, per seed, snapshots of the final base layer and memory."""

    config: ScenarioConfig
    records: list[RunRecord]
    layers: dict = field(default_factory=dict)  # seed -> layer snapshot bytes
    memories: dict = field(default_factory=dict)  # seed -> memory snapshot bytes

    def mean_records(self) -> list[RunRecord]:
        """Seed-averaged records, one per (method, position)."""
        groups: dict[tuple, list[RunRecord]] = {}
        for r in self.records:
            groups.setdefault((r.method, r.position), []).append(r)
        out = []
        for method in self.config.methods:
            for (m, pos), rs in groups.items():
                if m != method:
                    continue
                news = [r.acc_new for r in rs if r.acc_new is not None]
                olds = [r.acc_old for r in rs if r.acc_old is not None]
                tasks = tuple(np.mean([r.per_task for r in rs], axis=0).tolist()) if rs[0].per_task else ()
                out.append(RunRecord(
                    rs[0].scenario, method, "mean", pos,
                    float(np.mean([r.acc_overall for r in rs])),
                    float(np.mean(news)) if news else None,
                    float(np.mean(olds)) if olds else None,
                    tasks,
                ))
        return out

    def final(self, method: str) -> RunRecord:
        rows = [r for r in self.mean_records() if r.method == method]
        return max(rows, key=lambda r: r.position)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in self.records + self.mean_records():
            w.writerow(r.csv_row())
        return buf.getvalue()

    def summary(self) -> str:
        lines = [f"{'method':<12}{'overall':>10}{'new':>10}{'old':>10}"]
        for m in self.config.methods:
            r = self.final(m)
            lines.append(f"{m:<12}{_fmt(r.acc_overall):>10}{_fmt(r.acc_new) or '-':>10}{_fmt(r.acc_old) or '-':>10}")
        return "\n".join(lines)


def write_atomic(path, text: str) -> None:
    """Write ``text`` via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- building blocks --------------------------------------------------------------------

def _blobs(cfg: ScenarioConfig, seed: int) -> GaussianBlobs:
    return cfg.data.with_seed(cfg.data.seed + seed)


def make_extractor(cfg: ScenarioConfig, seed: int):
    if cfg.extractor == "identity":
        return Identity(cfg.data.d_in)
    return RandomProjection.from_seed(cfg.data.d_in, cfg.feature_dim, seed=[cfg.data.seed + seed, 11])


def make_memory(cfg: ScenarioConfig, dim: int) -> EpisodicMemory:
    cap = RingBuffer(cfg.memory_capacity) if cfg.memory_capacity else None
    return EpisodicMemory(dim, cap)


def choose_pretrain_classes(cfg: ScenarioConfig, seed: int) -> frozenset:
    if cfg.kind == "continual":
        return frozenset()
    if cfg.pretrain_classes is not None:
        return frozenset(cfg.pretrain_classes)
    rng = np.random.default_rng([cfg.data.seed + seed, 13])
    return frozenset(rng.choice(cfg.data.n_classes, cfg.n_pretrain_classes, replace=False).tolist())


def ensure_registered(layer: OutputLayer, labels: Iterable[int]) -> OutputLayer:
    for y in labels:
        if not layer.has_class(y):
            layer = layer.register_class(y)
    return layer


def run_training_phase(cfg: ScenarioConfig, seed: int) -> HarnessState:
    """Train on the pre-training classes, then store every training pair in memory once."""
    ds = _blobs(cfg, seed).generate()
    pretrain = choose_pretrain_classes(cfg, seed)
    classes = sorted(pretrain) if pretrain else list(range(cfg.data.n_classes))
    mask = np.isin(ds.y_train, classes)
    X, y = ds.X_train[mask], ds.y_train[mask]
    fe = make_extractor(cfg, seed)
    layer = train(fe, OutputLayer.zeros(fe.output_dim, classes), (X, y), epochs=cfg.training.epochs,
                  lr=cfg.training.lr, batch_size=cfg.training.batch_size, seed=seed)
    mem = make_memory(cfg, fe.output_dim)
    mem.write_many(fe.extract(X), y)
    return HarnessState(fe, layer, mem, pretrain)


def retrieve(state: HarnessState, h: np.ndarray, cfg: AdaptationConfig) -> Neighborhood:
    if len(state.mem) == 0:
        log.debug("memory is empty; predicting without adaptation")
        return Neighborhood.empty(state.mem.dim)
    return state.mem.retrieve_knn(h, cfg.k, cfg.eps)


def predict_with(state: HarnessState, h: np.ndarray, nbrs: Neighborhood, method: str,
                 adaptation: AdaptationConfig, mixture: MixtureConfig) -> int:
    """Class id predicted by ``method`` for representation ``h`` given its neighbours."""
    return predict_all(state, h, nbrs, (method,), adaptation, mixture)[method]


def predict_all(state: HarnessState, h: np.ndarray, nbrs: Neighborhood, methods: Sequence[str],
                adaptation: AdaptationConfig, mixture: MixtureConfig) -> dict[str, int]:
    """Predictions of several methods for one input.

    The MbPA delta is computed once and shared by every mode that uses it.
    """
    layer = state.layer
    out = {}
    mbpa = n_new = None
    for method in methods:
        if method == "parametric" or len(nbrs) == 0:
            out[method] = layer.predict(h)
            continue
        if method == "mixture":
            probs = mixture_predict(layer, nbrs, h, mixture)
        else:
            # method names double as adaptation modes
            cfg = adaptation if adaptation.mode == method else replace(adaptation, mode=method)
            if n_new is None:
                n_new = select_new(nbrs, state.pretrain_classes)
            if mbpa is None and method != "hebb_v1":
                mbpa = mbpa_update(layer, nbrs, cfg.lam, cfg.steps)
            delta = mixed_update(layer, nbrs, n_new, state.mem.class_counts, cfg, mbpa=mbpa)
            probs = adapted_predict(layer, delta, h)
        out[method] = layer.classes[int(np.argmax(probs))]
    return out


def run_inference_step(x, y_true: int, state: HarnessState, method: str, adaptation: AdaptationConfig,
                       mixture: MixtureConfig | None = None, online: bool = False) -> tuple[int, HarnessState]:
    """Predict one input with a method; in online mode, then store ``(h_x, y_true)``.

    The adaptation delta lives only inside this call.
    """
    mixture = mixture or MixtureConfig()
    h = state.fe.extract(np.asarray(x, dtype=np.float64))
    nbrs = retrieve(state, h, adaptation)
    if len(nbrs):
        state.layer = ensure_registered(state.layer, nbrs.label_set())
    pred = predict_with(state, h, nbrs, method, adaptation, mixture)
    if online:
        state.layer = ensure_registered(state.layer, [y_true])
        state.mem.write(h, int(y_true))
    return pred, state


def evaluate(state: HarnessState, X: np.ndarray, methods: Sequence[str], cfg: ScenarioConfig) -> dict[str, np.ndarray]:
    """Predictions of every method on every row of ``X`` (memory is not written)."""
    H = state.fe.extract(X)
    preds = {m: np.empty(len(H), dtype=np.int64) for m in methods}
    for t, h in enumerate(H):
        nbrs = retrieve(state, h, cfg.adaptation)
        for m, p in predict_all(state, h, nbrs, methods, cfg.adaptation, cfg.mixture).items():
            preds[m][t] = p
    return preds


def split_accuracy(pred, y, pretrain: frozenset):
    """(overall, new, old, n_new, n_old); new/old are None when their partition is empty."""
    pred, y = np.asarray(pred), np.asarray(y)
    correct = pred == y
    is_old = np.isin(y, list(pretrain)) if pretrain else np.zeros(len(y), dtype=bool)
    n_old = int(is_old.sum())
    n_new = len(y) - n_old
    old = float(correct[is_old].mean()) if n_old and pretrain else None
    new = float(correct[~is_old].mean()) if n_new and pretrain else None
    return float(correct.mean()), new, old, n_new if pretrain else 0, n_old


# -- protocols ----------------------------------------------------------------------------

def _run_continual(cfg: ScenarioConfig, seed: int) -> tuple[list[RunRecord], HarnessState]:
    tasks = PermutedFamily(_blobs(cfg, seed), cfg.n_tasks, permutation_seed=cfg.data.seed + seed).tasks()
    fe = make_extractor(cfg, seed)
    state = HarnessState(fe, OutputLayer.zeros(fe.output_dim, cfg.data.n_classes),
                         make_memory(cfg, fe.output_dim), frozenset())
    rng = np.random.default_rng([cfg.data.seed + seed, 17])
    records = []
    for t, task in enumerate(tasks):
        state.layer = train(fe, state.layer, (task.X_train, task.y_train), epochs=cfg.epochs_per_task,
                            lr=cfg.training.lr, batch_size=cfg.training.batch_size, seed=seed * 1000 + t)
        keep = np.arange(len(task.y_train))
        if cfg.memory_per_task is not None and cfg.memory_per_task < len(keep):
            keep = np.sort(rng.choice(keep, cfg.memory_per_task, replace=False))
        state.mem.write_many(fe.extract(task.X_train[keep]), task.y_train[keep])
        per_task = {m: [] for m in cfg.methods}
        for seen in tasks[: t + 1]:
            preds = evaluate(state, seen.X_test, cfg.methods, cfg)
            for m in cfg.methods:
                per_task[m].append(float(np.mean(preds[m] == seen.y_test)))
        for m in cfg.methods:
            records.append(RunRecord("continual", m, seed, t + 1, float(np.mean(per_task[m])),
                                     per_task=tuple(per_task[m])))
    return records, state


def _run_incremental(cfg: ScenarioConfig, seed: int) -> tuple[list[RunRecord], HarnessState]:
    state = run_training_phase(cfg, seed)
    blobs = _blobs(cfg, seed)
    ds = blobs.generate()
    new_classes = [c for c in range(cfg.data.n_classes) if c not in state.pretrain_classes]
    counts = {c: cfg.incremental_per_class for c in sorted(state.pretrain_classes)}
    counts.update(imbalanced_counts(cfg.incremental_per_class, new_classes, cfg.imbalance))
    X_inc, y_inc = blobs.sample([counts[c] for c in range(cfg.data.n_classes)], stream=3)
    state.layer = ensure_registered(state.layer, new_classes)
    if len(y_inc):
        state.mem.write_many(state.fe.extract(X_inc), y_inc)
    records = []
    for epoch in range(1, cfg.incremental_epochs + 1):
        if len(y_inc):
            state.layer = train(state.fe, state.layer, (X_inc, y_inc), epochs=1, lr=cfg.finetune_lr,
                                batch_size=cfg.training.batch_size, seed=seed * 1000 + epoch)
        if epoch % cfg.eval_every and epoch != cfg.incremental_epochs:
            continue
        preds = evaluate(state, ds.X_test, cfg.methods, cfg)
        for m in cfg.methods:
            acc, new, old, n_new, n_old = split_accuracy(preds[m], ds.y_test, state.pretrain_classes)
            records.append(RunRecord("incremental", m, seed, epoch, acc, new, old, n_new=n_new, n_old=n_old))
    return records, state


def _run_online(cfg: ScenarioConfig, seed: int) -> tuple[list[RunRecord], HarnessState]:
    state = run_training_phase(cfg, seed)
    ds = _blobs(cfg, seed).generate()
    order = np.random.default_rng([cfg.data.seed + seed, 19]).permutation(len(ds.y_test))
    X, y = ds.X_test[order], ds.y_test[order]
    H = state.fe.extract(X)
    preds = {m: np.empty(len(y), dtype=np.int64) for m in cfg.methods}
    buffer: list[int] = []
    records = []

    def emit(pos):
        for m in cfg.methods:
            acc, new, old, n_new, n_old = split_accuracy(preds[m][:pos], y[:pos], state.pretrain_classes)
            records.append(RunRecord("online", m, seed, pos, acc, new, old, n_new=n_new, n_old=n_old))

    for t, (h, label) in enumerate(zip(H, y.tolist())):
        nbrs = retrieve(state, h, cfg.adaptation)
        for m, p in predict_all(state, h, nbrs, cfg.methods, cfg.adaptation, cfg.mixture).items():
            preds[m][t] = p
        # the label is revealed only after every method has predicted
        state.layer = ensure_registered(state.layer, [label])
        if cfg.memory_write:
            state.mem.write(h, label)
        buffer.append(t)
        if len(buffer) == cfg.finetune_cadence:
            state.layer = train(state.fe, state.layer, (X[buffer], y[buffer]), epochs=1, lr=cfg.finetune_lr,
                                batch_size=cfg.training.batch_size, seed=seed * 100_000 + t)
            buffer = []
            emit(t + 1)
    if len(y) % cfg.finetune_cadence:
        emit(len(y))
    return records, state


_PROTOCOLS = {"continual": _run_continual, "incremental": _run_incremental, "online": _run_online}


def run_seed(cfg: ScenarioConfig, seed: int) -> tuple[list[RunRecord], HarnessState]:
    """Records of one seed and the final state (base model and memory) it left behind."""
    return _PROTOCOLS[cfg.kind](cfg, seed)


def _run_seed_snapshots(cfg: ScenarioConfig, seed: int):
    records, state = run_seed(cfg, seed)
    return records, state.layer.to_bytes(), state.mem.to_bytes()


def run_scenario(cfg: ScenarioConfig, workers: int = 1) -> ScenarioResult:
    """Run every seed of ``cfg``; records keep seed order regardless of ``workers``."""
    cfg.validate()
    if workers > 1 and len(cfg.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            per_seed = list(pool.map(_run_seed_snapshots, [cfg] * len(cfg.seeds), cfg.seeds))
    else:
        per_seed = [_run_seed_snapshots(cfg, s) for s in cfg.seeds]
    result = ScenarioResult(cfg, [r for rs, _, _ in per_seed for r in rs])
    for s, (_, layer, mem) in zip(cfg.seeds, per_seed):
        result.layers[s] = layer
        result.memories[s] = mem
    return result


# -- sweeps -------------------------------------------------------------------------------------

SWEEPABLE = {"eta", "beta", "lam", "steps", "k", "eps", "fixed_weight"}


@dataclass
class SweepResult:
    param_a: str
    values_a: list
    param_b: str
    values_b: list
    results: dict  # (a, b) -> ScenarioResult

    def matrix(self, method: str, metric: str = "acc_overall") -> np.ndarray:
        M = np.full((len(self.values_a), len(self.values_b)), np.nan)
        for i, a in enumerate(self.values_a):
            for j, b in enumerate(self.values_b):
                v = getattr(self.results[(a, b)].final(method), metric)
                M[i, j] = np.nan if v is None else v
        return M

    def format_matrix(self, method: str, metric: str = "acc_overall") -> str:
        M = self.matrix(method, metric)
        head = f"{metric} [{method}]  rows={self.param_a}  cols={self.param_b}"
        lines = [head, " " * 10 + "".join(f"{b!s:>10}" for b in self.values_b)]
        for a, row in zip(self.values_a, M):
            lines.append(f"{a!s:>10}" + "".join("         -" if np.isnan(v) else f"{v:>10.4f}" for v in row))
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((self.param_a, self.param_b) + CSV_COLUMNS)
        for a in self.values_a:
            for b in self.values_b:
                res = self.results[(a, b)]
                for r in res.records + res.mean_records():
                    w.writerow([str(a), str(b)] + r.csv_row())
        return buf.getvalue()


def _grid_config(cfg: ScenarioConfig, param_a: str, a, param_b: str, b) -> ScenarioConfig:
    return replace(cfg, adaptation=replace(cfg.adaptation, **{param_a: a, param_b: b}))


def _run_grid_point(args):
    cfg, param_a, a, param_b, b = args
    return run_scenario(_grid_config(cfg, param_a, a, param_b, b))


def sweep(cfg: ScenarioConfig, param_a: str, values_a: Sequence, param_b: str, values_b: Sequence,
          workers: int = 1) -> SweepResult:
    """One scenario run per grid point over two adaptation parameters."""
    for p in (param_a, param_b):
        if p not in SWEEPABLE:
            raise ValueError(f"cannot sweep {p!r}; choose from {sorted(SWEEPABLE)}")
    if param_a == param_b:
        raise ValueError("sweep needs two distinct parameters")
    values_a, values_b = list(values_a), list(values_b)
    points = [(a, b) for a in values_a for b in values_b]
    for a, b in points:
        _grid_config(cfg, param_a, a, param_b, b)  # surface range errors before any compute
    jobs = [(cfg, param_a, a, param_b, b) for a, b in points]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(_run_grid_point, jobs))
    else:
        outs = [_run_grid_point(j) for j in jobs]
    return SweepResult(param_a, values_a, param_b, values_b, dict(zip(points, outs)))
