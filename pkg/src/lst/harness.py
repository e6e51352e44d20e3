"""Verification runs, timing benchmarks, synthetic data and the demo trainer.

Everything here is driven by the CLI but importable on its own; commands stay
deterministic for a fixed seed (timing numbers aside).
"""

from __future__ import annotations

import csv
import dataclasses
import math
import os
import time
from typing import Iterable, Iterator

import numpy as np
from threadpoolctl import threadpool_limits

from .factored import FactoredOutputLayer, factored_new, factored_step, materialize
from .minibatch import SOLVE_EACH_BATCH, WOODBURY, InverseStrategy, minibatch_step
from .naive import NaiveOutputLayer, naive_step, naive_step_minibatch
from .sparse import (
    DatasetHeader,
    SparseVec,
    input_forward,
    input_update,
    random_sparse,
    read_sparse_examples,
    write_sparse_examples,
)
from .stabilization import StabilizationConfig

BENCH_CSV_FIELDS = (
    "impl",
    "D",
    "d",
    "K",
    "m",
    "seconds_per_batch",
    "speedup_vs_naive",
    "theoretical_speedup",
)


def theoretical_speedup(D: int, d: int) -> float:
    """Expected factored-vs-naive speedup D/(4d) for the output-layer work."""
    return D / (4.0 * d)


@dataclasses.dataclass(frozen=True)
class BenchRecord:
    impl: str
    D: int
    d: int
    K: int
    m: int
    seconds_per_batch: float
    speedup_vs_naive: float
    theoretical_speedup: float


@dataclasses.dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of the demo trainer and the verification runs."""

    D_in: int = 1000
    D: int = 1000
    d: int = 32
    K_in: int = 8
    K: int = 8
    m: int = 1
    eta: float = 0.01
    steps: int = 500
    seed: int = 0
    impl: str = "factored"  # naive | factored | both
    stabilization: StabilizationConfig | None = dataclasses.field(
        default_factory=StabilizationConfig
    )
    nonlinearity: str = "tanh"  # none | tanh

    def __post_init__(self):
        for name in ("D_in", "D", "d", "K_in", "K", "m", "steps"):
            if getattr(self, name) < 1 and not (name == "steps" and self.steps == 0):
                raise ValueError(f"{name} must be positive")
        if self.eta < 0.0:
            raise ValueError("eta must be >= 0")
        if self.impl not in ("naive", "factored", "both"):
            raise ValueError(f"impl must be naive|factored|both, got {self.impl!r}")
        if self.nonlinearity not in ("none", "tanh"):
            raise ValueError(f"nonlinearity must be none|tanh, got {self.nonlinearity!r}")


# ---------------------------------------------------------------------------
# lockstep verification


@dataclasses.dataclass(frozen=True)
class VerifySubRun:
    name: str
    steps: int
    max_loss_rel: float
    first_bad_step: int | None
    final_weight_rel: float
    passed: bool


@dataclasses.dataclass(frozen=True)
class VerifyReport:
    runs: list[VerifySubRun]
    loss_tol: float
    weight_tol: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.runs)


def _paired_layers(D: int, d: int, seed: int) -> tuple[FactoredOutputLayer, NaiveOutputLayer]:
    layer = factored_new(D, d, "random", seed=seed)
    return layer, NaiveOutputLayer(materialize(layer).copy())


def _verify_run(
    name: str,
    D: int,
    d: int,
    K: int,
    eta: float,
    seed: int,
    n_steps: int,
    m: int,
    strategy: InverseStrategy | None,
    loss_tol: float,
    weight_tol: float,
    eta_naive: float,
) -> VerifySubRun:
    layer, oracle = _paired_layers(D, d, seed)
    rng = np.random.default_rng(seed + 1)
    max_rel = 0.0
    first_bad = None
    for step in range(n_steps):
        if m == 1 and strategy is None:
            h = rng.standard_normal(d) / math.sqrt(d)
            y = random_sparse(rng, D, K)
            lf = factored_step(layer, h, y, eta).loss
            ln = naive_step(oracle, h, y, eta_naive).loss
        else:
            H = rng.standard_normal((d, m)) / math.sqrt(d)
            Y = [random_sparse(rng, D, K) for _ in range(m)]
            lf = minibatch_step(layer, H, Y, eta, strategy=strategy).loss_total
            ln = naive_step_minibatch(oracle, H, Y, eta_naive)[0]
        rel = abs(lf - ln) / max(abs(ln), 1e-300)
        if rel > max_rel:
            max_rel = rel
        if rel > loss_tol and first_bad is None:
            first_bad = step
    W = oracle.W
    weight_rel = float(np.linalg.norm(materialize(layer) - W) / max(np.linalg.norm(W), 1e-300))
    passed = max_rel <= loss_tol and weight_rel <= weight_tol
    return VerifySubRun(name, n_steps, max_rel, first_bad, weight_rel, passed)


def run_verify(
    D: int = 1000,
    d: int = 32,
    K: int = 8,
    eta: float = 0.01,
    steps: int = 500,
    seed: int = 0,
    m: int = 16,
    batches: int = 50,
    loss_tol: float = 1e-8,
    weight_tol: float = 1e-6,
    eta_mismatch: float = 0.0,
) -> VerifyReport:
    """Factored vs naive on identical streams: online, both minibatch
    strategies, and the m=1 minibatch reduction.  eta_mismatch deliberately
    skews the naive learning rate (negative-control test mode).
    """
    if D * d > 10**8:
        raise ValueError("D*d too large for the dense oracle")
    eta_naive = eta * (1.0 + eta_mismatch)
    runs = [
        _verify_run("online", D, d, K, eta, seed, steps, 1, None, loss_tol, weight_tol, eta_naive),
        _verify_run(
            "minibatch[woodbury]", D, d, K, eta, seed, batches, m, WOODBURY,
            loss_tol, weight_tol, eta_naive,
        ),
        _verify_run(
            "minibatch[solve_each_batch]", D, d, K, eta, seed, batches, m, SOLVE_EACH_BATCH,
            loss_tol, weight_tol, eta_naive,
        ),
        _verify_run(
            "minibatch[m=1,woodbury]", D, d, K, eta, seed, min(steps, 200), 1, WOODBURY,
            loss_tol, weight_tol, eta_naive,
        ),
    ]
    return VerifyReport(runs=runs, loss_tol=loss_tol, weight_tol=weight_tol)


# ---------------------------------------------------------------------------
# timing benchmarks


def _make_batches(rng, d, D, K, m, count):
    batches = []
    for _ in range(count):
        H = rng.standard_normal((d, m)) / math.sqrt(d)
        Y = [random_sparse(rng, D, K) for _ in range(m)]
        batches.append((H, Y))
    return batches


def bench_minibatch(
    impl: str,
    D: int,
    d: int,
    K: int,
    m: int,
    eta: float = 0.01,
    reps: int = 20,
    warmup: int = 3,
    seed: int = 0,
    threads: int = 1,
) -> float:
    """Median seconds per minibatch step.  Data generation happens outside the
    timed region; BLAS is pinned to `threads` workers while timing.
    """
    if impl not in ("naive", "factored"):
        raise ValueError(f"impl must be naive|factored, got {impl!r}")
    rng = np.random.default_rng(seed)
    batches = _make_batches(rng, d, D, K, m, warmup + reps)
    # zeros init keeps the bookkeeping invariants at no setup cost; the kernels
    # touched per step (and their timing) do not depend on the weight values
    if impl == "naive":
        layer = NaiveOutputLayer.zeros(D, d)
        run = lambda H, Y: naive_step_minibatch(layer, H, Y, eta)
    else:
        layer = factored_new(D, d, "zeros")
        run = lambda H, Y: minibatch_step(layer, H, Y, eta)
    times = []
    with threadpool_limits(limits=threads):
        for i, (H, Y) in enumerate(batches):
            t0 = time.perf_counter()
            run(H, Y)
            t1 = time.perf_counter()
            if i >= warmup:
                times.append(t1 - t0)
    return float(np.median(times))


def run_bench(
    D_sweep: Iterable[int],
    d: int,
    K: int,
    m: int,
    eta: float = 0.01,
    reps: int = 20,
    warmup: int = 3,
    seed: int = 0,
    threads: int = 1,
    out_path=None,
) -> list[BenchRecord]:
    """Time naive and factored at every D in the sweep; optionally append CSV rows."""
    records = []
    for D in D_sweep:
        t_naive = bench_minibatch("naive", D, d, K, m, eta, reps, warmup, seed, threads)
        t_fact = bench_minibatch("factored", D, d, K, m, eta, reps, warmup, seed, threads)
        th = theoretical_speedup(D, d)
        records.append(BenchRecord("naive", D, d, K, m, t_naive, 1.0, th))
        records.append(BenchRecord("factored", D, d, K, m, t_fact, t_naive / t_fact, th))
    if out_path is not None:
        write_bench_csv(out_path, records)
    return records


def write_bench_csv(path, records: list[BenchRecord]) -> None:
    """Append records; the fixed header is written only when the file is new."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if fresh:
            w.writerow(BENCH_CSV_FIELDS)
        for r in records:
            w.writerow(
                [r.impl, r.D, r.d, r.K, r.m,
                 repr(r.seconds_per_batch), repr(r.speedup_vs_naive), repr(r.theoretical_speedup)]
            )


# ---------------------------------------------------------------------------
# synthetic data


def generate_examples(
    D_in: int,
    D: int,
    K_in: int,
    K: int,
    n_examples: int,
    seed: int = 0,
    planted: bool = True,
    noise: float = 0.01,
    rank: int | None = None,
) -> Iterator[tuple[SparseVec, SparseVec]]:
    """Sparse (input, target) pairs, deterministic for a fixed seed.

    With planted=True the targets are the top-K magnitudes of W* x + noise for
    a hidden low-rank map W* whose image lives on K fixed rows, so a small
    linear model can actually drive the loss down.  Otherwise targets are
    unrelated random K-sparse vectors.
    """
    rng = np.random.default_rng(seed)
    if planted:
        r = rank if rank is not None else max(1, min(K, 8))
        hot_rows = np.sort(rng.choice(D, size=K, replace=False))
        A = rng.standard_normal((K, r)) / math.sqrt(r)
        B = rng.standard_normal((r, D_in)) / math.sqrt(K_in)
    for _ in range(n_examples):
        x = random_sparse(rng, D_in, K_in)
        if planted:
            signal = A @ (B[:, x.indices] @ x.values)
            dense = rng.standard_normal(D) * noise
            dense[hot_rows] += signal
            top = np.sort(np.argpartition(np.abs(dense), D - K)[D - K:])
            y = SparseVec(D, top.astype(np.int64), dense[top])
        else:
            y = random_sparse(rng, D, K)
        yield x, y


def gen_data_file(
    path,
    D_in: int,
    D: int,
    K_in: int,
    K: int,
    n_examples: int,
    seed: int = 0,
    planted: bool = True,
) -> int:
    header = DatasetHeader(D_in=D_in, D=D, K_in=K_in, K=K)
    return write_sparse_examples(
        path, header, generate_examples(D_in, D, K_in, K, n_examples, seed, planted)
    )


# ---------------------------------------------------------------------------
# demo trainer: sparse input -> (optional tanh) -> output layer


class _DemoModel:
    def __init__(self, config: TrainConfig, use_factored: bool, seed: int):
        rng = np.random.default_rng(seed)
        self.W1 = rng.standard_normal((config.D_in, config.d)) / math.sqrt(
            config.K_in * config.d
        )
        self.factored_layer = factored_new(config.D, config.d, "random", seed=seed + 1)
        if use_factored:
            self.out = self.factored_layer
        else:
            self.out = NaiveOutputLayer(materialize(self.factored_layer).copy())
            self.factored_layer = None
        self.tanh = config.nonlinearity == "tanh"
        self.eta = config.eta

    def hidden(self, x: SparseVec) -> np.ndarray:
        a1 = input_forward(self.W1, x)
        return np.tanh(a1) if self.tanh else a1

    def _backprop_input(self, x: SparseVec, h: np.ndarray, grad_h: np.ndarray) -> None:
        grad_a1 = grad_h * (1.0 - h * h) if self.tanh else grad_h
        input_update(self.W1, x, grad_a1, self.eta)

    def online_step(self, x: SparseVec, y: SparseVec, stab) -> float:
        h = self.hidden(x)
        if self.factored_layer is not None:
            res = factored_step(self.out, h, y, self.eta, stab=stab)
        else:
            res = naive_step(self.out, h, y, self.eta)
        self._backprop_input(x, h, res.grad_h)
        return res.loss

    def batch_step(self, batch: list[tuple[SparseVec, SparseVec]], stab) -> float:
        hs = [self.hidden(x) for x, _ in batch]
        H = np.stack(hs, axis=1)
        Y = [y for _, y in batch]
        if self.factored_layer is not None:
            res = minibatch_step(self.out, H, Y, self.eta, stab=stab)
            loss, grad_H = res.loss_total, res.grad_H
        else:
            loss, grad_H = naive_step_minibatch(self.out, H, Y, self.eta)
        for i, (x, _) in enumerate(batch):
            self._backprop_input(x, hs[i], grad_H[:, i])
        return loss


def _cycle(examples: list) -> Iterator:
    while True:
        yield from examples


def run_train(
    config: TrainConfig,
    examples: list[tuple[SparseVec, SparseVec]],
    lockstep_tol: float = 1e-6,
) -> list[tuple[int, dict[str, float]]]:
    """Train per config; returns (step, {impl: loss}) rows.

    impl="both" runs naive and factored models from identical weights on the
    identical stream and raises if their per-step losses ever diverge past
    lockstep_tol (relative).
    """
    impls = ["naive", "factored"] if config.impl == "both" else [config.impl]
    models = {name: _DemoModel(config, name == "factored", config.seed) for name in impls}
    stab = config.stabilization
    stream = _cycle(examples)
    rows = []
    for step in range(config.steps):
        if config.m == 1:
            x, y = next(stream)
            losses = {name: mdl.online_step(x, y, stab if name == "factored" else None)
                      for name, mdl in models.items()}
        else:
            batch = [next(stream) for _ in range(config.m)]
            losses = {name: mdl.batch_step(batch, stab if name == "factored" else None)
                      for name, mdl in models.items()}
        if config.impl == "both":
            a, b = losses["naive"], losses["factored"]
            if abs(a - b) > lockstep_tol * max(abs(a), abs(b), 1e-300):
                raise FloatingPointError(
                    f"step {step}: naive loss {a!r} and factored loss {b!r} diverged"
                )
        rows.append((step, losses))
    return rows


def write_loss_csv(path, rows: list[tuple[int, dict[str, float]]]) -> None:
    """`step,loss` for a single implementation, one loss column per impl for both."""
    if not rows:
        impls = []
    else:
        impls = sorted(rows[0][1])
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        if len(impls) == 1:
            w.writerow(["step", "loss"])
            for step, losses in rows:
                w.writerow([step, repr(losses[impls[0]])])
        else:
            w.writerow(["step"] + [f"loss_{name}" for name in impls])
            for step, losses in rows:
                w.writerow([step] + [repr(losses[name]) for name in impls])


def load_examples_or_synthetic(
    config: TrainConfig, data_path=None, n_examples: int | None = None
) -> list[tuple[SparseVec, SparseVec]]:
    """Either read a dataset file (dims must cover the config) or plant one."""
    if data_path is not None:
        header, examples = read_sparse_examples(data_path)
        if header.D_in != config.D_in or header.D != config.D:
            raise ValueError(
                f"data dims ({header.D_in}, {header.D}) do not match config "
                f"({config.D_in}, {config.D})"
            )
        return examples
    n = n_examples if n_examples is not None else max(1, min(config.steps * config.m, 10000))
    return list(
        generate_examples(config.D_in, config.D, config.K_in, config.K, n, config.seed, True)
    )
