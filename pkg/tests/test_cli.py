import csv

import numpy as np
import pytest

from lst import harness
from lst.cli import main
from lst.sparse import read_sparse_examples


# --- gen-data


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    args = ["--Din", "80", "--D", "90", "--Kin", "3", "--K", "5",
            "--n-examples", "40", "--seed", "11"]
    assert main(["gen-data", *args, "--out", str(a)]) == 0
    assert main(["gen-data", *args, "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_gen_data_different_seed_differs(tmp_path):
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    main(["gen-data", "--n-examples", "10", "--seed", "1", "--out", str(a)])
    main(["gen-data", "--n-examples", "10", "--seed", "2", "--out", str(b)])
    assert a.read_bytes() != b.read_bytes()


def test_gen_data_zero_examples_header_only(tmp_path):
    path = tmp_path / "empty.txt"
    assert main(["gen-data", "--n-examples", "0", "--out", str(path)]) == 0
    assert path.read_text() == "1000 1000 8 8\n"


def test_gen_data_planted_has_exactly_k_targets(tmp_path):
    path = tmp_path / "planted.txt"
    main(["gen-data", "--Din", "60", "--D", "70", "--Kin", "4", "--K", "6",
          "--n-examples", "50", "--seed", "3", "--out", str(path)])
    header, examples = read_sparse_examples(path)
    assert header.K == 6
    assert len(examples) == 50
    for x, y in examples:
        assert y.nnz == 6
        assert x.nnz == 4


# --- verify


def test_verify_command_passes(capsys):
    rc = main(["verify", "--D", "150", "--d", "8", "--K", "4", "--m", "4",
               "--steps", "60", "--seed", "5"])
    out = capsys.readouterr().out
    assert rc == 0
    lines = [ln for ln in out.splitlines() if ln.startswith("PASS")]
    assert len(lines) == 5  # four sub-runs plus the overall line
    assert "online" in out and "woodbury" in out and "solve_each_batch" in out


def test_verify_eta_zero_trivially_passes():
    report = harness.run_verify(D=100, d=6, K=3, eta=0.0, steps=20, seed=0, m=4, batches=5)
    assert report.passed
    # frozen weights: loss discrepancy stays at the per-evaluation roundoff floor
    assert all(r.max_loss_rel < 1e-13 for r in report.runs)
    assert all(r.final_weight_rel == 0.0 for r in report.runs)


def test_verify_negative_control_fails_at_second_step():
    # mismatched learning rates share the first loss (pre-update weights are
    # identical) and must diverge at the very next step
    report = harness.run_verify(
        D=100, d=6, K=3, eta=0.05, steps=20, seed=0, m=4, batches=5, eta_mismatch=0.5
    )
    assert not report.passed
    assert all(r.first_bad_step == 1 for r in report.runs)


# --- bench


def test_bench_csv_schema_and_theoretical_column(tmp_path):
    out = tmp_path / "bench.csv"
    records = harness.run_bench(
        [400, 800], d=16, K=4, m=8, reps=2, warmup=1, seed=0, threads=1, out_path=out
    )
    assert len(records) == 4
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(harness.BENCH_CSV_FIELDS)
    assert len(rows) == 5
    by_impl = {(r[0], int(r[1])): r for r in rows[1:]}
    assert float(by_impl[("naive", 400)][6]) == 1.0
    assert float(by_impl[("factored", 800)][7]) == 800 / (4 * 16)
    for r in rows[1:]:
        assert float(r[5]) > 0


def test_bench_csv_append_safe(tmp_path):
    out = tmp_path / "bench.csv"
    harness.run_bench([300], d=8, K=2, m=4, reps=1, warmup=0, out_path=out)
    harness.run_bench([600], d=8, K=2, m=4, reps=1, warmup=0, out_path=out)
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0] == list(harness.BENCH_CSV_FIELDS)
    assert len(rows) == 5  # one header, two records per run
    assert sum(1 for r in rows if r[0] == "impl") == 1


def test_naive_time_grows_linearly_in_D():
    sweep = [4000, 8000, 16000, 32000]
    times = [
        harness.bench_minibatch("naive", D, d=64, K=8, m=64, reps=5, warmup=2, threads=1)
        for D in sweep
    ]
    slope, intercept = np.polyfit(sweep, times, 1)
    assert slope > 0
    pred = slope * np.asarray(sweep) + intercept
    resid = np.asarray(times) - pred
    r2 = 1.0 - float(np.sum(resid**2)) / float(np.sum((times - np.mean(times)) ** 2))
    assert r2 > 0.95


# --- train


def test_train_eta_zero_flat_curve(tmp_path):
    data = tmp_path / "data.txt"
    main(["gen-data", "--Din", "80", "--D", "80", "--Kin", "3", "--K", "4",
          "--n-examples", "10", "--seed", "2", "--out", str(data)])
    out = tmp_path / "loss.csv"
    rc = main(["train", "--data", str(data), "--Din", "80", "--D", "80", "--d", "8",
               "--Kin", "3", "--K", "4", "--eta", "0", "--steps", "30",
               "--seed", "2", "--impl", "factored", "--out", str(out)])
    assert rc == 0
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss"]
    losses = [float(r[1]) for r in rows[1:]]
    assert len(losses) == 30
    # frozen weights: each example's loss never changes across the three epochs
    assert losses[:10] == losses[10:20] == losses[20:30]


def test_train_both_impls_identical_curves(tmp_path):
    out = tmp_path / "loss.csv"
    rc = main(["train", "--synthetic", "--Din", "100", "--D", "100", "--d", "8",
               "--Kin", "3", "--K", "4", "--eta", "0.02", "--steps", "200",
               "--seed", "4", "--impl", "both", "--out", str(out)])
    assert rc == 0
    with open(out) as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["step", "loss_factored", "loss_naive"]
    for r in rows[1:]:
        a, b = float(r[1]), float(r[2])
        assert abs(a - b) <= 1e-6 * max(abs(a), abs(b))


def test_train_minibatch_path(tmp_path):
    out = tmp_path / "loss.csv"
    rc = main(["train", "--synthetic", "--Din", "80", "--D", "80", "--d", "8",
               "--Kin", "3", "--K", "4", "--m", "4", "--eta", "0.01", "--steps", "40",
               "--seed", "6", "--impl", "both", "--out", str(out)])
    assert rc == 0


def test_train_from_generated_file(tmp_path):
    data = tmp_path / "data.txt"
    main(["gen-data", "--Din", "90", "--D", "110", "--Kin", "3", "--K", "5",
          "--n-examples", "100", "--seed", "8", "--out", str(data)])
    out = tmp_path / "loss.csv"
    rc = main(["train", "--data", str(data), "--Din", "90", "--D", "110", "--d", "8",
               "--Kin", "3", "--K", "5", "--eta", "0.01", "--steps", "50",
               "--seed", "8", "--out", str(out)])
    assert rc == 0
    assert out.exists()


def test_train_requires_data_or_synthetic(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "x.csv")]) == 2


def test_train_rejects_mismatched_data_dims(tmp_path):
    data = tmp_path / "data.txt"
    main(["gen-data", "--Din", "50", "--D", "50", "--n-examples", "5", "--out", str(data)])
    rc = main(["train", "--data", str(data), "--Din", "60", "--D", "50",
               "--out", str(tmp_path / "x.csv")])
    assert rc == 1


def test_train_learns_planted_model():
    # eta tuned on the planted task; the trailing average must drop well
    # below 10% of the initial loss inside 2000 steps
    cfg = harness.TrainConfig(
        D_in=200, D=200, d=16, K_in=4, K=8, m=1, eta=0.02, steps=2000, seed=0,
        impl="factored", nonlinearity="none",
    )
    examples = harness.load_examples_or_synthetic(cfg)
    rows = harness.run_train(cfg, examples)
    initial = rows[0][1]["factored"]
    final = float(np.mean([r[1]["factored"] for r in rows[-100:]]))
    assert final < 0.1 * initial
