import csv
import subprocess
import sys

import numpy as np
import pytest

from mixprec.cli import BITS_PER_MB, CSV_COLUMNS
from mixprec.oracles import load_oracle
from mixprec.sensitivity import load_matrix

from helpers import (
    GOLDEN_QUARTET_BUDGET_BITS,
    GOLDEN_TRIO_BUDGET_BITS,
    golden_quartet_matrix,
    golden_trio_matrix,
    parse_kv,
    run_cli,
    write_dense,
)


@pytest.fixture()
def quad_setup(tmp_path):
    """A quadratic oracle container plus a measured sensitivity cache."""
    model = tmp_path / "quad.bin"
    cache = tmp_path / "cache"
    code, _, _ = run_cli("gen-quadratic", "--seed", "7", "--sizes", "3,2,4",
                         "--rho", "0.8", "--out", str(model))
    assert code == 0
    code, out, _ = run_cli("measure", "--model", str(model), "--bits", "2,4,8",
                           "--cache-dir", str(cache), "--batch-size", "32")
    assert code == 0 and "wrote" in out
    return model, cache


def test_gen_and_measure_write_expected_files(quad_setup):
    model, cache = quad_setup
    assert model.exists()
    files = sorted(cache.glob("batch-*.txt"))
    assert [f.name for f in files] == ["batch-000000.txt"]
    matrix = load_matrix(files[0])
    assert matrix.layer_sizes == (3, 2, 4)
    assert matrix.menu.bits == (2, 4, 8)


def test_measure_is_deterministic_and_resumable(tmp_path, quad_setup):
    model, cache = quad_setup
    other = tmp_path / "other"
    run_cli("measure", "--model", str(model), "--bits", "2,4,8",
            "--cache-dir", str(other), "--batch-size", "32")
    a = (cache / "batch-000000.txt").read_bytes()
    assert a == (other / "batch-000000.txt").read_bytes()
    # existing batches are skipped, missing ones are filled in
    code, out, _ = run_cli("measure", "--model", str(model), "--bits", "2,4,8",
                           "--cache-dir", str(cache), "--batch-size", "32",
                           "--batches", "3")
    assert code == 0
    assert "batch 0: exists, skipped" in out
    assert sorted(f.name for f in cache.glob("batch-*.txt")) == [
        "batch-000000.txt", "batch-000001.txt", "batch-000002.txt"]
    assert (cache / "batch-000000.txt").read_bytes() == a


def test_measure_menu_mismatch_is_validation_error(quad_setup):
    model, cache = quad_setup
    code, _, err = run_cli("measure", "--model", str(model), "--bits", "2,8",
                           "--cache-dir", str(cache), "--batch-size", "32")
    assert code == 5
    assert "menu" in err


def test_solve_reports_and_csv(quad_setup, tmp_path):
    _, cache = quad_setup
    out_csv = tmp_path / "report.csv"
    code, out, _ = run_cli("solve", "--cache-dir", str(cache),
                           "--budget-bits", "45", "--out", str(out_csv))
    assert code == 0
    kv = parse_kv(out)
    assert kv["method"] == "full"
    assert kv["status"] == "optimal"
    assert kv["proved"] == "true"
    assert kv["budget_bits"] == "45"
    assert "seconds" not in kv
    bits = [int(b) for b in kv["bits"].split("|")]
    assert len(bits) == 3 and all(b in (2, 4, 8) for b in bits)
    assert int(kv["size_bits"]) <= 45
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    row = dict(zip(rows[0], rows[1]))
    assert row["method"] == "full"
    assert row["optimal"] == "true"
    assert row["bits"] == kv["bits"]
    assert row["seconds"] == ""
    assert float(row["budget_mb"]) == 45 / BITS_PER_MB
    assert float(row["objective"]) == float(kv["objective"])


def test_solve_budget_in_megabytes(quad_setup):
    _, cache = quad_setup
    code, out, _ = run_cli("solve", "--cache-dir", str(cache),
                           "--budget-mb", str(45 / BITS_PER_MB))
    assert code == 0
    assert parse_kv(out)["budget_bits"] == "45"


def test_solve_record_timing(quad_setup, tmp_path):
    _, cache = quad_setup
    out_csv = tmp_path / "timed.csv"
    code, out, _ = run_cli("solve", "--cache-dir", str(cache),
                           "--budget-bits", "45", "--record-timing",
                           "--out", str(out_csv))
    assert code == 0
    assert float(parse_kv(out)["seconds"]) >= 0.0
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert float(dict(zip(rows[0], rows[1]))["seconds"]) >= 0.0


def test_solve_exit_codes(quad_setup, tmp_path):
    model, cache = quad_setup
    # 2: the smallest model does not fit
    code, _, err = run_cli("solve", "--cache-dir", str(cache), "--budget-bits", "17")
    assert code == 2 and "infeasible" in err
    # 3: finished without an optimality proof
    code, out, _ = run_cli("solve", "--cache-dir", str(cache),
                           "--budget-bits", "45", "--node-limit", "0")
    assert code == 3
    assert parse_kv(out)["status"] == "incumbent"
    # 4: no cache at all
    code, _, _ = run_cli("solve", "--cache-dir", str(tmp_path / "nowhere"),
                         "--budget-bits", "45")
    assert code == 4
    # 4: cache present but unreadable
    bad = tmp_path / "badcache"
    bad.mkdir()
    (bad / "batch-000000.txt").write_text("mixprec-cache 1\nlayers banana\n")
    code, _, err = run_cli("solve", "--cache-dir", str(bad), "--budget-bits", "45")
    assert code == 4
    # 5: missing, doubled, or malformed arguments
    code, _, _ = run_cli("solve", "--cache-dir", str(cache))
    assert code == 5
    code, _, _ = run_cli("solve", "--cache-dir", str(cache),
                         "--budget-bits", "45", "--budget-mb", "1")
    assert code == 5
    code, _, _ = run_cli("solve", "--cache-dir", str(cache),
                         "--budget-bits", "45", "--method", "annealing")
    assert code == 5
    code, _, _ = run_cli("solve", "--budget-bits", "45")
    assert code == 5  # no cache dir anywhere
    code, _, _ = run_cli("solve", "--cache-dir", str(cache),
                         "--budget-bits", "45", "--method", "block")
    assert code == 5  # block needs a partition
    code, _, _ = run_cli("not-a-command")
    assert code == 5


def test_cache_dir_from_environment(quad_setup, monkeypatch):
    _, cache = quad_setup
    monkeypatch.setenv("MIXPREC_CACHE_DIR", str(cache))
    code, out, _ = run_cli("solve", "--budget-bits", "45")
    assert code == 0
    assert parse_kv(out)["status"] == "optimal"


def test_import_matrix_golden_a(tmp_path):
    dense = tmp_path / "a.txt"
    cache = tmp_path / "cache_a"
    write_dense(dense, golden_quartet_matrix())
    code, out, _ = run_cli("import-matrix", "--dense", str(dense),
                           "--bits", "2,32", "--sizes", "1,1,1,1",
                           "--cache-dir", str(cache))
    assert code == 0 and "imported" in out
    code, out, _ = run_cli("solve", "--cache-dir", str(cache), "--no-psd",
                           "--budget-bits", str(GOLDEN_QUARTET_BUDGET_BITS))
    kv = parse_kv(out)
    assert code == 0
    assert kv["bits"] == "32|32|2|2"
    assert kv["objective"] == "0.254"
    code, out, _ = run_cli("solve", "--cache-dir", str(cache), "--no-psd",
                           "--budget-bits", str(GOLDEN_QUARTET_BUDGET_BITS),
                           "--method", "diag")
    kv = parse_kv(out)
    assert code == 0
    assert kv["bits"] == "2|2|32|32"
    assert kv["objective"] == "0.255"


def test_import_matrix_golden_b(tmp_path):
    dense = tmp_path / "b.txt"
    cache = tmp_path / "cache_b"
    write_dense(dense, golden_trio_matrix())
    code, _, _ = run_cli("import-matrix", "--dense", str(dense),
                         "--bits", "4,32", "--sizes", "1,1,1",
                         "--cache-dir", str(cache))
    assert code == 0
    code, out, _ = run_cli("solve", "--cache-dir", str(cache), "--no-psd",
                           "--budget-bits", str(GOLDEN_TRIO_BUDGET_BITS))
    kv = parse_kv(out)
    assert kv["bits"] == "4|32|4"
    assert kv["objective"] == "0.040000000000000001"
    code, out, _ = run_cli("solve", "--cache-dir", str(cache), "--no-psd",
                           "--budget-bits", str(GOLDEN_TRIO_BUDGET_BITS),
                           "--method", "diag")
    kv = parse_kv(out)
    assert kv["bits"] == "4|4|32"
    assert kv["objective"] == "0.037999999999999999"


def test_import_matrix_validation(tmp_path):
    dense = tmp_path / "bad.txt"
    cache = tmp_path / "cache"
    np.savetxt(dense, np.arange(64, dtype=np.float64).reshape(8, 8))
    code, _, err = run_cli("import-matrix", "--dense", str(dense),
                           "--bits", "2,32", "--sizes", "1,1,1,1",
                           "--cache-dir", str(cache))
    assert code == 5 and "symmetric" in err
    np.savetxt(dense, np.zeros((4, 4)))
    code, _, err = run_cli("import-matrix", "--dense", str(dense),
                           "--bits", "2,32", "--sizes", "1,1,1,1",
                           "--cache-dir", str(cache))
    assert code == 5 and "expected" in err
    code, _, _ = run_cli("import-matrix", "--dense", str(tmp_path / "none.txt"),
                         "--bits", "2,32", "--sizes", "1,1,1,1",
                         "--cache-dir", str(cache))
    assert code == 4


def test_sweep_csv_shape_and_determinism(quad_setup, tmp_path):
    _, cache = quad_setup
    out_a = tmp_path / "a.csv"
    out_b = tmp_path / "b.csv"
    args = ("sweep", "--cache-dir", str(cache), "--budgets-bits", "20,45,72",
            "--methods", "full,diag", "--out")
    code, out, _ = run_cli(*args, str(out_a))
    assert code == 0 and "wrote" in out
    code, _, _ = run_cli(*args, str(out_b))
    assert code == 0
    assert out_a.read_bytes() == out_b.read_bytes()
    with open(out_a, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert len(rows) == 1 + 6
    for method in ("full", "diag"):
        objectives = [float(r[2]) for r in rows[1:] if r[1] == method and r[2]]
        assert objectives == sorted(objectives, reverse=True)


def test_sweep_marks_infeasible_rows(quad_setup, tmp_path):
    _, cache = quad_setup
    out_csv = tmp_path / "sweep.csv"
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "10,45", "--out", str(out_csv))
    assert code == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    first = dict(zip(rows[0], rows[1]))
    assert first["objective"] == "" and first["bits"] == ""
    assert first["optimal"] == "false"
    second = dict(zip(rows[0], rows[2]))
    assert second["optimal"] == "true"


def test_sweep_validation(quad_setup, tmp_path):
    _, cache = quad_setup
    out_csv = tmp_path / "x.csv"
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "45,20", "--out", str(out_csv))
    assert code == 5
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "20,45", "--methods", "bogus",
                         "--out", str(out_csv))
    assert code == 5
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "20,45", "--methods", "block",
                         "--out", str(out_csv))
    assert code == 5
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "20", "--budgets-mb", "1",
                         "--out", str(out_csv))
    assert code == 5


def test_sweep_block_method_with_partition(quad_setup, tmp_path):
    _, cache = quad_setup
    out_csv = tmp_path / "block.csv"
    code, _, _ = run_cli("sweep", "--cache-dir", str(cache),
                         "--budgets-bits", "45", "--methods", "block",
                         "--block-partition", "0-1;2", "--out", str(out_csv))
    assert code == 0
    with open(out_csv, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[1][1] == "block"


def test_eval_quadratic_identity(quad_setup):
    model, cache = quad_setup
    code, out, _ = run_cli("eval", "--model", str(model),
                           "--cache-dir", str(cache), "--assignment", "4,2,8")
    assert code == 0
    kv = parse_kv(out)
    measured = float(kv["measured_delta"])
    proxy = float(kv["proxy"])
    assert abs(measured - proxy) <= 1e-9 * max(1.0, abs(proxy))
    assert float(kv["ratio"]) == pytest.approx(1.0, abs=1e-9)


def test_eval_validation(quad_setup, tmp_path):
    model, cache = quad_setup
    code, _, _ = run_cli("eval", "--model", str(model),
                         "--cache-dir", str(cache), "--assignment", "4,2")
    assert code == 5
    code, _, _ = run_cli("eval", "--model", str(tmp_path / "missing.bin"),
                         "--cache-dir", str(cache), "--assignment", "4,2,8")
    assert code == 4
    code, _, _ = run_cli("eval", "--model", str(model),
                         "--cache-dir", str(cache), "--assignment", "4,nope,8")
    assert code == 5


def test_train_toy_command(tmp_path):
    out_path = tmp_path / "toy.bin"
    code, out, _ = run_cli("train-toy", "--seed", "3", "--epochs", "40",
                           "--out", str(out_path))
    assert code == 0
    kv = parse_kv(out)
    assert 0.0 <= float(kv["accuracy"]) <= 1.0
    oracle = load_oracle(out_path)
    assert len(oracle.layers) == 8


def test_module_entry_point_runs_as_subprocess(tmp_path):
    model = tmp_path / "q.bin"
    done = subprocess.run(
        [sys.executable, "-m", "mixprec", "gen-quadratic", "--seed", "1",
         "--sizes", "2,2", "--rho", "0.5", "--out", str(model)],
        capture_output=True, text=True)
    assert done.returncode == 0
    assert model.exists()
    done = subprocess.run([sys.executable, "-m", "mixprec", "--help"],
                          capture_output=True, text=True)
    assert done.returncode == 0
    assert "solve" in done.stdout
    done = subprocess.run([sys.executable, "-m", "mixprec", "solve"],
                          capture_output=True, text=True)
    assert done.returncode == 5
