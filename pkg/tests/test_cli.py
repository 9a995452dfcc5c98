import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from gsmtl._io import read_matrix, write_matrix
from gsmtl.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_USAGE, run
from gsmtl.datagen import load_csv

ROOT = Path(__file__).resolve().parents[1]
TINY = ROOT / "configs" / "tiny_fit.ini"


def write_config(path: Path, text: str) -> Path:
    path.write_text(text)
    return path


def read_pgm(path: Path):
    tokens = path.read_text().split()
    assert tokens[0] == "P2"
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pixels = np.array([int(v) for v in tokens[4:]]).reshape(h, w)
    return w, h, maxval, pixels


# --- generate --------------------------------------------------------------

GEN = """
[run]
seed = 7
[data]
generator = synthetic1
"""


def test_generate_default_synthetic(tmp_path):
    cfg = write_config(tmp_path / "gen.ini", GEN)
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    lines = (tmp_path / "a" / "data.csv").read_text().splitlines()
    assert lines[0] == "task_id,y," + ",".join(f"x{i}" for i in range(1, 21))
    assert len(lines) == 1 + 10 * 20
    data = load_csv(tmp_path / "a" / "data.csv")
    assert data.n_tasks == 10 and data.n_features == 20
    assert (tmp_path / "a" / "groups.txt").read_text() == "1,2,3,4\n5,6,7\n8,9,10\n"
    manifest = (tmp_path / "a" / "manifest.txt").read_text()
    assert "seed = 7" in manifest and "generator = synthetic1" in manifest


def test_generate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "gen.ini", GEN)
    for name in ("a", "b"):
        assert run(["--config", str(cfg), "generate", "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("data.csv", "groups.txt", "manifest.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"),
                "--seed", "8"]) == EXIT_OK
    assert (tmp_path / "a" / "data.csv").read_bytes() != (tmp_path / "c" / "data.csv").read_bytes()


def test_generate_invalid_out_path(tmp_path, capsys):
    cfg = write_config(tmp_path / "gen.ini", GEN)
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = run(["generate", "--config", str(cfg), "--out", str(blocker / "sub")])
    assert code != EXIT_OK
    assert str(blocker / "sub") in capsys.readouterr().err


def test_generate_two_group(tmp_path):
    cfg = write_config(tmp_path / "g.ini", "[data]\ngenerator = two_group\nT = 29\n")
    assert run(["generate", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    data = load_csv(tmp_path / "o" / "data.csv", "classification")
    assert data.n_tasks == 29 and data.n_features == 9


# --- usage and config errors -----------------------------------------------

def test_usage_errors(tmp_path, capsys):
    assert run([]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["fit"]) == EXIT_CONFIG
    assert run(["fit", "--config", str(tmp_path / "missing.ini")]) == EXIT_CONFIG
    assert "missing.ini" in capsys.readouterr().err


def test_config_errors(tmp_path):
    bad = write_config(tmp_path / "b.ini", "[data]\ngenerator = nope\n[run]\nout = o\n")
    assert run(["fit", "--config", str(bad)]) == EXIT_CONFIG
    both = write_config(tmp_path / "c.ini", "[data]\ngenerator = synthetic1\ncsv = x.csv\n")
    assert run(["fit", "--config", str(both), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    nan = write_config(tmp_path / "d.ini", "[data]\ngenerator = synthetic1\nT = many\n")
    assert run(["generate", "--config", str(nan), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_data_error_exit_code(tmp_path):
    (tmp_path / "d.csv").write_text("task_id,y,x1\n1,1,abc\n")
    cfg = write_config(tmp_path / "f.ini",
                       "[data]\ncsv = d.csv\n[groups]\nsource = singletons\n")
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA


# --- fit -------------------------------------------------------------------

def test_tiny_fit(tmp_path):
    start = time.perf_counter()
    assert run(["fit", "--config", str(TINY), "--out", str(tmp_path)]) == EXIT_OK
    assert time.perf_counter() - start < 5.0
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "iter,objective"
    values = [float(line.split(",")[1]) for line in lines[1:]]
    assert len(values) >= 2
    for a, b in zip(values, values[1:]):
        assert b <= a * (1 + 1e-9) + 1e-12
    L, S = read_matrix(tmp_path / "L.csv"), read_matrix(tmp_path / "S.csv")
    assert L.shape == (8, 2) and S.shape == (2, 6)
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["method"] == "GS_MTL" and report["objective_trace"][-1] == values[-1]
    assert (tmp_path / "L.csv").read_text().startswith("# rows=8 cols=2\n")


def test_fit_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run(["fit", "--config", str(TINY), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("L.csv", "S.csv", "trace.csv", "report.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_fit_missing_groups_file(tmp_path, capsys):
    cfg = write_config(tmp_path / "f.ini", "[data]\ngenerator = synthetic1\n"
                       "[groups]\nsource = file:nowhere.txt\n")
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG
    assert "nowhere.txt" in capsys.readouterr().err


def test_fit_from_csv_with_groups_file(tmp_path):
    assert run(["generate", "--config", str(write_config(tmp_path / "g.ini", GEN)),
                "--out", str(tmp_path / "gen")]) == EXIT_OK
    cfg = write_config(tmp_path / "f.ini", "[data]\ncsv = gen/data.csv\n"
                       "[groups]\nsource = file:gen/groups.txt\n"
                       "[method]\nname = GS_MTL\nk = 3\nouter_max_iter = 5\n")
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path / "fit")]) == EXIT_OK
    report = json.loads((tmp_path / "fit" / "report.json").read_text())
    assert report["groups"] == [[1, 2, 3, 4], [5, 6, 7], [8, 9, 10]]


def test_fit_rejects_stl(tmp_path):
    cfg = write_config(tmp_path / "f.ini", "[data]\ngenerator = synthetic1\n[method]\nname = STL\n")
    assert run(["fit", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# --- benchmark -------------------------------------------------------------

BENCH = """
[run]
seed = 0
[data]
generator = synthetic1
T = 4
g = 2
m = 6
n_per_task = 15
[groups]
source = planted
[method]
outer_max_iter = 10
outer_tol = 1e-3
inner_max_iter = 100
inner_tol = 1e-6
[grid]
mu = 0.1, 1
lam = 0.1, 1
k = 2
[benchmark]
methods = STL, MTL_FEAT, GO_MTL, GS_MTL
seeds = 0, 1
"""


def test_benchmark_four_methods(tmp_path, capsys):
    cfg = write_config(tmp_path / "b.ini", BENCH)
    assert run(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "a")]) == EXIT_OK
    table = json.loads((tmp_path / "a" / "benchmark.json").read_text())["table"]
    row = table["synthetic1"]
    assert set(row) == {"STL", "MTL_FEAT", "GO_MTL", "GS_MTL"}
    assert all(np.isfinite(v["mean"]) for v in row.values())
    text = (tmp_path / "a" / "benchmark.txt").read_text()
    assert text.splitlines()[0].split() == ["dataset", "STL", "MTL_FEAT", "GO_MTL", "GS_MTL"]
    assert text in capsys.readouterr().out


def test_benchmark_rerun_identical(tmp_path):
    cfg = write_config(tmp_path / "b.ini", BENCH)
    for name in ("a", "b"):
        assert run(["benchmark", "--config", str(cfg), "--out", str(tmp_path / name)]) == EXIT_OK
    for f in ("benchmark.json", "benchmark.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_benchmark_seed_override_and_named_datasets(tmp_path):
    text = BENCH.replace("[data]", "[dataset small]") + "\n[dataset cls]\ngenerator = two_group\nT = 4\nn_per_task = 10\n"
    cfg = write_config(tmp_path / "b.ini", text)
    assert run(["benchmark", "--config", str(cfg), "--out", str(tmp_path / "o"),
                "--seed", "3"]) == EXIT_OK
    parsed = json.loads((tmp_path / "o" / "benchmark.json").read_text())
    assert parsed["seeds"] == [3]
    assert parsed["datasets"] == ["small", "cls"]


# --- export-smatrix --------------------------------------------------------

def _groups_file(path, sizes):
    lines, start = [], 1
    for n in sizes:
        lines.append(",".join(str(i) for i in range(start, start + n)))
        start += n
    path.write_text("\n".join(lines) + "\n")
    return path


def test_export_smatrix_shape_and_block_stats(tmp_path):
    S = np.zeros((2, 29))
    S[0, :15] = np.linspace(1, 2, 15)
    S[1, 15:] = -np.linspace(0.5, 3, 14)
    write_matrix(S, tmp_path / "S.csv")
    g = _groups_file(tmp_path / "g.txt", [15, 14])
    assert run(["export-smatrix", "--s", str(tmp_path / "S.csv"), "--groups", str(g),
                "--out", str(tmp_path / "o")]) == EXIT_OK
    w, h, maxval, px = read_pgm(tmp_path / "o" / "S.pgm")
    assert (w, h, maxval) == (29, 2, 255)
    np.testing.assert_array_equal(px, np.round(255 * np.abs(S) / 3.0).astype(int))
    assert px.max() == 255
    stats = (tmp_path / "o" / "stats.txt").read_text()
    assert "within = 1.0" in stats and "across = 0.0" in stats
    np.testing.assert_array_equal(read_matrix(tmp_path / "o" / "S_abs.csv"), np.abs(S))


def test_export_smatrix_zero(tmp_path):
    write_matrix(np.zeros((2, 5)), tmp_path / "S.csv")
    g = _groups_file(tmp_path / "g.txt", [3, 2])
    with pytest.warns(UserWarning, match="zero"):
        code = run(["export-smatrix", "--s", str(tmp_path / "S.csv"), "--groups", str(g),
                    "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    _, _, _, px = read_pgm(tmp_path / "o" / "S.pgm")
    assert np.all(px == 0)
    assert "error" in (tmp_path / "o" / "stats.txt").read_text()


def test_export_smatrix_from_fit(tmp_path):
    assert run(["fit", "--config", str(TINY), "--out", str(tmp_path / "fit")]) == EXIT_OK
    cfg = write_config(tmp_path / "e.ini", "[model]\nS = fit/S.csv\n[groups]\nsource = singletons\n")
    assert run(["export-smatrix", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_OK
    w, h, _, _ = read_pgm(tmp_path / "o" / "S.pgm")
    assert (w, h) == (6, 2)


def test_export_smatrix_missing_input(tmp_path):
    assert run(["export-smatrix", "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "S.csv").write_text("# rows=1 cols=2\n1,x\n")
    assert run(["export-smatrix", "--s", str(tmp_path / "S.csv"), "--out", str(tmp_path)]) == EXIT_DATA


# --- entry point -----------------------------------------------------------

def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "gsmtl.cli", "--version"],
                          capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("gsmtl ")
    proc = subprocess.run([sys.executable, "-m", "gsmtl.cli", "fit"], capture_output=True, text=True)
    assert proc.returncode == EXIT_CONFIG and "--config" in proc.stderr
