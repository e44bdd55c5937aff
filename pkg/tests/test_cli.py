import csv
import json
from pathlib import Path

import numpy as np
import pytest

from mfdrbsde.cli import (
    EXIT_ASSUMPTION,
    EXIT_CONFIG,
    EXIT_CONTRACTION,
    EXIT_IO,
    EXIT_OK,
    EXIT_USAGE,
    RunManifest,
    emit_solution_csv,
    run,
)
from mfdrbsde.drbsde import FrozenData, random_frozen_data, solve_reflected
from mfdrbsde.lattice import AdaptedProcess, Lattice

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_exit_codes_are_distinct():
    codes = [EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_CONTRACTION, 6, 7, EXIT_IO]
    assert len(set(codes)) == len(codes)


def test_usage_errors(tmp_path):
    assert run([]) == EXIT_USAGE
    assert run(["bogus"]) == EXIT_USAGE
    assert run(["check-conditions", "--out", str(tmp_path)]) == EXIT_USAGE


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run(["check-conditions", "--config", str(bad), "--out", str(tmp_path), "--quiet"]) == EXIT_CONFIG
    bad.write_text(json.dumps({"driver": "0"}))
    assert run(["check-conditions", "--config", str(bad), "--out", str(tmp_path), "--quiet"]) == EXIT_CONFIG


def test_missing_config_is_io_error(tmp_path):
    code = run(["check-conditions", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == EXIT_IO


def test_check_conditions_minimal(tmp_path):
    code = run(["check-conditions", "--config", str(CONFIGS / "minimal.json"), "--out", str(tmp_path), "--quiet"])
    assert code == EXIT_OK
    rows = {r["quantity"]: r["value"] for r in read_csv(tmp_path / "conditions.csv")}
    assert float(rows["lambda_at_zero"]) == 0.0
    assert float(rows["sigma_at_zero"]) == 0.0
    assert float(rows["delta_p"]) == 1.0 and float(rows["delta_1"]) == 1.0
    assert (tmp_path / "report.txt").exists() and (tmp_path / "manifest.json").exists()


def test_check_conditions_counterexample_fails_assumptions(tmp_path):
    args = ["check-conditions", "--config", str(CONFIGS / "counterexample.json"), "--out", str(tmp_path), "--quiet"]
    assert run(args) == EXIT_ASSUMPTION


def test_fixed_point_refuses_non_contracting(tmp_path):
    args = ["solve-fixed-point", "--config", str(CONFIGS / "counterexample.json"), "--out", str(tmp_path), "--quiet"]
    assert run(args) == EXIT_CONTRACTION


def test_oracle_compare(tmp_path):
    args = ["oracle-compare", "--trials", "100", "--steps", "3", "--seed", "7", "--out", str(tmp_path), "--quiet"]
    assert run(args) == EXIT_OK
    rows = read_csv(tmp_path / "oracle.csv")
    assert len(rows) == 100
    assert max(float(r["deviation"]) for r in rows) <= 1e-12
    assert max(float(r["saddle_gap"]) for r in rows) <= 1e-12


def test_oracle_compare_rejects_large_lattice(tmp_path):
    assert run(["oracle-compare", "--steps", "5", "--out", str(tmp_path), "--quiet"]) == EXIT_CONFIG


def test_solution_csv_layout(tmp_path):
    lat = Lattice(1.0, 1)
    fd = random_frozen_data(lat, np.random.default_rng(0))
    sol = solve_reflected(fd)
    path = emit_solution_csv(sol, lat, tmp_path / "s.csv")
    lines = path.read_text().splitlines()
    assert lines[0] == "k,j,t,b,Y,Z,Kplus,Kminus"
    assert len(lines) == 4
    rows = read_csv(path)
    assert [(r["k"], r["j"]) for r in rows] == [("0", "0"), ("1", "0"), ("1", "1")]
    assert float(rows[0]["Y"]) == sol.value


def test_solution_csv_round_trips_exactly(tmp_path):
    lat = Lattice(0.3, 3)
    fd = FrozenData(
        AdaptedProcess.from_function(lat, lambda t, b: np.sin(7 * b) / 3),
        AdaptedProcess.constant(lat, -0.1),
        AdaptedProcess.constant(lat, 0.1),
        np.zeros(4),
    )
    sol = solve_reflected(fd)
    rows = read_csv(emit_solution_csv(sol, lat, tmp_path / "s.csv"))
    for r in rows:
        assert float(r["Y"]) == sol.Y[int(r["k"]), int(r["j"])]


def test_rerun_byte_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        args = ["solve-fixed-point", "--config", str(CONFIGS / "contraction.json"), "--steps", "20"]
        assert run(args + ["--out", str(out), "--quiet"]) == EXIT_OK
        outs.append(out)
    a, b = outs
    assert (a / "solution.csv").read_bytes() == (b / "solution.csv").read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in outs)
    assert ma["digest"] == mb["digest"]


def test_manifest_digest_tracks_semantics():
    base = dict(
        command="solve-fixed-point", config_path="a.json", config_digest="x", spec_digest="y",
        lattice={"horizon": 1.0, "steps": 10}, route="both", tolerances={"tol": 1e-8}, seed=0, options={},
    )
    ref = RunManifest(**base)
    assert RunManifest(**{**base, "config_path": "elsewhere.json"}).digest == ref.digest
    assert RunManifest(**base, outputs=["out.csv"]).digest == ref.digest
    for key, value in [("seed", 1), ("tolerances", {"tol": 1e-9}), ("lattice", {"horizon": 1.0, "steps": 11})]:
        assert RunManifest(**{**base, key: value}).digest != ref.digest


def test_solve_penalized_and_compare_routes(tmp_path):
    cfg = str(CONFIGS / "cross_route.json")
    small = ["--steps", "12", "--n-max", "64", "--m-max", "64", "--quiet"]
    assert run(["solve-penalized", "--config", cfg, "--out", str(tmp_path / "p")] + small) == EXIT_OK
    stages = read_csv(tmp_path / "p" / "stages.csv")
    assert stages[0]["n"] == "0" and stages[0]["m"] == "0"
    args = ["compare-routes", "--config", cfg, "--out", str(tmp_path / "c"), "--threshold", "0.1"] + small
    assert run(args) == EXIT_OK
    rows = read_csv(tmp_path / "c" / "comparison.csv")
    assert len(rows) == 13 * 14 // 2


def test_counterexample_csv(tmp_path):
    assert run(["counterexample", "--mmax", "16", "--steps", "10", "--out", str(tmp_path), "--quiet"]) == EXIT_OK
    rows = read_csv(tmp_path / "counterexample.csv")
    assert sorted({int(r["m"]) for r in rows}) == [0, 1, 2, 4, 8, 16]
    for r in rows:
        assert float(r["expectation"]) >= float(r["bound"]) - 1e-9
        if r["m"] == "0":
            assert abs(float(r["expectation"]) - float(r["bound"])) <= 1e-12


@pytest.mark.parametrize("flag", [["--horizon", "2"], ["--mmax", "-1"]])
def test_counterexample_bad_flags(tmp_path, flag):
    assert run(["counterexample", "--out", str(tmp_path), "--quiet"] + flag) == EXIT_CONFIG
