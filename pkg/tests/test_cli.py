import json
import subprocess
import sys
from pathlib import Path

import pytest

from pvhost.cli import EXIT_INPUT, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main

DATA = Path(__file__).parent / "data"
TINY = DATA / "tiny_study.json"


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def staged(tmp_path_factory):
    """Tiny study with allocation and sizing already on disk."""
    out = tmp_path_factory.mktemp("staged")
    assert run("allocate", "--config", TINY, "--out", out) == EXIT_OK
    assert run("size", "--config", TINY, "--out", out) == EXIT_OK
    return out


def test_allocate_fixture(tmp_path, capsys):
    assert run("allocate", "--seed", 42, "--out", tmp_path) == EXIT_OK
    doc = json.loads((tmp_path / "allocation.json").read_text())
    assert len(doc["nodes"]) == 91
    assert "91 load nodes" in capsys.readouterr().out
    first = (tmp_path / "allocation.json").read_bytes()
    assert run("--seed", "42", "--out", tmp_path, "allocate") == EXIT_OK
    assert (tmp_path / "allocation.json").read_bytes() == first


def test_missing_feeder_file_names_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rng_seed": 1, "feeder": "nowhere/feeder.json"}))
    assert run("allocate", "--config", cfg, "--out", tmp_path) == EXIT_INPUT
    assert str(tmp_path / "nowhere" / "feeder.json") in capsys.readouterr().err


def test_missing_seed_is_an_input_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{}")
    assert run("allocate", "--config", cfg) == EXIT_INPUT
    assert "rng_seed" in capsys.readouterr().err


def test_bad_config_key(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"rng_seed": 1, "colour": "blue"}))
    assert run("allocate", "--config", cfg) == EXIT_INPUT


@pytest.mark.parametrize("argv", [[], ["simulate"], ["allocate", "--seed", "-1"],
                                  ["hosting", "--strategy", "biggest"],
                                  ["hosting", "--workers", "0"]])
def test_usage_errors(argv, capsys):
    assert main(argv) == EXIT_USAGE
    assert "error" in capsys.readouterr().err


def test_size_needs_allocation(tmp_path, capsys):
    assert run("size", "--config", TINY, "--out", tmp_path) == EXIT_INPUT
    assert "allocate" in capsys.readouterr().err


def test_size_within_grid_and_repeatable(staged, tmp_path):
    doc = json.loads((staged / "sizing.json").read_text())
    kws = [h["optimal_kw"] for h in doc["houses"].values()]
    assert kws and all(0.0 <= k <= 20.0 and (2 * k).is_integer() for k in kws)
    curve = next(iter(doc["profiles"].values()))["curve"]
    assert len(curve) == 41 and "net_benefit_usd" in curve[0]
    assert run("allocate", "--config", TINY, "--out", tmp_path) == EXIT_OK
    assert run("size", "--config", TINY, "--out", tmp_path) == EXIT_OK
    assert (tmp_path / "sizing.json").read_bytes() == (staged / "sizing.json").read_bytes()


def test_hosting_fixed_writes_fig9(staged, tmp_path):
    for name in ("allocation.json", "sizing.json"):
        (tmp_path / name).write_bytes((staged / name).read_bytes())
    code = run("hosting", "--config", TINY, "--out", tmp_path, "--strategy", "fixed",
               "--fixed-kw", "10")
    assert code == EXIT_OK
    lines = (tmp_path / "fig9.csv").read_text().splitlines()
    assert lines[0] == "penetration,total_kw,max_v_pu,scenario,strategy,resolution_s"
    assert len(lines) == 1 + 2 * 2 * 4
    assert not (tmp_path / "fig7.csv").exists()
    doc = json.loads((tmp_path / "hosting.json").read_text())
    assert {d["config"]["fixed_kw"] for d in doc} == {10.0}


def test_full_pipeline_and_worker_invariance(staged, tmp_path):
    outputs = {}
    for w in (1, 2):
        out = tmp_path / f"w{w}"
        out.mkdir()
        for name in ("allocation.json", "sizing.json"):
            (out / name).write_bytes((staged / name).read_bytes())
        assert run("hosting", "--config", TINY, "--out", out, "--workers", w) == EXIT_OK
        assert run("zonal", "--config", TINY, "--out", out, "--workers", w) == EXIT_OK
        assert run("report", "--config", TINY, "--out", out) == EXIT_OK
        outputs[w] = out
    for name in ("hosting.json", "zonal.json", "table2.csv", "zonal.csv", "zones.json",
                 "fig7.csv", "fig8.csv", "fig9.csv", "fig10.csv", "zonal_resolution.csv"):
        assert (outputs[1] / name).read_bytes() == (outputs[2] / name).read_bytes(), name
    table = (outputs[1] / "table2.csv").read_text().splitlines()
    assert table[0] == "strategy,min_hc_kw_1800s,status_1800s,min_hc_kw_3600s,status_3600s"
    assert [row.split(",")[0] for row in table[1:]] == ["optimal", "random", "fixed"]


def test_report_needs_hosting(tmp_path, capsys):
    assert run("report", "--config", TINY, "--out", tmp_path) == EXIT_INPUT
    assert "hosting" in capsys.readouterr().err


def test_solver_failure_exit_code(staged, tmp_path, capsys):
    (tmp_path / "allocation.json").write_bytes((staged / "allocation.json").read_bytes())
    code = run("hosting", "--config", TINY, "--out", tmp_path, "--strategy", "fixed",
               "--fixed-kw", "20000")
    assert code == EXIT_NUMERIC
    err = capsys.readouterr().err
    assert "solver failure" in err and '"scenario": 0' in err


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pvhost.cli", "size", "--config", str(TINY),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == EXIT_INPUT
    assert "run 'allocate' first" in proc.stderr
