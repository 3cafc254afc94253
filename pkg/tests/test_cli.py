import json
import shutil
import subprocess
from pathlib import Path

import pytest

from varlat.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL_SIM = """seed = 1
duration_s = 0.3
rate = 600.0
n_records = 50
zipf = 1.0
accesses_min = 1
accesses_max = 3
"""

LIVE = """threads = 3
txns_per_thread = 8
service_mean_us = 50.0
flush_mean_us = 20.0
seed = 2
"""


@pytest.fixture
def sim_cfg(tmp_path):
    p = tmp_path / "sim.toml"
    p.write_text(SMALL_SIM)
    return p


@pytest.fixture
def live_cfg(tmp_path):
    p = tmp_path / "live.toml"
    p.write_text(LIVE)
    return p


def test_sim_json_and_csv(sim_cfg, tmp_path):
    out = tmp_path / "r.json"
    assert main(["sim", "--config", str(sim_cfg), "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert len(d["latencies_ns"]) == 180 and d["phase_breakdown"]
    csv_out = tmp_path / "r.csv"
    assert main(["--format", "csv", "sim", "--config", str(sim_cfg), "--out", str(csv_out)]) == 0
    assert len(csv_out.read_text().splitlines()) == 181


def test_global_flags_after_subcommand(sim_cfg, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["--seed", "7", "sim", "--config", str(sim_cfg), "--out", str(a)])
    main(["sim", "--config", str(sim_cfg), "--seed", "7", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()
    assert json.loads(a.read_text())["config"]["seed"] == 7


def test_usage_and_config_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["sim"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["bogus"])
    assert e.value.code == 2
    assert main(["sim", "--config", str(tmp_path / "missing.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text("rate = -1\n")
    assert main(["sim", "--config", str(bad)]) == 2
    assert "rate" in capsys.readouterr().err


def test_saturation_exit_code():
    assert main(["sim", "--config", str(CONFIGS / "saturated.toml"), "--out", "-"]) == 3


def test_compare_shape(sim_cfg, tmp_path):
    out = tmp_path / "c.json"
    assert main(["compare", "--config", str(sim_cfg), "--seeds", "2", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert [r["label"] for r in d["rows"]] == ["fcfs", "vats"]
    assert d["rows"][0]["variance_reduction_pct"] == 0.0
    assert {"mean_ns", "variance_ns2", "p99_ns", "l2_norm", "l2_reduction_pct"} <= set(d["rows"][1])
    assert main(["compare", "--config", str(sim_cfg), "--schedulers", "fcfs"]) == 2
    assert main(["compare", "--config", str(sim_cfg), "--schedulers", "fcfs,fcfs", "--seeds", "1",
                 "--out", str(out)]) == 0
    assert all(r["variance_reduction_pct"] == 0.0 for r in json.loads(out.read_text())["rows"])
    csv_out = tmp_path / "c.csv"
    assert main(["--format", "csv", "compare", "--config", str(sim_cfg), "--schedulers", "fcfs,vats,etf,random",
                 "--seeds", "1", "--out", str(csv_out)]) == 0
    assert len(csv_out.read_text().splitlines()) == 5


def test_live_then_analyze(live_cfg, tmp_path):
    tdir = tmp_path / "traces"
    assert main(["live", "--workload", str(live_cfg), "--trace-dir", str(tdir), "--out",
                 str(tmp_path / "live.json")]) == 0
    (trace,) = tdir.glob("run-0-*.vtrace")
    rep_path = tmp_path / "rep.json"
    assert main(["analyze", "--trace", str(trace), "--registry", str(tdir / "registry.txt"),
                 "--root", "dispatch", "--k", "3", "--out", str(rep_path)]) == 0
    rep = json.loads(rep_path.read_text())
    assert rep["root"] == "dispatch" and rep["n_samples"] == 24
    assert set(rep) == {"root", "n_samples", "root_variance_ns2", "factors"}
    assert len(rep["factors"]) == 3
    csv_path = tmp_path / "rep.csv"
    assert main(["--format", "csv", "analyze", "--trace", str(trace), "--registry",
                 str(tdir / "registry.txt"), "--root", "dispatch", "--out", str(csv_path)]) == 0
    assert csv_path.read_text().startswith("identity,kind,total_value,contribution,height,specificity,score")


def test_analyze_single_sample(tmp_path, capsys):
    from varlat.tracefmt import ENTER, EXIT, FunctionRegistry, TraceEvent, write_trace
    reg = FunctionRegistry()
    reg.register("dispatch", is_root=True)
    reg.save(tmp_path / "reg.txt")
    write_trace(tmp_path / "t.vtrace", [TraceEvent(0, 0, 0, ENTER, 1), TraceEvent(0, 0, 0, EXIT, 5)])
    assert main(["analyze", "--trace", str(tmp_path / "t.vtrace"), "--registry", str(tmp_path / "reg.txt"),
                 "--root", "dispatch"]) == 2
    assert "insufficient samples" in capsys.readouterr().err


def test_analyze_malformed_trace(tmp_path):
    from varlat.tracefmt import FunctionRegistry
    reg = FunctionRegistry()
    reg.register("dispatch", is_root=True)
    reg.save(tmp_path / "reg.txt")
    (tmp_path / "t.vtrace").write_text("t=0 f=0 s=0 e=Q ts=1\n")
    assert main(["analyze", "--trace", str(tmp_path / "t.vtrace"), "--registry", str(tmp_path / "reg.txt"),
                 "--root", "dispatch"]) == 2


def test_refine_outputs(live_cfg, tmp_path):
    out = tmp_path / "ref"
    assert main(["refine", "--root", "dispatch", "--workload", str(live_cfg), "--k", "3", "--d", "0.05",
                 "--trace-dir", str(tmp_path / "tr"), "--out", str(out)]) == 0
    final = json.loads((out / "final.json").read_text())
    n = final["iterations"]
    assert sorted(p.name for p in out.glob("iter-*.json")) == [f"iter-{i}.json" for i in range(1, n + 1)]
    assert len(list((tmp_path / "tr").glob("run-*.vtrace"))) == n


def test_refine_d_one_and_iteration_cap(live_cfg, tmp_path):
    assert main(["refine", "--root", "dispatch", "--workload", str(live_cfg), "--d", "1.0",
                 "--trace-dir", str(tmp_path / "t1"), "--out", str(tmp_path / "a")]) == 0
    assert json.loads((tmp_path / "a" / "final.json").read_text())["iterations"] == 1
    assert main(["refine", "--root", "dispatch", "--workload", str(live_cfg), "--max-iterations", "1",
                 "--d", "0.0", "--trace-dir", str(tmp_path / "t2"), "--out", str(tmp_path / "b")]) == 0
    assert json.loads((tmp_path / "b" / "final.json").read_text())["iterations"] == 1
    assert main(["refine", "--root", "nope", "--workload", str(live_cfg), "--out", str(tmp_path / "c")]) == 2


def test_tune_theta(sim_cfg, tmp_path):
    out = tmp_path / "t.json"
    assert main(["tune-theta", "--config", str(sim_cfg), "--grid", "0,1", "--seeds", "1", "--out", str(out)]) == 0
    d = json.loads(out.read_text())
    assert d["best_theta"] in (0.0, 1.0) and len(d["table"]) == 2
    assert main(["tune-theta", "--config", str(sim_cfg), "--grid", ""]) == 2


def test_menu(tmp_path):
    menu = tmp_path / "m.json"
    menu.write_text(json.dumps([{"age": 1, "arrival": 0}, {"age": 4, "arrival": 0}]))
    out = tmp_path / "o.json"
    assert main(["menu", "--menu", str(menu), "--dist", "constant", "--mean", "3", "--trials", "10",
                 "--out", str(out)]) == 0
    rows = {r["policy"]: r for r in json.loads(out.read_text())["results"]}
    assert rows["vats"]["p_performance"] == pytest.approx(98 ** 0.5)
    assert rows["fcfs"]["p_performance"] == pytest.approx(116 ** 0.5)
    assert main(["menu", "--n", "4", "--trials", "100", "--seed", "3", "--out", str(out)]) == 0


@pytest.mark.skipif(shutil.which("varlat") is None, reason="console script not installed")
def test_console_script(sim_cfg):
    r = subprocess.run(["varlat", "sim", "--config", str(sim_cfg)], capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["latencies_ns"]
    assert subprocess.run(["varlat", "--version"], capture_output=True).returncode == 0
