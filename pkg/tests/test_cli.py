import csv
import io
import json

import pytest

from vitacc.calibration import load_calibration
from vitacc.cli import main
from vitacc.dse import DseRequest, explore
from vitacc.mixed import QuantizedRowMatrix
from vitacc.perf import TilingConfig, model_fps
from vitacc.workload import build_workload, load_workload

TOY = ["--layer-dims", "8", "8", "4", "--t-fix", "2", "--t-pot", "2", "--t-n", "4", "--d", "4",
       "--d-prime", "4", "--p-h", "1", "--a-in", "1", "--a-wgt", "1", "--a-out", "1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_workload_file(tmp_path, capsys):
    p = tmp_path / "ws.json"
    code, _, _ = run(capsys, "workload", "--variant", "deit-small", "-o", str(p))
    assert code == 0
    assert load_workload(p) == build_workload("deit-small")
    code, out, _ = run(capsys, "estimate", "--workload", str(p), "--t-fix", "100", "--t-pot", "20")
    assert code == 0 and json.loads(out)["workload"] == "deit-small"


def test_workload_unknown_variant(capsys):
    code, _, err = run(capsys, "workload", "--variant", "deit-huge")
    assert code == 2 and "deit-tiny" in err and "deit-base" in err


def test_workload_unwritable(capsys):
    code, _, err = run(capsys, "workload", "-o", "/nonexistent-dir/ws.json")
    assert code != 0 and "error" in err


def test_estimate_toy(capsys):
    code, out, _ = run(capsys, "estimate", *TOY)
    d = json.loads(out)
    assert code == 0
    assert d["fps"] == 6.25e6
    assert d["layers"][0]["l_tot"] == 24
    assert d["resources"]["bram"] == [2, 4, 2] and d["resources"]["dsp"] == 2
    assert d["warnings"] == []


def test_estimate_equals_library(capsys):
    cal = load_calibration()
    code, out, _ = run(capsys, "estimate", "--variant", "deit-small", "--t-fix", "129", "--t-pot", "97")
    d = json.loads(out)
    w = build_workload("deit-small")
    from vitacc.quant import BitWidths
    cfg = cal.shape(w, BitWidths.aligned(4)).config(129, 97)
    assert d["cfg"] == cfg.to_dict()
    assert d["fps"] == model_fps(w, cfg)


def test_estimate_warnings_exit_zero(capsys):
    code, out, _ = run(capsys, "estimate", *TOY, "--s-dsp", "1", "--r-dsp", "1")
    d = json.loads(out)
    assert code == 0 and d["warnings"][0]["resource"] == "dsp" and d["warnings"][0]["overshoot"] == 1


def test_estimate_missing_calibration(capsys):
    code, _, err = run(capsys, "estimate", *TOY, "--calibration", "/nonexistent.toml")
    assert code == 2 and "calibration" in err


def test_estimate_csv(capsys):
    code, out, _ = run(capsys, "--format", "csv", "estimate", "--variant", "deit-tiny", "--t-fix", "8", "--t-pot", "0")
    rows = list(csv.DictReader(io.StringIO(out)))
    assert code == 0 and len(rows) == len(build_workload("deit-tiny").layers)
    assert rows[0]["name"] == "patch_embed" and "l_tot" in rows[0]


def test_format_flag_after_subcommand(capsys):
    code, out, _ = run(capsys, "estimate", *TOY, "--format", "table")
    assert code == 0 and "l_tot" in out and "fps" in out


def test_dse_matches_library(capsys):
    cal = load_calibration()
    code, out, _ = run(capsys, "dse", "--variant", "deit-small", "--target-fps", "150")
    d = json.loads(out)
    lib = explore(DseRequest(build_workload("deit-small"), 150.0, cal.budget, cal.lut_model,
                             axi_width=cal.axi_width, ports=cal.ports, freq_hz=cal.freq_hz)).to_dict()
    assert code == 0 and d == json.loads(json.dumps(lib))
    assert d["feasible"] and d["bits"] == {"b": 4, "b_prime": 3} and 0 < d["k_pot"] < 1
    cfg = TilingConfig(**d["cfg"])
    assert cfg.k_pot == d["k_pot"] and d["fps_estimate"] >= d["target_fps"]


def test_dse_generous_budget_tiny_target(capsys):
    code, out, _ = run(capsys, "dse", "--layer-dims", "16", "16", "8", "--target-fps", "1")
    d = json.loads(out)
    assert code == 0 and d["feasible"] and d["k_pot"] == 0


def test_dse_infeasible(capsys):
    code, out, _ = run(capsys, "dse", "--variant", "deit-tiny", "--target-fps", "1e9")
    d = json.loads(out)
    assert code == 0 and d["feasible"] is False and d["cfg"] is None
    assert set(d["fps_max_per_band"]) == {"8", "4"}


def test_quantize_toy(capsys):
    code, out, _ = run(capsys, "quantize", "--rows", "4", "--cols", "8", "--k-pot", "0.5", "--seed", "3")
    d = json.loads(out)
    assert code == 0 and d["scheme_mask"].count("pot") == 2
    QuantizedRowMatrix.from_dict(d)


def test_quantize_deterministic(capsys):
    a = run(capsys, "--seed", "5", "quantize")[1]
    b = run(capsys, "quantize", "--seed", "5")[1]
    assert a == b
    assert run(capsys, "quantize", "--seed", "6")[1] != a


def test_quantize_weights_file(tmp_path, capsys):
    p = tmp_path / "w.json"
    p.write_text(json.dumps([[0.5, -0.5]]))
    code, out, _ = run(capsys, "quantize", "--weights", str(p), "--k-pot", "0")
    assert code == 0 and json.loads(out)["rows"] == [{"q": [7, -7]}]


def test_quantize_invariant_violation(capsys):
    assert run(capsys, "quantize", "--rows", "5", "--n-heads", "2")[0] == 2
    assert run(capsys, "quantize", "--k-pot", "1.5")[0] == 2


def test_qat(capsys, tmp_path):
    code, out, _ = run(capsys, "qat", "--seed", "7")
    d = json.loads(out)
    assert code == 0
    assert all(isinstance(v, float) for v in d["losses"])
    assert d["final_loss"] < d["initial_loss"]
    p = tmp_path / "qat.json"
    run(capsys, "qat", "--seed", "7", "--out", str(p))
    assert p.read_text() == out


def test_simulate_toy(capsys, tmp_path):
    trace = tmp_path / "trace.json"
    code, out, _ = run(capsys, "simulate", *TOY, "--trace", str(trace))
    d = json.loads(out)
    assert code == 0
    assert d["cycles_verdict"] == "MATCH" and d["outputs_verdict"] == "MATCH"
    assert d["simulated_cycles"] == d["analytical_l_tot"] == 24
    events = json.loads(trace.read_text())
    assert {"tile_group", "phase", "start_cycle", "end_cycle"} <= set(events[0])


def test_simulate_deit_layer(capsys):
    code, out, _ = run(capsys, "simulate", "--variant", "deit-tiny", "--layer", "blocks.0.attn.context",
                       "--t-fix", "8", "--t-pot", "8")
    d = json.loads(out)
    assert code == 0 and d["outputs_verdict"] == "MATCH" and d["cycles_verdict"] == "MATCH"


def test_simulate_corrupted_model(capsys, tmp_path):
    code, out, _ = run(capsys, "quantize", "--rows", "8", "--cols", "8", "--bits", "4")
    d = json.loads(out)
    d["rows"][d["scheme_mask"].index("fixed")]["q"][0] = 100
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(d))
    code, out, _ = run(capsys, "simulate", *TOY, "--model", str(p))
    assert code == 1 and json.loads(out)["outputs_verdict"] == "MISMATCH"


def test_simulate_layer_selection_errors(capsys):
    assert run(capsys, "simulate", "--variant", "deit-tiny", "--t-fix", "1", "--t-pot", "0")[0] == 2
    assert run(capsys, "simulate", "--variant", "deit-tiny", "--layer", "nope", "--t-fix", "1", "--t-pot", "0")[0] == 2
    assert run(capsys, "simulate", "--variant", "deit-tiny", "--layer", "999", "--t-fix", "1", "--t-pot", "0")[0] == 2


def test_report(capsys):
    code, out, _ = run(capsys, "report", "--variant", "deit-small", "--ordering")
    d = json.loads(out)
    assert code == 0 and d["dse"]["feasible"]
    assert d["ordering"]["design_ordered"] is True
    assert [b["b"] for b in d["bands"]] == [8, 4]


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["estimate", "--t-fix", "1"]) == 2
    assert main(["--format", "xml", "workload"]) == 2
    capsys.readouterr()


def test_calibrate_reproduces_shipped_files(capsys, tmp_path):
    toml, report = tmp_path / "c.toml", tmp_path / "c.md"
    code, out, _ = run(capsys, "calibrate", "--toml", str(toml), "--report", str(report))
    assert code == 0 and json.loads(out)["ports"] == [4, 8, 2]
    assert load_calibration(toml) == load_calibration()
    assert "Ordering check" in report.read_text()
    code, out, _ = run(capsys, "calibrate", "--format", "table")
    assert code == 0 and "4,8,2" in out and "deit-small mixed" in out
