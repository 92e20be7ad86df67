import json
from pathlib import Path

import pytest
import yaml

from tube_dmpc.cli import main

SCENARIO = str(Path(__file__).resolve().parent.parent / "scenarios" / "four_agent.yaml")
INFEASIBLE_X0 = str(Path(__file__).resolve().parent.parent / "scenarios"
               / "four_agent_infeasible_x0.yaml")


def write_variant(tmp_path, mutate, name="variant.yaml"):
    raw = yaml.safe_load(open(SCENARIO))
    mutate(raw)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return str(path)


def test_certify_default_exit_zero(tmp_path):
    code = main(["certify", "--scenario", SCENARIO, "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "certificate.json").read_text())
    assert report["overall_ok"] is True
    assert report["schedule"]["ok"] is True


def test_certify_inflated_disturbance_exit_one(tmp_path):
    def inflate(raw):
        for node in raw["agents"]:
            node["disturbance"] = {"box": [30.0, 30.0]}  # 100x
    path = write_variant(tmp_path, inflate)
    code = main(["certify", "--scenario", path, "--out", str(tmp_path)])
    assert code == 1
    report = json.loads((tmp_path / "certificate.json").read_text())
    assert report["overall_ok"] is False
    assert any(not a["global"]["ok"] for a in report["agents"])


def test_certify_malformed_document_exit_two(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("agents: [this is: not: valid\n")
    assert main(["certify", "--scenario", str(bad), "--out", str(tmp_path)]) == 2


def test_certify_invalid_scenario_exit_two(tmp_path):
    def zero_q(raw):
        raw["agents"][0]["Q"] = [[0.0, 0.0], [0.0, 0.0]]
    path = write_variant(tmp_path, zero_q)
    assert main(["certify", "--scenario", path, "--out", str(tmp_path)]) == 2


def test_run_writes_traces(tmp_path):
    code = main(["run", "--scenario", SCENARIO, "--out", str(tmp_path), "--seed", "0"])
    assert code == 0
    trace = (tmp_path / "trace.csv").read_text().splitlines()
    assert trace[0].startswith("t,agent,x1,x2,u1,w1,w2,coupling_row_1,coupling_row_2,mode")
    assert len(trace) == 1 + 30 * 4  # header + T_run rows per agent
    triggers = (tmp_path / "triggers.csv").read_text().splitlines()
    assert triggers[0] == "t_k,Mk,Mk_applied,total_cost,admm_iters"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["local_violations"] == 0
    assert summary["global_violations"] == 0
    assert summary["recursive_feasible"] is True
    assert len(summary["final_states"]) == 4


def test_run_periodic_one_row_per_step(tmp_path):
    code = main(["run", "--scenario", SCENARIO, "--out", str(tmp_path),
                 "--mode", "periodic"])
    assert code == 0
    triggers = (tmp_path / "triggers.csv").read_text().splitlines()
    assert len(triggers) == 1 + 30
    assert all(line.split(",")[1] == "1" for line in triggers[1:])


def test_run_byte_identical_outputs(tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert main(["run", "--scenario", SCENARIO, "--out", str(out1), "--seed", "3"]) == 0
    assert main(["run", "--scenario", SCENARIO, "--out", str(out2), "--seed", "3"]) == 0
    for name in ("trace.csv", "triggers.csv", "summary.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_run_x0_outside_state_set_exit_two(tmp_path):
    def outside(raw):
        raw["agents"][0]["x0"] = [-30.0, 0.0]
    path = write_variant(tmp_path, outside)
    assert main(["run", "--scenario", path, "--out", str(tmp_path)]) == 2


def test_run_initial_infeasibility_exit_three(tmp_path):
    assert main(["run", "--scenario", INFEASIBLE_X0, "--out", str(tmp_path)]) == 3


def test_montecarlo_small_campaign(tmp_path):
    code = main(["montecarlo", "--scenario", SCENARIO, "--out", str(tmp_path),
                 "--runs", "5"])
    assert code == 0
    report = json.loads((tmp_path / "montecarlo.json").read_text())
    assert report["n_runs"] == 5
    assert report["local_violations"] == 0
    assert report["recursive_feasible_all"] is True
    assert report["interval_histogram"]


def test_compare_reports_fewer_solves(tmp_path):
    code = main(["compare", "--scenario", SCENARIO, "--out", str(tmp_path)])
    assert code == 0
    report = json.loads((tmp_path / "comparison.json").read_text())
    st = report["self-triggered"]["ocp_solve_instants"]
    pe = report["periodic"]["ocp_solve_instants"]
    assert st < pe
    assert report["solve_instant_ratio"] == pytest.approx(st / pe)
    for mode in ("self-triggered", "periodic"):
        margins = report[mode]["max_constraint_margins"]
        assert margins["state"] <= 1e-6
        assert margins["input"] <= 1e-6
        assert margins["coupling"] <= 1e-6


def test_compare_nominal_reaches_full_horizon(tmp_path):
    def no_noise(raw):
        for node in raw["agents"]:
            node["disturbance"] = {"w_bar": 0.0}
    path = write_variant(tmp_path, no_noise)
    assert main(["compare", "--scenario", path, "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "comparison.json").read_text())
    # one solve covers a full horizon: count is about ceil(T_run / N)
    assert report["self-triggered"]["ocp_solve_instants"] <= -(-30 // 5)


def test_inspect_dumps_ingredients(tmp_path, capsys):
    code = main(["inspect", "--scenario", SCENARIO, "--out", str(tmp_path)])
    assert code == 0
    doc = json.loads((tmp_path / "inspect.json").read_text())
    assert len(doc["agents"]) == 4
    assert doc["schedule"]["eps"][0] == 0.0
    assert doc["certificate"]["overall_ok"] is True


def test_run_force_overrides_failed_certificates(tmp_path):
    def tiny_inputs(raw):
        for node, x0 in zip(raw["agents"], ([0.4, 0.3], [-0.4, -0.3],
                                            [0.3, -0.3], [-0.3, 0.3])):
            node["input_set"] = {"box": [0.12]}
            node["x0"] = x0
    path = write_variant(tmp_path, tiny_inputs)
    assert main(["run", "--scenario", path, "--out", str(tmp_path / "plain")]) == 2
    code = main(["run", "--scenario", path, "--out", str(tmp_path / "forced"),
                 "--force"])
    assert code in (0, 1)
    summary = json.loads((tmp_path / "forced" / "summary.json").read_text())
    assert summary["forced_despite_failed_certificates"] is True


def test_run_admm_failure_exit_four(tmp_path, monkeypatch):
    import tube_dmpc.simulator as simulator

    real_run = simulator.run_admm

    def broken(ocps, params, **kw):
        sols, state, _ = real_run(ocps, params, **kw)
        state.coupling_violation = 1.0
        return sols, state, False

    monkeypatch.setattr(simulator, "run_admm", broken)
    assert main(["run", "--scenario", SCENARIO, "--out", str(tmp_path)]) == 4
