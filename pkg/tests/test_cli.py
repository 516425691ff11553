import csv
import json

import pytest

from cornerspace.cli import (RESULT_COLUMNS, SPECTRUM_COLUMNS, ConfigError, ExperimentConfig,
                             format_value, list_presets, load_config, main, preset_runs,
                             run_experiment, validate_config)
from cornerspace.lattice import build_geometry
from cornerspace.model import ModelParams, assemble_hamiltonian, build_base_cluster, jump_operators
from cornerspace.observables import evaluate
from cornerspace.steadystate import steady_state_nullspace


def _write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(data))
    return p


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_round_trip():
    cfg = ExperimentConfig()
    cfg.m_schedule = [4, 8, 16]
    cfg.model.J = 1.5
    again = ExperimentConfig.from_dict(json.loads(cfg.to_json()))
    assert again == cfg and again.to_json() == cfg.to_json()


def test_preset_configs_round_trip():
    for entry in list_presets():
        for _, cfg in preset_runs(entry["name"]):
            assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg


def test_hardcore_with_finite_u_rejected(tmp_path, capsys):
    data = ExperimentConfig().to_dict()
    data["model"]["U"] = 20.0
    with pytest.raises(ConfigError) as err:
        validate_config(ExperimentConfig.from_dict(data))
    assert err.value.field == "model.U"
    assert main(["validate", str(_write(tmp_path, data))]) == 1
    assert "model.U" in capsys.readouterr().err


@pytest.mark.parametrize("path,value,field", [
    (("model", "gamma"), -1.0, "model.gamma"),
    (("m_schedule",), [16, 4], "m_schedule"),
    (("lattice", "Lx"), 3, "base"),
    (("pipeline",), "other", "pipeline"),
    (("model", "bogus"), 1, "model.bogus"),
])
def test_invalid_fields_named(tmp_path, capsys, path, value, field):
    data = ExperimentConfig().to_dict()
    node = data
    for k in path[:-1]:
        node = node[k]
    node[path[-1]] = value
    assert main(["validate", str(_write(tmp_path, data))]) == 1
    assert field in capsys.readouterr().err


def test_missing_schema_version(tmp_path):
    data = ExperimentConfig().to_dict()
    del data["schema_version"]
    with pytest.raises(ConfigError, match="schema_version"):
        load_config(_write(tmp_path, data))


def test_validate_accepts_default(tmp_path):
    assert main(["validate", str(_write(tmp_path, ExperimentConfig().to_dict()))]) == 0


@pytest.fixture(scope="module")
def default_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    cfg = _write(d, ExperimentConfig().to_dict())
    code = main(["run", str(cfg), "--out", str(d / "a")])
    return d, cfg, code


def test_full_m_run_matches_oracle(default_run):
    d, _, code = default_run
    assert code == 0
    rows = _read(d / "a" / "results.csv")
    assert rows[0] == RESULT_COLUMNS
    final = dict(zip(rows[0], rows[-1]))
    assert (final["Lx"], final["Ly"], final["M"]) == ("2", "2", "16")
    p = ModelParams.hard_core(5.0, 1.0, 2.0)
    full = build_base_cluster(build_geometry(2, 2), p)
    oracle = evaluate(full, steady_state_nullspace(assemble_hamiltonian(full.ops, full.geometry, p),
                                                   jump_operators(full.ops, p)))
    for k in ("n", "re_b", "im_b", "g2_nn"):
        assert abs(float(final[k]) - getattr(oracle, k)) < 1e-6
    assert final["n_err"] == "" and final["g2"] == "0"


def test_all_outputs_written(default_run):
    d, _, _ = default_run
    out = d / "a"
    assert _read(out / "spectrum.csv")[0] == SPECTRUM_COLUMNS
    assert _read(out / "timeseries.csv")[0][-3:] == ["t", "n", "g2"]
    man = json.loads((out / "manifest.json").read_text())
    assert man["exit_code"] == 0 and man["converged"]
    assert man["config"] == ExperimentConfig().to_dict()
    assert {"run_id", "code_version", "seeds", "nodes", "warnings"} <= set(man)


def test_rerun_is_byte_identical(default_run):
    d, cfg, _ = default_run
    assert main(["run", str(cfg), "--out", str(d / "b")]) == 0
    for f in ("results.csv", "spectrum.csv", "timeseries.csv"):
        assert (d / "a" / f).read_bytes() == (d / "b" / f).read_bytes()


def test_mcwf_rerun_is_byte_identical(tmp_path):
    data = ExperimentConfig().to_dict()
    data["m_schedule"] = [10]
    data["solver"]["direct_cap"] = 4
    data["trajectories"].update(n_trajectories=8, t_relax=5.0, t_sample=10.0, master_seed=3)
    cfg = _write(tmp_path, data)
    codes = [main(["run", str(cfg), "--out", str(tmp_path / k)]) for k in "ab"]
    assert codes[0] == codes[1]
    a = (tmp_path / "a" / "results.csv").read_bytes()
    assert a == (tmp_path / "b" / "results.csv").read_bytes()
    assert b",mcwf," in a


def test_limits_exit_code(tmp_path):
    data = ExperimentConfig().to_dict()
    data["m_schedule"] = [12]
    data["solver"]["max_time"] = 1.0
    assert main(["run", str(_write(tmp_path, data)), "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "manifest.json").read_text())["exit_code"] == 2


def test_solver_routing_respects_direct_cap(tmp_path):
    data = ExperimentConfig().to_dict()
    data["m_schedule"] = [8, 12]
    data["solver"]["direct_cap"] = 10
    data["convergence"]["sweep"] = True
    data["trajectories"].update(n_trajectories=4, t_relax=2.0, t_sample=4.0)
    out = run_experiment(ExperimentConfig.from_dict(data), tmp_path)
    for r in out.rows:
        if r["M"] > 10:
            assert r["solver"] == "mcwf"
        else:
            assert r["solver"] in ("direct", "nullspace")


def test_meanfield_pipeline(tmp_path):
    data = ExperimentConfig().to_dict()
    data["pipeline"] = "meanfield"
    out = run_experiment(ExperimentConfig.from_dict(data), tmp_path)
    assert out.exit_code == 0
    assert out.rows[0]["n"] == pytest.approx(0.0953, rel=0.01)


def test_bruteforce_pipeline(tmp_path):
    data = ExperimentConfig().to_dict()
    data["pipeline"] = "bruteforce"
    out = run_experiment(ExperimentConfig.from_dict(data), tmp_path)
    assert out.exit_code == 0 and out.rows[0]["M"] == 16


def test_preset_catalog():
    names = {e["name"] for e in list_presets()}
    assert names == {"table1", "table2", "table3", "fig2", "fig3"}
    for e in list_presets():
        assert e["description"] and e["reproduces"]


def test_fig2_parameters():
    for run_id, cfg in preset_runs("fig2"):
        m = cfg.model
        assert (m.U, m.J, m.F, m.delta_omega, m.hardcore) == (20.0, 3.0, 2.0, 5.0, False)


def test_table3_has_large_soft_row():
    runs = dict(preset_runs("table3", m_max=0))
    cfg = runs["U0.5-16x16"]
    assert (cfg.lattice.Lx, cfg.lattice.Ly, cfg.m_schedule, cfg.model.U) == (16, 16, [400], 0.5)


def test_preset_seed_and_cap_options():
    (_, a), = preset_runs("table1")
    (_, b), = preset_runs("table1", seed=7, m_max=100)
    assert a.trajectories.master_seed != 7 and b.trajectories.master_seed == 7
    assert max(a.m_schedule) == 800 and b.m_schedule == [20, 50, 100]
    (_, c), = preset_runs("table1", m_max=0)
    assert max(c.m_schedule) == 1600


def test_preset_dump_config(tmp_path):
    assert main(["preset", "fig3", "--out", str(tmp_path), "--dump-config"]) == 0
    cfg = load_config(tmp_path / "6x3-hardcore" / "config.json")
    assert cfg.model.hardcore and cfg.preset == "fig3"


def test_preset_row_runs_one_mean_field(tmp_path):
    assert main(["preset", "table3", "--row", "U1-mf", "--out", str(tmp_path)]) == 0
    rows = _read(tmp_path / "results.csv")
    assert float(dict(zip(rows[0], rows[1]))["g2"]) == pytest.approx(1.265, rel=0.01)


def test_unknown_preset_is_error(tmp_path, capsys):
    assert main(["preset", "table9", "--out", str(tmp_path)]) == 1
    assert "preset" in capsys.readouterr().err


def test_missing_config_file_is_error(tmp_path):
    assert main(["run", str(tmp_path / "nope.json")]) == 1


@pytest.mark.parametrize("value,text", [
    (None, ""), (float("nan"), ""), (0.1, "0.1"), (1 / 3, "0.333333333"), (12345.678901234, "12345.6789"),
    (3, "3"), (1e-20, "1e-20"), ("mcwf", "mcwf"),
])
def test_number_format(value, text):
    assert format_value(value) == text
