from __future__ import annotations

import csv
import json

import pytest

from fogfed import pipeline
from fogfed.cli import main, run_dir_for
from fogfed.config import config_from_dict, config_to_dict, desk_config, load_config, save_config
from fogfed.domain import EconomicModel, FormationModel, ScenarioError
from fogfed.qos_data import synthesize, write_wsdream
from conftest import build_scenario, table_oracle


def small_config_doc(seed=0):
    """Desk scenario with every stage shortened so a full run takes about a second."""
    doc = config_to_dict(desk_config(seed))
    doc["name"] = "small"
    doc["training"].update(rounds=3)
    doc["engines"]["ga"].update(max_generations=10, population_size=10)
    doc["engines"]["ga_open_ended_epochs"] = 8
    doc["engines"]["evo"].update(max_generations=40)
    doc["engines"]["greedy"].update(max_rounds=6)
    return doc


@pytest.fixture
def small_scenario(tmp_path):
    path = tmp_path / "small.json"
    path.write_text(json.dumps(small_config_doc()))
    return path


def run_cli(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


# --------------------------------------------------------------------------
# Config files


def test_config_round_trip_is_stable(tmp_path):
    cfg = desk_config(3)
    a = save_config(cfg, tmp_path / "a.json")
    back = load_config(a)
    b = save_config(back, tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    assert back.scenario.servers == cfg.scenario.servers and back.evo == cfg.evo


def test_schema_version_required():
    doc = small_config_doc()
    doc["schema_version"] = 99
    with pytest.raises(ScenarioError, match="schema_version"):
        config_from_dict(doc)


def test_unknown_section_key_rejected():
    doc = small_config_doc()
    doc["engines"]["ga"]["populaton_size"] = 3
    with pytest.raises(ScenarioError, match="engines.ga"):
        config_from_dict(doc)


def test_dangling_reference_rejected():
    doc = small_config_doc()
    doc["users"][0]["apps"] = [999]
    with pytest.raises(ScenarioError):
        config_from_dict(doc)


def test_with_seed_reseeds_every_stage():
    cfg = desk_config(0).with_seed(4)
    assert (cfg.training.seed, cfg.ga.seed, cfg.evo.seed, cfg.greedy.seed) == (4, 4, 4, 4)


def test_desk_scenario_shape():
    sc = desk_config(0).scenario
    assert sc.m == 8 and len(sc.providers) == 8
    assert sum(s.capacity for s in sc.servers) < len(sc.requests())


def test_run_dir_respects_environment(monkeypatch, tmp_path):
    cfg = desk_config(2)
    monkeypatch.setenv("FOGFED_RUN_ROOT", str(tmp_path))
    assert run_dir_for(cfg) == tmp_path / "desk-seed2"
    assert run_dir_for(cfg, str(tmp_path / "x")) == tmp_path / "x"
    monkeypatch.delenv("FOGFED_RUN_ROOT")
    assert str(run_dir_for(cfg)) == "runs/desk-seed2"


# --------------------------------------------------------------------------
# Satisfaction


def test_four_requests_three_satisfied():
    econ = EconomicModel(rt_sla=0.5, tp_sla=50.0)
    sc = build_scenario([(1, 1, 4)], [(1, 1, 10.0)], [(u, (1,)) for u in (1, 2, 3, 4)], 1, econ)
    model = FormationModel(sc, table_oracle({(1, 1): 0.1, (2, 1): 0.2, (3, 1): 0.3, (4, 1): 0.9},
                                            {(u, 1): 80.0 if u < 4 else 10.0 for u in (1, 2, 3, 4)}))
    assert model.satisfaction((1,)) == (75.0, 75.0)


def test_all_satisfied_is_one_hundred_percent():
    sc = build_scenario([(1, 1, 2)], [(1, 1, 10.0)], [(1, (1,)), (2, (1,))], 1, EconomicModel(rt_sla=0.5, tp_sla=50.0))
    model = FormationModel(sc, table_oracle({(1, 1): 0.1, (2, 1): 0.1}))
    assert model.satisfaction((1,)) == (100.0, 100.0)


# --------------------------------------------------------------------------
# CLI subcommands


def test_scenario_subcommand_writes_loadable_file(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "scenario", "--out", tmp_path / "s.json", "--seed", 1)
    assert code == 0 and "8 providers" in out
    assert load_config(tmp_path / "s.json").seed == 1


def test_ingest_synthetic_fixture_counts(tmp_path, capsys):
    ds = synthesize(0, 5, 7)
    write_wsdream(ds, tmp_path / "d")
    code, out, _ = run_cli(capsys, "ingest", tmp_path / "d")
    assert code == 0 and out.startswith("5 users, 7 nodes, 35 records, 0 filtered")


def test_synth_then_ingest_with_limits(tmp_path, capsys):
    assert run_cli(capsys, "synth", "--out", tmp_path / "d", "--users", 6, "--nodes", 9)[0] == 0
    code, out, _ = run_cli(capsys, "ingest", tmp_path / "d", "--max-users", 3, "--max-nodes", 4)
    assert code == 0 and out.startswith("3 users, 4 nodes, 12 records")


def test_ingest_missing_file_exits_nonzero_with_path(tmp_path, capsys):
    code, _, err = run_cli(capsys, "ingest", tmp_path / "nowhere")
    assert code == 2 and "error [ingest]" in err and "nowhere" in err


def test_ingest_parse_error_exits_nonzero(tmp_path, capsys):
    write_wsdream(synthesize(0, 2, 2), tmp_path / "d")
    (tmp_path / "d" / "rtMatrix.txt").write_text("1 2\n3\n")
    code, _, err = run_cli(capsys, "ingest", tmp_path / "d")
    assert code == 2 and "rtMatrix.txt:2" in err


def test_missing_scenario_file(tmp_path, capsys):
    code, _, err = run_cli(capsys, "simulate", "--scenario", tmp_path / "nope.json")
    assert code == 2 and "error [config]" in err


def test_form_without_models_fails_with_stage(tmp_path, small_scenario, capsys):
    code, _, err = run_cli(capsys, "form", "--engine", "greedy", "--scenario", small_scenario, "--run-dir", tmp_path / "r")
    assert code == 2 and "error [form]" in err and "model_rt.json" in err


def test_train_zero_rounds_reports_initial_model(tmp_path, small_scenario, capsys):
    run = tmp_path / "r"
    code, out, _ = run_cli(capsys, "train", "--target", "rt", "--rounds", 0, "--scenario", small_scenario, "--run-dir", run)
    assert code == 0 and out.startswith("rt: mse=")
    rows = list(csv.DictReader(open(run / "history_rt.csv")))
    assert len(rows) == 1 and rows[0]["round"] == "0"


def test_train_is_byte_deterministic(tmp_path, small_scenario, capsys):
    for name in ("a", "b"):
        assert run_cli(capsys, "train", "--target", "tp", "--scenario", small_scenario, "--run-dir", tmp_path / name)[0] == 0
    assert (tmp_path / "a" / "model_tp.json").read_bytes() == (tmp_path / "b" / "model_tp.json").read_bytes()


def test_stagewise_commands_match_simulate(tmp_path, small_scenario, capsys):
    staged = tmp_path / "staged"
    for target in ("rt", "tp"):
        assert run_cli(capsys, "train", "--target", target, "--scenario", small_scenario, "--run-dir", staged)[0] == 0
    for engine in ("evo", "ga", "greedy"):
        code, out, _ = run_cli(capsys, "form", "--engine", engine, "--scenario", small_scenario, "--run-dir", staged)
        assert code == 0 and out.startswith(f"{engine}: payoff=")
    code, out, _ = run_cli(capsys, "report", "--scenario", small_scenario, "--run-dir", staged)
    assert code == 0 and out.startswith("engine")
    whole = tmp_path / "whole"
    assert run_cli(capsys, "simulate", "--scenario", small_scenario, "--run-dir", whole)[0] == 0
    assert (staged / "report.csv").read_bytes() == (whole / "report.csv").read_bytes()


@pytest.fixture
def simulated(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sim")
    path = tmp / "small.json"
    path.write_text(json.dumps(small_config_doc()))
    run = tmp / "run"
    assert main(["simulate", "--scenario", str(path), "--run-dir", str(run)]) == 0
    return load_config(path), run


def test_csv_headers_are_fixed(simulated):
    cfg, run = simulated
    header = lambda p: next(csv.reader(open(p)))  # noqa: E731
    assert header(run / "report.csv") == pipeline.REPORT_FIELDS
    for engine in pipeline.ENGINES:
        assert header(run / f"trace_{engine}.csv") == pipeline.TRACE_FIELDS + [f"u_{j}" for j in range(1, 9)]
        assert header(run / f"routing_{engine}.csv") == pipeline.ROUTING_FIELDS
        assert header(run / f"profile_{engine}.csv") == ["server_id", "provider_id", "federation"]
    assert header(run / "history_rt.csv") == ["round", "mse", "mae"]


def test_report_satisfaction_matches_routing_files(simulated):
    cfg, run = simulated
    for row in pipeline.read_report(run / "report.csv"):
        routes = list(csv.DictReader(open(run / f"routing_{row['engine']}.csv")))
        assert len(routes) == len(cfg.scenario.requests())
        rt = 100 * sum(int(r["rt_ok"]) for r in routes) / len(routes)
        tp = 100 * sum(int(r["tp_ok"]) for r in routes) / len(routes)
        assert float(row["satisfaction_rt"]) == pytest.approx(rt, abs=1e-4)
        assert float(row["satisfaction_tp"]) == pytest.approx(tp, abs=1e-4)
        assert 0 <= rt <= 100 and 0 <= tp <= 100


def test_report_payoff_matches_profile_file(simulated):
    cfg, run = simulated
    model = pipeline.formation_model(cfg, run)
    for row in pipeline.read_report(run / "report.csv"):
        genes = pipeline.read_profile(run / f"profile_{row['engine']}.csv", model)
        assert float(row["total_payoff"]) == pytest.approx(model.evaluate(genes).welfare, abs=1e-6)


def test_ga_trace_best_fitness_is_recorded(simulated):
    _, run = simulated
    rows = list(csv.DictReader(open(run / "trace_ga.csv")))
    assert len(rows) == 9 and all(r["fitness"] for r in rows)


def test_simulate_falls_back_to_synthetic_data(tmp_path, capsys):
    doc = small_config_doc()
    doc["dataset"].update(source="wsdream", directory=str(tmp_path / "absent"), synthesize_if_missing=True)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    code, out, _ = run_cli(capsys, "simulate", "--scenario", path, "--run-dir", tmp_path / "r")
    assert code == 0 and "evo" in out


def test_missing_dataset_without_fallback_fails_in_ingest(tmp_path, capsys):
    doc = small_config_doc()
    doc["dataset"].update(source="wsdream", directory=str(tmp_path / "absent"), synthesize_if_missing=False)
    path = tmp_path / "s.json"
    path.write_text(json.dumps(doc))
    code, _, err = run_cli(capsys, "simulate", "--scenario", path, "--run-dir", tmp_path / "r")
    assert code == 2 and "[ingest]" in err


def test_simulate_reports_are_byte_identical(tmp_path, small_scenario, capsys):
    for name in ("a", "b"):
        assert run_cli(capsys, "simulate", "--scenario", small_scenario, "--run-dir", tmp_path / name)[0] == 0
    for f in ("report.csv", "report.txt", "trace_evo.csv", "routing_greedy.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
