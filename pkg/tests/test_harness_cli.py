import csv
import json
import os

import jsonschema
import numpy as np
import pytest

from coupled_gibbs.cli import main
from coupled_gibbs.harness import (
    BoundEvaluator,
    ExperimentConfig,
    RunReport,
    bound_report,
    build_model,
    jsonl_lines,
    load_schema,
    resolve_test_functions,
    run_experiment,
    run_sweep,
    simulate_data,
    sweep_cells,
    validate_output,
)
from coupled_gibbs.rng import derive_rng

SMALL = dict(model="crem_collapsed", K=2, I=20, replicates=4, base_seed=3, max_iter=2000)


def write_config(path, **fields):
    with open(path, "w") as fh:
        json.dump(fields, fh)
    return str(path)


# --- config ------------------------------------------------------------------


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig(model="glmm_mwg", S=3, tau=[1.0, 2.0, 0.5], test_functions=["mu"], k=1, m=4, eps=0.2)
    path = tmp_path / "c.json"
    cfg.dump(path)
    back = ExperimentConfig.load(path)
    assert back == cfg
    assert json.loads(path.read_text()) == cfg.to_dict()


@pytest.mark.parametrize(
    "fields, exc",
    [
        ({"bogus": 1}, ValueError),
        ({"model": "nope"}, (ValueError, jsonschema.ValidationError)),
        ({"replicates": 0}, (ValueError, jsonschema.ValidationError)),
        ({"k": 5, "m": 2}, ValueError),
        ({"eps": -1.0}, (ValueError, jsonschema.ValidationError)),
        ({"regime": 3}, (ValueError, jsonschema.ValidationError)),
    ],
)
def test_config_rejects_bad_fields(fields, exc):
    with pytest.raises(exc):
        ExperimentConfig.from_dict(fields)


def test_replace_keeps_other_fields():
    cfg = ExperimentConfig(**SMALL)
    new = cfg.replace(I=30, threads=None)
    assert new.I == 30 and new.K == cfg.K and new.threads == cfg.threads


# --- streams -------------------------------------------------------------------


def test_stream_roles_are_independent():
    a = derive_rng(1, 0, "init").random(4)
    b = derive_rng(1, 0, "kernel").random(4)
    c = derive_rng(1, 1, "init").random(4)
    assert not np.allclose(a, b) and not np.allclose(a, c)
    np.testing.assert_array_equal(a, derive_rng(1, 0, "init").random(4))


# --- run --------------------------------------------------------------------------


def test_run_is_deterministic_across_thread_counts():
    cfg = ExperimentConfig(**SMALL)
    one = jsonl_lines(run_experiment(cfg).rows)
    again = jsonl_lines(run_experiment(cfg).rows)
    two = jsonl_lines(run_experiment(cfg.replace(threads=2)).rows)
    assert one == again == two
    assert [json.loads(l)["replicate"] for l in one] == list(range(4))


def test_aggregate_recomputable_from_rows():
    rep = run_experiment(ExperimentConfig(**SMALL))
    Ts = np.array([r["T"] for r in rep.rows], dtype=float)
    agg = rep.aggregate()
    assert agg["mean_T"] == pytest.approx(Ts.mean())
    assert agg["stderr_T"] == pytest.approx(Ts.std(ddof=1) / 2.0)
    assert agg["quantiles_T"]["q90"] == pytest.approx(np.quantile(Ts, 0.9))
    assert RunReport(rep.config, rep.rows).aggregate() == agg
    assert rep.wall_ns_per_sweep > 0


def test_forced_equal_start_meets_at_zero():
    rep = run_experiment(ExperimentConfig(**dict(SMALL, replicates=1, force_equal_start=True)))
    assert rep.rows[0]["T"] == 0 and not rep.rows[0]["truncated"]


def test_truncation_is_flagged():
    rep = run_experiment(ExperimentConfig(**dict(SMALL, model="crem_vanilla", max_iter=1, replicates=2)))
    assert rep.any_truncated and rep.aggregate()["n_truncated"] >= 1
    assert all(r["T"] is None for r in rep.rows if r["truncated"])


def test_estimates_and_bounds_in_report():
    cfg = ExperimentConfig(**dict(SMALL, k=2, m=10, test_functions=["mu", "a1_3", "effects"], bounds=True))
    rep = run_experiment(cfg)
    doc = validate_output(rep.to_dict(), "run_report")
    assert set(doc["estimates"]) == {"mu", "a1_3", "effects"}
    assert len(doc["estimates"]["effects"]["mean"]) == 1 + 2 * 20
    assert doc["bounds"]["reversible"]["applicable"] is False
    assert doc["bounds"]["two_block_forward"]["mean"] > 0
    assert doc["bounds"]["best"]["applicable"]
    for r in rep.rows:
        jsonschema.validate(r, load_schema("replicate_row"))


def test_resolve_test_functions():
    cfg = ExperimentConfig(**dict(SMALL, tau_mode="sample", test_functions=["mu", "a2_5", "tau1"], k=0, m=1))
    model = build_model(cfg)
    tf = resolve_test_functions(cfg, model)
    v = np.arange(model.layout.dim, dtype=float)
    assert tf["mu"](v) == 0.0
    assert tf["a2_5"](v) == v[model.layout.a[1].start + 4]
    assert tf["tau1"](v) == v[model.layout.n_effects + 1]
    for bad in (["a3_1"], ["a1_99"], ["zzz"], ["a1"]):
        with pytest.raises(ValueError):
            resolve_test_functions(cfg.replace(test_functions=bad), model)
    pcfg = ExperimentConfig(model="pmf_local", I=10, test_functions=["fit_1_2", "tau0", "scaled_norm_u"], m=1)
    pmodel = build_model(pcfg)
    assert set(resolve_test_functions(pcfg, pmodel)) == {"fit_1_2", "tau0", "scaled_norm_u"}
    with pytest.raises(ValueError):
        resolve_test_functions(pcfg.replace(test_functions=["mu"]), pmodel)


# --- bounds ---------------------------------------------------------------------


def test_bound_report_marks_inapplicable_entries():
    doc = bound_report(ExperimentConfig(**dict(SMALL, replicates=2)))
    assert doc["eps"] == pytest.approx(1 / 40)
    names = set(doc["bounds"])
    assert {"reversible", "relaxation_form", "two_block_forward", "general_delta_0.5", "random_design", "best"} <= names
    # the forward sweep is not reversible
    assert doc["bounds"]["reversible"]["applicable"] is False and doc["bounds"]["reversible"]["reason"]
    assert doc["bounds"]["two_block_forward"]["applicable"]
    sampled = bound_report(ExperimentConfig(**dict(SMALL, replicates=1, tau_mode="sample")))
    assert sampled["bounds"]["all"] == {"applicable": False, "reason": "bounds need fixed precisions"}
    glmm = BoundEvaluator(build_model(ExperimentConfig(model="glmm_mwg", I=10)))
    assert glmm.evaluate(None, None)["all"]["applicable"] is False


def test_two_block_bound_dominates_mean_meeting_time():
    cfg = ExperimentConfig(**dict(SMALL, replicates=30, bounds=True))
    rep = run_experiment(cfg)
    assert rep.aggregate()["mean_T"] <= rep.bounds()["two_block_forward"]["mean"]


# --- sweeps ---------------------------------------------------------------------


def test_sweep_grid_rows_and_resume(tmp_path):
    base = ExperimentConfig(**dict(SMALL, replicates=2))
    grid = {"I": [10, 20], "regime": [1, 2]}
    assert len(sweep_cells(base, grid)) == 4
    rows = run_sweep(base, grid, tmp_path)
    assert len(rows) == 4 and all(r["error"] == "" for r in rows)
    with open(tmp_path / "sweep.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 4 and {r["regime"] for r in table} == {"1", "2"}
    # resuming reuses cell files
    cell = sorted(os.listdir(tmp_path / "cells"))[0]
    with open(tmp_path / "cells" / cell) as fh:
        stored = json.load(fh)
    stored["mean_T"] = -1.0
    with open(tmp_path / "cells" / cell, "w") as fh:
        json.dump(stored, fh)
    again = run_sweep(base, grid, tmp_path)
    assert again[0]["mean_T"] == -1.0


def test_sweep_records_cell_errors(tmp_path):
    base = ExperimentConfig(**dict(SMALL, replicates=1, model="pmf_local", test_functions=["mu"], m=2))
    rows = run_sweep(base, {"I": [10]}, tmp_path)
    assert "unknown PMF test function" in rows[0]["error"]


def test_vanilla_slower_than_collapsed_in_sweep(tmp_path):
    rows = []
    for model in ("crem_collapsed", "crem_vanilla"):
        base = ExperimentConfig(**dict(SMALL, model=model, replicates=8, max_iter=20000))
        rows.append(run_sweep(base, {"I": [20, 40]}, tmp_path / model))
    for c, v in zip(*rows):
        assert v["mean_T"] > c["mean_T"]


def test_pmf_sweep_meets_quickly(tmp_path):
    base = ExperimentConfig(model="pmf_local", I=50, replicates=4, base_seed=1, max_iter=5000)
    rows = run_sweep(base, {"regime": [1, 2]}, tmp_path)
    assert all(r["n_truncated"] == 0 and r["mean_T"] < 50 for r in rows)


# --- CLI --------------------------------------------------------------------------


def test_cli_simulate_is_byte_identical(tmp_path):
    cfg = write_config(tmp_path / "c.json", model="crem_collapsed", K=2, I=50, regime=1, base_seed=9)
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path / "b")]) == 0
    a, b = (tmp_path / "a" / "data.csv").read_bytes(), (tmp_path / "b" / "data.csv").read_bytes()
    assert a == b
    side = json.loads((tmp_path / "a" / "data.json").read_text())
    assert side["base_seed"] == 9 and side["stream"] == "design"
    assert abs(side["n_rows"] - 250) <= 4 * np.sqrt(250 * 0.9)
    assert main(["simulate", "--config", cfg, "--seed", "10", "--out-dir", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "data.csv").read_bytes() != a


def test_cli_simulate_regime2_size(tmp_path):
    cfg = write_config(tmp_path / "c.json", model="crem_collapsed", K=3, I=40, regime=2)
    assert main(["simulate", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    n = json.loads((tmp_path / "data.json").read_text())["n_rows"]
    assert abs(n - 400) <= 4 * np.sqrt(400)


def test_cli_run_from_data_file(tmp_path):
    sim = write_config(tmp_path / "s.json", model="pmf_local", I=30, regime=1)
    assert main(["simulate", "--config", sim, "--out-dir", str(tmp_path / "d")]) == 0
    data = str(tmp_path / "d" / "data.csv")
    run = write_config(tmp_path / "r.json", model="pmf_local", I=30, data_file=data, replicates=2)
    assert main(["run", "--config", run, "--out-dir", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "run.json").read_text())
    assert doc["config"]["data_file"] == data and doc["aggregate"]["n_replicates"] == 2


def test_cli_exit_codes(tmp_path, capsys):
    ok = write_config(tmp_path / "ok.json", **SMALL)
    assert main(["run", "--config", ok, "--out-dir", str(tmp_path / "ok")]) == 0
    lines = (tmp_path / "ok" / "run.jsonl").read_text().splitlines()
    assert len(lines) == 4 and "wall" not in lines[0]
    trunc = write_config(tmp_path / "t.json", **dict(SMALL, model="crem_vanilla", max_iter=1))
    assert main(["run", "--config", trunc, "--out-dir", str(tmp_path / "t")]) == 2
    bad = write_config(tmp_path / "b.json", bogus=1)
    assert main(["run", "--config", bad, "--out-dir", str(tmp_path / "b")]) == 1
    assert main(["run", "--config", str(tmp_path / "missing.json")]) == 1
    assert "error" in capsys.readouterr().err


def test_cli_run_jsonl_identical_across_threads(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    assert main(["run", "--config", cfg, "--threads", "1", "--out-dir", str(tmp_path / "one")]) == 0
    assert main(["run", "--config", cfg, "--threads", "2", "--out-dir", str(tmp_path / "two")]) == 0
    assert (tmp_path / "one" / "run.jsonl").read_bytes() == (tmp_path / "two" / "run.jsonl").read_bytes()


def test_cli_flags_override_config(tmp_path):
    cfg = write_config(tmp_path / "c.json", **SMALL)
    assert main(["run", "--config", cfg, "--replicates", "2", "--seed", "5", "--model", "crem_vanilla",
                 "--out-dir", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["config"]["replicates"] == 2 and doc["config"]["base_seed"] == 5 and doc["config"]["model"] == "crem_vanilla"


def test_cli_bound_and_estimate(tmp_path):
    cfg = write_config(tmp_path / "c.json", **dict(SMALL, k=2, m=10, test_functions=["mu"]))
    assert main(["bound", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    jsonschema.validate(json.loads((tmp_path / "bound.json").read_text()), load_schema("bound_report"))
    assert main(["estimate", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    est = json.loads((tmp_path / "estimate.json").read_text())
    assert set(est["estimates"]) == {"mu"} and est["estimates"]["mu"]["n"] == 4
    plain = write_config(tmp_path / "p.json", **SMALL)
    assert main(["estimate", "--config", plain, "--out-dir", str(tmp_path)]) == 1


def test_cli_sweep(tmp_path):
    cfg = tmp_path / "sweep.json"
    cfg.write_text(json.dumps({"base": dict(SMALL, replicates=2), "grid": {"I": [10, 20], "regime": [1, 2]}}))
    assert main(["sweep", "--config", str(cfg), "--out-dir", str(tmp_path)]) == 0
    with open(tmp_path / "sweep.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 4


def test_simulate_uses_design_stream():
    cfg = ExperimentConfig(**SMALL)
    a, b = simulate_data(cfg), simulate_data(cfg)
    np.testing.assert_array_equal(a.y, b.y)
    assert not np.array_equal(simulate_data(cfg.replace(base_seed=4)).y[:5], a.y[:5])


def test_tv_distance_switch():
    cfg = ExperimentConfig(**dict(SMALL, distance="tv", replicates=3))
    rep = run_experiment(cfg)
    assert rep.aggregate()["n_truncated"] == 0 and rep.config["distance"] == "tv"
    model = build_model(cfg)
    from coupled_gibbs.harness import configured_pair_kernel

    pk = configured_pair_kernel(cfg, model)
    x = model.sample_initial(np.random.default_rng(0))
    y = x.copy()
    y[0] += 5.0  # the intercept is redrawn, so it does not enter the collapsed kernel distance
    assert pk.distance(x, y) == 0.0
    # the forward sweep redraws the first factor before reading it
    y[3] += 0.5
    assert pk.distance(x, y) == 0.0
    y[1 + 20 + 3] += 0.5
    assert 0.0 < pk.distance(x, y) < 1.0
    with pytest.raises(ValueError, match="tv distance"):
        run_experiment(cfg.replace(tau_mode="sample"))
    with pytest.raises(ValueError, match="tv distance"):
        run_experiment(ExperimentConfig(model="pmf_local", I=10, replicates=1, distance="tv"))
