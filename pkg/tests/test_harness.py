import json
import os
import time

import numpy as np
import pytest

from cdmad_lab import cdmad as cd
from cdmad_lab import harness
from cdmad_lab.cli import main
from cdmad_lab.harness import ConfigError, RunConfig, aggregate, expand_grid, run_experiment, sweep
from cdmad_lab.nn import softmax
from cdmad_lab.report import CSV_HEADER, EmitError, emit, load_results

TINY = {"epochs": 4, "iters_per_epoch": 8, "test_per_class": 20,
        "longtail": {"N1": 40, "M1": 80, "gamma_l": 10, "gamma_u": 1}}


def tiny(**kw):
    return RunConfig.from_dict({**TINY, **kw})


# ------------------------------------------------------------------- config

def test_empty_config_is_valid_default():
    cfg = RunConfig.from_dict({}).validate()
    r = cfg.resolved()
    assert (cfg.epochs, cfg.iters_per_epoch, r["warm_epochs"], r["B"], cfg.mu) == (50, 100, 10, 32, 2)
    assert r["lr"] == 1.5e-3 and cfg.seed == 1
    assert RunConfig.from_dict({"algo": "remixmatch"}).resolved()["B"] == 64


def test_unknown_field_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"epoch": 3})


@pytest.mark.parametrize("bad", [{"warm_epochs": 9, "epochs": 5}, {"B": 0}, {"mu": 0}, {"lr": -1.0},
                                 {"algo": "mixmatch"}, {"refine": {"kind": "magic"}}, {"T": 0.0}])
def test_invalid_configs(bad):
    with pytest.raises((ConfigError, ValueError)):
        RunConfig.from_dict(bad).validate()


def test_resolved_settings_follow_refinement():
    base = RunConfig.from_dict({"refine": {"kind": "none"}}).resolved()
    assert base["hard_labels"] and base["tau"] == 0.95 and not base["extra_sup"]
    ref = RunConfig.from_dict({}).resolved()
    assert not ref["hard_labels"] and ref["tau"] == 0.0
    rb = RunConfig.from_dict({"algo": "remixmatch", "refine": {"kind": "none"}}).resolved()
    assert rb["dist_align"] and rb["sharpen"]
    rr = RunConfig.from_dict({"algo": "remixmatch"}).resolved()
    assert not rr["dist_align"] and not rr["sharpen"] and rr["extra_sup"]


def test_config_id_ignores_seed_and_output():
    a = RunConfig.from_dict({"seed": 1, "out_dir": "x"}).config_id()
    b = RunConfig.from_dict({"seed": 2, "out_dir": "y", "name": "n"}).config_id()
    assert a == b != RunConfig.from_dict({"epochs": 3}).config_id()


# ---------------------------------------------------------------- training

def test_warm_start_boundary():
    res = run_experiment(tiny(warm_epochs=2))
    assert res.phase_trace == ["base", "base", "refined", "refined"]


def test_warm_equals_epochs_only_test_refinement():
    cd_run = run_experiment(tiny(warm_epochs=4))
    base_run = run_experiment(tiny(warm_epochs=4, refine={"kind": "none"}))
    assert cd_run.phase_trace == ["base"] * 4
    # identical training; only the test-time rule differs
    assert cd_run.bias_trace == base_run.bias_trace
    assert cd_run.pseudo_trace == base_run.pseudo_trace


def test_refine_none_is_plain_base_run():
    a = run_experiment(tiny(refine={"kind": "none"}, warm_epochs=0))
    b = run_experiment(tiny(refine={"kind": "none"}, warm_epochs=4))
    assert a.phase_trace == ["unrefined"] * 4
    assert a.final == b.final and a.bias_trace == b.bias_trace


def test_run_is_deterministic():
    a, b = run_experiment(tiny()), run_experiment(tiny())
    assert a.final == b.final and a.bias_trace == b.bias_trace


def test_hidden_labels_do_not_reach_training(monkeypatch):
    ref = run_experiment(tiny(seed=3))
    real = harness.build_dataset

    def scrambled(cfg):
        task, lt, ds = real(cfg)
        ds._hidden_y = np.random.default_rng(0).permutation(ds._hidden_y)
        return task, lt, ds
    monkeypatch.setattr(harness, "build_dataset", scrambled)
    out = run_experiment(tiny(seed=3))
    assert out.final == ref.final and out.bias_trace == ref.bias_trace
    assert out.pseudo_trace != ref.pseudo_trace  # diagnostics do see them


def test_full_training_prior_needs_known_gamma():
    res = harness._run_cell(tiny(refine={"kind": "la", "la_mode": "full_training"}).to_dict())
    assert "GammaUnknown" in res.error
    ok = run_experiment(tiny(refine={"kind": "la", "la_mode": "full_training"}, oracle_override=True))
    assert ok.final["bacc"] > 0


def test_remixmatch_icon_run():
    res = run_experiment(tiny(algo="remixmatch", task={"family": "icon8x8", "C": 4},
                              longtail={"C": 4, "N1": 20, "M1": 40, "gamma_l": 5}))
    assert len(res.bias_trace) == 4 and not res.error


def test_default_desk_config_budget():
    t = time.process_time()
    res = run_experiment(RunConfig())
    assert time.process_time() - t < 300
    assert res.final["bacc"] > 0.5


def test_balanced_training_gives_flat_bias():
    res = run_experiment(RunConfig.from_dict({"longtail": {"gamma_l": 1, "gamma_u": 1}}))
    p = np.asarray(res.bias_trace[-1])
    assert p.max() - p.min() <= 0.15


def test_refined_pseudo_labels_are_more_uniform():
    cfg = RunConfig()
    res = run_experiment(cfg, keep_model=True)
    _, _, ds = harness.build_dataset(cfg)
    m = res.model
    U = ds.unlabeled().U
    probe = cd.probe_from_config(cfg.probe_cfg, ds.header)
    q = softmax(m.logits(U)).mean(axis=0)
    qs = cd.refine_pseudo_label(m, U, probe).mean(axis=0)
    kl = lambda p: float(np.sum(p * np.log(p * len(p))))
    assert kl(qs) < kl(q)


# ------------------------------------------------------------------ sweeps

def test_empty_grid():
    table, results = sweep([], tiny())
    assert table == {"rows": [], "errors": []} and results == []


def test_sweep_aggregates_and_survives_failures():
    grid = {"cells": [{}, {"refine": {"kind": "none"}}, {"refine": {"kind": "la", "la_mode": "full_training"}}],
            "seeds": [1, 2]}
    table, results = sweep(grid, tiny(), workers=1)
    assert len(results) == 6 and len(table["errors"]) == 2 and len(table["rows"]) == 2
    for row in table["rows"]:
        vals = [r.final["bacc"] for r in results if r.config_id == row["config_id"]]
        assert row["bacc_mean"] == pytest.approx(np.mean(vals), abs=1e-12)
        assert row["bacc_se"] == pytest.approx(np.std(vals, ddof=1) / np.sqrt(2), abs=1e-12)
        assert row["seeds"] == [1, 2]


def test_expand_grid_merges_nested():
    cells = expand_grid([{"longtail": {"gamma_u": 50}}], tiny(seed=7))
    assert cells[0]["longtail"] == {**TINY["longtail"], "gamma_u": 50} and cells[0]["seed"] == 7


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("CDMAD_LAB_THREADS", "3")
    assert harness.thread_cap() == 3
    monkeypatch.setenv("CDMAD_LAB_THREADS", "zero")
    assert harness.thread_cap() == 1


def test_parallel_sweep_matches_serial():
    grid = {"cells": [{}], "seeds": [1, 2]}
    serial, _ = sweep(grid, tiny(), workers=1)
    parallel, _ = sweep(grid, tiny(), workers=2)
    assert serial == parallel


# -------------------------------------------------------------------- emit

@pytest.fixture(scope="module")
def two_results():
    return [run_experiment(tiny(seed=s)) for s in (1, 2)]


def test_emit_files_and_header(tmp_path, two_results):
    emit(two_results, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) == \
        "config_id,seed,algo,refine,probe,gamma_l,gamma_u,bacc,gm,ber,acc_many,acc_medium,acc_few"
    assert len(lines) == 3
    tag = f"{two_results[0].config_id}_s1"
    for name in (f"confusion_{tag}.txt", f"bias_trace_{tag}.csv", f"bias_{tag}.svg", "summary.json"):
        assert (tmp_path / name).exists()
    svg = (tmp_path / f"bias_{tag}.svg").read_text()
    assert svg.startswith("<svg") and svg.count("epoch ") == 4


def test_emit_idempotent(tmp_path, two_results):
    emit(two_results, tmp_path)
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    emit(two_results, tmp_path)
    assert first == {p.name: p.read_bytes() for p in tmp_path.iterdir()}


def test_summary_matches_csv(tmp_path, two_results):
    emit(two_results, tmp_path)
    rows = [l.split(",") for l in (tmp_path / "metrics.csv").read_text().splitlines()[1:]]
    summary = json.loads((tmp_path / "summary.json").read_text())["rows"][0]
    for col, key in (("bacc", "bacc_mean"), ("gm", "gm_mean"), ("ber", "ber_mean"), ("acc_few", "acc_few_mean")):
        i = CSV_HEADER.index(col)
        assert summary[key] == pytest.approx(np.mean([float(r[i]) for r in rows]), abs=1e-6)


def test_emit_unwritable(tmp_path, two_results):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(EmitError):
        emit(two_results, blocker / "sub")


def test_results_round_trip(tmp_path, two_results):
    emit(two_results, tmp_path)
    back = load_results(tmp_path)
    assert [r.final["bacc"] for r in back] == [r.final["bacc"] for r in two_results]


# --------------------------------------------------------------------- cli

def test_cli_run_report_sweep(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    out = tmp_path / "out"
    assert main(["run", "--config", str(cfg), "--seed", "2", "--out", str(out),
                 "--save-dataset", str(tmp_path / "ds.bin")]) == 0
    assert "seed=2" in capsys.readouterr().out
    before = (out / "metrics.csv").read_bytes()
    assert main(["report", "--in", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == before
    assert (tmp_path / "ds.bin").stat().st_size > 0

    grid = tmp_path / "grid.json"
    grid.write_text(json.dumps({"cells": [{}, {"refine": {"kind": "none"}}], "seeds": [1]}))
    assert main(["sweep", "--config", str(cfg), "--grid", str(grid), "--out", str(tmp_path / "sw")]) == 0
    assert len((tmp_path / "sw" / "metrics.csv").read_text().splitlines()) == 3


def test_cli_bad_config(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text('{"nope": 1}')
    assert main(["run", "--config", str(cfg)]) == 2
    assert "unknown config fields" in capsys.readouterr().err
