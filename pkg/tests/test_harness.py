import copy
import json
import math

import numpy as np
import pytest

from ccl import cli
from ccl.forecaster import ASHRAE_THRESHOLD, SeasonalNaive, evaluate, save_forecaster
from ccl.harness import (
    ConfigError,
    ExperimentConfig,
    build_pretrained,
    build_seed_data,
    build_series,
    nested_subset,
    report_json,
    run_experiment,
    sweep_finetune_size,
)
from ccl.series import rolling_windows

TINY = {
    "L": 48, "T": 12, "horizons": [12, 24], "seeds": [0, 1], "eval_stride": 12,
    "data": {
        "pretrain": {"generator": {"n_series": 3, "n_days": 8, "noise_sigma": [0.1]}, "n_windows": 60},
        "real": {"generator": {"n_series": 3, "n_days": 8, "noise_sigma": [0.1, 0.4],
                               "regime_shift_prob": [0.3], "regime_shift_scale": [3, 3]},
                 "n_windows": 30},
        "simulated": {"generator": {"n_series": 3, "n_days": 8, "base_load": [20, 40],
                                    "origin": "simulated"}, "n_windows": 60},
        "targets": {"generator": {"n_series": 2, "n_days": 8}},
    },
    "pretrain": {"steps": 20, "channels": 4, "dilations": [1, 2], "head_window": 6, "batch_size": 8},
    "finetune": {"steps": 16, "batch_size": 8},
    "schedule": {"lambda0": 0.5, "total_epochs": 4},
    "encoder": {"channels": 4, "dilations": [1, 2], "dim": 8, "epochs": 2, "anchors_per_step": 8},
    "few_shot": {"steps": 3, "batch_size": 4},
}


def tiny(**over):
    raw = copy.deepcopy(TINY)
    raw.update(over)
    return ExperimentConfig.from_dict(raw)


@pytest.fixture(scope="module")
def model():
    return build_pretrained(tiny())


@pytest.fixture(scope="module")
def base(model):
    return run_experiment(tiny(), model, write=False)


# -- config -----------------------------------------------------------------------

@pytest.mark.parametrize("patch,field", [
    ({"horizons": [0]}, "horizons"),
    ({"seeds": []}, "seeds"),
    ({"fraction": 0.0}, "fraction"),
    ({"strategies": ["FT", "Oracle"]}, "strategies"),
    ({"protocols": ["two-shot"]}, "protocols"),
    ({"bogus": 1}, "bogus"),
    ({"schedule": {"lambda0": 0.0}}, "schedule.lambda0"),
    ({"schedule": {"t_grow": 9, "total_epochs": 4}}, "schedule.t_grow"),
    ({"finetune": {"steps": -1}}, "finetune.steps"),
    ({"encoder": {"widht": 3}}, "encoder.widht"),
])
def test_config_errors_name_the_field(patch, field):
    raw = copy.deepcopy(TINY)
    raw.update(patch)
    with pytest.raises(ConfigError, match=field.replace(".", r"\.")):
        ExperimentConfig.from_dict(raw)


def test_config_requires_corpora():
    raw = copy.deepcopy(TINY)
    del raw["data"]["real"]
    with pytest.raises(ConfigError, match="data.real"):
        ExperimentConfig.from_dict(raw)
    raw = copy.deepcopy(TINY)
    raw["data"]["real"]["csv"] = [{"path": "x.csv", "value_column": "v"}]
    with pytest.raises(ConfigError, match="exactly one"):
        ExperimentConfig.from_dict(raw)


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        ExperimentConfig.load(tmp_path / "nope.json")


def test_config_hash_ignores_output_location():
    assert tiny().content_hash() == tiny(output_dir="/tmp/x", workers=3).content_hash()
    assert tiny().content_hash() != tiny(seeds=[5]).content_hash()


# -- corpora ------------------------------------------------------------------------

def test_corpora_are_seeded_and_disjoint():
    cfg = tiny()
    a = build_series(cfg.corpus("real"), "real", 0)
    assert [s.values.tobytes() for s in a] == [s.values.tobytes() for s in
                                               build_series(cfg.corpus("real"), "real", 0)]
    b = build_series(cfg.corpus("real"), "real", 1)
    assert a[0].values.tobytes() != b[0].values.tobytes()
    targets = build_series(cfg.corpus("targets"), "targets", 0)
    assert not {s.id for s in a} & {s.id for s in targets}


def test_seed_data_sizes_and_origins():
    d = build_seed_data(tiny(), 0)
    assert len(d.reals) == 30 and len(d.simulateds) == 60
    assert all(w.origin.value == "real" for w in d.reals)
    assert all(w.origin.value == "simulated" for w in d.simulateds)


@pytest.mark.parametrize("n", [1, 7, 100])
def test_nested_subset(n):
    small, mid, full = (nested_subset(n, f, seed=3) for f in (0.25, 0.5, 1.0))
    assert set(small) <= set(mid) <= set(full)
    assert full.tolist() == list(range(n))
    assert len(mid) == max(1, math.ceil(n * 0.5 - 1e-9))
    with pytest.raises(ConfigError):
        nested_subset(n, 1.5, 0)


# -- reports ------------------------------------------------------------------------

def test_report_shape(base):
    report, timing = base
    cells = report["cells"]
    assert len(cells) == 4 * 2 * 2 * 2
    assert all(c["status"] == "ok" for c in cells)
    for c in cells:
        assert c["ashrae_pass"] == (c["aggregate"] < ASHRAE_THRESHOLD)
        assert c["aggregate"] == pytest.approx(np.mean(list(c["per_dataset"].values())), abs=1e-15)
    assert "started_at" in timing and "started_at" not in report_json(report)


def test_improvement_matches_aggregates(base):
    cells = base[0]["cells"]
    ref = {(c["horizon"], c["protocol"], c["seed"]): c["aggregate"]
           for c in cells if c["strategy"] == "Pretrained"}
    for c in cells:
        r = ref[(c["horizon"], c["protocol"], c["seed"])]
        assert abs(c["improvement"] - (r - c["aggregate"]) / r) <= 1e-12


def test_pretrained_cell_is_direct_evaluation(model, base):
    cfg = tiny()
    targets = build_seed_data(cfg, 0).targets
    for c in base[0]["cells"]:
        if c["strategy"] == "Pretrained" and c["seed"] == 0 and c["protocol"] == "zero-shot":
            for s in targets:
                ws = rolling_windows(s, cfg.L, c["horizon"], cfg.eval_stride)
                assert c["per_dataset"][s.id] == evaluate(model, ws).aggregate


def test_collapse_gives_identical_cells(model):
    cfg = tiny(strategies=["FT", "CCL_FT"], schedule={"lambda0": 1.0, "total_epochs": 4})
    report, _ = run_experiment(cfg, model, write=False)
    by = {}
    for c in report["cells"]:
        by.setdefault((c["horizon"], c["protocol"], c["seed"]), {})[c["strategy"]] = c["aggregate"]
    for pair in by.values():
        assert pair["FT"] == pair["CCL_FT"]


def test_rerun_is_byte_identical(model, base, tmp_path):
    cfg = tiny(output_dir=str(tmp_path / "a"))
    report, _ = run_experiment(cfg, model)
    assert report_json(report) == report_json(base[0])
    written = (tmp_path / "a" / "report.json").read_text()
    assert written == report_json(report)
    assert (tmp_path / "a" / "cells.csv").read_text().count("\n") == 1 + len(report["cells"])
    assert json.loads((tmp_path / "a" / "timing.json").read_text())["total_seconds"] > 0


def test_workers_do_not_change_results(model, base):
    report, _ = run_experiment(tiny(workers=2), model, write=False)
    assert report["cells"] == base[0]["cells"]


def test_failed_cells_do_not_abort(model):
    # 8 days cannot hold a 48 + 200 step window; the 12-step cells still run
    report, _ = run_experiment(tiny(horizons=[12, 200], seeds=[0]), model, write=False)
    status = {(c["strategy"], c["horizon"]): c["status"] for c in report["cells"]}
    assert all(v == "ok" for (s, h), v in status.items() if h == 12)
    assert all(v == "failed" for (s, h), v in status.items() if h == 200)
    assert all("error" in c for c in report["cells"] if c["status"] == "failed")


# -- sweep ----------------------------------------------------------------------------

def test_sweep_rows_and_identity(model, base):
    rows, reports = sweep_finetune_size(tiny(), [0.5, 1.0], model, write=False)
    assert [(r["fraction"], r["strategy"]) for r in rows] == [
        (0.5, "FT"), (0.5, "CCL_FT"), (1.0, "FT"), (1.0, "CCL_FT")]
    full = {(c["strategy"], c["horizon"], c["protocol"], c["seed"]): c["aggregate"]
            for c in reports[1.0]["cells"]}
    for c in base[0]["cells"]:
        if c["strategy"] in ("FT", "CCL_FT"):
            assert full[(c["strategy"], c["horizon"], c["protocol"], c["seed"])] == c["aggregate"]
    assert "median_improvement_over_ft" in rows[1]


def test_sweep_subsets_are_nested():
    small = build_seed_data(tiny(fraction=0.25), 0)
    mid = build_seed_data(tiny(fraction=0.5), 0)
    assert {w.key for w in small.reals} <= {w.key for w in mid.reals}
    assert {w.key for w in small.simulateds} <= {w.key for w in mid.simulateds}


def test_sweep_rejects_bad_fractions(model):
    with pytest.raises(ConfigError):
        sweep_finetune_size(tiny(), [1.0, 0.5], model)
    with pytest.raises(ConfigError):
        sweep_finetune_size(tiny(), [0.0], model)


# -- command line ---------------------------------------------------------------------

@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps(TINY))
    return path


def test_cli_experiment_twice_is_identical(config_file, tmp_path, model):
    ckpt = tmp_path / "m.json"
    model.save(ckpt)
    for name in ("a", "b"):
        code = cli.main(["experiment", "--config", str(config_file), "--seed", "7",
                         "--model", str(ckpt), "--output-dir", str(tmp_path / name)])
        assert code == 0
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert json.loads(a)["config"]["seeds"] == [7]


def test_cli_config_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({**TINY, "horizons": [-3]}))
    assert cli.main(["experiment", "--config", str(bad)]) == 1
    assert "horizons" in capsys.readouterr().err
    bad.write_text("{not json")
    assert cli.main(["experiment", "--config", str(bad)]) == 1


def test_cli_all_cells_failed_exit_code(config_file, tmp_path, model):
    ckpt = tmp_path / "m.json"
    model.save(ckpt)
    raw = {**TINY, "horizons": [500], "strategies": ["Pretrained"], "seeds": [0]}
    config_file.write_text(json.dumps(raw))
    assert cli.main(["experiment", "--config", str(config_file), "--model", str(ckpt),
                     "--output-dir", str(tmp_path / "o")]) == 2


def test_cli_data_commands(tmp_path, capsys):
    fam = {"n_series": 2, "n_days": 6, "noise_sigma": [0.0], "daily_amplitude": [1, 2]}
    (tmp_path / "fam.json").write_text(json.dumps(fam))
    assert cli.main(["gen-data", "--config", str(tmp_path / "fam.json"),
                     "--out", str(tmp_path / "data")]) == 0
    csvs = sorted(str(p) for p in (tmp_path / "data").glob("*.csv"))
    assert len(csvs) == 2

    # a noiseless daily cycle is forecast exactly by repeating yesterday
    naive = tmp_path / "naive.json"
    save_forecaster(SeasonalNaive(48, 12, season=24), naive)
    assert cli.main(["evaluate", "--model", str(naive), "--data", *csvs, "--horizon", "12",
                     "--out", str(tmp_path / "eval.json")]) == 0
    assert json.loads((tmp_path / "eval.json").read_text())["aggregate"] == pytest.approx(0.0, abs=1e-12)

    out = tmp_path / "scores.csv"
    assert cli.main(["measure-difficulty", "--model", str(naive), "--data", csvs[0],
                     "--stride", "6", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "sample,difficulty,provenance"
    assert len(rows) - 1 == len(range(0, 6 * 24 - 60 + 1, 6))


def test_cli_training_commands(tmp_path, model):
    fam = {"n_series": 2, "n_days": 8, "noise_sigma": [0.1, 0.5],
           "regime_shift_prob": [0.3], "regime_shift_scale": [3, 3]}
    (tmp_path / "fam.json").write_text(json.dumps(fam))
    cli.main(["gen-data", "--config", str(tmp_path / "fam.json"), "--out", str(tmp_path / "d")])
    csvs = sorted(str(p) for p in (tmp_path / "d").glob("*.csv"))
    ckpt = tmp_path / "m.json"
    model.save(ckpt)
    enc_cfg = tmp_path / "enc.json"
    enc_cfg.write_text(json.dumps({"channels": 4, "dilations": [1], "dim": 8, "epochs": 1}))
    assert cli.main(["train-encoder", "--model", str(ckpt), "--config", str(enc_cfg),
                     "--data", *csvs, "--stride", "4", "--out", str(tmp_path / "enc.out.json")]) == 0
    assert cli.main(["finetune", "--model", str(ckpt), "--data", *csvs, "--steps", "3",
                     "--batch-size", "4", "--out", str(tmp_path / "tuned.json")]) == 0
    assert (tmp_path / "tuned.json").exists()
    assert cli.main(["finetune", "--model", str(tmp_path / "missing.json"), "--data", *csvs,
                     "--out", str(tmp_path / "x.json")]) == 1


def test_cli_pretrain(config_file, tmp_path):
    out = tmp_path / "m.json"
    assert cli.main(["pretrain", "--config", str(config_file), "--steps", "2", "--out", str(out)]) == 0
    assert out.exists()
