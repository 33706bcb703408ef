import csv
import io
import json

import pytest
import yaml

from fedarch.cli import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_RUNTIME,
    main,
    plotdata,
    rounds_csv,
    run_experiment,
    sweep,
)
from fedarch.config import (
    AXIS_ALIASES,
    ConfigError,
    dump_config,
    is_numeric_field,
    load_config,
    load_config_text,
    parse_config,
    preset,
    preset_names,
    with_value,
)
from fedarch.data import SyntheticSpec, generate_synthetic, write_flds
from fedarch.metrics import transmitted_size

SMALL = {
    "name": "small",
    "dataset": {"samples_per_class": 10, "image_size": 8, "noise_std": 1.0},
    "partition": {"preset": "split3", "num_clients": 5},
    "model": {"arch": "mlp", "image_size": 8, "hidden": [16]},
    "federation": {"algorithm": "fedavg", "rounds": 3, "batch_size": 8,
                   "schedule": {"base_lr": 0.05, "warmup_steps": 2}},
    "report": {"target": 0.3},
}


def small(**sections):
    data = yaml.safe_load(yaml.safe_dump(SMALL))
    for key, value in sections.items():
        if isinstance(value, dict):
            data[key].update(value)
        else:
            data[key] = value
    return data


@pytest.fixture
def config_file(tmp_path):
    def write(data, name="cfg.yaml"):
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data))
        return str(path)

    return write


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


class TestConfigParsing:
    def test_defaults_parse(self):
        cfg = parse_config({})
        assert cfg.federation.algorithm == "fedavg" and cfg.partition.num_clients == 5

    def test_unknown_field_reports_dotted_path(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"federation": {"schedule": {"base_rate": 0.1}}})
        assert info.value.errors[0][0] == "federation.schedule.base_rate"

    def test_wrong_type_reports_path(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"federation": {"rounds": "many"}})
        assert info.value.errors[0][0] == "federation.rounds"

    def test_share_requires_fraction(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"federation": {"algorithm": "fedavg-share"}})
        assert ("federation.share_fraction" in [p for p, _ in info.value.errors])

    def test_all_violations_reported_together(self):
        with pytest.raises(ConfigError) as info:
            parse_config({"federation": {"local_epochs": 0, "sample_fraction": 2.0}})
        paths = [p for p, _ in info.value.errors]
        assert "federation.local_epochs" in paths and "federation.sample_fraction" in paths

    def test_model_must_match_dataset(self):
        with pytest.raises(ConfigError, match="model.image_size"):
            parse_config({"dataset": {"image_size": 8}})

    def test_bad_target(self):
        with pytest.raises(ConfigError, match="report.target"):
            parse_config({"report": {"target": "soon"}})

    def test_dump_round_trips(self):
        cfg = preset("cifar-like-split2-cnn-gn-fedprox")
        assert load_config_text(dump_config(cfg)) == cfg

    def test_invalid_yaml(self):
        with pytest.raises(ConfigError):
            load_config_text("federation: [unclosed")

    def test_missing_source(self):
        with pytest.raises(ConfigError):
            load_config("/nonexistent/cfg.yaml")


class TestPresets:
    def test_grid_is_complete(self):
        names = set(preset_names())
        for part in ("iid", "split2", "split3"):
            for model in ("cnn-bn", "cnn-gn", "vit"):
                for alg in ("fedavg", "fedavgm", "fedprox", "fedavg-share", "cwt", "cwt-ewc"):
                    assert f"cifar-like-{part}-{model}-{alg}" in names
        assert "cifar-like-split3-vit-fedavg-e-sweep" in names
        assert any("edge-case" in n for n in names)

    @pytest.mark.parametrize("name", ["cifar-like-iid-vit-fedavgm", "cifar-like-split3-cnn-bn-fedprox"])
    def test_reference_hyperparameters(self, name):
        fed = preset(name).federation
        assert fed.beta == 0.3 if fed.algorithm == "fedavgm" else fed.mu == 0.1
        assert fed.clip_norm == 1.0 and fed.local_epochs == 1 and fed.batch_size == 32

    def test_every_preset_validates(self):
        for name in preset_names():
            preset(name)

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            preset("cifar-like-split9-vit-fedavg")

    def test_e_sweep_preset(self):
        cfg = preset("cifar-like-split3-vit-fedavg-e-sweep")
        assert cfg.sweep.axis == "E" and cfg.sweep.values == [1, 5, 10]


class TestFieldAccess:
    @pytest.mark.parametrize("path", list(AXIS_ALIASES) + ["federation.clip_norm", "dataset.noise_std"])
    def test_numeric_fields(self, path):
        assert is_numeric_field(path)

    @pytest.mark.parametrize("path", ["federation.algorithm", "model.arch", "nope", "federation.schedule"])
    def test_non_numeric_fields(self, path):
        assert not is_numeric_field(path)

    def test_with_value_alias(self):
        assert with_value(parse_config(small()), "E", 3).federation.local_epochs == 3

    def test_with_value_coerces_integral_float(self):
        cfg = with_value(parse_config(small()), "rounds", 4.0)
        assert cfg.federation.rounds == 4 and isinstance(cfg.federation.rounds, int)

    def test_with_value_revalidates(self):
        with pytest.raises(ConfigError):
            with_value(parse_config(small()), "E", 0)


class TestRunExperiment:
    def test_writes_three_files_and_consistent_summary(self, tmp_path):
        summary = run_experiment(parse_config(small()), tmp_path / "out")
        assert sorted(p.name for p in (tmp_path / "out").iterdir()) == ["forgetting.csv", "rounds.csv", "summary.json"]
        on_disk = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert on_disk == json.loads(json.dumps(summary))
        rows = read_rows(tmp_path / "out" / "rounds.csv")
        assert rows[0][:2] == ["round", "global_test_acc"] and rows[0][-3:] == [
            "cumulative_transmitted_params", "mean_weight_divergence", "wall_ms"]
        assert len(rows) == 4
        # recompute the headline communication cost from the written files
        accs = [float(r[1]) for r in rows[1:]]
        hit = next((i + 1 for i, a in enumerate(accs) if a >= on_disk["target_accuracy"]), None)
        expected = "inf" if hit is None else transmitted_size(hit, on_disk["param_count"])
        assert on_disk["transmitted_size"] == expected
        assert on_disk["rounds_to_target"] == ("inf" if hit is None else hit)

    def test_never_reached_serializes_inf(self, tmp_path):
        summary = run_experiment(parse_config(small(report={"target": 1.0})), tmp_path)
        text = (tmp_path / "summary.json").read_text()
        assert summary["rounds_to_target"] == "inf" and '"transmitted_size": "inf"' in text

    def test_byte_identical_reruns(self, tmp_path):
        cfg = parse_config(small())
        run_experiment(cfg, tmp_path / "a")
        run_experiment(cfg, tmp_path / "b")
        assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()

    def test_config_echo_reproduces(self, tmp_path):
        run_experiment(parse_config(small()), tmp_path / "a")
        echoed = load_config(str(tmp_path / "a" / "summary.json"))
        run_experiment(echoed, tmp_path / "b")
        assert (tmp_path / "a" / "rounds.csv").read_bytes() == (tmp_path / "b" / "rounds.csv").read_bytes()

    def test_cwt_writes_forgetting_rows(self, tmp_path):
        run_experiment(parse_config(small(federation={"algorithm": "cwt"})), tmp_path)
        rows = read_rows(tmp_path / "forgetting.csv")
        assert len(rows) == 1 + 3 * 5
        assert [int(r[1]) for r in rows[1:6]] == [0, 1, 2, 3, 4]

    def test_auto_target_runs_baseline(self, tmp_path):
        summary = run_experiment(parse_config(small(report={"target": "auto"})), tmp_path)
        assert summary["target_accuracy"] == pytest.approx(0.95 * summary["baseline_accuracy"])

    def test_flds_source(self, tmp_path):
        ds = generate_synthetic(SyntheticSpec(samples_per_class=10, image_size=8))
        write_flds(ds, tmp_path / "d.flds")
        cfg = parse_config(small(dataset={"source": "flds", "path": str(tmp_path / "d.flds")}))
        assert run_experiment(cfg, tmp_path / "o")["num_clients"] == 5

    def test_rounds_csv_formatting(self, tmp_path):
        run_experiment(parse_config(small()), tmp_path)
        text = (tmp_path / "rounds.csv").read_text()
        body = list(csv.reader(io.StringIO(text)))[1:]
        for row in body:
            assert float(row[1]) == float(repr(float(row[1])))
            assert row[-1] == "0"


class TestSweepAndPlotdata:
    def test_sweep_directories_and_index(self, tmp_path):
        index = sweep(parse_config(small()), "E", [1, 2], tmp_path)
        assert [r["dir"] for r in index["runs"]] == ["E=1", "E=2"]
        assert (tmp_path / "E=1" / "rounds.csv").exists() and (tmp_path / "E=2" / "rounds.csv").exists()
        assert json.loads((tmp_path / "sweep_index.json").read_text())["axis"] == "federation.local_epochs"

    def test_zero_mu_point_reproduces_fedavg(self, tmp_path):
        base = parse_config(small())
        run_experiment(base, tmp_path / "plain")
        sweep(parse_config(small(federation={"algorithm": "fedprox"})), "mu", [0.0, 0.1], tmp_path / "s")
        assert (tmp_path / "plain" / "rounds.csv").read_bytes() == (tmp_path / "s" / "mu=0.0" / "rounds.csv").read_bytes()

    def test_non_numeric_axis(self, tmp_path):
        with pytest.raises(ConfigError):
            sweep(parse_config(small()), "federation.algorithm", [1], tmp_path)

    def test_plotdata_rows_and_values(self, tmp_path):
        run_experiment(parse_config(small()), tmp_path / "a")
        run_experiment(parse_config(small(federation={"rounds": 2})), tmp_path / "b")
        text, problems = plotdata([tmp_path / "a", tmp_path / "b"])
        rows = list(csv.reader(io.StringIO(text)))
        assert problems == [] and rows[0] == ["run_id", "round", "metric", "value"]
        acc_rows = [r for r in rows[1:] if r[2] == "global_test_acc"]
        assert len(acc_rows) == 3 + 2
        # values copied verbatim from the sources
        for run_id in ("a", "b"):
            src = read_rows(tmp_path / run_id / "rounds.csv")
            assert [r[3] for r in acc_rows if r[0] == run_id] == [r[1] for r in src[1:]]
        per_run = [len(read_rows(tmp_path / d / "rounds.csv")[0]) - 2 for d in ("a", "b")]
        assert len(rows) - 1 == per_run[0] * 3 + per_run[1] * 2

    def test_plotdata_skips_bad_directory(self, tmp_path):
        run_experiment(parse_config(small()), tmp_path / "a")
        (tmp_path / "bad").mkdir()
        (tmp_path / "bad" / "rounds.csv").write_text("garbage\n1,2,3\n")
        text, problems = plotdata([tmp_path / "a", tmp_path / "bad", tmp_path / "missing"])
        assert len(problems) == 2 and text.count("\na,") > 0


class TestMain:
    def test_validate_ok(self, config_file, capsys):
        assert main(["validate", config_file(small())]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "ok"

    def test_invalid_config_exit_two(self, config_file, capsys):
        code = main(["validate", config_file(small(federation={"local_epochs": 0}))])
        assert code == EXIT_CONFIG
        assert "federation.local_epochs" in capsys.readouterr().err

    def test_unknown_command_exit_two(self):
        assert main(["launch"]) == EXIT_CONFIG

    def test_run_with_override(self, config_file, tmp_path, capsys):
        code = main(["run", config_file(small()), "--output", str(tmp_path / "o"), "--set", "rounds=2"])
        assert code == EXIT_OK
        assert len(read_rows(tmp_path / "o" / "rounds.csv")) == 3
        assert "final_accuracy" in json.loads(capsys.readouterr().out)

    def test_bad_override(self, config_file):
        assert main(["validate", config_file(small()), "--set", "federation.nope=1"]) == EXIT_CONFIG

    def test_runtime_failure_exit_one(self, config_file, tmp_path, capsys):
        path = config_file(small(dataset={"source": "flds", "path": str(tmp_path / "absent.flds")}))
        assert main(["run", path, "--output", str(tmp_path / "o")]) == EXIT_RUNTIME
        assert json.loads(capsys.readouterr().err)["error"]

    def test_output_root_env(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("FEDARCH_OUTPUT_ROOT", str(tmp_path))
        assert main(["run", config_file(small(report={"output_dir": "rel", "target": 0.3}))]) == EXIT_OK
        assert (tmp_path / "rel" / "summary.json").exists()

    def test_sweep_command(self, config_file, tmp_path, capsys):
        code = main(["sweep", config_file(small()), "--axis", "mu", "--values", "0.001,0.01,0.1,1",
                     "--set", "federation.algorithm=fedprox", "--output", str(tmp_path)])
        assert code == EXIT_OK
        assert len(json.loads(capsys.readouterr().out)["runs"]) == 4

    def test_sweep_unknown_field(self, config_file, tmp_path):
        code = main(["sweep", config_file(small()), "--axis", "federation.warp", "--values", "1", "--output", str(tmp_path)])
        assert code == EXIT_CONFIG

    def test_plotdata_all_missing(self, tmp_path):
        assert main(["plotdata", str(tmp_path / "x")]) == EXIT_RUNTIME

    def test_presets_listing_and_dump(self, capsys):
        assert main(["presets"]) == EXIT_OK
        assert "cifar-like-split3-vit-fedavg" in capsys.readouterr().out.split()
        assert main(["presets", "--dump", "cifar-like-iid-cnn-bn-cwt"]) == EXIT_OK
        assert yaml.safe_load(capsys.readouterr().out)["federation"]["algorithm"] == "cwt"

    def test_preset_smoke_writes_all_files(self, tmp_path):
        code = main(["run", "cifar-like-split3-vit-fedavg", "--output", str(tmp_path),
                     "--set", "rounds=2", "--set", "report.target=0.5"])
        assert code == EXIT_OK
        assert {p.name for p in tmp_path.iterdir()} == {"rounds.csv", "forgetting.csv", "summary.json"}


def test_rounds_csv_omits_clients_without_val(tmp_path):
    from fedarch.federation import run
    from fedarch.cli import build_dataset, build_partition

    cfg = parse_config(small(partition={"preset": "edge_case", "num_clients": 1},
                             federation={"sample_fraction": 0.05, "rounds": 1, "batch_size": 1}))
    dataset = build_dataset(cfg)
    result = run(cfg.federation, build_partition(cfg, dataset), cfg.model, dataset)
    assert rounds_csv(result).splitlines()[0] == (
        "round,global_test_acc,cumulative_transmitted_params,mean_weight_divergence,wall_ms")
