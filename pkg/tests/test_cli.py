"""Command-line driver: config resolution, artifacts, exit codes, reports."""

import contextlib
import io
import json
import re
import shutil
from pathlib import Path

import pytest

from protoseg.cli import CliError, config_digest, default_config, main, resolve_config
from protoseg.data import generate_dataset
from protoseg.metrics import CSV_COLUMNS
from protoseg.trainer import Checkpoint


def run_cli(argv):
    """Invoke main() in process, capturing stdout/stderr."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def error_record(stderr: str) -> dict:
    return json.loads(stderr.strip().splitlines()[-1])


def run_dirs(root: Path) -> set:
    return set(root.iterdir()) if root.exists() else set()


def newest_run(root: Path, before: set) -> Path:
    created = run_dirs(root) - before
    assert len(created) == 1
    return created.pop()


@pytest.fixture(scope="module")
def dataset_root(tmp_path_factory):
    root = tmp_path_factory.getbasetemp() / "tiny_ds"
    if not (root / "meta.json").exists():
        generate_dataset(root, num_images=192, image_size=32, seed=99)
    return root


@pytest.fixture(scope="module")
def out_root(tmp_path_factory):
    return tmp_path_factory.mktemp("cli_runs")


@pytest.fixture(scope="module")
def pretrain_run(dataset_root, out_root):
    before = run_dirs(out_root)
    code, stdout, stderr = run_cli([
        "pretrain", "--dataset", str(dataset_root), "--out", str(out_root),
        "--episodes", "2", "--seed", "5"])
    assert code == 0, stderr
    return newest_run(out_root, before)


@pytest.fixture(scope="module")
def finetune_run(dataset_root, out_root, pretrain_run):
    before = run_dirs(out_root)
    code, _, stderr = run_cli([
        "finetune", "--checkpoint", str(pretrain_run), "--dataset", str(dataset_root),
        "--out", str(out_root), "--episodes", "2", "--seed", "5", "--attention", "sa"])
    assert code == 0, stderr
    return newest_run(out_root, before)


def eval_args(checkpoint, dataset_root, out_root):
    return ["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset_root),
            "--out", str(out_root), "--ways", "2", "--shots", "2",
            "--episodes", "4", "--seed", "5"]


@pytest.fixture(scope="module")
def eval_run(dataset_root, out_root, pretrain_run):
    before = run_dirs(out_root)
    code, stdout, stderr = run_cli(eval_args(pretrain_run, dataset_root, out_root))
    assert code == 0, stderr
    return newest_run(out_root, before), stdout


@pytest.fixture(scope="module")
def eval_run_ft(dataset_root, out_root, finetune_run):
    before = run_dirs(out_root)
    code, _, stderr = run_cli(eval_args(finetune_run, dataset_root, out_root))
    assert code == 0, stderr
    return newest_run(out_root, before)


class TestConfigResolution:
    def test_defaults_cover_every_section(self):
        config = default_config()
        assert set(config) == {"dataset", "preset", "out", "seed", "attention",
                               "synth", "pretrain", "finetune", "eval"}
        assert config["pretrain"]["episode_spec"]["n_ways"] == 8
        assert config["finetune"]["episode_spec"]["n_ways"] == 2

    def test_digest_is_stable_and_seed_sensitive(self):
        base = default_config()
        assert config_digest(base) == config_digest(default_config())
        other = default_config()
        other["seed"] = 43
        assert config_digest(other) != config_digest(base)

    def test_set_overrides_parse_json_values(self):
        config = resolve_config(None, ["pretrain.episodes=7", "attention=sa"], {})
        assert config["pretrain"]["episodes"] == 7
        assert config["attention"] == "sa"

    def test_config_file_merges(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"seed": 9, "eval": {"episodes": 12}}))
        config = resolve_config(path, [], {})
        assert config["seed"] == 9
        assert config["eval"]["episodes"] == 12
        assert config["eval"]["split"] == "test"  # untouched default

    def test_unknown_key_names_the_dotted_path(self):
        with pytest.raises(CliError) as exc:
            resolve_config(None, ["pretrain.episode_spec.n_waysz=3"], {})
        assert exc.value.code == 2
        assert exc.value.record["key"] == "pretrain.episode_spec.n_waysz"

    def test_section_assignment_rejected(self):
        with pytest.raises(CliError) as exc:
            resolve_config(None, ["pretrain=5"], {})
        assert exc.value.code == 2

    def test_bad_preset_rejected(self):
        with pytest.raises(CliError) as exc:
            resolve_config(None, ["preset=mega"], {})
        assert exc.value.code == 2
        assert exc.value.record["key"] == "preset"


class TestSynth:
    def test_writes_dataset_and_provenance(self, tmp_path):
        ds = tmp_path / "ds"
        out = tmp_path / "out"
        code, stdout, _ = run_cli(["synth", "--count", "90", "--size", "16",
                                   "--seed", "3", "--dataset", str(ds), "--out", str(out)])
        assert code == 0
        assert stdout.strip() == str(ds)
        assert (ds / "meta.json").exists()
        meta = json.loads((ds / "meta.json").read_text())
        assert meta["image_size"] == 16 and meta["seed"] == 3
        run = next(out.iterdir())
        synth = json.loads((run / "synth.json").read_text())
        config = json.loads((run / "config.json").read_text())
        assert synth["digest"] == config["digest"]
        assert synth["seed"] == 3 and config["seed"] == 3
        assert synth["count"] == 90

    def test_default_dataset_location_inside_run_dir(self, tmp_path):
        out = tmp_path / "out"
        code, stdout, _ = run_cli(["synth", "--count", "90", "--size", "16",
                                   "--out", str(out)])
        assert code == 0
        run = next(out.iterdir())
        assert Path(stdout.strip()) == run / "dataset"
        assert (run / "dataset" / "meta.json").exists()

    def test_too_few_images_is_a_contract_error(self, tmp_path):
        code, _, stderr = run_cli(["synth", "--count", "50", "--size", "16",
                                   "--out", str(tmp_path / "out")])
        assert code == 1
        assert error_record(stderr)["error"] == "contract-violation"


class TestTrainingCommands:
    def test_pretrain_artifacts(self, pretrain_run):
        assert (pretrain_run / "checkpoint.npz").exists()
        config = json.loads((pretrain_run / "config.json").read_text())
        assert config["command"] == "pretrain"
        header = Checkpoint.load(pretrain_run / "checkpoint.npz").header
        assert header["stage"] == "pretrain"
        assert header["experiment_digest"] == config["digest"]
        assert header["seed"] == 5
        lines = (pretrain_run / "log.jsonl").read_text().splitlines()
        meta = json.loads(lines[0])
        assert meta == {"record": "meta", "digest": config["digest"], "seed": 5}
        assert [json.loads(l)["episode"] for l in lines[1:]] == [0, 1]

    def test_run_id_embeds_digest_prefix(self, pretrain_run):
        digest = json.loads((pretrain_run / "config.json").read_text())["digest"]
        assert pretrain_run.name.endswith(digest[:8])

    def test_unknown_key_exits_2_without_artifacts(self, dataset_root, out_root):
        before = run_dirs(out_root)
        code, _, stderr = run_cli(["pretrain", "--dataset", str(dataset_root),
                                   "--out", str(out_root), "--set", "lr=5"])
        assert code == 2
        assert error_record(stderr) == {"error": "unknown-config-key", "key": "lr"}
        assert run_dirs(out_root) == before

    def test_missing_dataset_exits_3(self, tmp_path):
        code, _, stderr = run_cli(["pretrain", "--dataset", str(tmp_path / "nope"),
                                   "--out", str(tmp_path / "out")])
        assert code == 3
        record = error_record(stderr)
        assert record["error"] == "missing-dataset"
        assert record["path"].endswith("nope")

    def test_synth_flag_generates_dataset_in_run_dir(self, tmp_path):
        out = tmp_path / "out"
        code, _, stderr = run_cli(["pretrain", "--out", str(out), "--episodes", "1",
                                   "--synth", "--set", "synth.count=90",
                                   "--set", "synth.size=32"])
        assert code == 0, stderr
        run = next(out.iterdir())
        assert (run / "dataset" / "meta.json").exists()
        assert (run / "checkpoint.npz").exists()

    def test_finetune_attaches_attention(self, finetune_run):
        header = Checkpoint.load(finetune_run / "checkpoint.npz").header
        assert header["stage"] == "finetune"
        assert header["attention_variant"] == "sa"
        assert any(k.startswith("attention/")
                   for k in Checkpoint.load(finetune_run / "checkpoint.npz").arrays)

    def test_finetune_missing_checkpoint_exits_1(self, dataset_root, tmp_path):
        code, _, stderr = run_cli(["finetune", "--checkpoint", str(tmp_path / "no.npz"),
                                   "--dataset", str(dataset_root),
                                   "--out", str(tmp_path / "out")])
        assert code == 1
        assert error_record(stderr)["error"] == "missing-checkpoint"


class TestEval:
    def test_artifacts_and_stdout_row(self, eval_run):
        run, stdout = eval_run
        payload = json.loads((run / "eval.json").read_text())
        assert payload["columns"] == list(CSV_COLUMNS)
        assert payload["n_train"] == 8  # pretrain checkpoint default ways
        assert payload["n_test"] == 2 and payload["k"] == 2
        assert payload["episodes"] == 4 and len(payload["per_episode"]) == 4
        assert set(payload["mean"]) == set(CSV_COLUMNS)
        config = json.loads((run / "config.json").read_text())
        assert payload["digest"] == config["digest"]
        header, row = (run / "eval.csv").read_text().splitlines()
        assert header == "n_train,n_test,k," + ",".join(CSV_COLUMNS) + ",seed,digest"
        assert row.split(",")[-1] == payload["digest"]
        assert stdout.splitlines()[0] == header
        assert stdout.splitlines()[1] == row

    def test_rerun_reproduces_identical_numbers(self, dataset_root, out_root,
                                                pretrain_run, eval_run):
        run, _ = eval_run
        before = run_dirs(out_root)
        code, _, _ = run_cli(eval_args(pretrain_run, dataset_root, out_root))
        assert code == 0
        again = newest_run(out_root, before)
        first = json.loads((run / "eval.json").read_text())
        second = json.loads((again / "eval.json").read_text())
        assert first["mean"] == second["mean"]
        assert first["per_episode"] == second["per_episode"]

    def test_infeasible_shots_fail_with_record(self, dataset_root, pretrain_run, tmp_path):
        code, _, stderr = run_cli(["eval", "--checkpoint", str(pretrain_run),
                                   "--dataset", str(dataset_root),
                                   "--out", str(tmp_path / "out"),
                                   "--ways", "2", "--shots", "25", "--episodes", "1"])
        assert code == 1
        assert error_record(stderr)["error"] == "contract-violation"


class TestReport:
    def test_markdown_marks_column_maxima(self, eval_run, eval_run_ft, out_root):
        run, _ = eval_run
        code, stdout, _ = run_cli(["report", str(run), str(eval_run_ft),
                                   "--out", str(out_root), "--format", "markdown"])
        assert code == 0
        lines = stdout.splitlines()
        header = [c.strip() for c in lines[0].strip("|").split("|")]
        assert header == ["Run", "n_train", "n_test", "k", *CSV_COLUMNS, "Seed", "Digest"]
        body = [[c.strip() for c in line.strip("|").split("|")] for line in lines[2:]]
        assert len(body) == 2
        for offset, column in enumerate(CSV_COLUMNS):
            cells = [row[4 + offset] for row in body]
            values = [float(c.strip("*")) for c in cells]
            for cell, value in zip(cells, values):
                assert cell.startswith("**") == (value == max(values))

    def test_markdown_written_into_fresh_run_dir(self, eval_run, out_root):
        run, _ = eval_run
        before = run_dirs(out_root)
        code, stdout, _ = run_cli(["report", str(run), "--out", str(out_root)])
        assert code == 0
        report_dir = newest_run(out_root, before)
        assert (report_dir / "report.md").read_text() == stdout
        config = json.loads((report_dir / "config.json").read_text())
        assert config["config"]["runs"] == [str(run)]

    def test_csv_appends_best_row(self, eval_run, eval_run_ft, out_root):
        run, _ = eval_run
        code, stdout, _ = run_cli(["report", str(run), str(eval_run_ft),
                                   "--out", str(out_root), "--format", "csv"])
        assert code == 0
        lines = stdout.splitlines()
        assert lines[0] == "run,n_train,n_test,k," + ",".join(CSV_COLUMNS) + ",seed,digest"
        best = lines[-1].split(",")
        assert best[0] == "best"
        for offset in range(len(CSV_COLUMNS)):
            column = [float(line.split(",")[4 + offset]) for line in lines[1:-1]]
            assert float(best[4 + offset]) == pytest.approx(max(column), abs=1e-6)

    def test_json_single_run_keys_metrics_by_name(self, eval_run, out_root):
        run, _ = eval_run
        code, stdout, _ = run_cli(["report", str(run), "--out", str(out_root),
                                   "--format", "json"])
        assert code == 0
        payload = json.loads(stdout)
        (row,) = payload["rows"]
        assert set(CSV_COLUMNS) <= set(row)
        assert {"run", "seed", "digest", "n_train", "n_test", "k"} <= set(row)
        assert payload["best"] == {c: row[c] for c in CSV_COLUMNS}

    def test_directory_without_eval_output_is_named(self, pretrain_run, out_root):
        code, _, stderr = run_cli(["report", str(pretrain_run), "--out", str(out_root)])
        assert code == 1
        record = error_record(stderr)
        assert record["error"] == "missing-eval-output"
        assert record["dir"] == str(pretrain_run)

    def test_heterogeneous_schemas_refused_with_diff(self, eval_run, out_root, tmp_path):
        run, _ = eval_run
        mutant = tmp_path / "mutant"
        shutil.copytree(run, mutant)
        payload = json.loads((mutant / "eval.json").read_text())
        payload["columns"] = payload["columns"][:-1] + ["Pixel Acc."]
        payload["mean"]["Pixel Acc."] = 0.5
        (mutant / "eval.json").write_text(json.dumps(payload))
        code, _, stderr = run_cli(["report", str(run), str(mutant), "--out", str(out_root)])
        assert code == 1
        record = error_record(stderr)
        assert record["error"] == "schema-mismatch"
        assert record["dir"] == str(mutant)
        assert record["missing"] == ["FW IoU"]
        assert record["extra"] == ["Pixel Acc."]


class TestOutputRoot:
    def test_env_var_default(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PROTOSEG_OUT", str(tmp_path / "envout"))
        code, _, _ = run_cli(["synth", "--count", "90", "--size", "16"])
        assert code == 0
        assert (tmp_path / "envout").exists()

    def test_out_flag_beats_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PROTOSEG_OUT", str(tmp_path / "envout"))
        code, _, _ = run_cli(["synth", "--count", "90", "--size", "16",
                              "--out", str(tmp_path / "flagout")])
        assert code == 0
        assert (tmp_path / "flagout").exists()
        assert not (tmp_path / "envout").exists()


class TestHelp:
    EXPECTED = {
        "synth": {"--help", "--config", "--set", "--dataset", "--out", "--seed",
                  "--count", "--size"},
        "pretrain": {"--help", "--config", "--set", "--dataset", "--out", "--seed",
                     "--episodes", "--synth"},
        "finetune": {"--help", "--config", "--set", "--dataset", "--out", "--seed",
                     "--checkpoint", "--episodes", "--attention", "--synth"},
        "eval": {"--help", "--config", "--set", "--dataset", "--out", "--seed",
                 "--checkpoint", "--ways", "--shots", "--episodes", "--split",
                 "--synth"},
        "report": {"--help", "--format", "--out"},
    }

    def test_top_level_lists_all_subcommands(self):
        code, stdout, _ = run_cli(["--help"])
        assert code == 0
        for command in self.EXPECTED:
            assert command in stdout

    @pytest.mark.parametrize("command", sorted(EXPECTED))
    def test_subcommand_help_enumerates_every_flag(self, command):
        code, stdout, _ = run_cli([command, "--help"])
        assert code == 0
        documented = set(re.findall(r"--[a-z]+", stdout))
        assert documented == self.EXPECTED[command]

    def test_unknown_flag_exits_2(self):
        code, _, _ = run_cli(["pretrain", "--frobnicate"])
        assert code == 2
