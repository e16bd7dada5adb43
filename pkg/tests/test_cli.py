"""End-to-end command-line tests running each subcommand in process."""

import json

import pytest

from procrep import cli
from procrep.evaluate import ExperimentResult
from procrep.process_model import load_checkpoint
from procrep.viz import load_vector_table

SYNTH_CFG = """
n_students = 20
n_questions_a = 3
n_questions_b = 3
"""

EXP_CFG = """
dim_event = 4
dim_question = 4
hidden = 6
aggregator_hidden = 6
head_hidden = 8
dropout = 0.0
pretrain_epochs = 1
transfer_epochs = 1
finetune_epochs = 1
batch_size = 16
transfer_batch_size = 8
irt_max_epochs = 60
folds = 2
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    synth_cfg = root / "synth.cfg"
    synth_cfg.write_text(SYNTH_CFG)
    exp_cfg = root / "experiment.cfg"
    exp_cfg.write_text(EXP_CFG)

    cohort_dir = root / "cohort"
    assert cli.main(
        ["generate", "--config", str(synth_cfg), "--out", str(cohort_dir), "--seed", "5"]
    ) == 0

    dataset = root / "dataset.json"
    issues = root / "issues.csv"
    assert cli.main(
        [
            "ingest",
            "--log", str(cohort_dir / "log.csv"),
            "--answer-key", str(cohort_dir / "answer_key.json"),
            "--block-map", str(cohort_dir / "block_map.json"),
            "--schema", str(cohort_dir / "schema.json"),
            "--out", str(dataset),
            "--issues", str(issues),
            "--test-fraction", "0.25",
            "--seed", "1",
        ]
    ) == 0
    return {
        "root": root,
        "synth_cfg": synth_cfg,
        "exp_cfg": exp_cfg,
        "cohort": cohort_dir,
        "dataset": dataset,
        "issues": issues,
    }


@pytest.fixture(scope="module")
def pretrain_ckpt(workspace):
    out = workspace["root"] / "encoder.pt"
    history = workspace["root"] / "pretrain_history.csv"
    assert cli.main(
        [
            "pretrain",
            "--dataset", str(workspace["dataset"]),
            "--config", str(workspace["exp_cfg"]),
            "--out", str(out),
            "--history", str(history),
            "--seed", "2",
        ]
    ) == 0
    return out


class TestGenerate:
    def test_reruns_are_byte_identical(self, workspace, tmp_path):
        other = tmp_path / "cohort_again"
        assert cli.main(
            ["generate", "--config", str(workspace["synth_cfg"]), "--out", str(other), "--seed", "5"]
        ) == 0
        for name in ("log.csv", "answer_key.json", "block_map.json", "ground_truth.json"):
            assert (other / name).read_bytes() == (workspace["cohort"] / name).read_bytes()

    def test_lists_artifacts_on_stdout(self, workspace, tmp_path, capsys):
        out = tmp_path / "c"
        assert cli.main(
            ["generate", "--config", str(workspace["synth_cfg"]), "--out", str(out), "--seed", "0"]
        ) == 0
        stdout = capsys.readouterr().out
        assert "log" in stdout and "answer_key" in stdout

    def test_bad_config_value_is_usage_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("n_students = -3\n")
        code = cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "0"])
        assert code == 1
        assert "error:" in capsys.readouterr().err


class TestIngest:
    def test_outputs_embed_config_hash_and_seed(self, workspace):
        issues_text = workspace["issues"].read_text()
        assert issues_text.startswith("# config_hash=")
        assert "# seed=1" in issues_text
        dataset = json.loads(workspace["dataset"].read_text())
        assert dataset["meta"]["seed"] == 1
        assert len(dataset["meta"]["config_hash"]) == 64

    def test_missing_log_is_data_error(self, workspace, tmp_path, capsys):
        code = cli.main(
            [
                "ingest",
                "--log", str(tmp_path / "missing.csv"),
                "--answer-key", str(workspace["cohort"] / "answer_key.json"),
                "--block-map", str(workspace["cohort"] / "block_map.json"),
                "--out", str(tmp_path / "ds.json"),
            ]
        )
        assert code == 2
        assert "missing.csv" in capsys.readouterr().err


class TestUsageErrors:
    def test_missing_required_flag_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["transfer"])
        assert exc.value.code == 1

    def test_unknown_command_exits_one(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["frobnicate"])
        assert exc.value.code == 1

    def test_unknown_ablation_flag(self, workspace, capsys):
        code = cli.main(
            [
                "evaluate",
                "--dataset", str(workspace["dataset"]),
                "--config", str(workspace["exp_cfg"]),
                "--ablate", "bogus",
            ]
        )
        assert code == 1
        assert "unknown ablation flag" in capsys.readouterr().err

    def test_missing_dataset_is_data_error(self, workspace, tmp_path, capsys):
        code = cli.main(
            [
                "pretrain",
                "--dataset", str(tmp_path / "nope.json"),
                "--out", str(tmp_path / "x.pt"),
            ]
        )
        assert code == 2
        assert "nope.json" in capsys.readouterr().err


class TestPretrain:
    def test_checkpoint_and_history(self, workspace, pretrain_ckpt):
        bundle = load_checkpoint(pretrain_ckpt)
        assert bundle.meta["variant"] == "encoder"
        assert bundle.meta["phase"] == "pretrain"
        assert bundle.meta["seed"] == 2
        assert len(bundle.meta["config_hash"]) == 64
        history = (workspace["root"] / "pretrain_history.csv").read_text()
        assert "# config_hash=" in history
        assert "# seed=2" in history
        assert "pretrain" in history


class TestTransfer:
    def test_resumes_pretrained_encoder(self, workspace, pretrain_ckpt, tmp_path, capsys):
        out = tmp_path / "transfer.pt"
        code = cli.main(
            [
                "transfer",
                "--dataset", str(workspace["dataset"]),
                "--checkpoint", str(pretrain_ckpt),
                "--config", str(workspace["exp_cfg"]),
                "--task", "score",
                "--out", str(out),
                "--seed", "3",
            ]
        )
        assert code == 0
        stdout = capsys.readouterr().out
        assert "test AUC" in stdout
        bundle = load_checkpoint(out)
        assert bundle.meta["variant"] == "transfer"
        assert bundle.meta["task"] == "score"


class TestBaseline:
    def test_writes_checkpoint(self, workspace, tmp_path, capsys):
        out = tmp_path / "ae.pt"
        code = cli.main(
            [
                "baseline",
                "--dataset", str(workspace["dataset"]),
                "--config", str(workspace["exp_cfg"]),
                "--out", str(out),
                "--seed", "4",
            ]
        )
        assert code == 0
        assert out.is_file()
        assert "checkpoint:" in capsys.readouterr().out


class TestIrt:
    def test_base_fit_exports_params(self, workspace, tmp_path):
        out = tmp_path / "params.csv"
        code = cli.main(
            [
                "irt",
                "--dataset", str(workspace["dataset"]),
                "--config", str(workspace["exp_cfg"]),
                "--out", str(out),
                "--seed", "6",
            ]
        )
        assert code == 0
        text = out.read_text()
        assert text.startswith("# config_hash=")
        assert "# seed=6" in text


@pytest.fixture(scope="module")
def behavior_ckpt(workspace):
    params = workspace["root"] / "behavior_params.csv"
    model_out = workspace["root"] / "behavior.pt"
    assert cli.main(
        [
            "irt",
            "--behavior",
            "--dataset", str(workspace["dataset"]),
            "--config", str(workspace["exp_cfg"]),
            "--ablate", "no_finetune",
            "--out", str(params),
            "--model-out", str(model_out),
            "--seed", "7",
        ]
    ) == 0
    return model_out


class TestVectorPipeline:
    def test_question_level_export_and_plot(self, workspace, behavior_ckpt, tmp_path):
        vectors = tmp_path / "vectors.csv"
        code = cli.main(
            [
                "export-vectors",
                "--dataset", str(workspace["dataset"]),
                "--checkpoint", str(behavior_ckpt),
                "--level", "question",
                "--out", str(vectors),
            ]
        )
        assert code == 0
        table = load_vector_table(vectors)
        assert table.level == "question"
        assert len(table) > 0

        plot = tmp_path / "plot.png"
        code = cli.main(
            [
                "plot",
                "--vectors", str(vectors),
                "--out", str(plot),
                "--perplexity", "5",
                "--seed", "0",
            ]
        )
        assert code == 0
        assert plot.stat().st_size > 0

    def test_wrong_checkpoint_variant_is_rejected(self, workspace, pretrain_ckpt, tmp_path, capsys):
        code = cli.main(
            [
                "export-vectors",
                "--dataset", str(workspace["dataset"]),
                "--checkpoint", str(pretrain_ckpt),
                "--level", "question",
                "--out", str(tmp_path / "v.csv"),
            ]
        )
        assert code == 2
        assert "behavior-model checkpoint" in capsys.readouterr().err

    def test_plot_missing_vectors_is_data_error(self, tmp_path, capsys):
        code = cli.main(
            ["plot", "--vectors", str(tmp_path / "gone.csv"), "--out", str(tmp_path / "p.png")]
        )
        assert code == 2
        assert "gone.csv" in capsys.readouterr().err


class TestEvaluate:
    def test_results_record_ablation_flags(self, workspace, tmp_path, capsys):
        out = tmp_path / "results.json"
        code = cli.main(
            [
                "evaluate",
                "--dataset", str(workspace["dataset"]),
                "--config", str(workspace["exp_cfg"]),
                "--task", "score",
                "--ablate", "no_finetune",
                "--out", str(out),
                "--seed", "8",
            ]
        )
        assert code == 0
        assert "test AUC" in capsys.readouterr().out
        result = ExperimentResult.load(out)
        assert result.config["no_finetune"] is True
        assert result.config["task"] == "score"
        assert result.seed == 8
        for fold in result.folds:
            assert [p["phase"] for p in fold.phases] == ["pretrain", "transfer_frozen"]

    def test_matrix_requires_out_dir(self, workspace, capsys):
        code = cli.main(
            [
                "evaluate",
                "--dataset", str(workspace["dataset"]),
                "--config", str(workspace["exp_cfg"]),
                "--matrix",
            ]
        )
        assert code == 1
        assert "--out-dir" in capsys.readouterr().err
