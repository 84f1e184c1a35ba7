import copy
import subprocess
import sys

import numpy as np
import pytest
import yaml

from helpers import tiny_config
from softseg.cli import EXIT_ERROR, EXIT_NOT_CONVERGED, EXIT_OK, OUTPUT_ROOT_ENV, main
from softseg.experiment import read_csv, read_metadata
from softseg.phantom import write_dataset

PHANTOM = {"phantom": {"task": "SingleBlob", "size_mm": [8, 16], "seed": 1, "field_of_view_mm": 16.0}, "n_per_center": 10}


def write_yaml(path, obj):
    path.write_text(yaml.safe_dump(obj))
    return path


def tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


class TestGeneratePhantoms:
    def test_forty_subjects(self, tmp_path):
        spec = write_yaml(tmp_path / "ph.yaml", PHANTOM)
        assert main(["generate-phantoms", "--spec", str(spec), "--out", str(tmp_path / "new" / "ds")]) == EXIT_OK
        lines = (tmp_path / "new" / "ds" / "manifest.tsv").read_text().splitlines()
        assert len(lines) == 41

    def test_rerun_is_bytewise_identical(self, tmp_path):
        spec = write_yaml(tmp_path / "ph.yaml", {**PHANTOM, "n_per_center": 2})
        main(["generate-phantoms", "--spec", str(spec), "--out", str(tmp_path / "a")])
        main(["generate-phantoms", "--spec", str(spec), "--out", str(tmp_path / "b")])
        assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")

    @pytest.mark.parametrize("doc", [{"phantom": {"colour": 1}}, {"n_per_center": 0}, {"phantom": {"supersampling": 3}}])
    def test_bad_spec(self, tmp_path, capsys, doc):
        spec = write_yaml(tmp_path / "ph.yaml", doc)
        assert main(["generate-phantoms", "--spec", str(spec), "--out", str(tmp_path / "x")]) == EXIT_ERROR
        assert "error" in capsys.readouterr().err

    def test_missing_spec_file(self, tmp_path, capsys):
        assert main(["generate-phantoms", "--spec", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == EXIT_ERROR
        assert "cannot read" in capsys.readouterr().err

    def test_output_root_from_environment(self, tmp_path, monkeypatch):
        spec = write_yaml(tmp_path / "ph.yaml", {**PHANTOM, "n_per_center": 1})
        monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
        monkeypatch.chdir(tmp_path)
        assert main(["generate-phantoms", "--spec", str(spec), "--out", "rel"]) == EXIT_OK
        assert (tmp_path / "root" / "rel" / "manifest.tsv").exists()


class TestTrainEvaluate:
    def test_train_then_evaluate(self, tmp_path, dataset_dir):
        cfg = write_yaml(tmp_path / "c.yaml", tiny_config(dataset_dir, tmp_path / "out"))
        assert main(["train", "--config", str(cfg), "--candidate", "Soft-ReLU-Wing", "--iteration", "1"]) == EXIT_OK
        run = tmp_path / "out" / "runs" / "it001_Soft-ReLU-Wing"
        assert {"checkpoint.ckpt", "history.csv", "metadata.json"} <= {p.name for p in run.iterdir()}
        assert main(["evaluate", "--run", str(run), "--split", "test"]) == EXIT_OK
        rows = read_csv(run / "metrics.csv")
        assert [r["subject"] for r in rows] == read_metadata(run)["split"]["test"]

    def test_unknown_candidate(self, tmp_path, dataset_dir, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", tiny_config(dataset_dir, tmp_path / "out"))
        assert main(["train", "--config", str(cfg), "--candidate", "Soft-Sig-Dice"]) == EXIT_ERROR
        err = capsys.readouterr().err
        for name in ("Hard-Sig-Dice", "Hard-ReLU-Wing", "Soft-Sig-Wing", "Soft-ReLU-Dice", "Soft-ReLU-Wing"):
            assert name in err
        assert not (tmp_path / "out").exists()

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_convergence_exit_code(self, tmp_path, dataset_dir, capsys):
        raw = tiny_config(dataset_dir, tmp_path / "out", training={"lr0": 1e30})
        cfg = write_yaml(tmp_path / "c.yaml", raw)
        assert main(["train", "--config", str(cfg), "--candidate", "Hard-Sig-Dice"]) == EXIT_NOT_CONVERGED
        assert "not converged" in capsys.readouterr().err
        meta = read_metadata(tmp_path / "out" / "runs" / "it000_Hard-Sig-Dice")
        assert meta["converged"] is False and meta["training"]["stop_reason"] == "non_finite"

    def test_corrupt_images_are_an_error(self, tmp_path, small_dataset, capsys):
        broken = copy.deepcopy(small_dataset)
        for s in broken:
            s.images[0].data[0, 0, 0] = np.nan
        write_dataset(broken, tmp_path / "nan")
        cfg = write_yaml(tmp_path / "c.yaml", tiny_config(tmp_path / "nan", tmp_path / "out"))
        code = main(["train", "--config", str(cfg), "--candidate", "Hard-Sig-Dice", "--iteration", "0"])
        assert code == EXIT_ERROR and "non-finite" in capsys.readouterr().err

    def test_evaluate_without_checkpoint(self, tmp_path, capsys):
        (tmp_path / "run").mkdir()
        assert main(["evaluate", "--run", str(tmp_path / "run")]) == EXIT_ERROR
        assert "metadata" in capsys.readouterr().err

    def test_config_with_unknown_key(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"traning": {}})
        assert main(["train", "--config", str(cfg), "--candidate", "Soft-ReLU-Wing"]) == EXIT_ERROR
        assert "traning" in capsys.readouterr().err


class TestExperimentReport:
    def test_twenty_run_directories_and_report(self, tmp_path, dataset_dir):
        raw = tiny_config(dataset_dir, tmp_path / "res", iterations=4, training={"max_epochs": 1, "early_stopping": {"patience": 1}})
        plan = write_yaml(tmp_path / "plan.yaml", raw)
        assert main(["experiment", "--plan", str(plan)]) == EXIT_OK
        assert len(list((tmp_path / "res" / "runs").iterdir())) == 20
        assert main(["experiment", "--plan", str(plan)]) == EXIT_ERROR
        assert main(["experiment", "--plan", str(plan), "--resume"]) == EXIT_OK
        assert main(["report", "--results", str(tmp_path / "res"), "--svg"]) == EXIT_OK
        rows = read_csv(tmp_path / "res" / "report" / "summary.csv")
        assert len(rows) == 5 and " ± " in rows[0]["Dice [%]"]
        assert (tmp_path / "res" / "report" / "threshold_curves.svg").exists()

    def test_report_on_empty_directory(self, tmp_path):
        assert main(["report", "--results", str(tmp_path)]) == EXIT_ERROR


class TestEntryPoint:
    def test_usage_error_exits_one(self):
        proc = subprocess.run([sys.executable, "-m", "softseg", "train"], capture_output=True, text=True)
        assert proc.returncode == EXIT_ERROR and "--config" in proc.stderr

    def test_help(self):
        proc = subprocess.run([sys.executable, "-m", "softseg", "--help"], capture_output=True, text=True)
        assert proc.returncode == 0
        for cmd in ("generate-phantoms", "train", "evaluate", "experiment", "report"):
            assert cmd in proc.stdout
