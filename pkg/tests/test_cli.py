import json
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from mmga.cli import main
from mmga.config import save_run_config, toy_run_config
from mmga.data import Dataset, PKBatchSpec
from mmga.masks import default_grouping, group_masks
from mmga.pnm import read_pnm
from mmga.trainer import OptimConfig


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_corpus")
    rc = main(["synth", "--out", str(out), "--ids", "4", "--per-id", "5", "--seed", "2"])
    assert rc == 0
    return os.path.join(out, "manifest.csv")


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory, corpus):
    cfg = replace(
        toy_run_config(num_identities=4),
        optim=OptimConfig(
            base_lr_backbone=0.01,
            base_lr_other=0.02,
            decay_every=90,
            total_epochs=1,
        ),
        batch=PKBatchSpec(p=4, k=2),
    )
    path = tmp_path_factory.mktemp("cfg") / "run.json"
    save_run_config(path, cfg)
    return str(path)


@pytest.fixture(scope="module")
def trained(tmp_path_factory, corpus, tiny_config):
    out = tmp_path_factory.mktemp("train_out")
    rc = main(
        ["train", "--config", tiny_config, "--data", corpus, "--out", str(out)]
    )
    assert rc == 0
    return out


class TestSynth:
    def test_prints_manifest_path(self, tmp_path, capsys):
        rc = main(
            ["synth", "--out", str(tmp_path), "--ids", "2", "--per-id", "4", "--seed", "1"]
        )
        assert rc == 0
        assert capsys.readouterr().out.strip().endswith("manifest.csv")

    def test_bad_args_exit_one(self, tmp_path, capsys):
        rc = main(
            ["synth", "--out", str(tmp_path), "--ids", "2", "--per-id", "2", "--seed", "1"]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("mmga: error:") and err.count("\n") == 1


class TestMasks:
    def test_reproduces_ground_truth_exactly(self, corpus, tmp_path, capsys):
        sample = Dataset(corpus).manifest.samples[0]
        out = tmp_path / "m"
        rc = main(["masks", "--labels", sample.labels, "--out", str(out)])
        assert rc == 0
        whole, upper, bottom = group_masks(
            read_pnm(sample.labels), default_grouping()
        )
        for name, want in (("whole", whole), ("upper", upper), ("bottom", bottom)):
            got = read_pnm(out / f"{name}.pgm")
            np.testing.assert_array_equal(got, (want * 255).astype(np.uint8))

    def test_resized_masks(self, corpus, tmp_path):
        sample = Dataset(corpus).manifest.samples[0]
        out = tmp_path / "m6"
        rc = main(
            ["masks", "--labels", sample.labels, "--out", str(out), "--size", "6x2"]
        )
        assert rc == 0
        assert read_pnm(out / "whole.pgm").shape == (6, 2)

    def test_custom_grouping_file(self, corpus, tmp_path):
        sample = Dataset(corpus).manifest.samples[0]
        gpath = tmp_path / "grouping.json"
        table = default_grouping()
        gpath.write_text(
            json.dumps({"upper": sorted(table.upper), "bottom": sorted(table.bottom)})
        )
        out = tmp_path / "mg"
        rc = main(
            ["masks", "--labels", sample.labels, "--grouping", str(gpath), "--out", str(out)]
        )
        assert rc == 0

    def test_bad_size_is_single_line_error(self, corpus, tmp_path, capsys):
        sample = Dataset(corpus).manifest.samples[0]
        rc = main(
            ["masks", "--labels", sample.labels, "--out", str(tmp_path), "--size", "big"]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert err.startswith("mmga: error:") and "HxW" in err


class TestTrain:
    def test_artifacts(self, trained):
        assert (trained / "run_config.json").exists()
        assert (trained / "train_log.jsonl").exists()
        assert (trained / "checkpoints" / "final" / "manifest.json").exists()
        lines = (trained / "train_log.jsonl").read_text().splitlines()
        assert lines, "log must hold at least one step"
        record = json.loads(lines[0])
        assert {"epoch", "step", "total", "lr_backbone"} <= set(record)

    def test_classifier_adapts_to_dataset(self, trained):
        doc = json.loads((trained / "run_config.json").read_text())
        assert doc["model"]["num_identities"] == 4

    def test_missing_data_flag(self, tiny_config, capsys):
        rc = main(["train", "--config", tiny_config])
        assert rc == 1
        assert "mmga: error:" in capsys.readouterr().err

    def test_missing_config_file(self, corpus, tmp_path, capsys):
        rc = main(
            ["train", "--config", "/nope.json", "--data", corpus, "--out", str(tmp_path)]
        )
        assert rc == 1
        assert "not found" in capsys.readouterr().err


class TestEval:
    def test_report_and_embeddings(self, trained, corpus, tmp_path, capsys):
        out = tmp_path / "ev"
        rc = main(
            [
                "eval",
                "--checkpoint",
                str(trained / "checkpoints" / "final"),
                "--data",
                corpus,
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        line = capsys.readouterr().out
        assert "Rank1 " in line and "mAP " in line
        report = json.loads((out / "report.json").read_text())
        assert 0.0 <= report["mAP"] <= 1.0
        for name in ("query.emb", "query.emb.json", "gallery.emb", "gallery.emb.json"):
            assert (out / name).exists()

    def test_train_eval_rerun_is_byte_identical(
        self, corpus, tiny_config, tmp_path, capsys
    ):
        outputs = []
        for run in ("r1", "r2"):
            tdir = tmp_path / run
            assert (
                main(["train", "--config", tiny_config, "--data", corpus, "--out", str(tdir)])
                == 0
            )
            edir = tmp_path / f"{run}_eval"
            assert (
                main(
                    [
                        "eval",
                        "--checkpoint",
                        str(tdir / "checkpoints" / "final"),
                        "--data",
                        corpus,
                        "--out",
                        str(edir),
                    ]
                )
                == 0
            )
            outputs.append((tdir, edir))
        (t1, e1), (t2, e2) = outputs
        assert (t1 / "train_log.jsonl").read_bytes() == (t2 / "train_log.jsonl").read_bytes()
        ck1, ck2 = t1 / "checkpoints" / "final", t2 / "checkpoints" / "final"
        for name in sorted(os.listdir(ck1)):
            assert (ck1 / name).read_bytes() == (ck2 / name).read_bytes(), name
        assert (e1 / "report.json").read_bytes() == (e2 / "report.json").read_bytes()


class TestAblate:
    def test_five_rows_in_order(self, corpus, tiny_config, tmp_path, capsys):
        out = tmp_path / "ab"
        rc = main(["ablate", "--config", tiny_config, "--data", corpus, "--out", str(out)])
        assert rc == 0
        table = capsys.readouterr().out
        labels = ["Baseline", "Baseline+Att", "WMGA", "DMGA", "MMGA"]
        positions = [table.index(label) for label in labels]
        assert positions == sorted(positions)
        doc = json.loads((out / "ablate.json").read_text())
        assert list(doc) == labels
        for row in doc.values():
            assert 0.0 <= row["rank1"] <= 1.0 and 0.0 <= row["mAP"] <= 1.0


class TestInspect:
    def test_writes_four_heatmaps(self, trained, corpus, tmp_path):
        sample = Dataset(corpus).query[0]
        out = tmp_path / "ins"
        rc = main(
            [
                "inspect",
                "--checkpoint",
                str(trained / "checkpoints" / "final"),
                "--image",
                sample.image,
                "--out",
                str(out),
            ]
        )
        assert rc == 0
        names = sorted(os.listdir(out))
        assert names == [
            "attention_bottom.pgm",
            "attention_module1.pgm",
            "attention_upper.pgm",
            "attention_whole.pgm",
        ]
        heat = read_pnm(out / "attention_whole.pgm")
        assert heat.shape == (96, 32)


class TestGradcheckCommand:
    def test_exit_zero_with_table(self, capsys):
        rc = main(["gradcheck"])
        out = capsys.readouterr().out
        assert rc == 0
        lines = out.strip().splitlines()
        assert len(lines) > 20
        assert all("PASS" in line for line in lines[:-1])
        assert lines[-1].endswith("checks passed")


class TestConsoleScript:
    def test_entry_point_runs_in_subprocess(self, tmp_path):
        env = dict(os.environ, MMGA_THREADS="1")
        proc = subprocess.run(
            [
                sys.executable,
                "-m",
                "mmga.cli",
                "synth",
                "--out",
                str(tmp_path),
                "--ids",
                "2",
                "--per-id",
                "4",
                "--seed",
                "3",
            ],
            capture_output=True,
            text=True,
            env=env,
        )
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout.strip().endswith("manifest.csv")
