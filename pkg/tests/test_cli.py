"""Command-line behavior: files, manifests, exit codes, flag plumbing."""

import json

import numpy as np
import pytest

from spanseq.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from spanseq.evaluate import EmbeddingTable
from spanseq.trainer import read_metrics


@pytest.fixture(scope="module")
def corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "corpus"
    code = main(["generate", "--sellers", "12", "--months", "2",
                 "--abnormal", "0.25", "--seed", "11", "--out", str(out)])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(corpus_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "run"
    code = main(["pretrain", "--corpus", str(corpus_dir), "--out", str(out),
                 "--steps", "3", "--batch-size", "4", "--seed", "3"])
    assert code == EXIT_OK
    return out


class TestGenerate:
    def test_writes_files_and_manifest(self, corpus_dir):
        assert (corpus_dir / "events.tsv").exists()
        assert (corpus_dir / "labels.tsv").exists()
        manifest = json.loads((corpus_dir / "manifest.json").read_text())
        assert manifest["command"] == "generate"
        assert manifest["config"]["sellers"] == 12
        assert manifest["seed"] == 11
        assert "--abnormal" in manifest["argv"]
        assert manifest["version"]
        assert manifest["started"] <= manifest["finished"]
        assert len(manifest["outputs"]) == 2

    def test_rerun_same_flags_identical_files(self, corpus_dir, tmp_path):
        again = tmp_path / "again"
        code = main(["generate", "--sellers", "12", "--months", "2",
                     "--abnormal", "0.25", "--seed", "11", "--out", str(again)])
        assert code == EXIT_OK
        for name in ("events.tsv", "labels.tsv"):
            assert (again / name).read_bytes() == (corpus_dir / name).read_bytes()

    def test_single_month_rejected(self, tmp_path, capsys):
        code = main(["generate", "--months", "1", "--out", str(tmp_path / "x")])
        assert code == EXIT_USAGE
        assert "2 calendar months" in capsys.readouterr().err

    def test_bad_fraction_rejected(self, tmp_path):
        code = main(["generate", "--abnormal", "1.5", "--out", str(tmp_path / "x")])
        assert code == EXIT_USAGE


class TestPretrain:
    def test_outputs(self, run_dir):
        assert (run_dir / "checkpoint_final.ckpt").exists()
        assert (run_dir / "training.png").stat().st_size > 1000
        cols = read_metrics(run_dir / "metrics.tsv")
        assert len(cols["step"]) == 3
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["command"] == "pretrain"
        assert manifest["config"]["train"]["total_steps"] == 3
        assert manifest["config"]["encoder"]["span_size"] == 360
        assert len(manifest["inputs"]) == 2
        assert any(p.endswith("checkpoint_final.ckpt") for p in manifest["outputs"])

    def test_invalid_config_lists_every_problem(self, corpus_dir, tmp_path, capsys):
        code = main(["pretrain", "--corpus", str(corpus_dir), "--out", str(tmp_path / "x"),
                     "--batch-size", "1", "--warmup", "2.0", "--mask-ratio", "0"])
        assert code == EXIT_USAGE
        err = capsys.readouterr().err
        for phrase in ("batch_size", "warmup_proportion", "mask_ratio"):
            assert phrase in err

    def test_missing_corpus_is_a_data_error(self, tmp_path, capsys):
        code = main(["pretrain", "--corpus", str(tmp_path / "nope"), "--out", str(tmp_path / "x")])
        assert code == EXIT_DATA
        assert "event log not found" in capsys.readouterr().err

    def test_no_fine_zeroes_the_fine_column(self, corpus_dir, tmp_path):
        out = tmp_path / "nofine"
        code = main(["pretrain", "--corpus", str(corpus_dir), "--out", str(out),
                     "--steps", "2", "--batch-size", "4", "--no-fine"])
        assert code == EXIT_OK
        cols = read_metrics(out / "metrics.tsv")
        assert np.all(cols["loss_fine"] == 0.0)
        assert np.all(cols["loss_coarse"] > 0.0)


class TestEmbed:
    def test_writes_loadable_table(self, corpus_dir, run_dir, tmp_path):
        out = tmp_path / "emb.tsv"
        code = main(["embed", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
                     "--corpus", str(corpus_dir), "--month", "1", "--out", str(out)])
        assert code == EXIT_OK
        table = EmbeddingTable.load(out)
        assert len(table.seller_ids) == 12
        assert table.vectors.shape == (12, 192)
        assert table.month == 1
        manifest = json.loads((tmp_path / "emb.manifest.json").read_text())
        assert manifest["command"] == "embed"
        assert len(manifest["inputs"]) == 3  # checkpoint + events + labels

    def test_missing_checkpoint(self, corpus_dir, tmp_path, capsys):
        code = main(["embed", "--checkpoint", str(tmp_path / "no.ckpt"),
                     "--corpus", str(corpus_dir), "--out", str(tmp_path / "e.tsv")])
        assert code == EXIT_DATA
        assert "checkpoint not found" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, corpus_dir, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"JUNK" * 64)
        code = main(["embed", "--checkpoint", str(bad),
                     "--corpus", str(corpus_dir), "--out", str(tmp_path / "e.tsv")])
        assert code == EXIT_DATA
        assert "magic" in capsys.readouterr().err


class TestEvaluate:
    def test_report_rows_and_files(self, corpus_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "eval"
        code = main(["evaluate", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
                     "--corpus", str(corpus_dir), "--out", str(out)])
        assert code == EXIT_OK
        lines = (out / "report.tsv").read_text().splitlines()
        assert lines[0] == "features\tmodel\tauc"
        combos = {tuple(l.split("\t")[:2]) for l in lines[1:]}
        assert combos == {("baseline", "LR"), ("baseline", "MLP"),
                          ("embedding", "LR"), ("embedding", "MLP")}
        assert (out / "nmi.tsv").exists()
        assert (out / "roc.png").stat().st_size > 1000
        assert (out / "manifest.json").exists()
        stdout = capsys.readouterr().out
        assert "embedding" in stdout and "nmi_mean" in stdout

    def test_json_output(self, corpus_dir, run_dir, tmp_path, capsys):
        out = tmp_path / "eval-json"
        code = main(["evaluate", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
                     "--corpus", str(corpus_dir), "--out", str(out), "--json"])
        assert code == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert len(payload["rows"]) == 4
        assert set(payload["nmi"]) == {"embedding", "baseline"}
        assert len(payload["nmi"]["embedding"]["scores"]) == 5

    def test_month_out_of_range(self, corpus_dir, run_dir, tmp_path, capsys):
        code = main(["evaluate", "--checkpoint", str(run_dir / "checkpoint_final.ckpt"),
                     "--corpus", str(corpus_dir), "--month", "7", "--out", str(tmp_path / "x")])
        assert code == EXIT_DATA
        assert "month" in capsys.readouterr().err


class TestAblate:
    def test_subset_grid(self, corpus_dir, tmp_path, capsys):
        out = tmp_path / "abl"
        code = main(["ablate", "--corpus", str(corpus_dir), "--out", str(out),
                     "--only", "full,no-fine", "--steps", "2", "--batch-size", "4",
                     "--seed", "3", "--json"])
        assert code == EXIT_OK
        payload = json.loads(capsys.readouterr().out)
        assert [r["config"] for r in payload["rows"]] == ["full", "no-fine"]
        assert (out / "ablation.tsv").exists()
        assert (out / "ablation.png").stat().st_size > 1000

    def test_unknown_entry_rejected(self, corpus_dir, tmp_path, capsys):
        code = main(["ablate", "--corpus", str(corpus_dir), "--out", str(tmp_path / "x"),
                     "--only", "bogus"])
        assert code == EXIT_USAGE
        assert "no-overlap" in capsys.readouterr().err


class TestTopLevel:
    def test_unknown_flag(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path / "x"), "--bogus"]) == EXIT_USAGE
        assert "unrecognized arguments" in capsys.readouterr().err

    def test_no_subcommand(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_version(self, capsys):
        assert main(["--version"]) == EXIT_OK
        assert "spanseq" in capsys.readouterr().out

    def test_bad_thread_count(self, corpus_dir, tmp_path, capsys):
        code = main(["--threads", "0", "generate", "--sellers", "2", "--out", str(tmp_path / "x")])
        assert code == EXIT_USAGE

    def test_threads_env_must_be_numeric(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("SPANSEQ_THREADS", "many")
        code = main(["generate", "--sellers", "2", "--out", str(tmp_path / "x")])
        assert code == EXIT_USAGE
        assert "SPANSEQ_THREADS" in capsys.readouterr().err

    def test_out_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPANSEQ_OUT_ROOT", str(tmp_path))
        code = main(["generate", "--sellers", "2", "--seed", "1", "--out", "nested/run"])
        assert code == EXIT_OK
        assert (tmp_path / "nested" / "run" / "events.tsv").exists()
