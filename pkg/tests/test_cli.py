import csv
import json

import numpy as np
import pytest

from disrec import cli, training
from disrec.cli import main, read_epochs


def run(argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def synth_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert run(["synth", "--out", root / "data", "--seed", 1]) == 0
    return root / "data" / "run.json"


@pytest.fixture(scope="module")
def trained(synth_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("runs")
    args = ["train", "--config", synth_config, "--epochs", 4, "--out", out, "--set", "embedding_size=8",
            "--set", "negatives=3"]
    assert run(args + ["--name", "a"]) == 0
    assert run(args + ["--name", "b"]) == 0
    assert run(args + ["--name", "ablate", "--variant", "no-ssl"]) == 0
    return out


class TestTrain:
    def test_outputs_exist(self, trained):
        for name in ("config.echo", "epochs.csv", "checkpoint.bin"):
            assert (trained / "a" / name).is_file()

    def test_epochs_byte_identical(self, trained):
        assert (trained / "a" / "epochs.csv").read_bytes() == (trained / "b" / "epochs.csv").read_bytes()

    def test_epochs_columns(self, trained):
        rows = read_epochs(trained / "a" / "epochs.csv")
        assert [r["epoch"] for r in rows] == [1, 2, 3, 4]
        assert all(r["seconds"] is None for r in rows)
        for r in rows:
            assert r["loss_total"] == pytest.approx(r["loss_user"] + r["loss_group"] + 0.5 * r["loss_ssl"])

    def test_no_ssl_column_zero(self, trained):
        assert all(r["loss_ssl"] == 0.0 for r in read_epochs(trained / "ablate" / "epochs.csv"))

    def test_config_echo_sorted(self, trained):
        text = (trained / "a" / "config.echo").read_text()
        echo = json.loads(text)
        assert list(echo) == sorted(echo)
        assert echo["epochs"] == 4 and echo["embedding_size"] == 8

    def test_default_run_name(self, synth_config, tmp_path):
        assert run(["train", "--config", synth_config, "--epochs", 1, "--seed", 5, "--out", tmp_path]) == 0
        assert (tmp_path / "full-seed5" / "epochs.csv").is_file()

    def test_missing_members_file(self, tmp_path, synth_config, capsys):
        cfg = json.loads(synth_config.read_text())
        cfg = {k: str(synth_config.parent / v) for k, v in cfg.items()}
        cfg["members"] = str(tmp_path / "nowhere.txt")
        path = tmp_path / "c.json"
        path.write_text(json.dumps(cfg))
        assert run(["train", "--config", path, "--out", tmp_path]) == 1
        assert "nowhere.txt" in capsys.readouterr().err

    def test_unknown_key(self, synth_config, tmp_path, capsys):
        assert run(["train", "--config", synth_config, "--out", tmp_path, "--set", "learning_rate=0.1"]) == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_bad_value(self, synth_config, tmp_path):
        assert run(["train", "--config", synth_config, "--out", tmp_path, "--set", "layers=-1"]) == 1

    def test_non_finite_loss_exit_code(self, synth_config, tmp_path, monkeypatch, capsys):
        real = training.batch_loss

        def poisoned(*args, **kw):
            terms = real(*args, **kw)
            terms.total.data = np.array(np.nan)
            return terms

        monkeypatch.setattr(training, "batch_loss", poisoned)
        assert run(["train", "--config", synth_config, "--epochs", 1, "--out", tmp_path]) == 2
        assert "epoch 1" in capsys.readouterr().err


class TestEvaluate:
    def test_metrics_schema(self, trained):
        assert run(["evaluate", "--checkpoint", trained / "a" / "checkpoint.bin"]) == 0
        metrics = json.loads((trained / "a" / "metrics.json").read_text())
        assert set(metrics) == {"variant", "seed", "k_values", "n_cases", "group", "user"}
        assert set(metrics["group"]) == {"HR@5", "NDCG@5", "HR@10", "NDCG@10"}
        for task in ("group", "user"):
            for v in metrics[task].values():
                assert 0.0 <= v <= 1.0
        assert metrics["n_cases"]["group"] > 0

    def test_deterministic(self, trained):
        ck = trained / "b" / "checkpoint.bin"
        run(["evaluate", "--checkpoint", ck])
        first = (trained / "b" / "metrics.json").read_bytes()
        run(["evaluate", "--checkpoint", ck])
        assert (trained / "b" / "metrics.json").read_bytes() == first

    def test_compare(self, trained):
        assert run(["evaluate", "--checkpoint", trained / "a" / "checkpoint.bin", "--compare", trained / "ablate"]) == 0
        metrics = json.loads((trained / "a" / "metrics.json").read_text())
        for task in ("group", "user"):
            for p in metrics["p_values"][task].values():
                assert 0.0 < p <= 1.0

    def test_compare_with_itself(self, trained):
        cli.cmd_evaluate(trained / "a" / "checkpoint.bin", compare=trained / "b")
        metrics = json.loads((trained / "a" / "metrics.json").read_text())
        assert all(p == 1.0 for p in metrics["p_values"]["group"].values())

    def test_shape_mismatch(self, trained, tmp_path, capsys):
        echo = json.loads((trained / "a" / "config.echo").read_text())
        echo["embedding_size"] = 9
        path = tmp_path / "other.json"
        path.write_text(json.dumps(echo))
        assert run(["evaluate", "--checkpoint", trained / "a" / "checkpoint.bin", "--config", path]) == 1
        assert "shape" in capsys.readouterr().err


class TestProbe:
    def test_rows_and_gaps(self, trained):
        report, probe = cli.cmd_probe(trained / "a" / "checkpoint.bin")
        with open(trained / "a" / "probe.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * len(probe.pairs)
        for r in rows:
            assert int(r["gap"]) == int(r["rank_fake"]) - int(r["rank_true"])
            assert r["fake_item"] != r["true_item"]

    def test_histogram_file(self, trained):
        cli.cmd_probe(trained / "a" / "checkpoint.bin")
        with open(trained / "a" / "probe_hist.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert rows
        for r in rows:
            assert int(r["gap_from"]) % 50 == 0
            assert int(r["gap_to"]) - int(r["gap_from"]) == 50

    def test_main_prints_summary(self, trained, capsys):
        assert run(["probe", "--checkpoint", trained / "a" / "checkpoint.bin"]) == 0
        assert "mean_gap=" in capsys.readouterr().out
