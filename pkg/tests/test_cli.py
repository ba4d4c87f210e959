"""
Tests for the medluq command line.
"""

import json

import pytest

from app import cli


def _run(argv, capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(argv)
    out = capsys.readouterr().out.strip().splitlines()
    return exc.value.code, json.loads(out[-1]) if out else None


class TestGenerate:
    def test_writes_csv_and_sidecar(self, tmp_path, capsys):
        path = tmp_path / "synthetic.csv"
        code, doc = _run(["generate", "--seed", "2", "--out", str(path)], capsys)
        assert code == 0
        assert doc["ok"] is True
        assert path.exists()
        assert (tmp_path / "synthetic.csv.meta.json").exists()
        assert doc["features"] == 20 + 5

    def test_no_probes(self, tmp_path, capsys):
        path = tmp_path / "plain.csv"
        code, doc = _run(
            ["generate", "--seed", "2", "--no-probes", "--out", str(path)], capsys
        )
        assert code == 0
        assert doc["features"] == 20

    def test_generator_table_from_config(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.toml"
        cfg.write_text(
            "seed = 4\n\n[generator]\n"
            "n_clusters = 6\nn_seen = 4\nd_bio = 3\nk_informative = 2\n"
        )
        code, doc = _run(
            ["generate", "--config", str(cfg), "--out", str(tmp_path / "d.csv")], capsys
        )
        assert code == 0
        assert doc["clusters"] == 6
        assert doc["seen_clusters"] == 4


class TestErrors:
    def test_bad_backend_is_configuration_error(self, tmp_path, capsys):
        code, doc = _run(
            ["run", "--seed", "1", "--backend", "laplace", "--out", str(tmp_path)],
            capsys,
        )
        assert code == 2
        assert doc["ok"] is False
        assert doc["type"] == "ConfigurationError"

    def test_missing_seed(self, tmp_path, capsys):
        code, doc = _run(["run", "--out", str(tmp_path)], capsys)
        assert code == 2

    def test_report_without_saved_run(self, tmp_path, capsys):
        code, doc = _run(["report", "--out", str(tmp_path / "nothing")], capsys)
        assert code == 2
        assert doc["ok"] is False

    def test_missing_csv_is_data_error(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {"seed": 1, "source": "csv", "csv_path": str(tmp_path / "absent.csv")}
            )
        )
        code, doc = _run(
            ["run", "--config", str(cfg), "--out", str(tmp_path / "run")], capsys
        )
        assert code == 3
        assert doc["type"] == "DataError"

    def test_unknown_verb(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["explain"])
        assert exc.value.code == 2


@pytest.mark.integration
class TestRun:
    def test_small_run_writes_reports(self, tmp_path, capsys):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "generator": {
                        "n_clusters": 4,
                        "n_seen": 3,
                        "samples_mean": 20,
                        "samples_min": 14,
                        "d_bio": 2,
                        "k_informative": 2,
                    },
                    "training": {"epochs": 1, "fe_hidden": [4]},
                }
            )
        )
        out = tmp_path / "run"
        code, doc = _run(
            [
                "run",
                "--config",
                str(cfg),
                "--seed",
                "5",
                "--folds",
                "2",
                "--draws",
                "2",
                "--backend",
                "mc-dropout:0.2",
                "--out",
                str(out),
            ],
            capsys,
        )
        assert code == 0
        assert doc["models"] == {"armed": "ok", "mc-dropout:0.2": "ok"}
        assert doc["failed"] == []
        for name in ("performance.csv", "covariates.csv", "confidence.csv", "timing.csv"):
            assert (out / name).exists()
        assert json.loads((out / "report.json").read_text())["provenance"]["seed"] == 5

        code, doc = _run(["report", "--out", str(out)], capsys)
        assert code == 0
        assert doc["config_hash"] == json.loads((out / "report.json").read_text())[
            "provenance"
        ]["config_hash"]
