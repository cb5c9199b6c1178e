import csv
import json

import pytest
from conftest import tiny_config

from curatedcl.cli import main
from curatedcl.config import dump_config
from curatedcl.evaluation import import_embeddings


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(dump_config(tiny_config()))
    return path


@pytest.fixture
def trained(tmp_path, cfg_file):
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg_file), "--out", str(out), "-q"]) == 0
    return out


class TestPretrain:
    def test_outputs_and_manifest(self, trained):
        assert (trained / "metrics.csv").stat().st_size > 0
        manifest = json.loads((trained / "manifest.json").read_text())
        assert manifest["seed"] == 0 and len(manifest["dataset"]["fingerprint"]) == 64
        assert "final.cur" in manifest["outputs"] and "metrics.csv" in manifest["outputs"]
        assert "transform.channel_mean" in manifest["config"]
        assert list(trained.rglob("manifest.json")) == [trained / "manifest.json"]

    def test_rerun_from_manifest(self, trained, tmp_path):
        again = tmp_path / "again"
        assert main(["pretrain", "--manifest", str(trained / "manifest.json"), "--out", str(again), "-q"]) == 0
        assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()

    def test_unknown_key_exit_2(self, tmp_path, cfg_file, capsys):
        code = main(["pretrain", "--config", str(cfg_file), "--set", "loss.tempreture=1", "--out", str(tmp_path / "x")])
        assert code == 2
        assert "loss.tempreture" in capsys.readouterr().err

    def test_bad_config_file_line(self, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text("epochs: 3\n")
        assert main(["pretrain", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "x")]) == 2

    def test_missing_data_exit_3(self, tmp_path, cfg_file, monkeypatch):
        monkeypatch.delenv("CURATEDCL_DATA_ROOT", raising=False)
        code = main(["pretrain", "--config", str(cfg_file), "--set", "data.name=mnist",
                     "--data-root", str(tmp_path / "none"), "--out", str(tmp_path / "x")])
        assert code == 3

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numerical_abort_exit_4(self, tmp_path, cfg_file, capsys):
        code = main(["pretrain", "--config", str(cfg_file), "--set", "base_lr=1e300", "--out", str(tmp_path / "x"), "-q"])
        assert code == 4
        assert "non-finite" in capsys.readouterr().err


class TestEvalCommands:
    def test_probe_knn_and_record(self, trained, capsys):
        assert main(["probe", str(trained / "final.cur"), "--probe", "knn"]) == 0
        acc = float(capsys.readouterr().out.strip())
        record = json.loads((trained / "final.probe-knn-h.json").read_text())
        assert record["top1"] == pytest.approx(acc, abs=5e-5) and record["k"] == 5

    def test_probe_linear_z(self, trained, capsys):
        assert main(["probe", str(trained / "final.cur"), "--probe", "linear", "--source", "z"]) == 0
        assert 0.0 <= float(capsys.readouterr().out) <= 1.0

    def test_invalid_probe_exit_2(self, trained):
        with pytest.raises(SystemExit) as info:
            main(["probe", str(trained / "final.cur"), "--probe", "svm"])
        assert info.value.code == 2

    def test_missing_checkpoint_exit_3(self, tmp_path):
        assert main(["probe", str(tmp_path / "nope.cur")]) == 3

    def test_corrupt_checkpoint_exit_3(self, tmp_path, capsys):
        (tmp_path / "bad.cur").write_bytes(b"CUR1\x01")
        assert main(["probe", str(tmp_path / "bad.cur")]) == 3
        assert "offset" in capsys.readouterr().err

    def test_score_single_batch(self, trained, capsys):
        assert main(["score", str(trained / "final.cur"), "--batches", "1"]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0] == "batch\tfrd" and len(lines) == 3
        assert lines[1].split("\t")[1] == lines[2].split("\t")[1]

    def test_score_mean_is_exact(self, trained, capsys):
        from curatedcl.curation import mean_score

        main(["score", str(trained / "final.cur"), "--batches", "4"])
        lines = capsys.readouterr().out.strip().splitlines()
        rows = [float(line.split("\t")[1]) for line in lines[1:-1]]
        assert float(lines[-1].split("\t")[1]) == mean_score(rows)

    def test_score_corruption_flag(self, trained, capsys):
        main(["score", str(trained / "final.cur"), "--batches", "4"])
        benign = [float(x.split("\t")[1]) for x in capsys.readouterr().out.splitlines()[1:-1]]
        main(["score", str(trained / "final.cur"), "--batches", "4", "--corrupt", "blackout"])
        bad = [float(x.split("\t")[1]) for x in capsys.readouterr().out.splitlines()[1:-1]]
        assert all(b > a for a, b in zip(benign, bad))

    def test_export(self, trained, tmp_path):
        assert main(["export", str(trained / "final.cur"), "--out", str(tmp_path / "e.emb"), "--source", "z"]) == 0
        emb = import_embeddings(tmp_path / "e.emb")
        assert emb.vectors.shape == (16, 4) and len(emb.labels) == 16

    def test_init_checkpoint_probes(self, tmp_path, cfg_file, capsys):
        assert main(["init", "--config", str(cfg_file), "--out", str(tmp_path / "init")]) == 0
        capsys.readouterr()
        assert main(["probe", str(tmp_path / "init" / "final.cur")]) == 0
        assert 0.0 <= float(capsys.readouterr().out) <= 1.0


class TestAblation:
    def test_six_rows_shared_fingerprint(self, tmp_path, cfg_file):
        out = tmp_path / "abl"
        assert main(["ablation", "--config", str(cfg_file), "--set", "epochs=3", "--out", str(out)]) == 0
        rows = list(csv.DictReader((out / "ablation.csv").open()))
        assert len(rows) == 6
        assert len({r["dataset_fingerprint"] for r in rows}) == 1
        assert {(r["frd"], r["regularizer_kind"]) for r in rows} == {
            (f, k) for f in ("on", "off") for k in ("huber", "l1", "l2")
        }
        assert all(r["status"] == "ok" for r in rows)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["dataset"]["fingerprint"] == rows[0]["dataset_fingerprint"]


class TestEndToEnd:
    def test_desk_pretrain_beats_chance(self, tmp_path, capsys):
        """Desk profile on the synthetic set, probed through the CLI."""
        (tmp_path / "desk.cfg").write_text("epochs = 30\nwarmup_epochs = 5\n")
        assert main(["init", "--config", str(tmp_path / "desk.cfg"), "--out", str(tmp_path / "init")]) == 0
        assert main(["pretrain", "--config", str(tmp_path / "desk.cfg"), "--out", str(tmp_path / "run"), "-q"]) == 0
        capsys.readouterr()
        chance = 1 / 10
        main(["probe", str(tmp_path / "init" / "final.cur"), "--probe", "knn"])
        random_init = float(capsys.readouterr().out)
        main(["probe", str(tmp_path / "run" / "final.cur"), "--probe", "linear"])
        trained = float(capsys.readouterr().out)
        assert 0.0 <= random_init <= 1.0
        assert trained >= chance + 0.30
