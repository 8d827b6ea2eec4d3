import csv
import json

import numpy as np
import pytest

from transpar.cli import main
from transpar.harness import TrainConfig
from transpar.optim import partition_count

SMALL_CONFIG = {
    "scenario": {"kind": "two_moons_rotation", "theta": 30.0, "n_source": 200, "n_target": 200},
    "hidden": 8,
    "disc_hidden": 4,
    "epochs": 2,
}


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(SMALL_CONFIG))
    return path


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestGenData:
    def test_files(self, tmp_path, capsys):
        assert main(["gen-data", "--scenario", "label-shift", "--proportions", "0.8,0.2",
                     "--n", "500", "--seed", "3", "--out", str(tmp_path)]) == 0
        meta = json.loads((tmp_path / "metadata.json").read_text())
        assert meta["scenario"] == "target_label_shift" and meta["seed"] == 3
        assert meta["counts"]["target"]["classes"] == [400, 100]
        rows = _read_csv(tmp_path / "target.csv")
        assert list(rows[0]) == ["x0", "x1", "y", "d", "split"]
        assert len(rows) == 500 and {r["d"] for r in rows} == {"0"}
        assert sum(r["split"] == "train" for r in rows) == 400

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            main(["gen-data", "--theta", "45", "--n", "100", "--out", str(tmp_path / name)])
        assert (tmp_path / "a/source.csv").read_bytes() == (tmp_path / "b/source.csv").read_bytes()
        assert (tmp_path / "a/target.csv").read_bytes() == (tmp_path / "b/target.csv").read_bytes()

    def test_bad_theta(self, tmp_path):
        assert main(["gen-data", "--theta", "200", "--out", str(tmp_path)]) == 2


class TestTrainEval:
    def test_estimate_then_train(self, tmp_path, config_file, capsys):
        ratio = tmp_path / "ratio.json"
        assert main(["estimate-ratio", "--config", str(config_file), "--out", str(ratio)]) == 0
        assert 0.1 <= json.loads(ratio.read_text())["tau"] <= 0.75
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--ratio", str(ratio),
                     "--method", "transpar-dann", "--out", str(out)]) == 0
        rows = _read_csv(out / "metrics.csv")
        assert len(rows) == 2
        assert float(rows[0]["tau"]) == json.loads(ratio.read_text())["tau"]

    def test_predictions_recount(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--method", "dann", "--out", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        preds = _read_csv(out / "predictions.csv")
        for domain, key in (("source", "acc_src"), ("target", "acc_tgt")):
            sel = [r for r in preds if r["domain"] == domain]
            assert np.mean([r["y"] == r["pred"] for r in sel]) == summary[key]
        last = _read_csv(out / "metrics.csv")[-1]
        assert float(last["acc_tgt"]) == summary["acc_tgt"]

    def test_eval_matches_train(self, tmp_path, config_file, capsys):
        data_dir, out = tmp_path / "data", tmp_path / "run"
        main(["gen-data", "--theta", "30", "--n", "200", "--seed", "0", "--out", str(data_dir)])
        main(["train", "--config", str(config_file), "--method", "source-only", "--out", str(out)])
        trained = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(data_dir)]) == 0
        scored = json.loads(capsys.readouterr().out)
        assert scored["source_test_acc"] == trained["acc_src"]
        assert scored["target_test_acc"] == trained["acc_tgt"]

    def test_dump_masks_replay(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        cfg = dict(SMALL_CONFIG, epochs=1, tau_override=0.6)
        config_file.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(config_file), "--out", str(out), "--dump-masks"]) == 0
        files = sorted((out / "masks").iterdir())
        n_iter = len(files) // 3
        assert n_iter == 3  # 160 source rows / batch 64, lockstep with target
        m_f = TrainConfig.from_dict(cfg).net_config
        first = np.unpackbits(np.frombuffer((out / "masks/iter000000_FE.bin").read_bytes(), np.uint8))
        n_fe = 2 * m_f.hidden + m_f.hidden + m_f.hidden ** 2 + m_f.hidden
        assert first[:n_fe].sum() == partition_count(n_fe, 0.6)

    def test_missing_config(self, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2

    def test_bad_config_value(self, tmp_path, config_file):
        config_file.write_text(json.dumps(dict(SMALL_CONFIG, lr=-1)))
        assert main(["train", "--config", str(config_file), "--out", str(tmp_path / "r")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exit(self, tmp_path, config_file):
        config_file.write_text(json.dumps(dict(SMALL_CONFIG, lr=1e200)))
        out = tmp_path / "r"
        assert main(["train", "--config", str(config_file), "--method", "dann", "--out", str(out)]) == 3
        assert (out / "metrics.csv").exists()

    def test_eval_missing_data(self, tmp_path, config_file, capsys):
        out = tmp_path / "run"
        main(["train", "--config", str(config_file), "--method", "dann", "--out", str(out)])
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["eval", "--checkpoint", str(out / "checkpoint.json"), "--data", str(empty)]) == 2


class TestSuiteCommand:
    def test_bytewise_rerun(self, tmp_path, config_file, capsys):
        config_file.write_text(json.dumps(dict(SMALL_CONFIG, epochs=1)))
        for name in ("a", "b"):
            assert main(["suite", "--config", str(config_file), "--seeds", "2",
                         "--out", str(tmp_path / name)]) == 0
        for fname in ("metrics.csv", "suite.json", "summary.md"):
            assert (tmp_path / "a" / fname).read_bytes() == (tmp_path / "b" / fname).read_bytes()

    def test_one_seed_rejected(self, tmp_path, config_file):
        assert main(["suite", "--config", str(config_file), "--seeds", "1", "--out", str(tmp_path)]) == 2
