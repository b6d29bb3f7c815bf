import json

import numpy as np
import pytest

from wattnet.cli import RunConfig, main
from wattnet.model import REFERENCE_COUNTS


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    """Synthetic 100-image tree and one trained toy run."""
    root = tmp_path_factory.mktemp("toy")
    assert main(["synth", "--out", str(root / "data"), "--n", "100", "--size", "16"]) == 0
    args = ["train", "--d", "1", "--k", "2", "--size", "16", "--data", root / "data", "--epochs", "30",
            "--lr", "3e-3", "--seed", "0", "--out", root / "run"]
    assert main([str(a) for a in args]) == 0
    return root


class TestDescribe:
    @pytest.mark.parametrize("d,k", [(3, 6), (1, 2)])
    def test_total_line(self, capsys, d, k):
        code, out, _ = run(capsys, "describe", "--d", d, "--k", k)
        assert code == 0 and f"total params: {REFERENCE_COUNTS[(d, k)]}" in out.splitlines()

    def test_invalid_d(self, capsys):
        code, _, err = run(capsys, "describe", "--d", 0)
        assert code == 2 and "d must be" in err

    def test_bad_flag(self, capsys):
        assert run(capsys, "describe", "--bogus")[0] == 2

    def test_writes_csv_and_config(self, capsys, tmp_path):
        assert run(capsys, "describe", "--d", 1, "--k", 3, "--no-attention", "--out", tmp_path)[0] == 0
        assert (tmp_path / "summary.csv").read_text().startswith("layer,out_shape,params,macs\n")
        cfg = RunConfig.from_json((tmp_path / "config.json").read_text())
        assert cfg.command == "describe" and cfg.k == 3 and cfg.attention is False


class TestAblate:
    def test_default_grid(self, capsys):
        code, out, _ = run(capsys, "ablate")
        rows = [line.split(",") for line in out.strip().splitlines()]
        assert code == 0 and rows[0][:4] == ["d", "k", "attention", "params"]
        got = {(int(r[0]), int(r[1])): int(r[3]) for r in rows[1:]}
        assert got == REFERENCE_COUNTS and len(rows) == 15

    def test_second_differences(self, capsys):
        out = run(capsys, "ablate")[1]
        rows = [list(map(int, line.split(",")[:4])) for line in out.strip().splitlines()[1:]]
        for d, expected in [(1, 1024), (3, 30976)]:
            counts = [r[3] for r in rows if r[0] == d]
            assert set(np.diff(counts, 2).tolist()) == {expected}

    def test_attention_both(self, capsys, tmp_path):
        code, out, _ = run(capsys, "ablate", "--d", 1, 3, "--k", 2, "--attention", "both", "--out", tmp_path)
        rows = [line.split(",") for line in out.strip().splitlines()[1:]]
        assert code == 0 and len(rows) == 4
        for on, off in zip(rows[::2], rows[1::2]):
            assert on[2] == "1" and off[2] == "0" and on[3] == off[3]
            assert int(on[4]) > 0 and off[4] == "0"
        assert (tmp_path / "ablation.csv").read_text() == out


class TestTrainEval:
    def test_artifacts(self, toy):
        run_dir = toy / "run"
        history = (run_dir / "history.csv").read_text().splitlines()
        assert history[0] == "epoch,train_loss,valid_loss,valid_f1" and len(history) == 31
        assert (run_dir / "best.ckpt").read_bytes()[:4] == b"WATT"
        cfg = json.loads((run_dir / "config.json").read_text())
        assert cfg["epochs"] == 30 and cfg["command"] == "train"

    def test_eval_overfit_train_split(self, capsys, toy, tmp_path):
        code, out, _ = run(capsys, "eval", toy / "run" / "best.ckpt", "--data", toy / "data", "--split", "train",
                           "--out", tmp_path)
        f1 = float(out.split("macro F1:")[1])
        assert code == 0 and f1 >= 95.0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["confusion.csv"] + [f"pr_class{i}.csv" for i in range(5)]

    def test_confusion_rows_are_class_counts(self, capsys, toy, tmp_path):
        run(capsys, "eval", toy / "run" / "best.ckpt", "--data", toy / "data", "--split", "test", "--out", tmp_path)
        rows = (tmp_path / "confusion.csv").read_text().strip().splitlines()[1:]
        assert [sum(map(int, r.split(",")[1:])) for r in rows] == [6] * 5  # 20 per class at 4:1:2

    def test_zero_lr_flat(self, capsys, toy, tmp_path):
        code = run(capsys, "train", "--d", 1, "--k", 1, "--size", 16, "--data", toy / "data", "--epochs", 2,
                   "--lr", 0, "--out", tmp_path)[0]
        rows = (tmp_path / "history.csv").read_text().strip().splitlines()[1:]
        assert code == 0 and len({r.split(",", 1)[1] for r in rows}) == 1

    def test_corrupt_checkpoint(self, capsys, toy, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"NOPE" + (toy / "run" / "best.ckpt").read_bytes()[4:])
        code, _, err = run(capsys, "eval", bad, "--data", toy / "data")
        assert code == 3 and "magic" in err

    def test_missing_data(self, capsys, tmp_path):
        code, _, err = run(capsys, "train", "--data", tmp_path / "none", "--out", tmp_path / "o")
        assert code == 3

    def test_class_count_mismatch(self, capsys, toy, tmp_path):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            (tmp_path / name / "x.ppm").write_bytes((toy / "data" / "disk" / "00000.ppm").read_bytes())
        assert run(capsys, "eval", toy / "run" / "best.ckpt", "--data", tmp_path, "--split", "all")[0] == 3

    def test_run_config_round_trip(self):
        cfg = RunConfig("train", d=5, k=3, attention=False, data="x", seed=4, epochs=7, lr=0.5, batch=9, out="o")
        assert RunConfig.from_json(cfg.to_json()) == cfg
