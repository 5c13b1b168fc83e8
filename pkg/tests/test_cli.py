import csv

import numpy as np
import pytest

from adapformer import cli, dataio
from adapformer.metrics import EvalReport
from adapformer.synthetic import paired_sinusoids

SMALL = ["--lookback", "16", "--horizon", "8", "--d-model", "8", "--rank", "2", "--heads", "2",
         "--layers", "1", "--d-ff", "16", "--epochs", "2"]


@pytest.fixture
def dataset(tmp_path):
    v, _ = paired_sinusoids(n_rows=300, n_pairs=2, seed=0)
    p = tmp_path / "pairs.csv"
    dataio.save_csv(p, v, ["a", "b", "c", "d"], [f"2020-01-01 {i:05d}" for i in range(300)])
    return p


def run(capsys, *argv):
    rc = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestConfig:
    def test_dry_run(self, capsys, dataset, tmp_path):
        rc, out, _ = run(capsys, "train", "--dataset", dataset, "--topk", "3", "--dry-run", "--out", tmp_path)
        assert rc == 0 and "topk = 3" in out and "lookback = 96" in out
        assert not any(tmp_path.glob("pairs_*"))

    def test_missing_dataset(self, capsys, tmp_path):
        rc, _, err = run(capsys, "train", "--dataset", tmp_path / "nowhere.csv")
        assert rc == 2 and "nowhere.csv" in err

    def test_file_then_flags(self, capsys, dataset, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text(f"[run]\ndataset = {dataset}\ntopk = 3\nrank = 4\nuse_ace = false\n")
        rc, out, _ = run(capsys, "train", "--config", ini, "--rank", "8", "--dry-run")
        assert rc == 0
        assert "topk = 3" in out and "rank = 8" in out and "use_ace = False" in out

    def test_unknown_key(self, capsys, tmp_path):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nbogus = 1\n")
        rc, _, err = run(capsys, "train", "--config", ini)
        assert rc == 2 and "bogus" in err

    def test_bad_value(self, capsys, tmp_path, dataset):
        ini = tmp_path / "run.ini"
        ini.write_text(f"[run]\ndataset = {dataset}\nlookback = many\n")
        rc, _, err = run(capsys, "train", "--config", ini)
        assert rc == 2 and "lookback" in err

    def test_invalid_model_field(self, capsys, dataset):
        rc, _, err = run(capsys, "train", "--dataset", dataset, "--d-model", "10", "--heads", "4")
        assert rc == 2 and "d_model" in err

    def test_aux_scale_flag(self, capsys, dataset):
        rc, out, _ = run(capsys, "train", "--dataset", dataset, "--aux-scale", "raw", "--dry-run")
        assert rc == 0 and "aux_scale = raw" in out

    def test_no_acf_selects_mlp(self, capsys, dataset):
        rc, out, _ = run(capsys, "train", "--dataset", dataset, "--no-acf", "--dry-run")
        assert rc == 0 and "predictor = mlp" in out


class TestRun:
    def test_data_error(self, capsys, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("a,b\n1,2\n3,nan\n")
        rc, _, err = run(capsys, "train", "--dataset", bad, *SMALL)
        assert rc == 3 and "line 3" in err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss(self, capsys, dataset, tmp_path):
        rc, _, err = run(capsys, "train", "--dataset", dataset, *SMALL, "--lr", "1e300", "--out", tmp_path)
        assert rc == 4 and "non-finite" in err

    def test_train_forecast_eval_agree(self, capsys, dataset, tmp_path):
        rc, out, _ = run(capsys, "train", "--dataset", dataset, *SMALL, "--out", tmp_path)
        assert rc == 0 and "mse=" in out and "mae=" in out
        rundir = tmp_path / "pairs_T16_L8_s0"
        names = {p.name for p in rundir.iterdir()}
        assert {"checkpoint.npz", "report.txt", "predictions.csv", "history.csv", "config.ini"} <= names
        trained = EvalReport.from_text((rundir / "report.txt").read_text())

        rc, out, _ = run(capsys, "forecast", "--checkpoint", rundir / "checkpoint.npz", "--input", dataset,
                         "--split", "test", "--predictions", tmp_path / "fc.csv",
                         "--plot-data", tmp_path / "plot.csv", "--plot-channel", "1")
        assert rc == 0
        again = EvalReport.from_text(out)
        assert abs(again.mse - trained.mse) <= 1e-9 and abs(again.mae - trained.mae) <= 1e-9

        rc, out, _ = run(capsys, "eval", "--checkpoint", rundir / "checkpoint.npz", "--dataset", dataset)
        assert rc == 0 and abs(EvalReport.from_text(out).mse - trained.mse) <= 1e-9

        rows = read_csv(tmp_path / "fc.csv")
        n_windows = dataio.window_count(len(dataio.split_chronological(300)[2]), 16, 8)
        assert len({r["window"] for r in rows}) == n_windows == trained.n_samples
        plot = read_csv(tmp_path / "plot.csv")
        assert list(plot[0]) == ["t", "channel", "truth", "prediction"]
        assert len(plot) == 24 and {r["channel"] for r in plot} == {"b"}
        assert sum(1 for r in plot if r["prediction"]) == 8

    def test_forecast_all_windows(self, capsys, dataset, tmp_path):
        run(capsys, "train", "--dataset", dataset, *SMALL, "--out", tmp_path)
        rc, _, _ = run(capsys, "forecast", "--checkpoint", tmp_path / "pairs_T16_L8_s0" / "checkpoint.npz",
                       "--input", dataset, "--predictions", tmp_path / "all.csv")
        rows = read_csv(tmp_path / "all.csv")
        assert rc == 0 and len(rows) == dataio.window_count(300, 16, 8) * 8 * 4

    def test_channel_mismatch(self, capsys, dataset, tmp_path):
        run(capsys, "train", "--dataset", dataset, *SMALL, "--out", tmp_path)
        other = tmp_path / "three.csv"
        dataio.save_csv(other, np.random.default_rng(0).normal(size=(100, 3)), ["x", "y", "z"])
        rc, _, err = run(capsys, "forecast", "--checkpoint", tmp_path / "pairs_T16_L8_s0" / "checkpoint.npz",
                         "--input", other)
        assert rc == 3 and "3 channels" in err and "4" in err

    def test_sweep(self, capsys, dataset, tmp_path):
        rc, out, _ = run(capsys, "sweep", "--dataset", dataset, *SMALL, "--out", tmp_path,
                         "--grid", "topk=1,2,4;lr=1e-3")
        rows = read_csv(tmp_path / "sweep_pairs_L8_s0.csv")
        assert rc == 0 and len(rows) == 3 and [int(r["topk"]) for r in rows] == [1, 2, 4]

    def test_sweep_single_equals_train(self, capsys, dataset, tmp_path):
        run(capsys, "sweep", "--dataset", dataset, *SMALL, "--out", tmp_path, "--grid", "topk=2")
        (row,) = read_csv(tmp_path / "sweep_pairs_L8_s0.csv")
        _, out, _ = run(capsys, "train", "--dataset", dataset, *SMALL, "--out", tmp_path)
        assert float(row["mse"]) == EvalReport.from_text(out).mse

    def test_bad_grid(self, capsys, dataset):
        rc, _, err = run(capsys, "sweep", "--dataset", dataset, "--grid", "heads=2")
        assert rc == 2 and "heads" in err

    def test_ablate(self, capsys, dataset, tmp_path):
        rc, out, _ = run(capsys, "ablate", "--dataset", dataset, *SMALL, "--epochs", "1",
                         "--out", tmp_path, "--seeds", "0,1")
        assert rc == 0
        rows = read_csv(tmp_path / "ablation_pairs_L8.csv")
        assert set(rows[0]) - {"seed", "metric"} == {"full", "no_ace", "no_acf", "no_aux", "ci", "cd"}
        norms = [r for r in rows if r["metric"] == "simblock_grad_norm"]
        assert all(float(r["no_aux"]) == 0.0 and float(r["full"]) > 0 for r in norms)
        assert len([r for r in rows if r["metric"] == "mse"]) == 3
