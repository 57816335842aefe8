import csv
import filecmp
import json

import numpy as np
import pytest

from harmonet.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from harmonet.synthdata import load_dataset


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def header(path):
    return path.read_text().splitlines()[0].split(",")


def all_files(root):
    return sorted(p.relative_to(root).as_posix() for p in root.rglob("*") if p.is_file())


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["gen", "--train", "8", "--val", "2", "--test", "6", "--size", "16", "--seed", "7",
                 "--out", str(data)]) == EXIT_OK
    run = root / "run"
    assert main(["train", "--data", str(data), "--out", str(run), "--phase", "both", "--epochs1", "2",
                 "--epochs2", "1", "--batch-size", "4", "--k-train", "2"]) == EXIT_OK
    return root, data, run


class TestGen:
    def test_count_contract(self, tmp_path):
        out = tmp_path / "d"
        assert main(["gen", "--train", "5", "--val", "2", "--test", "3", "--raters", "4", "--seed", "7",
                     "--out", str(out)]) == EXIT_OK
        ds = load_dataset(out)
        assert sum(len(ds[s]) for s in ("train", "val", "test")) == 10
        assert len(list(out.glob("img_*.bin"))) == 10 and len(list(out.glob("mask_*.bin"))) == 40

    def test_rerun_byte_identical(self, tmp_path):
        out = tmp_path / "d"
        args = ["gen", "--train", "3", "--val", "1", "--test", "2", "--seed", "7", "--out", str(out), "--force"]
        main(args)
        first = {f: (out / f).read_bytes() for f in all_files(out)}
        main(args)
        assert "run_manifest.json" in first
        assert {f: (out / f).read_bytes() for f in all_files(out)} == first

    def test_other_directory_same_samples(self, tmp_path):
        args = ["gen", "--train", "3", "--val", "1", "--test", "2", "--seed", "7", "--out"]
        main(args + [str(tmp_path / "a")])
        main(args + [str(tmp_path / "b")])
        files = [f for f in all_files(tmp_path / "a") if f != "run_manifest.json"]
        assert filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", files, shallow=False)[1] == []

    def test_single_rater(self, tmp_path):
        assert main(["gen", "--train", "2", "--val", "1", "--test", "1", "--raters", "1",
                     "--out", str(tmp_path / "d")]) == EXIT_OK
        assert load_dataset(tmp_path / "d")["train"].masks.shape[1] == 1

    def test_non_empty_needs_force(self, tmp_path):
        out = tmp_path / "d"
        out.mkdir()
        (out / "x").write_text("keep")
        base = ["gen", "--train", "2", "--val", "1", "--test", "1", "--out", str(out)]
        assert main(base) == EXIT_USAGE
        assert (out / "x").exists()
        assert main(base + ["--force"]) == EXIT_OK
        assert not (out / "x").exists()

    def test_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HZ_SEED", "7")
        main(["gen", "--train", "2", "--val", "1", "--test", "1", "--out", str(tmp_path / "env")])
        main(["gen", "--train", "2", "--val", "1", "--test", "1", "--seed", "7", "--out", str(tmp_path / "flag")])
        assert (tmp_path / "env" / "img_000000.bin").read_bytes() == (tmp_path / "flag" / "img_000000.bin").read_bytes()
        monkeypatch.setenv("HZ_SEED", "seven")
        assert main(["gen", "--train", "2", "--val", "1", "--test", "1", "--out", str(tmp_path / "bad")]) == EXIT_USAGE

    @pytest.mark.parametrize("extra", [["--train", "0"], ["--raters", "5"], ["--size", "20"]])
    def test_usage_errors(self, tmp_path, extra):
        assert main(["gen", "--out", str(tmp_path / "d")] + extra) == EXIT_USAGE

    def test_argparse_error_exits_2(self):
        with pytest.raises(SystemExit) as info:
            main(["gen"])
        assert info.value.code == 2


class TestTrain:
    def test_outputs(self, work):
        _, _, run = work
        for name in ("phase1.hzck", "phase2.hzck", "loss_phase1.csv", "loss_phase2.csv", "run_manifest.json"):
            assert (run / name).exists()
        assert header(run / "loss_phase1.csv") == ["epoch", "seg", "kl", "harm", "ged", "total"]
        assert [r["epoch"] for r in rows(run / "loss_phase1.csv")] == ["0", "1", "2"]
        assert header(run / "loss_phase2.csv") == ["epoch", "loss", "dice_r0", "dice_r1", "dice_r2", "dice_r3"]
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["command"] == "train" and manifest["config"]["train_config"]["phase1_epochs"] == 2
        assert "wall_clock_seconds" in manifest

    def test_no_ged_drops_column(self, work, tmp_path):
        _, data, _ = work
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--phase", "1", "--epochs1", "1",
                     "--no-ged", "--no-harmonizer"]) == EXIT_OK
        assert "ged" not in header(tmp_path / "loss_phase1.csv")

    def test_phase2_from_explicit_checkpoint(self, work, tmp_path):
        _, data, run = work
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--phase", "2", "--epochs2", "1",
                     "--checkpoint", str(run / "phase1.hzck")]) == EXIT_OK
        assert (tmp_path / "phase2.hzck").exists()

    def test_phase2_without_checkpoint(self, work, tmp_path):
        _, data, _ = work
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--phase", "2"]) == EXIT_DATA

    def test_missing_data(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_bad_config(self, work, tmp_path):
        _, data, _ = work
        assert main(["train", "--data", str(data), "--out", str(tmp_path), "--k-train", "1"]) == EXIT_USAGE

    def test_nan_input_is_numeric_failure(self, work, tmp_path):
        _, data, _ = work
        import shutil
        from harmonet.synthdata import read_tensor_file, write_tensor_file
        bad = tmp_path / "bad"
        shutil.copytree(data, bad)
        img = read_tensor_file(bad / "img_000000.bin")
        img[0, 0, 0] = np.nan
        write_tensor_file(bad / "img_000000.bin", img)
        assert main(["train", "--data", str(bad), "--out", str(tmp_path / "o"), "--phase", "1",
                     "--epochs1", "1"]) == EXIT_NUMERIC
        assert (tmp_path / "o" / "phase1_last_good.hzck").exists()


class TestEval:
    def test_metrics_and_sweep(self, work, tmp_path):
        _, data, run = work
        assert main(["eval", "--checkpoint", str(run / "phase2.hzck"), "--data", str(data), "--out", str(tmp_path),
                     "--k", "4", "--sweep-k", "1,4,8"]) == EXIT_OK
        m = json.loads((tmp_path / "metrics.json").read_text())
        for key in ("ged", "dice_soft", "dice_max", "dice_match", "dice_per_rater", "ece_per_rater",
                    "brier_per_rater"):
            assert key in m
        assert len(m["dice_per_rater"]) == 4
        assert [c for c in header(tmp_path / "cases.csv") if c.startswith("dice_r")] == [
            "dice_r0", "dice_r1", "dice_r2", "dice_r3"]
        assert len(rows(tmp_path / "cases.csv")) == 6
        assert [r["K"] for r in rows(tmp_path / "ged_vs_k.csv")] == ["1", "4", "8"]
        assert (tmp_path / "ged_vs_k.svg").read_text().startswith("<svg")

    def test_missing_checkpoint(self, work, tmp_path):
        _, data, _ = work
        assert main(["eval", "--checkpoint", str(tmp_path / "none.hzck"), "--data", str(data),
                     "--out", str(tmp_path / "o")]) == EXIT_DATA

    def test_bad_sweep(self, work, tmp_path):
        _, data, run = work
        assert main(["eval", "--checkpoint", str(run / "phase1.hzck"), "--data", str(data), "--out", str(tmp_path),
                     "--sweep-k", "1,x"]) == EXIT_USAGE


class TestPerturbEval:
    def test_grid_identity_and_compare(self, work, tmp_path):
        _, data, run = work
        assert main(["perturb-eval", "--checkpoint", str(run / "phase1.hzck"), "--compare",
                     str(run / "phase2.hzck"), "--data", str(data), "--out", str(tmp_path), "--seeds", "1",
                     "--with-identity"]) == EXIT_OK
        table = rows(tmp_path / "robustness.csv")
        assert header(tmp_path / "robustness.csv") == ["model", "kind", "magnitude", "clean_dsc", "perturbed_dsc",
                                                      "abs_delta"]
        for tag in ("primary", "compare"):
            mine = [r for r in table if r["model"] == tag]
            assert len(mine) == 10
            assert mine[0]["kind"] == "identity" and float(mine[0]["abs_delta"]) == 0.0
            kinds = [r["kind"] for r in mine[1:]]
            assert kinds.count("gaussian_noise") == kinds.count("gaussian_blur") == kinds.count("gamma") == 3


class TestAnalyze:
    def test_bundle(self, work, tmp_path):
        _, data, run = work
        assert main(["analyze", "--checkpoint", str(run / "phase2.hzck"), "--data", str(data), "--out",
                     str(tmp_path), "--k", "4"]) == EXIT_OK
        assert [r["class"] for r in rows(tmp_path / "entropy_by_correctness.csv")] == ["TP", "FP", "FN", "TN"]
        assert [r["rater"] for r in rows(tmp_path / "calibration.csv")] == ["0", "1", "2", "3", "mean"]
        assert len(rows(tmp_path / "spectrum.csv")) == 16 // 2 + 1
        assert [r["regime"] for r in rows(tmp_path / "entropy_by_agreement.csv")] == ["agree", "somewhat",
                                                                                       "disagree"]
        assert len(rows(tmp_path / "size_bins.csv")) == 3
        assert len(rows(tmp_path / "entropy_scatter.csv")) == 6
        for svg in ("entropy_by_correctness", "entropy_scatter", "entropy_by_agreement", "size_bins", "spectrum"):
            assert (tmp_path / f"{svg}.svg").exists()
        from harmonet.plots import read_pgm
        grid = read_pgm(tmp_path / "sample_grid.pgm")
        assert grid.shape == (4 * 17 - 1, 11 * 17 - 1)
        assert len(list(tmp_path.glob("run_manifest.json"))) == 1
