import csv
import json
import struct

import numpy as np
import pytest

from fisherdet import data
from fisherdet.cli import main


def run(*argv):
    try:
        return main([str(a) for a in argv])
    except SystemExit as exc:  # argparse usage errors
        return exc.code


@pytest.fixture(scope="module")
def blob_run(tmp_path_factory):
    """Blobs dataset plus a model trained on it for 50 epochs."""
    d = tmp_path_factory.mktemp("cli")
    assert run("blobs", "--classes", 2, "--per-class", 100, "--dim", 2, "--seed", 7, "--out", d / "blobs") == 0
    assert run("train", "--data", d / "blobs", "--arch", "mlp:2-8-2", "--epochs", 50,
               "--batch-size", 16, "--out", d / "model.json") == 0
    return d


def manifest(path):
    return json.loads(open(path).read())


class TestTrain:
    def test_missing_dataset(self, tmp_path):
        assert run("train", "--data", tmp_path / "nope", "--out", tmp_path / "m.json") == 2

    def test_blobs_accuracy_recorded(self, blob_run):
        man = manifest(blob_run / "model.json.manifest.json")
        assert man["train_accuracy"] >= 0.99
        assert man["subcommand"] == "train"
        assert set(man["outputs"]) >= {str(blob_run / "model.json.bin")}
        log_rows = list(csv.DictReader(open(blob_run / "model.json.log.csv")))
        assert len(log_rows) == 50

    def test_seed_repeat_identical_checksum(self, blob_run, tmp_path):
        args = ("train", "--data", blob_run / "blobs", "--arch", "mlp:2-8-2", "--epochs", 3, "--seed", 5)
        assert run(*args, "--out", tmp_path / "a.json") == 0
        assert run(*args, "--out", tmp_path / "b.json") == 0
        assert data.file_sha256(tmp_path / "a.json.bin") == data.file_sha256(tmp_path / "b.json.bin")

    def test_bad_architecture(self, blob_run, tmp_path):
        assert run("train", "--data", blob_run / "blobs", "--arch", "resnet", "--out", tmp_path / "m.json") == 1


class TestAttack:
    def test_zero_eps(self, blob_run, tmp_path, capsys):
        assert run("attack", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--eps", 0, "--out", tmp_path / "adv") == 0
        line = capsys.readouterr().out
        fields = dict(kv.split("=") for kv in line.split())
        assert fields["clean_acc"] == fields["adv_acc"]
        rows = list(csv.DictReader(open(tmp_path / "adv-success.csv")))
        assert len(rows) == 200 and all(r["success"] == "0" for r in rows)
        assert (tmp_path / "adv-images.idx.manifest.json").exists()

    def test_unknown_method(self, blob_run, tmp_path):
        assert run("attack", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--method", "pgd", "--out", tmp_path / "adv") == 2

    def test_outputs_reload(self, blob_run, tmp_path):
        assert run("attack", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--eps", 0.2, "--limit", 20, "--out", tmp_path / "adv") == 0
        adv = data.resolve_dataset(tmp_path / "adv")
        assert len(adv) == 20
        assert adv.inputs.min() >= 0 and adv.inputs.max() <= 1


class TestScore:
    def test_quantity_all(self, blob_run, tmp_path):
        assert run("score", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--limit", 10, "--out", tmp_path / "s.csv") == 0
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert len(rows) == 10
        for col in ("trace", "form", "normalized_form"):
            assert all(r[col] != "" for r in rows)
        idx = [int(r["sample_index"]) for r in rows]
        assert idx == sorted(idx)

    def test_single_quantity(self, blob_run, tmp_path):
        assert run("score", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--limit", 5, "--quantity", "trace", "--out", tmp_path / "s.csv") == 0
        rows = list(csv.DictReader(open(tmp_path / "s.csv")))
        assert all(r["trace"] != "" and r["form"] == "" for r in rows)

    def test_default_eps_prime(self, blob_run, tmp_path):
        assert run("score", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--limit", 2, "--out", tmp_path / "s.csv") == 0
        man = manifest(tmp_path / "s.csv.manifest.json")
        assert man["score_config"]["fd_step"] == 1e-4
        assert man["parameters"]["eps_prime"] == 1e-4

    def test_empty_dataset(self, blob_run, tmp_path):
        (tmp_path / "e-images.idx").write_bytes(struct.pack(">IIIxxxx", 0xE02, 0, 2)[:12])
        (tmp_path / "e-labels.idx").write_bytes(struct.pack(">II", 0x801, 0))
        assert run("score", "--model", blob_run / "model.json", "--data", tmp_path / "e",
                   "--out", tmp_path / "s.csv") == 1

    def test_deterministic(self, blob_run, tmp_path):
        for name in ("a", "b"):
            assert run("score", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                       "--limit", 8, "--seed", 3, "--out", tmp_path / f"{name}.csv") == 0
        assert data.file_sha256(tmp_path / "a.csv") == data.file_sha256(tmp_path / "b.csv")


def write_scores(path, values, flag):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_index", "label", "predicted", "is_adversarial", "trace", "form", "normalized_form"])
        for i, v in enumerate(values):
            w.writerow([i, 0, 0, flag, v, v, v])


class TestRoc:
    def test_perfect(self, tmp_path, capsys):
        write_scores(tmp_path / "c.csv", [0, 0, 0], 0)
        write_scores(tmp_path / "a.csv", [1, 1, 1], 1)
        assert run("roc", "--clean", tmp_path / "c.csv", "--adv", tmp_path / "a.csv",
                   "--out", tmp_path / "roc.csv", "--hist", tmp_path / "h") == 0
        assert capsys.readouterr().out.strip() == "AUC 1.000000"
        assert (tmp_path / "h-clean.csv").exists() and (tmp_path / "h-adv.csv").exists()

    def test_identical(self, tmp_path, capsys):
        write_scores(tmp_path / "c.csv", [0.3, 0.1, 0.7], "")
        assert run("roc", "--clean", tmp_path / "c.csv", "--adv", tmp_path / "c.csv",
                   "--out", tmp_path / "roc.csv", "--gnuplot", tmp_path / "roc.dat") == 0
        assert capsys.readouterr().out.strip() == "AUC 0.500000"
        assert manifest(tmp_path / "roc.csv.manifest.json")["auc"] == 0.5

    def test_unknown_column(self, tmp_path):
        write_scores(tmp_path / "c.csv", [0.3], 0)
        assert run("roc", "--clean", tmp_path / "c.csv", "--adv", tmp_path / "c.csv",
                   "--quantity", "bogus", "--out", tmp_path / "roc.csv") == 2


class TestFis:
    @pytest.mark.parametrize("scaling", ["shared", "per-image"])
    def test_maps_and_csv_twins(self, blob_run, tmp_path, scaling):
        assert run("attack", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--eps", 0.2, "--out", tmp_path / "adv") == 0
        out = tmp_path / "maps"
        assert run("fis", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--adv-data", tmp_path / "adv", "--input-index", 3, "--scaling", scaling,
                   "--out-dir", out) == 0
        for name in ("clean", "adv"):
            assert (out / f"{name}-3-fis.pgm").exists()
            assert (out / f"{name}-3-image.pgm").exists()
            twin = data.read_heatmap_csv(out / f"{name}-3-fis.csv")
            assert twin.size == 2 and np.all(twin >= 0)
        clean = data.read_heatmap_csv(out / "clean-3-fis.csv").ravel()
        adv = data.read_heatmap_csv(out / "adv-3-fis.csv").ravel()
        gray = {n: data.read_pgm(out / f"{n}-3-fis.pgm").ravel() for n in ("clean", "adv")}
        if scaling == "shared":
            allv = np.concatenate([clean, adv])
            lo, hi = allv.min(), allv.max()
            for n, vals in (("clean", clean), ("adv", adv)):
                np.testing.assert_array_equal(gray[n], data.to_gray(vals, lo, hi))
        else:
            for n, vals in (("clean", clean), ("adv", adv)):
                np.testing.assert_array_equal(gray[n], data.to_gray(vals, vals.min(), vals.max()))
        assert manifest(out / "fis.manifest.json")["subcommand"] == "fis"

    def test_index_out_of_range(self, blob_run, tmp_path):
        assert run("fis", "--model", blob_run / "model.json", "--data", blob_run / "blobs",
                   "--input-index", 1000, "--out-dir", tmp_path) == 2


class TestSelfcheck:
    def test_passes(self, capsys, tmp_path):
        assert run("selfcheck", "--manifest", tmp_path / "m.json") == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out and "selfcheck PASSED" in out
        assert len(manifest(tmp_path / "m.json")["results"]) == 7

    def test_corrupted_gradient_fails(self, capsys):
        assert run("selfcheck", "--corrupt-gradient") == 1
        out = capsys.readouterr().out
        assert "[FAIL] gradients vs central differences" in out
        assert "selfcheck FAILED" in out


def test_missing_subcommand():
    assert run() == 2


def test_model_file_missing(tmp_path):
    assert run("score", "--model", tmp_path / "none.json", "--data", tmp_path, "--out", tmp_path / "s.csv") == 1
