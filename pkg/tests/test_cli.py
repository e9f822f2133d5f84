"""Command-line workflows end to end, run in-process through main()."""

import csv
import hashlib
import json
import os
import shutil

import numpy as np
import pytest

from slenderfit.cli import CSV_COLUMNS, main, summarize_rows
from slenderfit.geometry import KnotChain, fit_natural_cubic, sample_uniform
from slenderfit.imgio import save_image
from slenderfit.metrics import avg_dtw

from _frames import make_model_frame

FAST_FLAGS = ["--optimizer.seeds", "1", "--optimizer.t1", "60",
              "--optimizer.t2", "120", "--optimizer.t3", "60"]
SMALL_GEN = ["--synth.resolution", "48", "--synth.length_range", "25,30"]


def _tree_digest(root: str) -> dict:
    out = {}
    for dirpath, _, names in os.walk(root):
        for name in names:
            full = os.path.join(dirpath, name)
            rel = os.path.relpath(full, root)
            with open(full, "rb") as fh:
                out[rel] = hashlib.sha256(fh.read()).hexdigest()
    return out


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("data") / "ds")
    code = main(["gen", "--out", out, "--frames", "2", "--bodies", "1",
                 "--seed", "3", *SMALL_GEN])
    assert code == 0
    return out


class TestGen:
    def test_layout_and_manifest(self, dataset, capsys):
        manifest = json.load(open(os.path.join(dataset, "manifest.json")))
        assert manifest["kind"] == "slenderfit-dataset"
        assert manifest["seed"] == 3
        assert len(manifest["frames"]) == 2
        # config echo reflects the dotted flag overrides
        assert manifest["config"]["synth"]["resolution"] == 48
        assert manifest["config"]["synth"]["length_range"] == [25.0, 30.0]
        for e in manifest["frames"]:
            assert os.path.exists(os.path.join(dataset, e["image"]))
            assert os.path.exists(os.path.join(dataset, e["label"]))

    def test_multi_tier_stream_indices(self, tmp_path):
        out = str(tmp_path / "ds")
        assert main(["gen", "--out", out, "--frames", "1", "--bodies", "2,1",
                     "--seed", "0", *SMALL_GEN]) == 0
        manifest = json.load(open(os.path.join(out, "manifest.json")))
        streams = {e["n_bodies"]: e["stream_index"] for e in manifest["frames"]}
        # tiers draw from disjoint counter streams
        assert streams == {1: 1_000_000, 2: 2_000_000}

    def test_bit_identical_across_runs(self, tmp_path):
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        for out in (a, b):
            assert main(["gen", "--out", out, "--frames", "2", "--bodies",
                         "1", "--seed", "11", *SMALL_GEN]) == 0
        assert _tree_digest(a) == _tree_digest(b)

    def test_seed_changes_frames(self, tmp_path):
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        main(["gen", "--out", a, "--frames", "1", "--bodies", "1",
              "--seed", "1", *SMALL_GEN])
        main(["gen", "--out", b, "--frames", "1", "--bodies", "1",
              "--seed", "2", *SMALL_GEN])
        da, db = _tree_digest(a), _tree_digest(b)
        assert da["frames/n1_f0000.png"] != db["frames/n1_f0000.png"]

    def test_bad_bodies(self, tmp_path, capsys):
        assert main(["gen", "--out", str(tmp_path / "x"), "--frames", "1",
                     "--bodies", "0"]) == 2
        assert "error" in capsys.readouterr().err


@pytest.fixture(scope="module")
def model_inputs(tmp_path_factory):
    root = tmp_path_factory.mktemp("refine")
    image, chains, _ = make_model_frame(0)
    img_path = str(root / "frame.png")
    save_image(img_path, np.clip(image, 0.0, 1.0))
    spl_path = str(root / "splines.json")
    with open(spl_path, "w") as fh:
        json.dump({"chains": [c.to_dict() for c in chains]}, fh)
    return img_path, spl_path, chains


class TestRefine:
    def test_round_trip_from_truth(self, model_inputs, tmp_path, capsys):
        img_path, spl_path, chains = model_inputs
        out = str(tmp_path / "out")
        code = main(["refine", "--image", img_path, "--splines", spl_path,
                     "--out", out, "--overlay", "--recon", *FAST_FLAGS])
        assert code == 0
        assert "recon loss" in capsys.readouterr().out
        refined = json.load(open(os.path.join(out, "refined.json")))
        assert len(refined["chains"]) == len(chains)
        for got, truth in zip(refined["chains"], chains):
            pts = sample_uniform(
                fit_natural_cubic(KnotChain.from_dict(got)), 100)[:, :2]
            want = sample_uniform(fit_natural_cubic(truth), 100)[:, :2]
            assert avg_dtw(pts, want) < 0.1
        report = json.load(open(os.path.join(out, "report.json")))
        assert report["final_recon_loss"] <= report["background_recon_loss"]
        assert os.path.exists(os.path.join(out, "overlay.png"))
        assert os.path.exists(os.path.join(out, "reconstruction.png"))

    def test_deterministic_outputs(self, model_inputs, tmp_path):
        img_path, spl_path, _ = model_inputs
        a = str(tmp_path / "a")
        b = str(tmp_path / "b")
        for out in (a, b):
            assert main(["refine", "--image", img_path, "--splines",
                         spl_path, "--out", out, *FAST_FLAGS]) == 0
        assert _tree_digest(a) == _tree_digest(b)

    def test_missing_image(self, model_inputs, tmp_path, capsys):
        _, spl_path, _ = model_inputs
        code = main(["refine", "--image", str(tmp_path / "nope.png"),
                     "--splines", spl_path, "--out", str(tmp_path / "o")])
        assert code == 2
        err = capsys.readouterr().err
        assert "error" in err and "nope.png" in err

    def test_malformed_splines(self, model_inputs, tmp_path, capsys):
        img_path, _, _ = model_inputs
        bad = str(tmp_path / "bad.json")
        with open(bad, "w") as fh:
            fh.write("{\"chains\": 5}")
        code = main(["refine", "--image", img_path, "--splines", bad,
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "chains" in capsys.readouterr().err

    def test_unknown_config_key(self, model_inputs, tmp_path, capsys):
        img_path, spl_path, _ = model_inputs
        code = main(["refine", "--image", img_path, "--splines", spl_path,
                     "--out", str(tmp_path / "o"),
                     "--set", "optimizer.momentum=0.9"])
        assert code == 2
        assert "unknown config key" in capsys.readouterr().err


class TestSweep:
    def test_identity_condition(self, dataset, tmp_path, capsys):
        out = str(tmp_path / "sweep")
        code = main(["sweep", "--dataset", dataset, "--out", out,
                     "--perturb", "none:0", "--methods", "none"])
        assert code == 0
        with open(os.path.join(out, "sweep.csv"), newline="") as fh:
            reader = csv.DictReader(fh)
            assert tuple(reader.fieldnames) == CSV_COLUMNS
            rows = list(reader)
        assert len(rows) == 2
        for row in rows:
            assert row["status"] == "ok"
            assert float(row["initial_dtw"]) <= 1e-9
            assert float(row["refined_dtw"]) <= 1e-9
            assert row["baseline_dtw"] == ""
        summary = json.load(open(os.path.join(out, "summary.json")))
        assert "none:0|n=1" in summary["summary"]
        assert "mean" in capsys.readouterr().out

    def test_rotation_condition_scores(self, dataset, tmp_path):
        out = str(tmp_path / "sweep")
        code = main(["sweep", "--dataset", dataset, "--out", out,
                     "--perturb", "rotation:20", "--methods", "none"])
        assert code == 0
        rows = list(csv.DictReader(open(os.path.join(out, "sweep.csv"),
                                        newline="")))
        for row in rows:
            assert float(row["initial_dtw"]) > 0.5
            assert row["initial_dtw"] == row["refined_dtw"]

    def test_failure_isolation(self, dataset, tmp_path, capsys):
        broken = str(tmp_path / "broken")
        shutil.copytree(dataset, broken)
        os.remove(os.path.join(broken, "frames", "n1_f0000.png"))
        out = str(tmp_path / "sweep")
        code = main(["sweep", "--dataset", broken, "--out", out,
                     "--perturb", "none:0", "--methods", "none"])
        assert code == 1
        assert "failed" in capsys.readouterr().err
        rows = list(csv.DictReader(open(os.path.join(out, "sweep.csv"),
                                        newline="")))
        by_frame = {r["frame"]: r for r in rows}
        assert by_frame["n1_f0000"]["status"] == "error:InvalidInputError"
        assert by_frame["n1_f0001"]["status"] == "ok"

    def test_limit_caps_frames(self, dataset, tmp_path):
        out = str(tmp_path / "sweep")
        assert main(["sweep", "--dataset", dataset, "--out", out,
                     "--perturb", "none:0", "--methods", "none",
                     "--limit", "1"]) == 0
        rows = list(csv.DictReader(open(os.path.join(out, "sweep.csv"),
                                        newline="")))
        assert len(rows) == 1

    def test_bad_condition(self, dataset, tmp_path, capsys):
        code = main(["sweep", "--dataset", dataset,
                     "--out", str(tmp_path / "o"), "--perturb", "shear:3"])
        assert code == 2
        assert "unknown perturbation kind" in capsys.readouterr().err

    def test_no_conditions(self, dataset, tmp_path, capsys):
        code = main(["sweep", "--dataset", dataset,
                     "--out", str(tmp_path / "o")])
        assert code == 2
        assert "--perturb" in capsys.readouterr().err

    def test_bad_method(self, dataset, tmp_path, capsys):
        code = main(["sweep", "--dataset", dataset,
                     "--out", str(tmp_path / "o"), "--perturb", "none:0",
                     "--methods", "theirs"])
        assert code == 2
        assert "unknown methods" in capsys.readouterr().err


class TestEval:
    def test_reproduces_sweep_summary(self, dataset, tmp_path, capsys):
        sweep_out = str(tmp_path / "sweep")
        assert main(["sweep", "--dataset", dataset, "--out", sweep_out,
                     "--perturb", "rotation:10", "--methods", "none"]) == 0
        eval_json = str(tmp_path / "eval.json")
        assert main(["eval", "--csv", os.path.join(sweep_out, "sweep.csv"),
                     "--out", eval_json]) == 0
        capsys.readouterr()
        sweep_summary = json.load(
            open(os.path.join(sweep_out, "summary.json")))["summary"]
        eval_summary = json.load(open(eval_json))["summary"]
        assert eval_summary == sweep_summary

    def test_empty_csv(self, tmp_path, capsys):
        path = str(tmp_path / "empty.csv")
        with open(path, "w", newline="") as fh:
            csv.DictWriter(fh, fieldnames=CSV_COLUMNS).writeheader()
        assert main(["eval", "--csv", path]) == 2
        assert "no rows" in capsys.readouterr().err


class TestSummarizeRows:
    def test_groups_and_skips_errors(self):
        rows = [
            {"frame": "a", "body_index": 0, "n_bodies": 1,
             "condition": "rotation:20", "initial_dtw": "4.0",
             "refined_dtw": "0.5", "baseline_dtw": "2.0", "status": "ok"},
            {"frame": "b", "body_index": 0, "n_bodies": 1,
             "condition": "rotation:20", "initial_dtw": "6.0",
             "refined_dtw": "1.5", "baseline_dtw": "", "status": "ok"},
            {"frame": "c", "body_index": 0, "n_bodies": 1,
             "condition": "rotation:20", "initial_dtw": "9.9",
             "refined_dtw": "9.9", "baseline_dtw": "9.9",
             "status": "error:OSError"},
        ]
        summary = summarize_rows(rows)
        entry = summary["rotation:20|n=1"]
        assert entry["initial"]["count"] == 2
        assert entry["initial"]["mean"] == 5.0
        assert entry["ours"]["mean"] == 1.0
        assert entry["ac"]["count"] == 1


class TestParser:
    def test_version_flag(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "slenderfit-" in capsys.readouterr().out

    def test_command_required(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 2
