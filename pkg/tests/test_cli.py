import csv
import json
import os

import pytest

from opinet.cli import main

MICRO_FLUID = [
    "--set", "fluid.nx=8",
    "--set", "fluid.ny=8",
    "--set", "fluid.n_steps=20",
    "--set", "fluid.dt=0.002",
    "--set", "fluid.poisson_tol=1e-6",
    "--set", "datagen.n_samples=3",
    "--set", "datagen.t_receivers=8",
    "--set", "datagen.strength_min=0.05",
    "--set", "datagen.strength_max=0.2",
]

TINY_LOC_MODEL = [
    "--set", "model.latent_dim=8",
    "--set", "model.width=16",
    "--set", "model.n_max=1",
]

TINY_RECON_MODEL = [
    "--set", "model.recon_latent_dim=8",
    "--set", "model.recon_width=16",
    "--set", "model.freq_cutoff=2",
    "--set", "weights.delta=0",
]


def read_manifest(out_dir):
    with open(os.path.join(out_dir, "run_manifest.json")) as f:
        return json.load(f)


@pytest.fixture(scope="module")
def micro_dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("cli") / "ds")
    assert main(["datagen", "--seed", "5", "--out", out] + MICRO_FLUID) == 0
    return out


class TestConfigResolution:
    def test_empty_file_yields_published_defaults(self, tmp_path):
        cfg = tmp_path / "empty.json"
        cfg.write_text("{}")
        out = tmp_path / "run"
        code = main(
            ["datagen", "--config", str(cfg), "--out", str(out)]
            + MICRO_FLUID[:10]  # shrink the solve, keep everything else stock
            + ["--set", "datagen.n_samples=1", "--set", "datagen.t_receivers=4"]
        )
        assert code == 0
        conf = read_manifest(out)["config"]
        assert conf["weights"] == {"alpha": 1.0, "beta": 0.5, "gamma": 0.2, "delta": 0.3}
        assert conf["optimizer"]["lr"] == 0.001
        assert conf["optimizer"]["batch"] == 64
        assert conf["optimizer"]["epochs"] == 100

    def test_flag_beats_file(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"optimizer": {"lr": 0.001}}))
        out = tmp_path / "run"
        code = main(
            ["datagen", "--config", str(cfg), "--out", str(out), "--lr", "0.01"]
            + MICRO_FLUID[:10]
            + ["--set", "datagen.n_samples=1", "--set", "datagen.t_receivers=4"]
        )
        assert code == 0
        assert read_manifest(out)["config"]["optimizer"]["lr"] == 0.01

    def test_misspelled_key_names_the_path(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"optimizer": {"batchh": 3}}))
        assert main(["train-images", "--config", str(cfg)]) == 2
        assert "optimizer.batchh" in capsys.readouterr().err

    def test_type_mismatch_names_the_path(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"optimizer": {"lr": "fast"}}))
        assert main(["train-images", "--config", str(cfg)]) == 2
        assert "optimizer.lr" in capsys.readouterr().err

    def test_scalar_where_section_expected(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text(json.dumps({"optimizer": 3}))
        assert main(["train-images", "--config", str(cfg)]) == 2
        assert "optimizer" in capsys.readouterr().err

    def test_malformed_json_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.json"
        cfg.write_text("{not json")
        assert main(["train-images", "--config", str(cfg)]) == 2
        assert "malformed" in capsys.readouterr().err

    def test_set_rejects_unknown_key(self, capsys):
        assert main(["train-images", "--set", "optimzer.lr=0.1"]) == 2
        assert "optimzer.lr" in capsys.readouterr().err

    def test_constraint_violation_is_config_error(self, capsys):
        assert main(["train-images", "--set", "optimizer.lr=-1"]) == 2
        assert "lr" in capsys.readouterr().err


class TestDatagen:
    def test_writes_samples_and_manifest(self, micro_dataset):
        names = sorted(os.listdir(micro_dataset))
        assert names == [
            "manifest.json",
            "run_manifest.json",
            "sample_00000.opnetds",
            "sample_00001.opnetds",
            "sample_00002.opnetds",
        ]
        manifest = read_manifest(micro_dataset)
        assert manifest["task"] == "datagen"
        assert manifest["version"].startswith("opinet-")
        assert manifest["seed"] == 5
        assert len(manifest["artifacts"]) == 4  # samples + dataset manifest

    def test_identical_config_identical_checksums(self, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = str(tmp_path / name)
            args = ["datagen", "--seed", "9", "--out", out] + MICRO_FLUID[:10] + [
                "--set", "datagen.n_samples=2",
                "--set", "datagen.t_receivers=4",
            ]
            assert main(args) == 0
            outs.append(read_manifest(out)["artifacts"])
        assert outs[0] == outs[1]

    def test_invalid_thread_env_is_config_error(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("OPINET_THREADS", "lots")
        code = main(["datagen", "--out", str(tmp_path / "x")] + MICRO_FLUID)
        assert code == 2
        assert "OPINET_THREADS" in capsys.readouterr().err


class TestFluidsWorkflow:
    def test_train_evaluate_and_report(self, micro_dataset, tmp_path):
        run = str(tmp_path / "run")
        code = main(
            [
                "train-fluids",
                "--dataset", micro_dataset,
                "--seed", "5",
                "--out", run,
                "--max-steps", "2",
                "--batch", "2",
                "--set", "ntk.period=1",
            ]
            + TINY_LOC_MODEL
        )
        assert code == 0
        for name in ("history.csv", "ntk_report.csv", "model.opnetck", "run_manifest.json"):
            assert os.path.exists(os.path.join(run, name))
        with open(os.path.join(run, "history.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        assert [r["step"] for r in rows] == ["1", "2"]
        assert all(r["lambda_max"] != "" for r in rows)  # period 1 logs spectrum
        manifest = read_manifest(run)
        assert manifest["derived"]["obs_feature_scale"] > 0

        ckpt = os.path.join(run, "model.opnetck")
        ev = str(tmp_path / "eval")
        assert main(
            ["evaluate", "--eval-task", "localization", "--checkpoint", ckpt,
             "--dataset", micro_dataset, "--out", ev]
        ) == 0
        with open(os.path.join(ev, "summary.json")) as f:
            summary = json.load(f)
        assert summary["n_samples"] == 3
        assert summary["location_error_mean"] >= 0
        assert os.path.exists(os.path.join(ev, "scatter.svg"))

        nr = str(tmp_path / "ntk")
        assert main(["ntk-report", "--checkpoint", ckpt, "--dataset", micro_dataset,
                     "--out", nr]) == 0
        with open(os.path.join(nr, "ntk_report.csv"), newline="") as f:
            report = list(csv.DictReader(f))
        assert len(report) == 1 and float(report[0]["lambda_max"]) > 0
        assert os.path.exists(os.path.join(nr, "spectrum.csv"))

    def test_missing_dataset_is_data_error(self, tmp_path, capsys):
        code = main(["train-fluids", "--dataset", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "run")])
        assert code == 3
        assert "manifest.json" in capsys.readouterr().err

    def test_evaluate_requires_checkpoint(self, micro_dataset, tmp_path, capsys):
        code = main(["evaluate", "--eval-task", "localization",
                     "--dataset", micro_dataset, "--out", str(tmp_path / "e")])
        assert code == 2
        assert "checkpoint" in capsys.readouterr().err


class TestImagesWorkflow:
    def args(self, out, extra=()):
        return (
            ["train-images", "--limit", "10", "--epochs", "1", "--batch", "8",
             "--seed", "4", "--out", out]
            + TINY_RECON_MODEL
            + list(extra)
        )

    def test_micro_training_run(self, tmp_path):
        out = str(tmp_path / "run")
        with pytest.warns(UserWarning, match="synthetic"):
            code = main(self.args(out, ["--mask-side", "4"]))
        assert code == 0
        for name in ("history.csv", "ntk_report.csv", "model.opnetck", "run_manifest.json"):
            assert os.path.exists(os.path.join(out, name))
        assert read_manifest(out)["config"]["mask"]["side"] == 4

    def test_mask_side_zero_disables_corruption(self, tmp_path):
        out = str(tmp_path / "run")
        with pytest.warns(UserWarning, match="synthetic"):
            code = main(self.args(out, ["--mask-side", "0"]))
        assert code == 0
        with open(os.path.join(out, "history.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        # without corruption the residual-skip model is already exact
        assert all(float(r["total"]) == 0.0 for r in rows)

    def test_ablation_grid(self, tmp_path):
        out = str(tmp_path / "abl")
        args = (
            ["ablation", "--limit", "10", "--epochs", "1", "--batch", "8",
             "--seed", "4", "--out", out, "--mask-side", "4"]
            + TINY_RECON_MODEL
        )
        with pytest.warns(UserWarning, match="synthetic"):
            code = main(args)
        assert code == 0
        with open(os.path.join(out, "ablation.csv"), newline="") as f:
            rows = list(csv.DictReader(f))
        assert [(r["use_ntk"], r["use_se"]) for r in rows] == [
            ("0", "0"), ("1", "0"), ("0", "1"), ("1", "1"),
        ]
