import json

import pytest

from npshape.cli import main
from npshape.errors import ConfigError, StageError
from npshape.pipeline import load_config, run_pipeline, validate_config

SMALL_CONFIG = """
[run]
out_dir = "{out_dir}"
seed = 11

[synth]
canvas = [512, 512]

[synth.train]
cube = 6
pyramid = 6

[synth.validation]
cube = 4
pyramid = 4

[synth.test]
cube = 12
pyramid = 4

[train]
mode = "{mode}"
"""


def write_config(tmp_path, name="run.toml", mode="lr", out_name="out", extra=""):
    cfg = tmp_path / name
    cfg.write_text(SMALL_CONFIG.format(out_dir=tmp_path / out_name, mode=mode)
                   + extra)
    return cfg


class TestRunPipeline:
    def test_lr_end_to_end(self, tmp_path):
        cfg = write_config(tmp_path)
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        out = tmp_path / "out"
        assert (out / "run_manifest.json").exists()
        assert (out / "model" / "model.json").exists()
        assert (out / "preds" / "preds.json").exists()
        report = json.loads((out / "eval" / "report.json").read_text())
        assert report["macro"]["f1"] > 0.8
        preds = json.loads((out / "preds" / "preds.json").read_text())
        assert all(set(p) == {"id", "true", "pred", "proba"} for p in preds)
        assert len(preds) == 16
        # every artifact the run wrote is listed with its digest
        for rel in manifest.artifacts:
            assert (out / rel).exists()

    def test_lr_mode_never_touches_validation_embeddings(self, tmp_path):
        cfg = write_config(tmp_path)
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        out = tmp_path / "out"
        assert not (out / "embeddings" / "validation.npe").exists()
        names = [s["name"] for s in manifest.stages]
        assert "embed:validation" not in names
        # validation scenes exist on disk (dataset scale) but are never read
        assert (out / "data" / "validation" / "labels.json").exists()

    def test_rerun_is_noop(self, tmp_path):
        cfg = write_config(tmp_path)
        run_pipeline(cfg, echo=lambda *_: None)
        first = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        assert all(s["status"] == "skipped" for s in manifest.stages)
        second = json.loads((tmp_path / "out" / "run_manifest.json").read_text())
        assert first["artifacts"] == second["artifacts"]
        assert first["timestamps"] != second["timestamps"]

    def test_deleting_preds_recomputes_one_stage(self, tmp_path):
        cfg = write_config(tmp_path)
        run_pipeline(cfg, echo=lambda *_: None)
        (tmp_path / "out" / "preds" / "preds.json").unlink()
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        ran = [s["name"] for s in manifest.stages if s["status"] == "ran"]
        assert ran == ["predict"]

    def test_deterministic_across_fresh_runs(self, tmp_path):
        cfg_a = write_config(tmp_path, name="a.toml", out_name="out_a")
        cfg_b = write_config(tmp_path, name="b.toml", out_name="out_b")
        ma = run_pipeline(cfg_a, echo=lambda *_: None)
        mb = run_pipeline(cfg_b, echo=lambda *_: None)
        assert ma.artifacts == mb.artifacts

    def test_grid_mode_writes_trace(self, tmp_path):
        cfg = write_config(tmp_path, mode="grid")
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        out = tmp_path / "out"
        assert (out / "embeddings" / "validation.npe").exists()
        trace = json.loads((out / "model" / "trace.json").read_text())
        assert len(trace) == 24
        model = json.loads((out / "model" / "model.json").read_text())
        assert model["metadata"]["val_macro_f1"] == max(
            t["val_macro_f1"] for t in trace)
        assert manifest.model_file == "model/model.json"

    def test_missing_inputs_fail_with_stage(self, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text(f"""
[run]
out_dir = "{tmp_path / 'out'}"

[synth]
enabled = false

[inputs]
data_dir = "{tmp_path / 'nowhere'}"
""")
        with pytest.raises(StageError, match=r"\[inputs\]"):
            run_pipeline(cfg, echo=lambda *_: None)

    def test_corrupted_artifact_recomputed(self, tmp_path):
        cfg = write_config(tmp_path)
        run_pipeline(cfg, echo=lambda *_: None)
        emb = tmp_path / "out" / "embeddings" / "test.npe"
        emb.write_bytes(b"garbage")
        manifest = run_pipeline(cfg, echo=lambda *_: None)
        ran = {s["name"] for s in manifest.stages if s["status"] == "ran"}
        assert "embed:test" in ran


class TestConfigValidation:
    def test_unknown_section(self):
        with pytest.raises(ConfigError, match="sections"):
            validate_config({"run": {"out_dir": "x"}, "bogus": {}})

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="unknown keys"):
            validate_config({"run": {"out_dir": "x", "sede": 1}})

    def test_bad_mode(self):
        with pytest.raises(ConfigError, match="mode"):
            validate_config({"run": {"out_dir": "x"},
                             "train": {"mode": "boosted"}})

    def test_bad_type(self):
        with pytest.raises(ConfigError, match="expected"):
            validate_config({"run": {"out_dir": "x"}, "crop": {"margin": "two"}})

    def test_required_key(self):
        with pytest.raises(ConfigError, match="out_dir"):
            validate_config({"run": {}})

    def test_overrides_win(self, tmp_path):
        cfg = write_config(tmp_path)
        loaded = load_config(cfg, overrides=["train.mode=grid", "crop.margin=2"])
        assert loaded["train"]["mode"] == "grid"
        assert loaded["crop"]["margin"] == 2

    def test_bool_not_accepted_for_int(self):
        with pytest.raises(ConfigError):
            validate_config({"run": {"out_dir": "x"}, "crop": {"margin": True}})


class TestCliSubcommands:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        assert "npshape" in out and "schema" in out and "NPEMB1" in out

    def test_run_exit_codes(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["run", "--config", str(cfg)]) == 0
        bad = tmp_path / "bad.toml"
        bad.write_text('[run]\nout_dir = "x"\n[train]\nmode = "nope"\n')
        assert main(["run", "--config", str(bad)]) == 2
        missing = tmp_path / "missing.toml"
        missing.write_text(
            f'[run]\nout_dir = "{tmp_path / "mout"}"\n'
            f'[synth]\nenabled = false\n'
            f'[inputs]\ndata_dir = "{tmp_path / "void"}"\n')
        assert main(["run", "--config", str(missing)]) == 1
        err = capsys.readouterr().err
        assert "[inputs]" in err

    def test_stagewise_cli_chain(self, tmp_path, capsys):
        # synth one tiny dataset, then drive every stage through the CLI
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({
            "seed": 5, "canvas": [512, 512],
            "splits": {"train": {"cube": 5, "pyramid": 5},
                       "test": {"cube": 6, "pyramid": 3}}}))
        data = tmp_path / "data"
        assert main(["synth", "--spec", str(spec), "--out", str(data)]) == 0

        filtered = tmp_path / "filtered"
        assert main(["masks", "filter",
                     "--masks", str(data / "train" / "train-s00_masks"),
                     "--out", str(filtered), "--min-area", "400"]) == 0

        crops = tmp_path / "crops_train"
        assert main(["crop", "--image", str(data / "train" / "train-s00.png"),
                     "--masks", str(filtered), "--out", str(crops),
                     "--variant", "all"]) == 0
        assert (crops / "crops.json").exists()

        selection = tmp_path / "selection.json"
        assert main(["preproc", "select", "--crops", str(crops),
                     "--labels", str(data / "train" / "labels.json"),
                     "--provider", "toy", "--out", str(selection)]) == 0
        chosen = json.loads(selection.read_text())["chosen"]

        emb_train = tmp_path / "train.npe"
        assert main(["embed", "--crops", str(crops),
                     "--pipeline", chosen["pipeline"],
                     "--provider", "toy", "--out", str(emb_train)]) == 0

        crops_test = tmp_path / "crops_test"
        assert main(["crop", "--image", str(data / "test" / "test-s00.png"),
                     "--masks", str(data / "test" / "test-s00_masks"),
                     "--out", str(crops_test), "--variant", "all"]) == 0
        emb_test = tmp_path / "test.npe"
        assert main(["embed", "--crops", str(crops_test),
                     "--pipeline", chosen["pipeline"],
                     "--provider", "toy", "--out", str(emb_test)]) == 0

        model = tmp_path / "model.json"
        assert main(["train", "--mode", "lr", "--train-emb", str(emb_train),
                     "--train-labels", str(data / "train" / "labels.json"),
                     "--out", str(model)]) == 0

        preds = tmp_path / "preds.json"
        assert main(["predict", "--model", str(model), "--emb", str(emb_test),
                     "--labels", str(data / "test" / "labels.json"),
                     "--out", str(preds)]) == 0

        report_dir = tmp_path / "report"
        assert main(["eval", "--preds", str(preds), "--out-dir", str(report_dir),
                     "--image", str(data / "test" / "test-s00.png"),
                     "--crops", str(crops_test / "crops.json")]) == 0
        assert (report_dir / "report.md").exists()
        assert (report_dir / "overlay.png").exists()

        assert main(["analyze", "pca", "--emb", str(emb_train),
                     "--labels", str(data / "train" / "labels.json"),
                     "--out-csv", str(tmp_path / "pca.csv")]) == 0
        assert main(["analyze", "metrics", "--emb", str(emb_train),
                     "--labels", str(data / "train" / "labels.json"),
                     "--out-json", str(tmp_path / "metrics.json")]) == 0
        assert main(["analyze", "timeline",
                     "--stage", f"t0={emb_train}:{data / 'train' / 'labels.json'}",
                     "--stage", f"t1={emb_train}:{data / 'train' / 'labels.json'}",
                     "--out-csv", str(tmp_path / "timeline.csv")]) == 0
        assert (tmp_path / "timeline.csv").read_text().count("\n") == 3

    def test_predict_missing_embedding(self, tmp_path, capsys):
        rc = main(["predict", "--model", str(tmp_path / "no.json"),
                   "--emb", str(tmp_path / "no.npe"),
                   "--out", str(tmp_path / "p.json")])
        assert rc == 1
        assert "error" in capsys.readouterr().err

    def test_grid_cli_requires_val(self, tmp_path, capsys):
        rc = main(["train", "--mode", "grid",
                   "--train-emb", str(tmp_path / "x.npe"),
                   "--train-labels", str(tmp_path / "y.json"),
                   "--out", str(tmp_path / "m.json")])
        assert rc == 2
        assert "val-emb" in capsys.readouterr().err
