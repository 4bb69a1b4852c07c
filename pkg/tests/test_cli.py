"""Config loading and the CLI verbs, driven in-process through main()."""

import json

import numpy as np
import pytest

from fabricgrasp.cli import main, parse_shape
from fabricgrasp.config import build, load_config, section
from fabricgrasp.core import ConfigError
from fabricgrasp.datagen import load_dataset
from fabricgrasp.encoder import load_encoder, load_point_corpus
from fabricgrasp.env import Shape
from fabricgrasp.expert import TrainConfig
from fabricgrasp.policy import load_policy

TINY_TRAIN = {"train": {"rollouts_per_round": 2, "segment_len": 5,
                        "batch_size": 16, "val_labels": 8}}


class TestConfigFile:
    def test_none_is_empty(self):
        assert load_config(None) == {}

    def test_round_trip(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"train": {"rounds": 7}}')
        cfg = load_config(p)
        assert section(cfg, "train") == {"rounds": 7}
        assert section(cfg, "missing") == {}

    def test_bad_json(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("{nope")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_top_level_must_be_object(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text("[1, 2]")
        with pytest.raises(ConfigError):
            load_config(p)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "absent.json")


class TestBuild:
    def test_layers_and_overrides(self):
        cfg = build(TrainConfig, {"rounds": 9, "segment_len": 4},
                    {"rounds": 11}, seed=3, batch_size=None)
        assert cfg.rounds == 11      # later layer wins
        assert cfg.segment_len == 4
        assert cfg.seed == 3         # override wins over everything
        assert cfg.batch_size == 32  # None override falls through

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="typo_key"):
            build(TrainConfig, {"typo_key": 1})

    def test_list_to_tuple(self):
        from fabricgrasp.policy import MlpConfig
        cfg = build(MlpConfig, {"hidden": [8, 8], "d": 1, "z_dim": 1})
        assert cfg.hidden == (8, 8)

    def test_invalid_value_becomes_config_error(self):
        with pytest.raises(ConfigError):
            build(TrainConfig, {"rounds": 0})


class TestParseShape:
    def test_circle(self):
        assert parse_shape("circle:0.05") == (Shape.CIRCLE, (0.05,))

    def test_box(self):
        assert parse_shape("box:0.09,0.05") == (Shape.BOX, (0.09, 0.05))

    def test_unknown_shape(self):
        with pytest.raises(ConfigError):
            parse_shape("torus:0.05")

    def test_missing_size(self):
        with pytest.raises(ConfigError):
            parse_shape("circle")


@pytest.fixture(scope="module")
def art(tmp_path_factory):
    """One miniature artifact chain shared by the verb tests."""
    out = tmp_path_factory.mktemp("art")
    o = str(out)
    assert main(["gen-objects", "--sets", "12", "--points", "12",
                 "--seed", "5", "--out", o]) == 0
    assert main(["train-encoder", "--epochs", "1", "--seed", "5",
                 "--out", o]) == 0
    assert main(["gen-data", "--nx", "1", "--ny", "2", "--samples", "1",
                 "--shapes", "circle:0.05", "--seed", "5", "--out", o]) == 0
    cfg = out / "tiny.json"
    cfg.write_text(json.dumps(TINY_TRAIN))
    assert main(["train-policy", "--arch", "mlp", "--encoding", "pos",
                 "--rounds", "1", "--config", str(cfg), "--seed", "5",
                 "--out", o]) == 0
    return out


class TestVerbs:
    def test_gen_objects_artifact(self, art):
        corpus = load_point_corpus(art / "objects.ngfp")
        assert len(corpus) == 12
        pts, shape_id, pose = corpus[0]
        assert pts.shape == (12, 2)
        assert len(pose) == 3

    def test_gen_objects_deterministic(self, art, tmp_path):
        assert main(["gen-objects", "--sets", "12", "--points", "12",
                     "--seed", "5", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "objects.ngfp").read_bytes() == \
            (art / "objects.ngfp").read_bytes()

    def test_train_encoder_artifacts(self, art):
        enc, dec = load_encoder(art / "encoder.json")
        assert enc.frozen
        report = json.loads((art / "encoder-report.json").read_text())
        assert report["epochs"] == 1
        assert np.isfinite(report["best_val_chamfer"])

    def test_gen_data_artifact(self, art):
        ds = load_dataset(art / "dataset-pos.ngfd")
        assert len(ds) == 2
        assert ds.z_dim == 2  # position encoding
        sidecar = json.loads((art / "dataset-pos.ngfd.json").read_text())
        assert sidecar["count"] == 2

    def test_gen_data_deterministic(self, art, tmp_path):
        assert main(["gen-data", "--nx", "1", "--ny", "2", "--samples", "1",
                     "--shapes", "circle:0.05", "--seed", "5",
                     "--out", str(tmp_path)]) == 0
        assert (tmp_path / "dataset-pos.ngfd").read_bytes() == \
            (art / "dataset-pos.ngfd").read_bytes()

    def test_gen_data_pcd(self, art):
        o = str(art)
        assert main(["gen-data", "--encoding", "pcd", "--encoder",
                     f"{o}/encoder.json", "--nx", "1", "--ny", "2",
                     "--samples", "1", "--shapes", "circle:0.05",
                     "--seed", "5", "--out", o]) == 0
        ds = load_dataset(art / "dataset-pcd.ngfd")
        assert ds.z_dim == 16  # latent encoding

    def test_train_policy_artifacts(self, art):
        policy, mode = load_policy(art / "policy-mlp-pos.json")
        assert policy.arch == "mlp" and mode == "pos"
        report = json.loads((art / "policy-mlp-pos-train.json").read_text())
        assert len(report["rounds"]) == 1
        assert report["config"]["segment_len"] == 5  # config file honored

    def test_rollout_csv(self, art, tmp_path):
        csv_path = tmp_path / "roll.csv"
        assert main(["rollout", "--policy", str(art / "policy-mlp-pos.json"),
                     "--data", str(art / "dataset-pos.ngfd"),
                     "--pose", "0.45", "-0.15", "0.4",
                     "--csv", str(csv_path), "--seed", "5",
                     "--out", str(art)]) == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0].startswith("phase,t,q0")
        assert len(lines) > 2

    def test_eval_files_and_recount(self, art, tmp_path):
        report_path = tmp_path / "eval.json"
        csv_path = tmp_path / "episodes.csv"
        assert main(["eval", "--policy", str(art / "policy-mlp-pos.json"),
                     "--data-pos", str(art / "dataset-pos.ngfd"),
                     "--trials", "1", "--shapes", "circle:0.05",
                     "--report", str(report_path), "--csv", str(csv_path),
                     "--seed", "5", "--out", str(art)]) == 0
        report = json.loads(report_path.read_text())
        assert report["report_version"] == 1
        cell = report["policies"]["policy-mlp-pos"]["circle"]
        assert cell["trials"] == 1
        import csv as csvmod
        with open(csv_path) as fh:
            rows = list(csvmod.DictReader(fh))
        assert len(rows) == 1
        assert sum(int(r["success"]) for r in rows) == cell["success"]


class TestExitCodes:
    def test_missing_config_file(self, tmp_path):
        assert main(["gen-objects", "--sets", "1",
                     "--config", str(tmp_path / "nope.json"),
                     "--out", str(tmp_path)]) == 2

    def test_bad_config_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{")
        assert main(["gen-objects", "--sets", "1", "--config", str(bad),
                     "--out", str(tmp_path)]) == 2

    def test_pcd_without_encoder(self, tmp_path):
        assert main(["gen-data", "--encoding", "pcd", "--nx", "1",
                     "--ny", "1", "--out", str(tmp_path)]) == 2

    def test_missing_artifact_is_data_error(self, tmp_path):
        assert main(["train-policy", "--arch", "mlp", "--encoding", "pos",
                     "--data", str(tmp_path / "absent.ngfd"),
                     "--out", str(tmp_path)]) == 3

    def test_bad_shape_spec(self, tmp_path):
        assert main(["gen-objects", "--sets", "1",
                     "--shapes", "klein-bottle:1",
                     "--out", str(tmp_path)]) == 2

    def test_unknown_verb_exits_2(self):
        with pytest.raises(SystemExit) as ei:
            main(["frobnicate"])
        assert ei.value.code == 2

    def test_training_abort_exit_code(self, art, tmp_path):
        # a destructive step size blows the loss up to non-finite values
        cfg = tmp_path / "explode.json"
        cfg.write_text(json.dumps({"train": {
            "rollouts_per_round": 2, "segment_len": 5, "batch_size": 16,
            "val_labels": 8, "learning_rate": 1e12}}))
        code = main(["train-policy", "--arch", "mlp", "--encoding", "pos",
                     "--data", str(art / "dataset-pos.ngfd"),
                     "--rounds", "4", "--config", str(cfg), "--seed", "5",
                     "--out", str(tmp_path)])
        assert code == 4
