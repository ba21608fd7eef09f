import json
from pathlib import Path

import numpy as np
import pytest

from hycedis.checkpoint import load_checkpoint, unpack
from hycedis.cli import main
from hycedis.confidence import predict_confidence
from hycedis.corpus import SPLITS, load_dataset
from hycedis.metrics import roc_auc

CORPUS = ["corpus.n_train=30", "corpus.n_val=6", "corpus.n_test=8", "corpus.n_ood=8"]
MODEL = ["model.vis_dim=4", "model.ocr_dim=4", "model.node_dim=3", "model.proj_dim=5", "model.ce_hidden=4",
         "model.epochs=2", "vcad.embed_epochs=5", "vcad.vae_epochs=5", "eval.baseline_epochs=3", "eval.mc_passes=3"]


def sets(items):
    return [a for item in items for a in ("--set", item)]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert main(["generate", "--out", str(data)] + sets(CORPUS)) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "h.ckpt")] + sets(MODEL)) == 0
    assert main(["train", "--data", str(data), "--out", str(root / "m.ckpt"), "--no-vcad"] + sets(MODEL)) == 0
    return root


def eval_args(ws, *extra):
    return ["eval", "--data", str(ws / "data"), "--checkpoint", str(ws / "h.ckpt"),
            "--checkpoint", str(ws / "m.ckpt")] + sets(MODEL) + list(extra)


class TestGenerate:
    def test_default_config_writes_four_splits(self, tmp_path):
        assert main(["generate", "--out", str(tmp_path)]) == 0
        assert sorted(p.name for p in tmp_path.glob("*.jsonl")) == sorted(f"{s}.jsonl" for s in SPLITS)
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["command"] == "generate" and manifest["seed"] == 42
        assert len(manifest["artifacts"]) == 4
        assert all(Path(p).is_file() for p in manifest["artifacts"])

    def test_same_seed_identical_bytes(self, tmp_path):
        for d in ("a", "b"):
            assert main(["generate", "--out", str(tmp_path / d), "--seed", "3"] + sets(CORPUS)) == 0
        for s in SPLITS:
            assert (tmp_path / "a" / f"{s}.jsonl").read_bytes() == (tmp_path / "b" / f"{s}.jsonl").read_bytes()

    def test_invalid_rate(self, tmp_path, capsys):
        assert main(["generate", "--out", str(tmp_path), "--set", "corpus.ocr_error_rate=1.5"]) == 2
        assert "ocr_error_rate" in capsys.readouterr().err

    def test_unwritable_output(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        assert main(["generate", "--out", str(blocker / "sub")] + sets(CORPUS)) == 3

    def test_env_seed_and_flag_precedence(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HYCEDIS_SEED", "7")
        assert main(["generate", "--out", str(tmp_path / "env")] + sets(CORPUS)) == 0
        assert main(["generate", "--out", str(tmp_path / "flag"), "--seed", "8"] + sets(CORPUS)) == 0
        monkeypatch.delenv("HYCEDIS_SEED")
        assert main(["generate", "--out", str(tmp_path / "seven"), "--seed", "7"] + sets(CORPUS)) == 0
        assert json.loads((tmp_path / "env" / "manifest.json").read_text())["seed"] == 7
        assert json.loads((tmp_path / "flag" / "manifest.json").read_text())["seed"] == 8
        assert (tmp_path / "env" / "test.jsonl").read_bytes() == (tmp_path / "seven" / "test.jsonl").read_bytes()

    def test_bad_env_seed(self, tmp_path, monkeypatch):
        monkeypatch.setenv("HYCEDIS_SEED", "abc")
        assert main(["generate", "--out", str(tmp_path)] + sets(CORPUS)) == 2


class TestTrain:
    def test_manifest_and_checkpoint(self, workspace):
        manifest = json.loads((workspace / "h.ckpt.manifest.json").read_text())
        assert np.isfinite(manifest["metrics"]["final_train_bce"])
        assert np.isfinite(manifest["metrics"]["final_val_bce"])
        assert "vcad_digest" in manifest["metrics"]
        assert load_checkpoint(workspace / "h.ckpt")[1] is not None

    def test_no_vcad_has_no_vcad_section(self, workspace):
        _, arrays = unpack((workspace / "m.ckpt").read_bytes())
        assert arrays and not any(k.startswith("vcad/") for k in arrays)

    def test_missing_split(self, tmp_path, workspace):
        (tmp_path / "train.jsonl").write_bytes((workspace / "data" / "train.jsonl").read_bytes())
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "x.ckpt")] + sets(MODEL)) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss(self, tmp_path, workspace):
        args = ["train", "--data", str(workspace / "data"), "--out", str(tmp_path / "x.ckpt"), "--no-vcad"]
        assert main(args + sets(MODEL + ["model.lr=1e300"])) == 4

    def test_reuse_vcad(self, tmp_path, workspace):
        out = tmp_path / "r.ckpt"
        args = ["train", "--data", str(workspace / "data"), "--out", str(out), "--vcad", str(workspace / "h.ckpt")]
        assert main(args + sets(MODEL)) == 0
        assert load_checkpoint(out)[1].digest() == load_checkpoint(workspace / "h.ckpt")[1].digest()


class TestEval:
    def test_all_methods_and_idempotent(self, workspace, tmp_path):
        for d in ("a", "b"):
            assert main(eval_args(workspace, "--out", str(tmp_path / d))) == 0
        a = (tmp_path / "a" / "report-test.json").read_bytes()
        assert a == (tmp_path / "b" / "report-test.json").read_bytes()
        reports = json.loads(a)["reports"]
        assert [r["method"] for r in reports] == ["hycedis", "mcp", "softmax-threshold", "softmax-classifier",
                                                  "temp-scaling", "mc-dropout"]
        assert len({r["n_samples"] for r in reports}) == 1
        csv = (tmp_path / "a" / "reliability-test.csv").read_text().splitlines()
        assert len(csv) == 1 + 6 * 10

    def test_ood_uses_shared_keys_only(self, workspace, tmp_path):
        assert main(eval_args(workspace, "--split", "ood", "--method", "softmax-threshold",
                              "--out", str(tmp_path))) == 0
        report = json.loads((tmp_path / "report-ood.json").read_text())["reports"][0]
        ood = load_dataset(workspace / "data", ["ood"])["ood"]
        shared = set(ood.shared_keys)
        assert report["n_samples"] == sum(r.prediction.key in shared for r in ood.records)
        assert report["n_samples"] < len(ood.records)

    def test_unknown_method(self, workspace, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(eval_args(workspace, "--method", "oracle", "--out", str(tmp_path)))
        assert exc.value.code == 2

    def test_mcp_needs_plain_checkpoint(self, workspace, tmp_path):
        args = ["eval", "--data", str(workspace / "data"), "--checkpoint", str(workspace / "h.ckpt"),
                "--method", "mcp", "--out", str(tmp_path)]
        assert main(args) == 2

    def test_corrupt_checkpoint(self, workspace, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"garbage")
        args = ["eval", "--data", str(workspace / "data"), "--checkpoint", str(bad), "--method", "hycedis",
                "--out", str(tmp_path)]
        assert main(args) == 2


class TestScore:
    def test_matches_model_and_eval(self, workspace, tmp_path):
        out = tmp_path / "scores.jsonl"
        assert main(["score", "--checkpoint", str(workspace / "h.ckpt"),
                     "--records", str(workspace / "data" / "test.jsonl"), "--out", str(out)]) == 0
        rows = [json.loads(line) for line in out.read_text().splitlines()]
        test = load_dataset(workspace / "data", ["test"])["test"]
        assert len(rows) == len(test.records)
        model, vcad, meta = load_checkpoint(workspace / "h.ckpt")
        expected = predict_confidence(model, vcad, test.records, meta["alphabet"])
        assert [r["record_id"] for r in rows] == [o.field_ref for o in expected]
        assert [r["p_correct"] for r in rows] == [o.p_correct for o in expected]
        assert main(eval_args(workspace, "--method", "hycedis", "--out", str(tmp_path / "ev"))) == 0
        report = json.loads((tmp_path / "ev" / "report-test.json").read_text())["reports"][0]
        assert report["auc"] == roc_auc([r["p_correct"] for r in rows], test.labels)

    def test_empty_input(self, workspace, tmp_path, capsys):
        empty = tmp_path / "empty.jsonl"
        empty.write_text("")
        assert main(["score", "--checkpoint", str(workspace / "h.ckpt"), "--records", str(empty)]) == 0
        assert capsys.readouterr().out == ""

    def test_schema_violation_names_line(self, workspace, tmp_path, capsys):
        lines = (workspace / "data" / "test.jsonl").read_text().splitlines()
        idx = next(i for i, line in enumerate(lines) if json.loads(line).get("type") == "record")
        obj = json.loads(lines[idx])
        obj["label"] = 5
        lines[idx] = json.dumps(obj)
        bad = tmp_path / "bad.jsonl"
        bad.write_text("\n".join(lines) + "\n")
        assert main(["score", "--checkpoint", str(workspace / "h.ckpt"), "--records", str(bad)]) == 2
        assert f"line {idx + 1}" in capsys.readouterr().err

    def test_missing_records_file(self, workspace, tmp_path):
        assert main(["score", "--checkpoint", str(workspace / "h.ckpt"), "--records", str(tmp_path / "nope")]) == 3
