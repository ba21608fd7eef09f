import struct

import numpy as np
import pytest

from hycedis.checkpoint import FORMAT_VERSION, MAGIC, load_checkpoint, pack, save_checkpoint, unpack
from hycedis.confidence import ModelConfig, predict_confidence, train_hycedis
from hycedis.corpus import CorpusConfig, generate_corpus
from hycedis.errors import CheckpointError
from hycedis.vcad import VcadConfig, VcadModel

TINY = dict(vis_dim=4, ocr_dim=4, node_dim=3, proj_dim=5, ce_hidden=4, epochs=2)


@pytest.fixture(scope="module")
def trained():
    splits = generate_corpus(CorpusConfig(n_train=30, n_val=6, n_test=8, n_ood=4))
    tr = splits["train"]
    X = np.stack([d.doc_feature for d in tr.documents])
    C = np.array([d.category for d in tr.documents])
    vcad = VcadModel(X.shape[1], VcadConfig(embed_epochs=5, vae_epochs=5))
    vcad.fit(X, C)
    model, _ = train_hycedis(tr, splits["val"], vcad, ModelConfig(**TINY))
    return splits, model, vcad


class TestPack:
    def test_round_trip(self):
        arrays = {"b": np.arange(6.0).reshape(2, 3), "a": np.array([-0.0, np.pi]), "s": np.array(1.5)}
        config = {"x": 1, "y": "text", "z": [1, 2]}
        cfg, out = unpack(pack(config, arrays))
        assert cfg == config
        assert sorted(out) == sorted(arrays)
        for k, v in arrays.items():
            assert out[k].shape == v.shape
            assert out[k].tobytes() == v.tobytes()

    def test_layout(self):
        data = pack({}, {"w": np.array([2.0])})
        expected = MAGIC + struct.pack("<III", FORMAT_VERSION, 0, 1) + struct.pack("<I", 1) + b"w"
        expected += struct.pack("<IQ", 1, 1) + struct.pack("<d", 2.0)
        assert data == expected

    def test_deterministic(self):
        arrays = {"a": np.ones(3), "b": np.zeros((2, 2))}
        assert pack({"k": 1, "j": 2}, arrays) == pack({"j": 2, "k": 1}, dict(reversed(arrays.items())))

    def test_bad_magic(self):
        with pytest.raises(CheckpointError, match="magic"):
            unpack(b"NOPE" + pack({}, {})[4:])

    def test_bad_version(self):
        data = pack({}, {})
        with pytest.raises(CheckpointError, match="version"):
            unpack(data[:4] + struct.pack("<I", FORMAT_VERSION + 1) + data[8:])

    def test_truncated(self):
        data = pack({"a": 1}, {"w": np.ones(4)})
        for cut in (2, 10, len(data) - 1):
            with pytest.raises(CheckpointError):
                unpack(data[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(CheckpointError, match="trailing"):
            unpack(pack({}, {"w": np.ones(2)}) + b"\0")


class TestModelCheckpoint:
    def test_predictions_survive_reload(self, trained, tmp_path):
        splits, model, vcad = trained
        path = tmp_path / "m.ckpt"
        alphabet = splits["train"].alphabet
        save_checkpoint(path, model, vcad, {"alphabet": alphabet})
        m2, v2, meta = load_checkpoint(path)
        assert meta == {"alphabet": alphabet}
        assert v2.digest() == vcad.digest()
        recs = splits["test"].records
        a = [o.p_correct for o in predict_confidence(model, vcad, recs, alphabet)]
        b = [o.p_correct for o in predict_confidence(m2, v2, recs, alphabet)]
        assert a == b

    def test_resave_is_byte_identical(self, trained, tmp_path):
        _, model, vcad = trained
        save_checkpoint(tmp_path / "a", model, vcad, {"k": 1})
        m2, v2, meta = load_checkpoint(tmp_path / "a")
        save_checkpoint(tmp_path / "b", m2, v2, meta)
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()

    def test_without_vcad(self, trained, tmp_path):
        _, model, _ = trained
        save_checkpoint(tmp_path / "m", model, None, {})
        _, arrays = unpack((tmp_path / "m").read_bytes())
        assert not any(k.startswith("vcad/") for k in arrays)
        assert load_checkpoint(tmp_path / "m")[1] is None

    def test_missing_array(self, trained, tmp_path):
        _, model, vcad = trained
        save_checkpoint(tmp_path / "m", model, vcad, {})
        config, arrays = unpack((tmp_path / "m").read_bytes())
        arrays.pop(next(k for k in arrays if k.startswith("model/")))
        (tmp_path / "m").write_bytes(pack(config, arrays))
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "m")
