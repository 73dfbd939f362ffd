import json
import os

import numpy as np
import pytest

from conftest import TINY_ENCODER, tiny_model
from fewshot.errors import (
    CheckpointError,
    ConfigError,
    DegeneratePrototypeError,
    DimensionError,
    StateError,
)
from fewshot.model import EncoderConfig, load_checkpoint, save_checkpoint
from fewshot.tensor import Tensor, no_grad


def rand_batch(n=3, seed=0, size=8, channels=3):
    return np.random.default_rng(seed).random((n, channels, size, size), dtype=np.float32)


# ---------------------------------------------------------------------------
# config validation

def test_encoder_config_rejects_mismatched_feature_dim():
    with pytest.raises(ConfigError, match="feature_dim"):
        EncoderConfig(stages=((16, 3, 1),), feature_dim=8)


def test_encoder_config_rejects_collapsed_geometry():
    # 8 -> 4 -> 2 -> 1 leaves nothing for the fourth stage to pool
    with pytest.raises(ConfigError, match="spatial"):
        EncoderConfig(input_size=8, stages=((8, 3, 1),) * 4, feature_dim=8)


def test_spatial_sizes_default():
    assert EncoderConfig().spatial_sizes() == [16, 8, 4, 2]


# ---------------------------------------------------------------------------
# encode

def test_encode_output_shape():
    m = tiny_model()
    for b in (1, 2, 7):
        out = m.encode(rand_batch(b))
        assert out.data.shape == (b, TINY_ENCODER.feature_dim)


def test_encode_deterministic():
    m = tiny_model()
    x = rand_batch(4, seed=1)
    a = m.encode(x).data
    b = m.encode(x.copy()).data
    assert np.array_equal(a, b)


def test_encode_identical_rows_identical_embeddings():
    m = tiny_model()
    one = rand_batch(1, seed=2)
    x = np.concatenate([one, one])
    out = m.encode(x).data
    assert np.array_equal(out[0], out[1])


def test_encode_zero_input_zero_embedding():
    m = tiny_model()
    out = m.encode(np.zeros((2, 3, 8, 8), dtype=np.float32))
    assert np.array_equal(out.data, np.zeros((2, 8)))


def test_encode_geometry_mismatch():
    m = tiny_model()
    with pytest.raises(DimensionError):
        m.encode(np.zeros((1, 3, 16, 16), dtype=np.float32))


# ---------------------------------------------------------------------------
# decoder

def test_decode_output_shape():
    m = tiny_model()
    f = m.encode(rand_batch(5))
    out = m.decode_transform(f, f)
    assert out.data.shape == (5, 8)


def test_decode_zero_init_final_layer_predicts_zero():
    m = tiny_model()
    fa = m.encode(rand_batch(4, seed=3))
    fb = m.encode(rand_batch(4, seed=4))
    assert np.array_equal(m.decode_transform(fa, fb).data, np.zeros((4, 8)))


def test_decode_order_matters_once_trained():
    m = tiny_model()
    rng = np.random.default_rng(5)
    m.params["dec.fc2.weight"].data = rng.normal(
        size=m.params["dec.fc2.weight"].data.shape
    ).astype(np.float32)
    fa = m.encode(rand_batch(4, seed=6))
    fb = m.encode(rand_batch(4, seed=7))
    ab = m.decode_transform(fa, fb).data
    ba = m.decode_transform(fb, fa).data
    assert not np.allclose(ab, ba)


# ---------------------------------------------------------------------------
# classifier

def test_classify_weight_row_attains_scale():
    m = tiny_model(n_base=4)
    w = m.params["cls.base.weight"].data
    logits = m.classify(Tensor(w[1:2].copy()), head="base").data
    scale = float(m.params["cls.scale"].data[0])
    assert np.isclose(logits[0, 1], scale, atol=1e-6)
    assert logits[0].argmax() == 1


def test_classify_orthogonal_feature_zero_logits():
    m = tiny_model(n_base=2)
    m.params["cls.base.weight"].data = np.eye(2, 8, dtype=np.float32)
    f = np.zeros((1, 8), dtype=np.float32)
    f[0, 7] = 3.0
    assert np.allclose(m.classify(Tensor(f), "base").data, 0.0, atol=1e-7)


def test_classify_zero_feature_gives_zero_logits():
    # dead embedding carries no direction: all cosines zero, no error
    m = tiny_model(n_base=3)
    f = np.zeros((2, 8), dtype=np.float32)
    f[1, 0] = 1.0
    logits = m.classify(Tensor(f), "base").data
    assert np.array_equal(logits[0], np.zeros(3))
    assert not np.array_equal(logits[1], np.zeros(3))


def test_classify_scale_invariance():
    m = tiny_model()
    f = m.encode(rand_batch(4, seed=8)).data
    a = m.classify(Tensor(f), "base").data
    b = m.classify(Tensor(10.0 * f), "base").data
    assert np.allclose(a, b, atol=1e-5)
    assert np.array_equal(a.argmax(axis=1), b.argmax(axis=1))


def test_classify_missing_novel_head():
    m = tiny_model()
    f = m.encode(rand_batch(1))
    with pytest.raises(StateError):
        m.classify(f, head="novel")
    with pytest.raises(StateError):
        m.classify(f, head="joint")


def test_classify_joint_stacks_base_then_novel():
    m = tiny_model(n_base=3, n_novel=2)
    f = m.encode(rand_batch(2, seed=9))
    joint = m.classify(f, "joint").data
    assert joint.shape == (2, 5)
    base = m.classify(f, "base").data
    novel = m.classify(f, "novel").data
    assert np.allclose(joint[:, :3], base, atol=1e-7)
    assert np.allclose(joint[:, 3:], novel, atol=1e-7)


# ---------------------------------------------------------------------------
# imprinting

def test_imprint_single_feature_is_normalized_feature():
    m = tiny_model()
    f = np.array([[3.0, 4.0, 0, 0, 0, 0, 0, 0]], dtype=np.float32)
    m.imprint([f])
    assert np.allclose(m.params["cls.novel.weight"].data[0],
                       [0.6, 0.8, 0, 0, 0, 0, 0, 0], atol=1e-6)


def test_imprint_duplicate_features_match_single():
    m = tiny_model()
    f = np.random.default_rng(10).random((1, 8)).astype(np.float32)
    m.imprint([f])
    single = m.params["cls.novel.weight"].data.copy()
    m.imprint([np.concatenate([f, f])])
    assert np.allclose(m.params["cls.novel.weight"].data, single, atol=1e-7)


def test_imprint_orthonormal_pair():
    m = tiny_model()
    feats = np.zeros((2, 8), dtype=np.float32)
    feats[0, 0] = 1.0
    feats[1, 1] = 1.0
    m.imprint([feats])
    row = m.params["cls.novel.weight"].data[0]
    want = np.zeros(8)
    want[:2] = np.sqrt(0.5)
    assert np.allclose(row, want, atol=1e-6)


def test_imprint_rows_unit_norm():
    m = tiny_model()
    rng = np.random.default_rng(11)
    m.imprint([rng.normal(size=(k, 8)).astype(np.float32) for k in (1, 2, 5)])
    norms = np.linalg.norm(m.params["cls.novel.weight"].data, axis=1)
    assert np.all(np.abs(norms - 1.0) <= 1e-6)


def test_imprint_degenerate_feature_raises():
    m = tiny_model()
    with pytest.raises(DegeneratePrototypeError):
        m.imprint([np.zeros((1, 8), dtype=np.float32)])


def test_imprint_cancelling_features_raise():
    m = tiny_model()
    f = np.zeros((2, 8), dtype=np.float32)
    f[0, 0], f[1, 0] = 1.0, -1.0
    with pytest.raises(DegeneratePrototypeError):
        m.imprint([f])


# ---------------------------------------------------------------------------
# shared weights / post-step invariants

def test_two_branch_encoding_equals_single_encoder():
    # both decoder branches read one parameter set: encoding the original
    # and the transformed batch separately is the same single encoder
    m = tiny_model()
    x = rand_batch(3, seed=12)
    tx = rand_batch(3, seed=13)
    fa1 = m.encode(x).data
    fb1 = m.encode(tx).data
    fa2 = m.encode(x).data
    fb2 = m.encode(tx).data
    assert np.array_equal(fa1, fa2) and np.array_equal(fb1, fb2)


def test_post_step_restores_unit_rows_and_positive_scale():
    m = tiny_model(n_base=4, n_novel=2)
    rng = np.random.default_rng(14)
    m.params["cls.base.weight"].data += rng.normal(0, 0.3, (4, 8)).astype(np.float32)
    m.params["cls.scale"].data = np.array([-0.5], dtype=np.float32)
    m.post_step()
    assert np.allclose(np.linalg.norm(m.params["cls.base.weight"].data, axis=1), 1.0,
                       atol=1e-6)
    assert m.params["cls.scale"].data[0] > 0


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_round_trip_bitwise(tmp_path):
    m = tiny_model(n_base=4, n_novel=2, seed=3)
    path = str(tmp_path / "ckpt")
    save_checkpoint(m, path, epoch=5, extra_arrays={"velocity/x": np.ones(3, np.float32)},
                    extra_state={"note": 1})
    loaded = load_checkpoint(path)
    assert loaded.epoch == 5
    assert loaded.state == {"note": 1}
    assert np.array_equal(loaded.extra_arrays["velocity/x"], np.ones(3, np.float32))
    for name, p in m.params.items():
        assert loaded.model.params[name].data.tobytes() == p.data.tobytes()


def test_checkpoint_logits_identical_after_load(tmp_path):
    m = tiny_model(seed=4)
    path = str(tmp_path / "ckpt")
    save_checkpoint(m, path)
    x = rand_batch(4, seed=15)
    with no_grad():
        a = m.classify(m.encode(x), "base").data
        b = load_checkpoint(path).model.classify(
            load_checkpoint(path).model.encode(x), "base").data
    assert np.array_equal(a, b)


def test_checkpoint_wrong_feature_dim_fails_loudly(tmp_path):
    m = tiny_model()
    path = str(tmp_path / "ckpt")
    save_checkpoint(m, path)
    mpath = os.path.join(path, "manifest.json")
    with open(mpath) as f:
        manifest = json.load(f)
    manifest["encoder"]["feature_dim"] = 16
    manifest["encoder"]["stages"] = [[16, 3, 1], [16, 3, 1]]
    with open(mpath, "w") as f:
        json.dump(manifest, f)
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)


def test_checkpoint_truncated_array_fails(tmp_path):
    m = tiny_model()
    path = str(tmp_path / "ckpt")
    save_checkpoint(m, path)
    target = os.path.join(path, "arrays", "cls.base.weight.f32")
    with open(target, "r+b") as f:
        f.truncate(8)
    with pytest.raises(CheckpointError, match="bytes"):
        load_checkpoint(path)


def test_checkpoint_missing_dir(tmp_path):
    with pytest.raises(CheckpointError, match="manifest"):
        load_checkpoint(str(tmp_path / "nope"))


def test_clone_is_independent():
    m = tiny_model()
    c = m.clone()
    c.params["cls.scale"].data[:] = 99.0
    assert m.params["cls.scale"].data[0] != 99.0
