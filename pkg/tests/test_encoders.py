import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mga import functional as F
from mga.encoders import (ConfigError, DualEncoder, EncoderConfig, encode_image, encode_images,
                          encode_reports, encode_sentences, token_bucket, tokenize)
from mga.tensor import Tape, Tensor, grad_check


@pytest.mark.parametrize("text, tokens", [
    ("No pleural effusion.", ["no", "pleural", "effusion"]),
    ("", []),
    ("Heart size is normal", ["heart", "size", "is", "normal"]),
    ("  T2-weighted,  x3 ", ["t2", "weighted", "x3"]),
])
def test_tokenize(text, tokens):
    assert tokenize(text) == tokens


def fnv1a(token):
    h = 0x811C9DC5
    for byte in token.encode("utf-8"):
        h = ((h ^ byte) * 0x01000193) % 2 ** 32
    return h


@pytest.mark.parametrize("token", ["edema", "no", "a", "pneumothorax", "x3"])
def test_token_bucket_is_fnv1a(token):
    assert token_bucket(token, 4096) == fnv1a(token) % 4096


def test_config_rejects_nonpositive_sizes():
    with pytest.raises(ConfigError):
        EncoderConfig(dim=0)


def test_default_grid_shape():
    model = DualEncoder.init()
    local, v = encode_image(np.random.default_rng(0).uniform(size=(64, 64)), model)
    assert local.grid.shape == (8, 8, 64)
    assert abs(np.linalg.norm(v.data) - 1.0) <= 1e-9


def test_indivisible_image_rejected(small_model):
    with pytest.raises(ValueError):
        encode_image(np.zeros((9, 8)), small_model)


def test_grid_mismatch_rejected(small_model):
    with pytest.raises(ValueError):
        encode_image(np.zeros((12, 12)), small_model)


def test_constant_image_gives_identical_patches(small_model):
    local, _ = encode_image(np.full((8, 8), 0.3), small_model)
    rows = local.grid.data.reshape(-1, small_model.config.dim)
    np.testing.assert_allclose(rows, np.broadcast_to(rows[0], rows.shape), atol=1e-15)


def direct_patch_features(model, image):
    """Per-patch evaluation written out with explicit loops."""
    cfg, p = model.config, model.config.patch_side
    mean = image.mean()
    feats = []
    for r in range(cfg.grid):
        for c in range(cfg.grid):
            patch = image[r * p:(r + 1) * p, c * p:(c + 1) * p]
            x = patch.reshape(-1) @ model["vis.patch_w"].data + model["vis.patch_b"].data
            x = x + (patch.mean() - mean) * model["vis.pos"].data[r * cfg.grid + c]
            h = np.tanh(x @ model["vis.mix_w1"].data + model["vis.mix_b1"].data)
            x = x + h @ model["vis.mix_w2"].data + model["vis.mix_b2"].data
            feats.append(x / np.linalg.norm(x))
    return np.array(feats)


def test_patch_features_match_direct_evaluation(small_model, rng):
    img = rng.uniform(size=(8, 8))
    local, v = encode_image(img, small_model)
    want = direct_patch_features(small_model, img)
    np.testing.assert_allclose(local.grid.data.reshape(-1, 8), want, atol=1e-13)
    g = want.mean(axis=0)
    np.testing.assert_allclose(v.data, g / np.linalg.norm(g), atol=1e-13)


def test_batch_encoding_matches_single(small_model, rng):
    imgs = rng.uniform(size=(3, 8, 8))
    local, v = encode_images(imgs, small_model)
    for i in range(3):
        li, vi = encode_image(imgs[i], small_model)
        np.testing.assert_allclose(local.grid.data[i], li.grid.data, atol=1e-14)
        np.testing.assert_allclose(v.data[i], vi.data, atol=1e-14)


def test_padding_mask_and_truncation(small_model):
    feats, t = encode_sentences(["heart normal", "no effusion", "edema"], small_model, 5)
    assert feats.mask.tolist() == [True, True, True, False, False]
    np.testing.assert_array_equal(feats.matrix.data[3:], 0.0)
    seven = [f"finding {i}" for i in range(7)]
    feats7, _ = encode_sentences(seven, small_model, 5)
    assert feats7.mask.all()
    first5, _ = encode_sentences(seven[:5], small_model, 5)
    np.testing.assert_array_equal(feats7.matrix.data, first5.matrix.data)


def test_duplicate_sentences_identical_rows(small_model):
    feats, _ = encode_sentences(["no edema", "no edema"], small_model, 2)
    np.testing.assert_array_equal(feats.matrix.data[0], feats.matrix.data[1])


def test_report_embedding_is_normalized_mean_of_rows(small_model):
    feats, t = encode_sentences(["heart normal", "no effusion"], small_model, 4)
    m = feats.matrix.data[:2].mean(axis=0)
    np.testing.assert_allclose(t.data, m / np.linalg.norm(m), atol=1e-14)
    np.testing.assert_allclose(np.linalg.norm(feats.matrix.data[:2], axis=1), 1.0, atol=1e-9)


def test_empty_report_rejected(small_model):
    with pytest.raises(ValueError):
        encode_reports([["a"], []], small_model, 3)


def test_encoder_gradients_match_finite_differences(small_model, rng):
    names = list(small_model.params)
    imgs = rng.uniform(size=(2, 8, 8))

    def f(*ts):
        model = DualEncoder(small_model.config, dict(zip(names, ts)))
        local, v = encode_images(imgs, model)
        sents, t = encode_reports([["no edema", "heart normal"], ["edema"]], model, 3)
        return F.add(F.sum(F.multiply(v, t)), F.sum(F.multiply(local.grid, 0.1)))

    assert grad_check(f, [small_model.params[n].data for n in names]) <= 1e-6


def test_padded_slots_receive_no_gradient(small_model):
    with Tape() as tape:
        feats, _ = encode_reports([["no edema"], ["a", "b"]], small_model, 3)
        grads = tape.backward(F.sum(F.multiply(feats.matrix, np.ones((2, 3, 8)))))
    g = grads[feats.matrix.node_id]
    np.testing.assert_array_equal(g[~feats.mask], 1.0)  # upstream, before the placement
    # the same objective restricted to real rows gives identical parameter gradients
    ref = small_model.copy()
    with Tape() as tape:
        feats2, _ = encode_reports([["no edema"], ["a", "b"]], ref, 3)
        tape.backward(F.sum(feats2.real))
    for k in small_model.params:
        a, b = small_model[k].grad, ref[k].grad
        if a is None:
            assert b is None
        else:
            np.testing.assert_allclose(a, b, atol=1e-14)


def test_init_is_seeded():
    a, b = DualEncoder.init(EncoderConfig(seed=4)), DualEncoder.init(EncoderConfig(seed=4))
    for k in a.params:
        np.testing.assert_array_equal(a[k].data, b[k].data)


@given(st.lists(st.text(alphabet="abcdefgh .", min_size=1, max_size=20), min_size=1, max_size=6))
def test_sentence_rows_unit_norm(sentences):
    sentences = [s for s in sentences if tokenize(s)]
    if not sentences:
        return
    model = DualEncoder.init(EncoderConfig(dim=8, hidden=8, buckets=64))
    emb = model.embed_sentences(sentences)
    np.testing.assert_allclose(np.linalg.norm(emb, axis=1), 1.0, atol=1e-9)
