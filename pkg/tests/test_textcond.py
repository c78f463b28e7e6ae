import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from wavdit import tensorio, textcond
from wavdit.textcond import TextFeatures

from fdcheck import check_gradients


@pytest.fixture
def encoder():
    torch.manual_seed(0)
    return textcond.ToyTextEncoder(32, 16, layers=2, heads=2).eval()


def test_encoder_shapes(encoder):
    f = encoder(torch.tensor([3, 1, 4, 1, 5]))
    assert f.raw_embedding.shape == f.last_hidden.shape == (5, 16)


def test_raw_embedding_is_a_lookup(encoder):
    toks = torch.tensor([7, 2, 9, 30])
    perm = torch.tensor([2, 0, 3, 1])
    a = encoder(toks).raw_embedding
    b = encoder(toks[perm]).raw_embedding
    assert torch.equal(a[perm], b)
    c = encoder(torch.tensor([7, 2, 11])).raw_embedding
    assert torch.equal(a[:2], c[:2])


def test_encoder_deterministic_and_bidirectional(encoder):
    toks = torch.tensor([1, 2, 3, 4])
    assert torch.equal(encoder(toks).last_hidden, encoder(toks).last_hidden)
    changed = encoder(torch.tensor([1, 2, 3, 5])).last_hidden
    # changing the last token moves the first position's hidden state
    assert not torch.allclose(changed[0], encoder(toks).last_hidden[0])


def test_unknown_token(encoder):
    with pytest.raises(textcond.UnknownToken):
        encoder(torch.tensor([0, 32]))


def test_padding_mask_isolates_valid_positions(encoder):
    ids, mask = textcond.pad_tokens([[4, 5, 6], [4, 5]])
    f = encoder(ids, mask)
    alone = encoder(torch.tensor([4, 5]))
    assert torch.allclose(f.last_hidden[1, :2], alone.last_hidden, atol=1e-5)


def test_layer_norm_contract():
    v = torch.randn(6, 10, dtype=torch.float64) * 5 + 3
    n = textcond.layer_norm(v)
    assert torch.allclose(n.mean(-1), torch.zeros(6, dtype=torch.float64), atol=1e-4)
    assert torch.allclose(n.var(-1, unbiased=False), torch.ones(6, dtype=torch.float64), atol=1e-4)


def test_combine_examples():
    raw = torch.randn(4, 8, dtype=torch.float64)
    q = textcond.combine_embeddings(TextFeatures(raw, raw.clone()))
    assert torch.allclose(q, 2 * textcond.layer_norm(raw))
    hid = torch.randn(4, 8, dtype=torch.float64)
    a = textcond.combine_embeddings(TextFeatures(raw, hid))
    b = textcond.combine_embeddings(TextFeatures(raw, 10 * hid))
    assert torch.max(torch.abs(a - b)) < 1e-5


@settings(max_examples=40, deadline=None)
@given(scale=st.floats(1.0, 100.0), shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_combine_invariant_to_row_affine_upscaling(scale, shift, seed):
    g = torch.Generator().manual_seed(seed)
    raw = torch.randn(3, 12, generator=g, dtype=torch.float64)
    hid = torch.randn(3, 12, generator=g, dtype=torch.float64)
    base = textcond.combine_embeddings(TextFeatures(raw, hid))
    moved = textcond.combine_embeddings(TextFeatures(raw * scale + shift, hid))
    assert torch.max(torch.abs(base - moved)) < 1e-5


def test_features_shape_mismatch():
    with pytest.raises(textcond.ShapeMismatch):
        TextFeatures(torch.zeros(3, 4), torch.zeros(2, 4))


def test_feature_files_round_trip(tmp_path):
    f = TextFeatures(torch.randn(3, 8), torch.randn(3, 8))
    textcond.write_text_features(tmp_path / "utt", f)
    manifest = json.loads((tmp_path / "utt.raw.json").read_text())
    assert manifest["shape"] == [3, 8] and manifest["dtype"] == "f32le"
    back = textcond.load_text_features(tmp_path / "utt")
    assert torch.equal(back.raw_embedding, f.raw_embedding)
    assert torch.equal(back.last_hidden, f.last_hidden)


def test_feature_files_mismatch(tmp_path):
    tensorio.write_tensor(tmp_path / "u.raw.f32", np.zeros((3, 8), np.float32))
    tensorio.write_tensor(tmp_path / "u.hid.f32", np.zeros((2, 8), np.float32))
    with pytest.raises(textcond.ShapeMismatch):
        textcond.load_text_features(tmp_path / "u")


def test_malformed_manifest(tmp_path):
    tensorio.write_tensor(tmp_path / "u.raw.f32", np.zeros((3, 8), np.float32))
    tensorio.write_tensor(tmp_path / "u.hid.f32", np.zeros((3, 8), np.float32))
    (tmp_path / "u.hid.json").write_text('{"shape": [4, 8], "dtype": "f32le"}')
    with pytest.raises(tensorio.MalformedManifest):
        textcond.load_text_features(tmp_path / "u")


def test_refiner_shape_and_zero_identity():
    ref = textcond.TextRefiner(8, blocks=4)
    for length in (1, 2, 5, 13):
        q = torch.randn(length, 8)
        assert ref(q).shape == q.shape
    ref.zero_init_()
    q = torch.randn(2, 6, 8)
    assert torch.equal(ref(q), q)


def test_refiner_gradients_match_finite_differences():
    torch.manual_seed(3)
    ref = textcond.TextRefiner(4, blocks=2).double()
    with torch.no_grad():
        for b in ref.blocks:
            b.grn.gamma.normal_()
            b.grn.beta.normal_()
    q = torch.randn(2, 3, 4, dtype=torch.float64, requires_grad=True)
    target = torch.randn(2, 3, 4, dtype=torch.float64)

    def loss():
        return ((ref(q) - target) ** 2).sum()

    assert check_gradients(loss, [q, *ref.parameters()], n_coords=24) < 1e-4


def test_conditioner_with_adapter():
    cond = textcond.TextConditioner(32, 16, refine_blocks=2, feature_dim=24)
    f = TextFeatures(torch.randn(5, 24), torch.randn(5, 24))
    assert cond.from_features(f).shape == (5, 16)
    ids, mask = textcond.pad_tokens([[1, 2, 3], [4]])
    q = cond(ids, mask)
    assert q.shape == (2, 3, 16)
    assert torch.count_nonzero(q[1, 1:]) == 0
