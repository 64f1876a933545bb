import numpy as np
import pytest
from hypothesis import given, strategies as st

from fimp.errors import ConfigError, ShapeError, VocabularyError
from fimp.numerics import Rng
from fimp.tokenizer import (
    Tokenizer,
    apply_mask,
    extract_patches,
    sample_masks,
    select_nonzero,
    sinusoidal_encoding,
    sinusoidal_encoding_2d,
    tokenize_patches,
    tokenize_scalar,
    tokenize_temporal,
)


@pytest.fixture
def scalar_tok(f64):
    return Tokenizer("scalar", 6, 10, Rng(0))


def test_scalar_zero_value_gives_positional_row(scalar_tok):
    seq = tokenize_scalar([0.0, 1.5], [4, 7], scalar_tok)
    assert np.array_equal(seq.tokens.data[0], scalar_tok.P.data[4])
    assert seq.tokens.shape == (2, 6) and not seq.mask.any()
    assert np.array_equal(seq.raw_targets[:, 0], [0.0, 1.5])


def test_scalar_equal_inputs_equal_rows(scalar_tok):
    rows = tokenize_scalar([0.3, 0.3], [2, 2], scalar_tok).tokens.data
    assert np.array_equal(rows[0], rows[1])


def test_scalar_out_of_vocabulary(scalar_tok):
    with pytest.raises(VocabularyError):
        tokenize_scalar([1.0], [10], scalar_tok)


def test_scalar_concat_project_matches_dense_oracle(f64):
    tok = Tokenizer("scalar", 5, 12, Rng(1), combine="concat")
    rng = Rng(2)
    values, ids = rng.normal(8), rng.integers(0, 12, 8)
    ref = np.concatenate([values[:, None] @ tok.W.data, tok.P.data[ids]], axis=1) @ tok.W_cat.data
    np.testing.assert_allclose(tokenize_scalar(values, ids, tok).tokens.data, ref, rtol=1e-12)
    assert tok.W_cat.shape == (10, 5)


@given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 9))
def test_scalar_add_is_linear_in_value(v, alpha, idx):
    from fimp.numerics import precision

    with precision(np.float64):
        tok = Tokenizer("scalar", 4, 10, Rng(3))
        p = tok.P.data[idx]
        a = tokenize_scalar([alpha * v], [idx], tok).tokens.data[0] - p
        b = tokenize_scalar([v], [idx], tok).tokens.data[0] - p
    np.testing.assert_allclose(a, alpha * b, atol=1e-9)


def test_patches_single_patch(f64):
    tok = Tokenizer("patch", 8, 1, Rng(4), c=16)
    img = Rng(5).normal((4, 4))
    seq = tokenize_patches(img, 4, tok)
    expected = img.reshape(1, 16) @ tok.W.data + sinusoidal_encoding_2d(1, 1, 8)[0]
    np.testing.assert_allclose(seq.tokens.data, expected, rtol=1e-12)


def test_patch_order_and_oracle():
    img = np.arange(64.0).reshape(8, 8)
    patches = extract_patches(img, 4)
    assert patches.shape == (4, 16)
    for k, (r, c) in enumerate([(0, 0), (0, 1), (1, 0), (1, 1)]):
        assert np.array_equal(patches[k], img[4 * r:4 * r + 4, 4 * c:4 * c + 4].ravel())
    big = Rng(6).normal((16, 16))
    out = extract_patches(big, 4)
    for k in range(16):
        r, c = divmod(k, 4)
        for q in range(16):
            assert out[k, q] == big[4 * r + q // 4, 4 * c + q % 4]
    with pytest.raises(ShapeError):
        extract_patches(np.zeros((6, 8)), 4)


def test_multichannel_patch_width():
    assert extract_patches(np.zeros((8, 8, 3)), 4).shape == (4, 48)


def test_temporal_tokens(f64):
    tok = Tokenizer("temporal", 8, 16, Rng(7), patch_len=20)
    coords = np.array([0.1, 0.2, 0.3])
    assert tokenize_temporal(np.ones(20), coords, tok).tokens.shape == (1, 8)
    zero = tokenize_temporal(np.zeros(320), coords, tok).tokens.data
    spatial = coords @ tok.W_coord.data
    np.testing.assert_allclose(zero - spatial, sinusoidal_encoding(16, 8), atol=1e-12)
    sig = Rng(8).normal(320)
    seq = tokenize_temporal(sig, coords, tok)
    assert np.array_equal(seq.raw_targets, np.stack([sig[20 * t:20 * t + 20] for t in range(16)]))
    with pytest.raises(ShapeError):
        tokenize_temporal(np.zeros(30), coords, tok)


def test_mask_counts_and_construction(scalar_tok):
    seq = tokenize_scalar(Rng(9).normal(10), np.arange(10), scalar_tok)
    assert apply_mask(seq, 0.0, Rng(0)) is seq
    masked = apply_mask(seq, 0.8, Rng(0))
    assert masked.mask.sum() == 8
    rows = masked.tokens.data[masked.mask]
    expected = scalar_tok.mask_token.data + scalar_tok.P.data[np.flatnonzero(masked.mask)]
    np.testing.assert_allclose(rows, expected, rtol=1e-12)
    assert np.array_equal(masked.raw_targets, seq.raw_targets)
    assert np.array_equal(masked.tokens.data[~masked.mask], seq.tokens.data[~masked.mask])
    with pytest.raises(ConfigError):
        apply_mask(seq, 1.0, Rng(0))


@given(st.integers(0, 2**31), st.floats(0, 0.99), st.integers(1, 12), st.integers(1, 5))
def test_sample_masks_counts(seed, ratio, f, n):
    rng = Rng(seed)
    valid = rng.uniform((n, f)) < 0.8
    masks = sample_masks(valid, ratio, rng.child(1))
    assert not (masks & ~valid).any()
    assert np.array_equal(masks.sum(axis=1), np.floor(ratio * valid.sum(axis=1) + 1e-9).astype(int))


def test_select_nonzero_cap():
    values = np.array([0, 1, 0, 2, 3, 0, 4.0])
    assert select_nonzero(values).tolist() == [1, 3, 4, 6]
    idx = select_nonzero(values, cap=2, rng=Rng(0))
    assert len(idx) == 2 and set(idx) <= {1, 3, 4, 6} and np.all(np.diff(idx) > 0)
    with pytest.raises(ConfigError):
        select_nonzero(values, cap=2)


def test_tokenizer_config_errors():
    with pytest.raises(ConfigError):
        Tokenizer("words", 4, 4, Rng(0))
    with pytest.raises(ConfigError):
        Tokenizer("scalar", 4, 4, Rng(0), combine="multiply")
    with pytest.raises(ConfigError):
        Tokenizer("patch", 4, 6, Rng(0), c=4)
