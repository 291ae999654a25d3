"""Encoder, mask pyramid, composition, and decoder contracts."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fdmpaint import autodiff as ad
from fdmpaint.autodiff import Tensor
from fdmpaint.encdec import (
    Decoder,
    MaskPyramid,
    PatchEncoder,
    build_mask_pyramid,
    compose_level,
    features_to_grid,
    grid_to_features,
    levels_for_patch_size,
    min_pool,
    patchify,
    unpatchify,
)
from fdmpaint.errors import ConfigError

RNG = np.random.default_rng(7)


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------

def test_patchify_counts():
    img = RNG.random((8, 8, 3)).astype(np.float32)
    patches = patchify(img, 4)
    assert patches.shape == (4, 48)


def test_patchify_constant_image_identical_patches():
    img = np.full((8, 8, 3), 0.25, dtype=np.float32)
    patches = patchify(img, 4)
    for row in patches:
        np.testing.assert_array_equal(row, patches[0])


def test_patchify_row_major_order():
    img = np.zeros((4, 4, 3), dtype=np.float32)
    img[0, 2:, :] = 1.0  # top-right patch
    patches = patchify(img, 2)
    assert patches[1].max() == 1.0 and patches[0].max() == 0.0


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(0, 2 ** 31 - 1))
def test_patchify_inverse_bit_exact(r, seed):
    rng = np.random.default_rng(seed)
    h = r * rng.integers(1, 4)
    w = r * rng.integers(1, 4)
    img = rng.random((h, w, 3)).astype(np.float32)
    back = unpatchify(patchify(img, r), h // r, w // r, r)
    np.testing.assert_array_equal(back, img)


def test_patchify_rejects_indivisible():
    with pytest.raises(ConfigError):
        patchify(np.zeros((9, 8, 3)), 4)


def test_grid_roundtrip():
    f = Tensor(RNG.standard_normal((2, 12, 5)).astype(np.float32))
    grid = features_to_grid(f, 3, 4)
    assert grid.shape == (2, 5, 3, 4)
    back = grid_to_features(grid)
    np.testing.assert_array_equal(back.data, f.data)


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

def test_encoder_zero_weights_give_zero_features():
    enc = PatchEncoder(4, 8, np.random.default_rng(0))
    for p in enc.parameters():
        p.data[:] = 0.0
    img = RNG.random((8, 8, 3)).astype(np.float32)
    out = enc.encode_image(img)
    np.testing.assert_array_equal(out.data, np.zeros((4, 8)))


def test_encoder_patch_locality_permutation():
    enc = PatchEncoder(4, 8, np.random.default_rng(1))
    img = RNG.random((8, 8, 3)).astype(np.float32)
    patches = patchify(img, 4)
    perm = np.array([2, 0, 3, 1])
    out = enc(Tensor(patches)).data
    out_perm = enc(Tensor(patches[perm])).data
    np.testing.assert_allclose(out_perm, out[perm], rtol=1e-6)


def test_encoder_single_patch_changes_single_feature():
    enc = PatchEncoder(4, 8, np.random.default_rng(2))
    img = RNG.random((16, 16, 3)).astype(np.float32)
    base = enc.encode_image(img).data
    bumped = img.copy()
    bumped[4:8, 8:12] += 0.5  # patch (1, 2) in a 4x4 grid
    out = enc.encode_image(bumped).data
    changed = np.flatnonzero(np.abs(out - base).max(axis=1) > 0)
    assert changed.tolist() == [1 * 4 + 2]


def test_encoder_matches_hand_rolled_composition():
    enc = PatchEncoder(4, 8, np.random.default_rng(3))
    patch = RNG.random((1, 48)).astype(np.float32)
    out = enc(Tensor(patch)).data[0]

    h = np.maximum(patch[0] @ enc.in_proj.w.data + enc.in_proj.b.data, 0.0)
    for block in enc.blocks:
        h = np.maximum(h + (h @ block.lin.w.data + block.lin.b.data), 0.0)
    manual = np.maximum(h @ enc.out_proj.w.data + enc.out_proj.b.data, 0.0)
    np.testing.assert_allclose(out, manual, atol=1e-6)


def test_encoder_outputs_nonnegative():
    enc = PatchEncoder(4, 8, np.random.default_rng(4))
    out = enc.encode_image(RNG.random((8, 8, 3)).astype(np.float32))
    assert out.data.min() >= 0.0


# ---------------------------------------------------------------------------
# mask pyramid
# ---------------------------------------------------------------------------

def test_pyramid_all_ones():
    pyr = build_mask_pyramid(np.ones((16, 16), dtype=np.float32), 4, 2)
    assert all(np.all(m == 1.0) for m in pyr.level_masks)
    assert np.all(pyr.patch_mask == 1.0)


def test_pyramid_single_zero_pixel():
    m = np.ones((16, 16), dtype=np.float32)
    m[5, 9] = 0.0
    pyr = build_mask_pyramid(m, 4, 2)
    assert pyr.patch_mask.sum() == pyr.patch_mask.size - 1
    assert pyr.patch_mask[1, 2] == 0.0


def test_pyramid_matches_all_scan_oracle():
    rng = np.random.default_rng(11)
    m = (rng.random((16, 16)) > 0.3).astype(np.float32)
    pyr = build_mask_pyramid(m, 4, 2)
    for i in range(4):
        for j in range(4):
            assert pyr.patch_mask[i, j] == float(np.all(m[4 * i : 4 * i + 4, 4 * j : 4 * j + 4] == 1.0))
    assert pyr.levels == 2
    np.testing.assert_array_equal(pyr.level_masks[0], m)
    np.testing.assert_array_equal(pyr.level_masks[2], pyr.patch_mask)


def test_pyramid_rejects_indivisible():
    with pytest.raises(ConfigError):
        build_mask_pyramid(np.ones((10, 10)), 4, 2)


# ---------------------------------------------------------------------------
# compose_level
# ---------------------------------------------------------------------------

def test_compose_mask_limits_bit_exact():
    f = Tensor(RNG.standard_normal((2, 5, 4, 4)).astype(np.float32))
    inj = Tensor(RNG.standard_normal((2, 5, 4, 4)).astype(np.float32))
    ones = np.ones((2, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(compose_level(f, inj, ones).data, inj.data)
    zeros = np.zeros((2, 4, 4), dtype=np.float32)
    np.testing.assert_array_equal(compose_level(f, inj, zeros).data, f.data)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_compose_elementwise_formula(seed):
    rng = np.random.default_rng(seed)
    f = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    inj = rng.standard_normal((1, 3, 4, 4)).astype(np.float32)
    m = (rng.random((1, 4, 4)) > 0.5).astype(np.float32)
    out = compose_level(Tensor(f), Tensor(inj), m).data
    expected = f * (1 - m[:, None]) + inj * m[:, None]
    np.testing.assert_allclose(out, expected, rtol=1e-6)


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------

def _decode_setup(seed=0, patch_size=4, channels=6, size=16, batch=2):
    rng = np.random.default_rng(seed)
    dec = Decoder(patch_size, channels, rng)
    levels = dec.levels
    h = size // patch_size
    feats = Tensor(rng.standard_normal((batch, channels, h, h)).astype(np.float32))
    imgs = rng.random((batch, size, size, 3)).astype(np.float32)
    mask = (rng.random((batch, size, size)) > 0.4).astype(np.float32)
    pyr = build_mask_pyramid(mask, patch_size, levels)
    return dec, feats, imgs * mask[..., None], pyr


def test_decoder_output_extents():
    dec, feats, imgs, pyr = _decode_setup()
    out = dec(feats, imgs, pyr)
    assert out.shape == (2, 3, 16, 16)


def test_decoder_level_counts():
    dec = Decoder(4, 6, np.random.default_rng(0))
    assert dec.levels == 2 and len(dec.ups) == 2 and len(dec.downs) == 2
    assert len(dec.blocks) == 6
    paper = Decoder(8, 8, np.random.default_rng(0))
    assert paper.levels == 3 and len(paper.ups) == 3 and len(paper.downs) == 3
    assert len(paper.blocks) == 8
    assert levels_for_patch_size(8) == 3


def test_decoder_all_visible_ignores_features():
    rng = np.random.default_rng(3)
    dec = Decoder(4, 6, rng)
    imgs = rng.random((1, 16, 16, 3)).astype(np.float32)
    pyr = build_mask_pyramid(np.ones((1, 16, 16), dtype=np.float32), 4, dec.levels)
    fa = Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
    fb = Tensor(rng.standard_normal((1, 6, 4, 4)).astype(np.float32))
    out_a = dec(fa, imgs, pyr).data
    out_b = dec(fb, imgs, pyr).data
    np.testing.assert_array_equal(out_a, out_b)


def test_decoder_no_nan_on_random_inputs():
    dec, _, imgs, pyr = _decode_setup(seed=9)
    rng = np.random.default_rng(10)
    for _ in range(100):
        feats = Tensor(rng.standard_normal((2, 6, 4, 4)).astype(np.float32))
        out = dec(feats, imgs, pyr)
        assert np.all(np.isfinite(out.data))


def test_decoder_rejects_mismatched_pyramid():
    dec, feats, imgs, _ = _decode_setup()
    bad = build_mask_pyramid(np.ones((2, 32, 32), dtype=np.float32), 4, 2)
    with pytest.raises(ConfigError):
        dec(feats, imgs, bad)


def test_min_pool_values():
    m = np.array([[1.0, 1.0, 0.0, 1.0],
                  [1.0, 1.0, 1.0, 1.0],
                  [1.0, 1.0, 1.0, 1.0],
                  [1.0, 1.0, 1.0, 1.0]], dtype=np.float32)
    np.testing.assert_array_equal(min_pool(m, 2), np.array([[1.0, 0.0], [1.0, 1.0]]))
