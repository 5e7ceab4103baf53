import numpy as np
import pytest

from mergevit.errors import ShapeError
from mergevit.patches import Image, TokenMap, embed, patchify, patchify_array, unpatchify
from mergevit.tensor import Tensor


def test_single_patch_is_flattened_image():
    rng = np.random.default_rng(0)
    img = Image(rng.random((16, 16, 3)))
    patches = patchify(img, 16)
    assert patches.shape == (1, 1, 768)
    np.testing.assert_array_equal(patches.data[0, 0], img.data.ravel())


def test_constant_image_gives_constant_patches():
    img = Image(np.full((32, 32, 3), 0.25))
    patches = patchify(img, 16)
    np.testing.assert_array_equal(patches.data, 0.25)


def test_patch_indexing_matches_pixel_blocks():
    rng = np.random.default_rng(1)
    img = Image(rng.random((32, 48, 3)))
    patches = patchify(img, 16)
    assert patches.shape == (2, 3, 768)
    # Oracle: pull the pixel block by explicit index arithmetic.
    block = img.data[16:32, 32:48, :]
    np.testing.assert_array_equal(patches.data[1, 2], block.ravel())


def test_indivisible_dims_rejected():
    img = Image(np.zeros((30, 32, 3)))
    with pytest.raises(ShapeError):
        patchify(img, 16)


def test_roundtrip_identity():
    rng = np.random.default_rng(2)
    img = Image(rng.random((24, 40, 3)))
    patches = patchify(img, 8)
    np.testing.assert_array_equal(unpatchify(patches.data, 8), img.data)


def test_token_count():
    rng = np.random.default_rng(3)
    img = Image(rng.random((48, 64, 3)))
    patches = patchify(img, 16)
    assert patches.shape[0] * patches.shape[1] == (48 * 64) // (16 * 16)


def test_embed_identity_projection():
    rng = np.random.default_rng(4)
    patches = Tensor(rng.random((2, 3, 5)))
    tm = embed(patches, Tensor(np.eye(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(tm.tokens.data, patches.data)
    assert tm.all_real()


def test_embed_bias_only():
    patches = Tensor(np.random.default_rng(5).random((2, 2, 4)))
    b = np.array([1.0, -2.0, 0.5])
    tm = embed(patches, Tensor(np.zeros((4, 3))), Tensor(b))
    np.testing.assert_array_equal(tm.tokens.data, np.broadcast_to(b, (2, 2, 3)))


def test_embed_matches_per_token_matmul_oracle():
    rng = np.random.default_rng(6)
    patches = rng.random((3, 4, 6))
    w = rng.standard_normal((6, 5))
    b = rng.standard_normal(5)
    tm = embed(Tensor(patches), Tensor(w), Tensor(b))
    for i in range(3):
        for j in range(4):
            want = patches[i, j] @ w + b
            np.testing.assert_allclose(tm.tokens.data[i, j], want, atol=1e-12)


def test_embed_shape_mismatch():
    with pytest.raises(ShapeError):
        embed(Tensor(np.zeros((2, 2, 4))), Tensor(np.zeros((5, 3))), Tensor(np.zeros(3)))


def test_batched_patchify_matches_single():
    rng = np.random.default_rng(7)
    imgs = rng.random((3, 16, 24, 3))
    batched = patchify_array(imgs, 8)
    for i in range(3):
        single = patchify(Image(imgs[i]), 8)
        np.testing.assert_array_equal(batched[i], single.data)


def test_tokenmap_validates_mask_shape():
    with pytest.raises(ShapeError):
        TokenMap(Tensor(np.zeros((2, 2, 3))), np.ones((3, 2)))
