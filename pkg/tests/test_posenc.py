import numpy as np
import pytest

from mergevit.errors import DomainError, ShapeError
from mergevit.patches import TokenMap
from mergevit.posenc import (
    PosEmbedGrid,
    encode_subset,
    exact_encode,
    fuzzy_encode,
    resize_grid,
    sample_offsets,
)
from mergevit.tensor import Tensor, bilinear_sample, finite_diff_grad, parameter


def make_pe(rng, gh, gw, d):
    return PosEmbedGrid(Tensor(rng.standard_normal((gh, gw, d))), gh, gw)


def make_tm(rng, h, w, d):
    return TokenMap(Tensor(rng.standard_normal((h, w, d))), np.ones((h, w)))


# ---------------------------------------------------------------- offsets

def test_offsets_empty():
    assert sample_offsets(0, 0).shape == (0, 2)


def test_offsets_within_bounds():
    s = sample_offsets(100_000, 0)
    assert s.min() >= -0.5 and s.max() <= 0.5


def test_offsets_law_of_large_numbers():
    s = sample_offsets(100_000, 0)
    assert abs(s.mean()) < 0.01
    assert -0.5 <= s.min() <= -0.49
    assert 0.49 <= s.max() <= 0.5


def test_offsets_deterministic():
    np.testing.assert_array_equal(sample_offsets(64, 7), sample_offsets(64, 7))
    assert not np.array_equal(sample_offsets(64, 7), sample_offsets(64, 8))


# ---------------------------------------------------------------- fuzzy

def test_fuzzy_zero_offsets_equals_exact_bitwise():
    rng = np.random.default_rng(0)
    pe = make_pe(rng, 4, 5, 3)
    tm = make_tm(rng, 4, 5, 3)
    fuzzy = fuzzy_encode(tm, pe, rng_seed=0, offsets=np.zeros((20, 2)))
    exact = exact_encode(tm, pe)
    np.testing.assert_array_equal(fuzzy.tokens.data, exact.tokens.data)


def test_fuzzy_midpoint_offset():
    rng = np.random.default_rng(1)
    pe = make_pe(rng, 4, 4, 3)
    tm = make_tm(rng, 4, 4, 3)
    offsets = np.zeros((16, 2))
    k = 1 * 4 + 2  # token (1, 2), interior
    offsets[k] = [0.5, 0.0]
    out = fuzzy_encode(tm, pe, rng_seed=0, offsets=offsets)
    added = out.tokens.data[1, 2] - tm.tokens.data[1, 2]
    want = 0.5 * (pe.grid.data[1, 2] + pe.grid.data[2, 2])
    np.testing.assert_allclose(added, want, atol=1e-15)


def test_fuzzy_two_seeds_differ_and_replay():
    rng = np.random.default_rng(2)
    pe = make_pe(rng, 3, 3, 2)
    tm = make_tm(rng, 3, 3, 2)
    a = fuzzy_encode(tm, pe, rng_seed=1)
    b = fuzzy_encode(tm, pe, rng_seed=2)
    assert not np.array_equal(a.tokens.data, b.tokens.data)
    # Replaying the drawn offsets through the sampling oracle reproduces a.
    offs = sample_offsets(9, 1)
    base = np.stack(np.meshgrid(np.arange(3.0), np.arange(3.0), indexing="ij"),
                    axis=-1).reshape(9, 2)
    sampled = bilinear_sample(pe.grid, base + offs).data.reshape(3, 3, 2)
    np.testing.assert_array_equal(a.tokens.data, tm.tokens.data + sampled)


def test_fuzzy_shared_offsets_mode():
    rng = np.random.default_rng(3)
    pe = make_pe(rng, 3, 3, 2)
    tm = TokenMap(Tensor(np.zeros((3, 3, 2))), np.ones((3, 3)))
    out = fuzzy_encode(tm, pe, rng_seed=5, per_token=False)
    offs = sample_offsets(1, 5)[0]
    base = np.stack(np.meshgrid(np.arange(3.0), np.arange(3.0), indexing="ij"),
                    axis=-1).reshape(9, 2)
    want = bilinear_sample(pe.grid, base + offs).data.reshape(3, 3, 2)
    np.testing.assert_array_equal(out.tokens.data, want)


def test_fuzzy_dim_mismatch():
    rng = np.random.default_rng(4)
    pe = make_pe(rng, 4, 4, 3)
    tm = make_tm(rng, 3, 4, 3)
    with pytest.raises(ShapeError):
        fuzzy_encode(tm, pe, rng_seed=0)


# ---------------------------------------------------------------- exact

def test_exact_native_adds_stored_grid():
    rng = np.random.default_rng(5)
    pe = make_pe(rng, 5, 5, 4)
    tm = make_tm(rng, 5, 5, 4)
    out = exact_encode(tm, pe)
    np.testing.assert_array_equal(out.tokens.data, tm.tokens.data + pe.grid.data)


def test_exact_resize_center_is_corner_mean():
    rng = np.random.default_rng(6)
    pe = make_pe(rng, 2, 2, 3)
    tm = TokenMap(Tensor(np.zeros((3, 3, 3))), np.ones((3, 3)))
    out = exact_encode(tm, pe)
    want = pe.grid.data.reshape(4, 3).mean(axis=0)
    np.testing.assert_allclose(out.tokens.data[1, 1], want, atol=1e-15)


def test_exact_resize_roundtrip_recovers_corners():
    rng = np.random.default_rng(7)
    pe = make_pe(rng, 14, 14, 2)
    up = resize_grid(pe, 28, 28)
    pe_up = PosEmbedGrid(up, 28, 28)
    down = resize_grid(pe_up, 14, 14).data
    for i, j in [(0, 0), (0, 13), (13, 0), (13, 13)]:
        np.testing.assert_allclose(down[i, j], pe.grid.data[i, j], atol=1e-12)


# ---------------------------------------------------------------- subsets

def test_subset_totality_matches_exact_encode():
    rng = np.random.default_rng(8)
    pe = make_pe(rng, 4, 6, 3)
    tm = make_tm(rng, 4, 6, 3)
    coords = [(i, j) for i in range(4) for j in range(6)]
    flat = tm.tokens.data.reshape(24, 3)
    got = encode_subset(Tensor(flat), coords, pe, mode="exact").data
    want = exact_encode(tm, pe).tokens.data.reshape(24, 3)
    np.testing.assert_array_equal(got, want)


def test_subset_single_origin_token():
    rng = np.random.default_rng(9)
    pe = make_pe(rng, 3, 3, 2)
    tok = rng.standard_normal((1, 2))
    got = encode_subset(Tensor(tok), [(0, 0)], pe, mode="exact").data
    np.testing.assert_array_equal(got[0], tok[0] + pe.grid.data[0, 0])


def test_subset_random_quarter_matches_restriction():
    rng = np.random.default_rng(10)
    pe = make_pe(rng, 8, 8, 4)
    tm = make_tm(rng, 8, 8, 4)
    full = exact_encode(tm, pe).tokens.data.reshape(64, 4)
    flat = tm.tokens.data.reshape(64, 4)
    for _ in range(10):
        picks = rng.choice(64, size=16, replace=False)
        coords = [(p // 8, p % 8) for p in picks]
        got = encode_subset(Tensor(flat[picks]), coords, pe, mode="exact").data
        assert np.max(np.abs(got - full[picks])) < 1e-15


def test_subset_fuzzy_stays_in_band_and_out_of_band_rejected():
    rng = np.random.default_rng(11)
    pe = make_pe(rng, 4, 4, 2)
    toks = Tensor(rng.standard_normal((2, 2)))
    out = encode_subset(toks, [(0, 0), (3, 3)], pe, mode="fuzzy", rng_seed=3)
    assert out.shape == (2, 2)
    with pytest.raises(DomainError):
        encode_subset(toks, [(0, 0), (4.2, 0)], pe, mode="exact")


# ---------------------------------------------------------------- gradients

def test_fuzzy_gradient_wrt_grid_matches_fd():
    rng = np.random.default_rng(12)
    grid = parameter(rng.standard_normal((3, 3, 2)))
    tm = make_tm(rng, 3, 3, 2)
    frozen = sample_offsets(9, 42)

    def loss_with(g):
        pe = PosEmbedGrid(g, 3, 3)
        out = fuzzy_encode(tm, pe, rng_seed=0, offsets=frozen)
        return (out.tokens * out.tokens).sum()

    loss = loss_with(grid)
    loss.backward()
    fd = finite_diff_grad(lambda t: loss_with(t).item(), grid, h=1e-5)
    denom = max(np.max(np.abs(fd.data)), 1e-3)
    assert np.max(np.abs(grid.grad - fd.data)) / denom < 1e-4
