import numpy as np
import pytest

from gridloom import vocab
from gridloom.codec import Grid, PaletteCodebook, default_codebook
from gridloom.rng import make_rng


@pytest.fixture(scope="module")
def cb():
    return default_codebook()


def test_codebook_is_orthonormal(cb):
    norms = np.linalg.norm(cb.vectors, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-12)
    assert abs(cb.min_distance - np.sqrt(2.0)) < 1e-9


def test_codebook_deterministic_given_seed():
    a = PaletteCodebook(seed=123)
    b = PaletteCodebook(seed=123)
    assert np.array_equal(a.vectors, b.vectors)
    assert not np.array_equal(a.vectors, PaletteCodebook(seed=124).vectors)


def test_roundtrip_every_color(cb):
    g = Grid.from_array(np.arange(64).reshape(8, 8) % vocab.PALETTE_SIZE)
    assert cb.decode_gen(cb.encode_gen(g)) == g


def test_roundtrip_survives_noise_below_margin(cb):
    rng = make_rng(5)
    g = Grid.from_array(rng.integers(0, 8, size=(8, 8)))
    latents = cb.encode_gen(g)
    noise = rng.standard_normal(latents.shape)
    noise *= (cb.min_distance / 2 * 0.999) / np.linalg.norm(noise, axis=1, keepdims=True)
    assert cb.decode_gen(latents + noise) == g


@pytest.mark.parametrize("seed", range(0, 1000, 37))
def test_roundtrip_random_grids(cb, seed):
    rng = make_rng(seed)
    g = Grid.from_array(rng.integers(0, 8, size=(8, 8)))
    assert cb.decode_gen(cb.encode_gen(g)) == g


def test_roundtrip_sweep_dense(cb):
    # broad sweep in one test body: 1000 seeded grids
    for seed in range(1000):
        rng = make_rng(777, seed)
        g = Grid.from_array(rng.integers(0, 8, size=(8, 8)))
        if cb.decode_gen(cb.encode_gen(g)) != g:
            raise AssertionError(f"roundtrip failed at seed {seed}")


def test_encode_und_row_major(cb):
    g = Grid.blank().with_cell(0, 0, 3).with_cell(0, 1, 5)
    toks = cb.encode_und(g)
    assert len(toks) == 64
    assert toks[0] == vocab.pixel_id(3)
    assert toks[1] == vocab.pixel_id(5)
    assert toks[2] == vocab.pixel_id(0)


def test_encode_und_single_cell():
    small = Grid(((3,),))
    assert default_codebook().encode_und(small) == [vocab.pixel_id(3)]


def test_grid_text_roundtrip():
    rng = make_rng(9)
    g = Grid.from_array(rng.integers(0, 8, size=(8, 8)))
    assert Grid.from_text(g.to_text()) == g


def test_grid_rejects_bad_colors():
    with pytest.raises(ValueError):
        Grid(((9,),))


def test_decode_rejects_bad_shapes(cb):
    with pytest.raises(ValueError):
        cb.decode_gen(np.zeros((64, 5)))
    with pytest.raises(ValueError):
        cb.decode_gen(np.full((64, 8), np.nan))
    with pytest.raises(ValueError):
        cb.decode_gen(np.zeros((63, 8)))
