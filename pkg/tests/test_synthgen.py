import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from karma.synthgen import (ABUNDANCE_MAGIC, CUBE_MAGIC, DataConfig, FormatError, GenerationError, GroundTruth,
                            HyperCube, derive_labels, generate_tiles, load_dataset, mix, read_container, read_cube,
                            sample_abundance_field, sample_endmembers, spectral_angle, write_cube, write_dataset)


# -- endmembers ------------------------------------------------------------------

@pytest.mark.parametrize("seed", range(5))
def test_two_endmembers_are_separated(seed):
    A = sample_endmembers(16, 2, seed)
    assert spectral_angle(A[:, 0], A[:, 1]) >= 0.15


def test_full_size_endmembers_in_range():
    A = sample_endmembers(218, 8, 3)
    assert A.shape == (218, 8)
    assert A.min() >= 0.05 - 1e-12 and A.max() <= 0.95 + 1e-12


def test_endmembers_deterministic():
    np.testing.assert_array_equal(sample_endmembers(16, 4, 11), sample_endmembers(16, 4, 11))


def test_endmembers_separation_failure():
    with pytest.raises(GenerationError):
        sample_endmembers(16, 6, 0, min_separation=3.0)


def test_endmembers_bad_arguments():
    with pytest.raises(ValueError):
        sample_endmembers(3, 1, 0)
    with pytest.raises(ValueError):
        sample_endmembers(2, 3, 0)


# -- abundances ---------------------------------------------------------------------

def test_high_concentration_is_near_uniform():
    x = sample_abundance_field(8, 8, 4, 1e6, seed=0)
    assert np.max(np.abs(x - 0.25)) < 0.01


@settings(max_examples=25, deadline=None)
@given(M=st.integers(1, 6), conc=st.floats(0.05, 20.0), seed=st.integers(0, 2**32 - 1))
def test_abundance_field_on_simplex(M, conc, seed):
    x = sample_abundance_field(6, 5, M, conc, seed)
    assert x.shape == (6, 5, M)
    assert x.min() >= 0
    np.testing.assert_allclose(x.sum(axis=-1), 1.0, atol=1e-9)


def test_single_endmember_field():
    x = sample_abundance_field(4, 4, 1, 0.5, 0)
    np.testing.assert_array_equal(x, np.ones((4, 4, 1)))


def test_concentration_must_be_positive():
    with pytest.raises(ValueError):
        sample_abundance_field(4, 4, 3, 0.0, 0)


# -- mixing ------------------------------------------------------------------------

def test_mix_identity_endmembers():
    gt = GroundTruth(np.eye(2), np.array([[[0.3, 0.7]]]), 0.0)
    np.testing.assert_array_equal(mix(gt).values, [[[0.3, 0.7]]])


def test_mix_noiseless_is_exact():
    A = sample_endmembers(12, 3, 1)
    x = sample_abundance_field(10, 10, 3, 0.5, 1)
    cube = mix(GroundTruth(A, x, 0.0))
    assert np.max(np.abs(cube.values - x @ A.T)) == 0.0


def test_mix_noise_statistics():
    A = sample_endmembers(16, 4, 2)
    x = sample_abundance_field(100, 100, 4, 0.5, 2)
    cube = mix(GroundTruth(A, x, 0.01), seed=2)
    resid = cube.values - x @ A.T
    assert abs(resid.std() - 0.01) <= 0.2 * 0.01


def test_mix_is_affine_in_abundances():
    A = sample_endmembers(10, 3, 4)
    x1 = sample_abundance_field(5, 5, 3, 0.5, 5)
    x2 = sample_abundance_field(5, 5, 3, 0.5, 6)
    alpha = 0.3
    lhs = mix(GroundTruth(A, alpha * x1 + (1 - alpha) * x2)).values
    rhs = alpha * mix(GroundTruth(A, x1)).values + (1 - alpha) * mix(GroundTruth(A, x2)).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12, rtol=0)


def test_generation_is_pure_function_of_seed():
    cfg = DataConfig(n_tiles=3, height=8, width=8, bands=6, endmembers=3, noise_sigma=0.01, seed=9)
    A1, t1 = generate_tiles(cfg)
    A2, t2 = generate_tiles(cfg)
    np.testing.assert_array_equal(A1, A2)
    for a, b in zip(t1, t2):
        np.testing.assert_array_equal(a.cube.values, b.cube.values)


# -- labels ------------------------------------------------------------------------

def test_labels_argmax_and_ties():
    gt = GroundTruth(np.eye(2), np.array([[[0.7, 0.3], [0.5, 0.5]]]))
    np.testing.assert_array_equal(derive_labels(gt), [[0, 0]])


def test_labels_symmetric_frequencies():
    M = 4
    x = sample_abundance_field(128, 128, M, 1.0, seed=3)
    labels = derive_labels(GroundTruth(np.eye(M), x))
    freq = np.bincount(labels.ravel(), minlength=M) / labels.size
    assert np.all(np.abs(freq - 1 / M) <= 0.05)


# -- file format -------------------------------------------------------------------

def _cube(rng, shape=(3, 4, 5)):
    return HyperCube(rng.uniform(0, 1, size=shape).astype(np.float32).astype(np.float64))


def test_cube_round_trip(tmp_path):
    cube = _cube(np.random.default_rng(0))
    write_cube(cube, tmp_path / "c.hsc")
    back = read_cube(tmp_path / "c.hsc")
    assert back.values.shape == cube.values.shape
    np.testing.assert_array_equal(back.values, cube.values)
    write_cube(back, tmp_path / "d.hsc")
    assert (tmp_path / "c.hsc").read_bytes() == (tmp_path / "d.hsc").read_bytes()


def test_cube_layout_is_bip_little_endian(tmp_path):
    vals = np.arange(12, dtype=np.float64).reshape(1, 2, 6) / 20
    write_cube(HyperCube(vals), tmp_path / "c.hsc")
    raw = (tmp_path / "c.hsc").read_bytes()
    assert raw[:4] == CUBE_MAGIC
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 2, 6]
    np.testing.assert_array_equal(np.frombuffer(raw[16:], "<f4"), vals.ravel().astype(np.float32))


def test_bad_magic(tmp_path):
    write_cube(_cube(np.random.default_rng(1)), tmp_path / "c.hsc")
    raw = bytearray((tmp_path / "c.hsc").read_bytes())
    raw[:4] = b"NOPE"
    (tmp_path / "c.hsc").write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="byte offset 0"):
        read_cube(tmp_path / "c.hsc")


def test_truncated_payload(tmp_path):
    header = CUBE_MAGIC + np.array([2, 2, 3], "<u4").tobytes()
    (tmp_path / "c.hsc").write_bytes(header + np.zeros(10, "<f4").tobytes())
    with pytest.raises(FormatError, match="truncated"):
        read_cube(tmp_path / "c.hsc")


def test_trailing_payload(tmp_path):
    header = CUBE_MAGIC + np.array([1, 1, 2], "<u4").tobytes()
    (tmp_path / "c.hsc").write_bytes(header + np.zeros(3, "<f4").tobytes())
    with pytest.raises(FormatError, match="byte offset 24"):
        read_cube(tmp_path / "c.hsc")


def test_extent_overflow(tmp_path):
    header = CUBE_MAGIC + np.array([70000, 70000, 70000], "<u4").tobytes()
    (tmp_path / "c.hsc").write_bytes(header)
    with pytest.raises(FormatError, match="overflow"):
        read_cube(tmp_path / "c.hsc")


def test_cube_validation():
    with pytest.raises(ValueError):
        HyperCube(np.full((2, 2, 2), 1.5))
    with pytest.raises(ValueError):
        HyperCube(np.full((2, 2, 2), np.nan))


def test_dataset_round_trip(tmp_path):
    cfg = DataConfig(n_tiles=2, height=8, width=8, bands=6, endmembers=3, noise_sigma=0.0, seed=4)
    write_dataset(cfg, tmp_path)
    A, tiles = load_dataset(tmp_path)
    A0, tiles0 = generate_tiles(cfg)
    np.testing.assert_allclose(A, A0, atol=1e-7)
    for t, t0 in zip(tiles, tiles0):
        np.testing.assert_array_equal(t.cube.values, t0.cube.values)
        np.testing.assert_array_equal(t.labels, t0.labels)
    side = json.loads((tmp_path / "tile_0000.json").read_text())
    assert {"data_range", "noise_sigma", "M", "seed", "endmembers", "abundances"} <= set(side)
    abf = read_container(tmp_path / side["abundances"], ABUNDANCE_MAGIC)
    assert abf.shape == (8, 8, 3)
