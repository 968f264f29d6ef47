import struct

import numpy as np
import pytest

from vlae_lab.domain.data import (
    Binarization,
    Split,
    SynthKind,
    SynthSpec,
    binarize,
    conditional_given_window,
    parse_amat,
    parse_idx,
    parse_raw_grid,
    patch_codes,
    plugin_mutual_information,
    split,
    synth,
)
from vlae_lab.domain.errors import DataFormatError, DomainValueError


def _idx_images() -> bytes:
    return struct.pack(">IIII", 0x00000803, 2, 2, 2) + bytes([0, 255, 51, 102, 1, 2, 3, 4])


def _idx_labels() -> bytes:
    return struct.pack(">II", 0x00000801, 3) + bytes([7, 0, 9])


#################################
# Parsers
#################################

def test_parse_idx_images():
    images = parse_idx(_idx_images())
    assert images.shape == (2, 2, 2)
    assert images[0, 0, 1] == 1.0
    assert images[0, 1, 0] == pytest.approx(0.2)


def test_parse_idx_labels():
    labels = parse_idx(_idx_labels(), expect="labels")
    assert labels.tolist() == [7, 0, 9]
    assert labels.dtype == np.int64


@pytest.mark.parametrize(
    "blob,expect,message",
    [
        (b"\x00\x00", "images", "truncated header"),
        (_idx_labels(), "images", "magic mismatch"),
        (_idx_images()[:-1], "images", "truncated payload"),
        (struct.pack(">II", 0x00000803, 2), "images", "truncated header"),
    ],
)
def test_parse_idx_errors(blob, expect, message):
    with pytest.raises(DataFormatError, match=message):
        parse_idx(blob, expect)


def test_parse_amat():
    images = parse_amat("0 1 1 0\n\n1 1 0 0\n", 2, 2)
    assert images.shape == (2, 2, 2)
    assert images[1].tolist() == [[1.0, 1.0], [0.0, 0.0]]
    with pytest.raises(DataFormatError):
        parse_amat("0 1 1\n", 2, 2)
    with pytest.raises(DataFormatError):
        parse_amat("0 x 1 0\n", 2, 2)


def test_parse_raw_grid():
    images = parse_raw_grid(bytes([0, 1, 1, 0]), 1, 1, 2, 2)
    assert images.tolist() == [[[[0.0, 1.0], [1.0, 0.0]]]]
    with pytest.raises(DataFormatError):
        parse_raw_grid(bytes([0, 1, 1]), 1, 1, 2, 2)
    with pytest.raises(DataFormatError):
        parse_raw_grid(bytes([0, 2, 1, 0]), 1, 1, 2, 2)


#################################
# Binarization
#################################

def test_dynamic_binarization_is_fair():
    dataset = binarize(np.full((10_000, 2, 2), 0.5), Binarization.DYNAMIC, rng=np.random.default_rng(0))
    assert np.allclose(dataset.images.mean(axis=0), 0.5, atol=0.02)
    assert dataset.intensities is not None


def test_dynamic_binarization_redraws_per_epoch():
    dataset = binarize(np.full((50, 3, 3), 0.5), Binarization.DYNAMIC, rng=np.random.default_rng(0))
    first = dataset.epoch(1, seed=4)
    assert np.array_equal(first, dataset.epoch(1, seed=4))
    assert not np.array_equal(first, dataset.epoch(2, seed=4))


def test_static_binarization_thresholds_once():
    dataset = binarize(np.array([[[0.2, 0.5], [0.7, 0.49]]]), Binarization.STATIC)
    assert dataset.images[0, 0].tolist() == [[0.0, 1.0], [1.0, 0.0]]
    assert dataset.epoch(3, seed=0) is dataset.images
    assert dataset.provenance.endswith("threshold-0.5")


def test_prebinarized_file_wins():
    fixed = np.array([[[1.0, 1.0], [0.0, 0.0]]])
    dataset = binarize(np.full((1, 2, 2), 0.9), Binarization.STATIC, prebinarized=fixed)
    assert np.array_equal(dataset.images[:, 0], fixed)


def test_binarize_rejects_bad_input():
    with pytest.raises(DomainValueError):
        binarize(np.full((1, 2, 2), 1.5), Binarization.STATIC)
    with pytest.raises(DomainValueError):
        binarize(np.full((1, 2, 2), 0.5), Binarization.DYNAMIC)


#################################
# Synthetic data
#################################

def test_left_copying_texture_is_constant_along_rows():
    dataset = synth(SynthSpec(p_left=1.0, p_up=0.0, seed=1), 20)
    images = dataset.images
    assert np.array_equal(images[..., 1:], images[..., :-1])
    window = conditional_given_window(images, 3, 3, [(0, -1)])
    assert all(value == float(code) for code, value in window.items())


def test_texture_is_deterministic():
    spec = SynthSpec(seed=9)
    assert np.array_equal(synth(spec, 10).images, synth(spec, 10).images)


def test_shapes_cover_every_template():
    dataset = synth(SynthSpec(kind=SynthKind.LONG_RANGE_SHAPES, noise=0.0, seed=2), 400)
    distinct = np.unique(dataset.images.reshape(400, -1), axis=0)
    assert len(distinct) == 8
    assert dataset.labels is not None
    assert set(dataset.labels.tolist()) == set(range(8))


def test_synth_spec_validation():
    with pytest.raises(ValueError):
        SynthSpec(p_left=0.7, p_up=0.7)
    with pytest.raises(ValueError):
        SynthSpec(n_shapes=64)


#################################
# Split
#################################

def test_split_sizes_and_determinism():
    dataset = synth(SynthSpec(height=4, width=4), 100)
    train, valid, test = split(dataset, (0.8, 0.1, 0.1), seed=5)
    assert (len(train), len(valid), len(test)) == (80, 10, 10)
    assert (train.split, valid.split, test.split) == (Split.TRAIN, Split.VALID, Split.TEST)
    again, _, _ = split(dataset, (0.8, 0.1, 0.1), seed=5)
    assert np.array_equal(train.images, again.images)


def test_split_everything_into_train():
    dataset = synth(SynthSpec(height=4, width=4), 30)
    train, valid, test = split(dataset, (1.0, 0.0, 0.0), seed=0)
    assert (len(train), len(valid), len(test)) == (30, 0, 0)


def test_split_rejects_bad_fractions():
    dataset = synth(SynthSpec(height=4, width=4), 10)
    with pytest.raises(DomainValueError):
        split(dataset, (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(DomainValueError):
        split(dataset, (1.2, -0.1, -0.1), seed=0)


#################################
# Dependence diagnostics
#################################

def test_mutual_information():
    a = np.array([0, 1] * 50)
    assert plugin_mutual_information(a, a) == pytest.approx(1.0)
    b = np.array([0, 0, 1, 1] * 25)
    assert plugin_mutual_information(a, b) == pytest.approx(0.0, abs=1e-12)


def test_patch_codes():
    images = np.zeros((1, 1, 3, 3))
    images[0, 0, 0, 1] = 1.0
    assert patch_codes(images, slice(0, 2), slice(0, 2)).tolist() == [4]
