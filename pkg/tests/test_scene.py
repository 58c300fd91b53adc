import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nicelab.scene import (MAGIC, ConfigError, DatasetFormatError, DatasetVersionError, GenerationConfig,
                           dumps_dataset, generate_dataset, generate_scene, load_dataset, loads_dataset,
                           rle_decode, rle_encode, save_dataset, tight_box)

SINGLE_BOX = GenerationConfig(thing_categories=(0,), min_stuff=1, max_stuff=1, noise=0)


def test_single_rectangle_scene():
    s = generate_scene(0, SINGLE_BOX)
    assert len(s.phrases) == 2
    thing, stuff = s.phrases
    assert thing.is_thing and not stuff.is_thing
    ys, xs = np.nonzero(thing.mask)
    # a box shape fills its extents, so pixel count equals box area
    x1, y1, x2, y2 = thing.box
    assert (x1, y1, x2, y2) == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)
    assert thing.mask.sum() == (x2 - x1) * (y2 - y1)
    assert thing.text == "a red box" and stuff.tokens[0] == 2


def test_same_seed_identical():
    a, b = generate_scene(11), generate_scene(11)
    assert a == b
    assert dumps_dataset([a]) == dumps_dataset([b])


def test_different_seeds_differ():
    assert generate_scene(1) != generate_scene(2)


def test_plural_fraction_in_range():
    scenes = generate_dataset(0, 1000)
    flags = [p.is_plural for s in scenes for p in s.phrases]
    frac = np.mean(flags)
    assert 0.05 <= frac <= 0.5
    assert max(len(s.phrases) for s in scenes) <= GenerationConfig().max_phrases


@pytest.mark.parametrize("seed", range(25))
def test_scene_invariants(seed):
    s = generate_scene(seed)
    H, W = s.height, s.width
    assert s.image.shape == (H, W, 3)
    assert np.all((s.image >= 0) & (s.image <= 1))
    coverage = np.zeros((H, W), dtype=int)
    for p in s.phrases:
        assert p.mask.shape == (H, W) and p.mask.dtype == np.uint8
        assert p.mask.any()
        assert tuple(p.box) == tight_box(p.mask)
        if not p.is_thing:
            coverage += p.mask
        assert not (p.is_plural and not p.is_thing)
    things = [p for p in s.phrases if p.is_thing]
    for p in things:
        coverage += p.mask
    # every pixel belongs to exactly one phrase
    assert np.all(coverage == 1)
    # things precede stuff
    kinds = [p.is_thing for p in s.phrases]
    assert kinds == sorted(kinds, reverse=True)


def test_rle_forced():
    assert rle_encode(np.array([0, 0, 1, 1, 1, 0])) == [(2, 3)]
    assert rle_encode(np.zeros(4)) == []
    assert np.array_equal(rle_decode([(2, 3)], (6,)), [0, 0, 1, 1, 1, 0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 1), min_size=1, max_size=60))
def test_rle_round_trip(bits):
    m = np.array(bits, dtype=np.uint8)
    assert np.array_equal(rle_decode(rle_encode(m), m.shape), m)


def test_rle_decode_rejects_overflow():
    with pytest.raises(ValueError):
        rle_decode([(4, 5)], (6,))


def test_empty_dataset_round_trip(tmp_path):
    save_dataset([], tmp_path / "e.nicelab")
    assert load_dataset(tmp_path / "e.nicelab") == []


def test_single_scene_round_trip(tmp_path):
    s = generate_scene(5)
    save_dataset([s], tmp_path / "one.nicelab")
    (back,) = load_dataset(tmp_path / "one.nicelab")
    assert back == s
    assert back.seed == s.seed and np.array_equal(back.image, s.image)
    for p, q in zip(s.phrases, back.phrases):
        assert p.tokens == q.tokens and p.box == q.box and p.is_plural == q.is_plural


def test_bad_magic():
    with pytest.raises(DatasetFormatError):
        loads_dataset(b"NOTNICE!" + b"\0" * 8)


def test_version_mismatch():
    data = MAGIC + struct.pack("<II", 99, 0)
    with pytest.raises(DatasetVersionError):
        loads_dataset(data)


def test_truncated_record_names_index():
    data = dumps_dataset(generate_dataset(0, 3))
    with pytest.raises(DatasetFormatError) as info:
        loads_dataset(data[:-10])
    assert info.value.record == 2


def test_trailing_bytes_rejected():
    with pytest.raises(DatasetFormatError):
        loads_dataset(dumps_dataset([generate_scene(0)]) + b"x")


@pytest.mark.parametrize("kwargs", [
    {"height": 0}, {"min_size": 30, "max_size": 20}, {"max_phrases": 1}, {"vocab_size": 4},
    {"thing_categories": (17,)}, {"min_instances": 3, "max_instances": 2},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        GenerationConfig(**kwargs).validate()
