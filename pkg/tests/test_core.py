import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vpg.core import (
    BinaryEmbedding,
    BoundingBox,
    DetectedObject,
    ImageSignature,
    as_embedding,
    binarize,
    category,
    decode_b64,
    decode_half,
    encode_b64,
    encode_half,
    euclidean_distance,
    hamming_distance,
    near_dup_signature,
)
from vpg.errors import DimensionError, UnknownEntityError

floats = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)
vec8 = st.lists(floats, min_size=8, max_size=8)
code = st.integers(0, (1 << 1024) - 1)


def scalar_distance(a, b):
    return math.sqrt(sum((float(x) - float(y)) ** 2 for x, y in zip(a, b)))


# -- signatures -----------------------------------------------------------


def test_signature_hex_round_trip_and_order():
    a = ImageSignature(bytes(16))
    b = ImageSignature(bytes(15) + b"\x01")
    assert ImageSignature.from_hex(a.hex()) == a
    assert a < b
    with pytest.raises(ValueError):
        ImageSignature(b"short")
    with pytest.raises(ValueError):
        ImageSignature.from_hex("zz" * 16)


def test_box_and_category_invariants():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 5)
    assert BoundingBox(0, 0, 10, 10).iou(BoundingBox(20, 20, 5, 5)) == 0.0
    assert BoundingBox(0, 0, 10, 10).iou(BoundingBox(0, 0, 10, 10)) == 1.0
    assert BoundingBox(5, 5, 10, 10).within(20, 20)
    assert not BoundingBox(15, 5, 10, 10).within(20, 20)
    with pytest.raises(UnknownEntityError):
        category("spaceship")
    with pytest.raises(ValueError):
        DetectedObject(BoundingBox(0, 0, 1, 1), category("top"), 1.5, as_embedding([0.0]))


def test_embedding_rejects_non_finite():
    with pytest.raises(ValueError):
        as_embedding([1.0, float("nan")])
    with pytest.raises(DimensionError):
        as_embedding([1.0, 2.0], dim=3)


# -- euclidean ------------------------------------------------------------


def test_euclidean_examples():
    a = np.full(256, 0.5)
    assert euclidean_distance(a, a) == 0.0
    e0, e1 = np.zeros(256), np.zeros(256)
    e0[0], e1[1] = 1, 1
    assert euclidean_distance(e0, e1) == pytest.approx(math.sqrt(2), abs=1e-12)
    with pytest.raises(DimensionError):
        euclidean_distance(np.zeros(3), np.zeros(4))


def test_euclidean_matches_scalar_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a, b = rng.standard_normal(256).astype(np.float32), rng.standard_normal(256).astype(np.float32)
        assert euclidean_distance(a, b) == pytest.approx(scalar_distance(a, b), rel=1e-6)


@given(vec8, vec8, vec8)
def test_euclidean_metric_properties(a, b, c):
    dab, dbc, dac = euclidean_distance(a, b), euclidean_distance(b, c), euclidean_distance(a, c)
    assert dab >= 0
    assert dab == euclidean_distance(b, a)
    assert dac <= dab + dbc + 1e-6
    assert (dab == 0) == (np.asarray(a, np.float64) == np.asarray(b, np.float64)).all()


# -- hamming --------------------------------------------------------------


def test_hamming_examples():
    a = BinaryEmbedding(0x5A5A)
    assert hamming_distance(a, a) == 0
    assert hamming_distance(a, a.invert()) == 1024
    b = BinaryEmbedding(0)
    c = BinaryEmbedding((1 << 3) | (1 << 700))
    oracle = sum(((b.bits >> i) & 1) != ((c.bits >> i) & 1) for i in range(1024))
    assert hamming_distance(b, c) == oracle == 2
    with pytest.raises(ValueError):
        BinaryEmbedding(1 << 1024)


@given(code, code, code)
def test_hamming_triangle(a, b, c):
    a, b, c = BinaryEmbedding(a), BinaryEmbedding(b), BinaryEmbedding(c)
    assert 0 <= hamming_distance(a, c) <= 1024
    assert hamming_distance(a, b) + hamming_distance(b, c) >= hamming_distance(a, c)


# -- near-dup -------------------------------------------------------------


def test_near_dup_deterministic():
    e = np.random.default_rng(1).standard_normal(256)
    first = near_dup_signature(e)
    assert all(near_dup_signature(e) == first for _ in range(1000))


def test_near_dup_small_perturbation():
    rng = np.random.default_rng(2)
    worst = 0
    for _ in range(1000):
        e = rng.standard_normal(256)
        eps = rng.standard_normal(256)
        eps *= 1e-6 * np.linalg.norm(e) / np.linalg.norm(eps)
        worst = max(worst, near_dup_signature(e).distance(near_dup_signature(e + eps)))
    assert worst <= 4


def test_near_dup_orthogonal_pairs_near_half():
    rng = np.random.default_rng(3)
    dists = []
    for _ in range(1000):
        a = rng.standard_normal(256)
        b = rng.standard_normal(256)
        b -= (a @ b) / (a @ a) * a
        dists.append(near_dup_signature(a).distance(near_dup_signature(b)))
    dists = np.asarray(dists)
    # Binomial(64, 1/2): P(outside [20, 44]) = 0.00156 per trial
    assert 31.0 <= dists.mean() <= 33.0
    assert np.mean((dists >= 20) & (dists <= 44)) >= 0.99


# -- binarize -------------------------------------------------------------


def test_binarize_examples():
    t = np.zeros(1024, dtype=np.float32)
    assert binarize(np.ones(1024), t).bits == (1 << 1024) - 1
    assert binarize(t, t).bits == 0
    rng = np.random.default_rng(4)
    v, th = rng.standard_normal(1024).astype(np.float32), rng.standard_normal(1024).astype(np.float32)
    expected = sum(1 << i for i in range(1024) if v[i] > th[i])
    assert binarize(v, th).bits == expected
    with pytest.raises(DimensionError):
        binarize(np.ones(4), np.zeros(5))


# -- half precision -------------------------------------------------------


@settings(max_examples=200)
@given(st.lists(st.floats(-1000, 1000, allow_nan=False, width=32).filter(lambda x: x == 0 or abs(x) > 1e-4), min_size=1, max_size=64))
def test_half_round_trip_relative_error(values):
    e = np.asarray(values, dtype=np.float32)
    back = decode_half(encode_half(e))
    assert np.all(np.abs(back - e) <= 2.0**-10 * np.abs(e) + 1e-30)
    assert np.array_equal(decode_b64(encode_b64(e)), back)
