import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm

from latentvision import entropy as E
from latentvision.errors import BitstreamError, ConfigError, DecodeError, EncodeError


def _sample(pmf: E.PmfTable, n: int, rng) -> np.ndarray:
    p = np.array(pmf.freqs) / E.TOTAL
    return rng.choice(np.arange(pmf.support_min, pmf.support_max + 1), size=n, p=p)


# pmf tables ---------------------------------------------------------------

@pytest.mark.parametrize("scale", [0.11, 0.37, 1.0, 2.5, 17.3, 140.0])
def test_gaussian_pmf_normalized(scale):
    pmf = E.gaussian_pmf(scale)
    assert sum(pmf.freqs) == 65536
    assert min(pmf.freqs) >= 1
    assert pmf.support_max == -pmf.support_min == math.ceil(12 * scale)


def test_gaussian_pmf_zero_mass_at_unit_scale():
    pmf = E.gaussian_pmf(1.0)
    p0 = pmf.probabilities[-pmf.support_min]
    assert p0 == pytest.approx(norm.cdf(0.5) - norm.cdf(-0.5), abs=1e-12)
    assert p0 == pytest.approx(0.3829, abs=1e-4)


@pytest.mark.parametrize("scale", [0.11, 0.8, 3.3, 25.0])
def test_gaussian_pmf_symmetric_before_quantization(scale):
    probs = np.array(E.gaussian_pmf(scale).probabilities)
    np.testing.assert_allclose(probs, probs[::-1], rtol=0, atol=1e-12)


@pytest.mark.parametrize("scale", [0.11, 0.5, 1.0, 4.0])
def test_gaussian_pmf_matches_normal_cdf(scale):
    pmf = E.gaussian_pmf(scale)
    k = np.arange(pmf.support_min, pmf.support_max + 1)
    oracle = norm.cdf((k + 0.5) / scale) - norm.cdf((k - 0.5) / scale)
    np.testing.assert_allclose(pmf.probabilities, oracle, rtol=1e-9, atol=1e-15)


def test_gaussian_pmf_rejects_small_scale():
    with pytest.raises(ConfigError):
        E.gaussian_pmf(0.1)


def test_float32_floor_scale_accepted():
    floor = float(np.float32(0.11))
    assert floor < 0.11
    assert E.gaussian_pmf(floor).support_max == 2
    data = E.encode_gaussian(np.array([1, 0, -2]), np.full(3, floor))
    np.testing.assert_array_equal(E.decode_gaussian(data, np.full(3, floor)), [1, 0, -2])


def test_batched_tables_match_single_tables():
    scales = np.random.default_rng(3).uniform(0.11, 9.0, 200)
    tables = E.GaussianTables(scales)
    for i, s in enumerate(scales):
        single = E.gaussian_pmf(float(s))
        row = np.diff(tables.cdf[i])[: len(single)]
        assert row.tolist() == list(single.freqs)


def test_quantize_probabilities_keeps_tiny_entries():
    probs = np.array([[1e-30, 1.0 - 2e-30, 1e-30]])
    freqs = E.quantize_probabilities(probs, np.array([3]))[0]
    assert freqs.tolist() == [1, 65534, 1]


# range coder ----------------------------------------------------------------

def test_empty_sequence():
    data = E.range_encode([], [])
    assert len(data) <= 8
    assert E.range_decode(data, [], 0) == []


def test_shannon_bound_known_pmf():
    rng = np.random.default_rng(0)
    pmf = E.gaussian_pmf(2.3)
    syms = _sample(pmf, 100_000, rng)
    data = E.range_encode(syms.tolist(), [pmf] * len(syms))
    cross_entropy_bytes = sum(pmf.bits(int(s)) for s in syms) / 8
    assert len(data) <= cross_entropy_bytes * 1.01 + 8
    assert E.range_decode(data, [pmf] * len(syms), len(syms)) == syms.tolist()


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 300))
def test_roundtrip_and_length_bounds(seed, n):
    rng = np.random.default_rng(seed)
    scales = np.exp(rng.uniform(np.log(0.11), np.log(30.0), n))
    pmfs = [E.gaussian_pmf(float(s)) for s in scales]
    syms = [int(_sample(p, 1, rng)[0]) for p in pmfs]
    data = E.range_encode(syms, pmfs)
    assert E.range_decode(data, pmfs, n) == syms
    info = sum(p.bits(s) for p, s in zip(pmfs, syms))
    assert len(data) <= math.ceil(info / 8) + 8
    assert 8 * len(data) >= info


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
def test_gaussian_fast_path_roundtrip(seed, c, h, w):
    rng = np.random.default_rng(seed)
    scales = np.exp(rng.uniform(np.log(0.11), np.log(20.0), (c, h, w)))
    half = np.ceil(12 * scales)
    syms = np.clip(np.round(rng.normal(0, scales)), -half, half).astype(np.int64)
    data = E.encode_gaussian(syms, scales)
    np.testing.assert_array_equal(E.decode_gaussian(data, scales), syms)
    # the generic table path produces the identical stream
    pmfs = [E.gaussian_pmf(float(s)) for s in scales.ravel()]
    assert E.range_encode(syms.ravel().tolist(), pmfs) == data


def test_symbol_outside_support_is_an_error():
    pmf = E.gaussian_pmf(0.11)
    with pytest.raises(EncodeError):
        E.range_encode([3], [pmf])
    with pytest.raises(EncodeError):
        E.encode_gaussian(np.array([3]), np.array([0.11]))


def test_truncated_stream_detected():
    rng = np.random.default_rng(5)
    pmf = E.gaussian_pmf(4.0)
    syms = _sample(pmf, 2000, rng).tolist()
    data = E.range_encode(syms, [pmf] * 2000)
    for cut in (1, 2, 5, len(data) // 2):
        with pytest.raises(DecodeError):
            E.range_decode(data[:-cut], [pmf] * 2000, 2000)


def test_trailing_garbage_detected():
    pmf = E.gaussian_pmf(1.0)
    data = E.range_encode([0, 1, -1] * 50, [pmf] * 150)
    with pytest.raises(DecodeError):
        E.range_decode(data + b"\x00" * 6, [pmf] * 150, 150)


# factorized tables ------------------------------------------------------------

def _channel_tables(rng, channels=3):
    tables = []
    for _ in range(channels):
        lo = int(rng.integers(-20, -3))
        hi = int(rng.integers(3, 20))
        k = np.arange(lo, hi + 1)
        probs = np.exp(-np.abs(k) / rng.uniform(0.5, 3.0))
        tables.append(E.PmfTable.from_probabilities(lo, probs / probs.sum()))
    return tables


def test_factorized_roundtrip():
    rng = np.random.default_rng(1)
    tables = _channel_tables(rng)
    z = np.stack([
        rng.integers(t.support_min, t.support_max + 1, size=(4, 5)) for t in tables
    ])
    data = E.encode_factorized(z, tables)
    np.testing.assert_array_equal(E.decode_factorized(data, tables, z.shape), z)


def test_factorized_rejects_out_of_support():
    rng = np.random.default_rng(2)
    tables = _channel_tables(rng, 1)
    z = np.full((1, 1, 1), tables[0].support_max + 1)
    with pytest.raises(EncodeError):
        E.encode_factorized(z, tables)


# container ----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.sampled_from([1, 4, 8]), st.integers(1, 65535), st.integers(1, 65535),
       st.binary(max_size=200), st.binary(max_size=200))
def test_serialize_parse_identity(q, h, w, zb, yb):
    data = E.serialize(q, h, w, zb, yb)
    assert data[:4] == b"LVC1"
    s = E.parse(data)
    assert (s.quality_index, s.image_h, s.image_w, s.z_bytes, s.y_bytes) == (q, h, w, zb, yb)
    assert s.z_len == len(zb) and s.y_len == len(yb)
    assert s.to_bytes() == data


def test_header_layout_little_endian():
    data = E.serialize(8, 256, 320, b"ab", b"xyz")
    assert data == b"LVC1" + bytes([1, 8]) + struct.pack("<HHI", 256, 320, 2) + b"ab" + struct.pack("<I", 3) + b"xyz"


def test_parse_errors():
    good = E.serialize(4, 64, 64, b"abc", b"defg")
    with pytest.raises(BitstreamError, match="not a latentvision stream"):
        E.parse(b"XXXX" + good[4:])
    with pytest.raises(BitstreamError, match="unsupported version"):
        E.parse(good[:4] + b"\x02" + good[5:])
    with pytest.raises(BitstreamError, match="truncated stream"):
        E.parse(good[:-1])
    with pytest.raises(BitstreamError, match="truncated stream"):
        E.parse(good + b"\x00")


def test_single_byte_corruption_detected():
    rng = np.random.default_rng(11)
    scales = np.exp(rng.uniform(np.log(0.2), np.log(8.0), (16, 8, 8)))
    syms = np.clip(np.round(rng.normal(0, scales)), -np.ceil(12 * scales), np.ceil(12 * scales)).astype(np.int64)
    data = E.encode_gaussian(syms, scales)
    raised = 0
    for trial in range(100):
        buf = bytearray(data)
        pos = int(rng.integers(0, len(buf)))
        buf[pos] ^= int(rng.integers(1, 256))
        try:
            out = E.decode_gaussian(bytes(buf), scales)
        except DecodeError:
            raised += 1
        else:
            assert not np.array_equal(out, syms)
    assert raised >= 95
