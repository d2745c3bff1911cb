import numpy as np
import pytest

from factormatch.codec import (
    CodecError,
    QuantizedLoadings,
    blob_header_bytes,
    decode,
    dequantize,
    encode,
    lattice_values,
    quantize,
)
from factormatch.factorization import FactorLoadings

from conftest import random_unit_columns


def pca_loadings_of(columns, image_id="img"):
    return FactorLoadings(image_id=image_id, kind="pca", columns=columns)


def nmf_loadings_of(columns, image_id="img"):
    return FactorLoadings(image_id=image_id, kind="nmf", columns=columns)


def random_pca(rng, T=16, k=4, image_id="img"):
    return pca_loadings_of(random_unit_columns(rng, T, k), image_id)


class TestQuantize:
    def test_endpoints_map_to_extreme_levels(self):
        cols = np.array([[-1.0, 1.0], [0.0, 0.0], [0.0, 0.0]])
        cols /= np.linalg.norm(cols, axis=0)
        q = quantize(pca_loadings_of(cols), 5)
        assert q.levels[0, 0] == 0        # x = lo
        assert q.levels[0, 1] == 31       # x = hi

    def test_zero_entry_at_five_bits(self):
        # x = 0 sits exactly between levels 15 and 16; half-away-from-zero
        # picks 16, which dequantizes to -1 + 16 * (2/31) = 1/31
        cols = np.array([[0.0], [1.0], [0.0]])
        q = quantize(pca_loadings_of(cols), 5)
        assert q.levels[0, 0] == 16
        assert lattice_values(q)[0, 0] == pytest.approx(1 / 31, abs=1e-15)

    def test_round_trip_error_bounded_by_half_step(self):
        rng = np.random.default_rng(12)
        for kind, lo in (("pca", -1.0), ("nmf", 0.0)):
            for bits in (1, 3, 5, 8, 12):
                cols = rng.uniform(lo, 1.0, size=(32, 6))
                cols /= np.maximum(np.linalg.norm(cols, axis=0, ord=np.inf), 1.0)
                cols = np.clip(cols, lo, 1.0)
                f = FactorLoadings(image_id="r", kind=kind, columns=cols)
                q = quantize(f, bits)
                err = np.abs(lattice_values(q) - f.columns)
                assert err.max() <= q.step / 2 + 1e-15

    def test_out_of_range_entry_rejected(self):
        cols = np.array([[1.5], [0.0]])
        with pytest.raises(ValueError, match="outside"):
            quantize(pca_loadings_of(cols), 5)

    def test_nmf_negative_entry_rejected(self):
        cols = np.array([[-0.1], [1.0]])
        with pytest.raises(ValueError, match="outside"):
            quantize(nmf_loadings_of(cols), 5)

    def test_bits_out_of_range(self):
        rng = np.random.default_rng(0)
        with pytest.raises(ValueError, match="bits"):
            quantize(random_pca(rng), 0)
        with pytest.raises(ValueError, match="bits"):
            quantize(random_pca(rng), 17)


class TestDequantize:
    def test_quantize_is_exact_inverse_on_lattice(self):
        rng = np.random.default_rng(13)
        for bits in (1, 2, 5, 8):
            q = quantize(random_pca(rng, 24, 5), bits)
            again = quantize(dequantize(q, renormalize=False), bits)
            assert again == q

    def test_renormalized_columns_are_unit(self):
        rng = np.random.default_rng(14)
        f = dequantize(quantize(random_pca(rng, 32, 6), 5))
        assert np.allclose(np.linalg.norm(f.columns, axis=0), 1.0, atol=1e-12)

    def test_all_zero_nmf_block_stays_zero(self):
        q = QuantizedLoadings(image_id="z", kind="nmf", T=4, k=2, bits=3,
                              lo=0.0, hi=1.0, levels=np.zeros((4, 2), dtype=np.uint32))
        f = dequantize(q)
        assert np.array_equal(f.columns, np.zeros((4, 2)))

    def test_quantization_preserves_subspace_at_8_bits(self):
        from factormatch.matcher import subspace_angle

        rng = np.random.default_rng(15)
        for _ in range(20):
            f = random_pca(rng, 32, 5)
            assert subspace_angle(f, dequantize(quantize(f, 8))) < 0.02


class TestBlobFormat:
    def test_paper_payload_size(self):
        # 128 x 24 at 5 bits: ceil(128*24*5/8) = 1920 bytes per matrix,
        # 3840 for the H/L pair
        rng = np.random.default_rng(16)
        q_pca = quantize(random_pca(rng, 128, 24, image_id="img"), 5)
        cols = np.abs(random_unit_columns(rng, 128, 24))
        cols /= np.linalg.norm(cols, axis=0)
        q_nmf = quantize(nmf_loadings_of(cols, image_id="img"), 5)
        assert q_pca.payload_bytes() == 1920
        body_pair = q_pca.payload_bytes() + q_nmf.payload_bytes()
        assert body_pair == 3840
        blob_pair = len(encode(q_pca)) + len(encode(q_nmf))
        assert blob_pair == 3840 + 2 * blob_header_bytes("img")

    def test_payload_size_formula_and_monotonicity(self):
        rng = np.random.default_rng(17)
        sizes = {}
        for T, k, b in [(8, 2, 3), (16, 2, 3), (8, 4, 3), (8, 2, 7)]:
            q = quantize(random_pca(rng, T, k), b)
            assert q.payload_bytes() == (T * k * b + 7) // 8
            assert len(encode(q)) == blob_header_bytes("img") + q.payload_bytes()
            sizes[(T, k, b)] = q.payload_bytes()
        assert sizes[(16, 2, 3)] > sizes[(8, 2, 3)]
        assert sizes[(8, 4, 3)] > sizes[(8, 2, 3)]
        assert sizes[(8, 2, 7)] > sizes[(8, 2, 3)]

    def test_decode_encode_round_trip(self):
        rng = np.random.default_rng(18)
        for bits in (1, 5, 11, 16):
            q = quantize(random_pca(rng, 20, 3, image_id=f"id-{bits}"), bits)
            assert decode(encode(q)) == q

    def test_encode_decode_bytes_round_trip(self):
        rng = np.random.default_rng(19)
        blob = encode(quantize(random_pca(rng, 9, 2), 5))
        assert encode(decode(blob)) == blob

    def test_bad_magic(self):
        with pytest.raises(CodecError, match="magic"):
            decode(b"NOPE" + bytes(20))

    def test_truncation(self):
        rng = np.random.default_rng(20)
        blob = encode(quantize(random_pca(rng, 12, 3), 5))
        with pytest.raises(CodecError, match="truncated"):
            decode(blob[:-1])

    def test_empty_k_rejected_at_construction(self):
        with pytest.raises(ValueError, match="k >= 1"):
            FactorLoadings(image_id="x", kind="pca", columns=np.zeros((4, 0)))
        with pytest.raises(ValueError, match="empty"):
            QuantizedLoadings(image_id="x", kind="pca", T=4, k=0, bits=5,
                              lo=-1.0, hi=1.0, levels=np.zeros((4, 0), dtype=np.uint32))

    def test_level_overflow_rejected(self):
        with pytest.raises(ValueError, match="fit"):
            QuantizedLoadings(image_id="x", kind="nmf", T=2, k=1, bits=2,
                              lo=0.0, hi=1.0, levels=np.array([[4], [0]], dtype=np.uint32))

    def test_range_must_match_kind(self):
        with pytest.raises(ValueError, match="range"):
            QuantizedLoadings(image_id="x", kind="nmf", T=2, k=1, bits=2,
                              lo=-1.0, hi=1.0, levels=np.zeros((2, 1), dtype=np.uint32))
