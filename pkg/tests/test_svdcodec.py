import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from weightpath.svdcodec import (CodecError, decode, encode, energy_profile,
                                 fit_basis, destandardize, standardize)


def _corpus(rows=30, dim=12, seed=0):
    return np.random.default_rng(seed).standard_normal((rows, dim))


class TestFitBasis:
    def test_rank2_corpus_energy_one(self):
        rng = np.random.default_rng(1)
        span = rng.standard_normal((2, 10))
        corpus = rng.standard_normal((40, 2)) @ span
        basis = fit_basis(corpus, 2)
        assert basis.energy[1] == pytest.approx(1.0, abs=1e-12)

    def test_full_rank_roundtrip(self):
        corpus = _corpus(rows=8, dim=12)
        basis = fit_basis(corpus, 8)
        rec = decode(basis, encode(basis, corpus))
        assert np.allclose(rec, corpus, rtol=1e-8, atol=1e-10)

    def test_training_row_encoding_matches_u_row(self):
        corpus = _corpus(rows=20, dim=9, seed=3)
        d = 5
        basis = fit_basis(corpus, d)
        # independent SVD; align per-column sign conventions before comparing
        u_full, _, vt = np.linalg.svd(corpus, full_matrices=False)
        signs = np.sign(np.einsum("ij,ij->j", basis.v_d, vt[:d].T))
        assert np.allclose(encode(basis, corpus), u_full[:, :d] * signs,
                           atol=1e-10)

    def test_orthonormal_columns(self):
        basis = fit_basis(_corpus(), 6)
        gram = basis.v_d.T @ basis.v_d
        assert np.max(np.abs(gram - np.eye(6))) < 1e-10

    def test_sigma_descending_positive(self):
        basis = fit_basis(_corpus(), 6)
        assert np.all(basis.sigma_d > 0)
        assert np.all(np.diff(basis.sigma_d) <= 0)

    def test_d_exceeds_rank_reports_attainable(self):
        rng = np.random.default_rng(2)
        corpus = rng.standard_normal((30, 1)) @ rng.standard_normal((1, 8))
        with pytest.raises(CodecError, match="attainable rank 1"):
            fit_basis(corpus, 3)

    def test_rejects_nonfinite_and_bad_shape(self):
        bad = _corpus()
        bad[3, 4] = np.nan
        with pytest.raises(CodecError, match="non-finite"):
            fit_basis(bad, 2)
        with pytest.raises(CodecError):
            fit_basis(np.zeros(10), 2)
        with pytest.raises(CodecError):
            fit_basis(_corpus(rows=3), 5)

    def test_subsampled_fit_stats_cover_all_rows(self):
        corpus = _corpus(rows=60, dim=6, seed=4)
        basis = fit_basis(corpus, 3, subsample_above=20)
        codes = encode(basis, corpus)
        assert np.allclose(basis.code_mean, codes.mean(axis=0), atol=1e-12)
        assert np.allclose(basis.code_std, codes.std(axis=0), atol=1e-12)


class TestEncodeDecode:
    def test_zero_maps_to_zero(self):
        basis = fit_basis(_corpus(), 4)
        assert np.array_equal(encode(basis, np.zeros(12)), np.zeros(4))
        assert np.array_equal(decode(basis, np.zeros(4)), np.zeros(12))

    def test_decode_unit_code_is_scaled_singular_vector(self):
        basis = fit_basis(_corpus(), 4)
        e1 = np.zeros(4)
        e1[0] = 1.0
        assert np.allclose(decode(basis, e1), basis.sigma_d[0] * basis.v_d[:, 0],
                           atol=1e-12)

    def test_encode_of_decode_is_identity(self):
        basis = fit_basis(_corpus(), 5)
        u = np.random.default_rng(7).standard_normal((10, 5))
        assert np.allclose(encode(basis, decode(basis, u)), u, atol=1e-10)

    def test_roundtrip_is_projection(self):
        basis = fit_basis(_corpus(), 5)
        phi = np.random.default_rng(8).standard_normal(12)
        rec = decode(basis, encode(basis, phi))
        proj = basis.v_d @ (basis.v_d.T @ phi)  # independent projector
        assert np.allclose(rec, proj, atol=1e-10)
        rec2 = decode(basis, encode(basis, rec))
        assert np.allclose(rec2, rec, atol=1e-10)  # idempotent

    def test_reconstruction_error_monotone_in_d(self):
        corpus = _corpus(rows=30, dim=12, seed=9)
        phi = np.random.default_rng(10).standard_normal(12)
        errs = []
        for d in range(1, 11):
            basis = fit_basis(corpus, d)
            errs.append(np.linalg.norm(phi - decode(basis, encode(basis, phi))))
        assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))

    def test_dimension_mismatches(self):
        basis = fit_basis(_corpus(), 4)
        with pytest.raises(CodecError, match="weight dim"):
            encode(basis, np.zeros(5))
        with pytest.raises(CodecError, match="code dim"):
            decode(basis, np.zeros(7))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(1, 8))
    def test_projection_identity_property(self, seed, d):
        corpus = _corpus(rows=25, dim=10, seed=seed % 100)
        basis = fit_basis(corpus, d)
        u = np.random.default_rng(seed).standard_normal(d)
        assert np.allclose(encode(basis, decode(basis, u)), u, atol=1e-10)


class TestStandardize:
    def test_roundtrip(self):
        basis = fit_basis(_corpus(), 4)
        u = np.random.default_rng(0).standard_normal((6, 4))
        assert np.allclose(destandardize(basis, standardize(basis, u)), u,
                           atol=1e-12)

    def test_training_codes_standardized_to_unit_stats(self):
        corpus = _corpus(rows=40, dim=10, seed=5)
        basis = fit_basis(corpus, 4)
        z = standardize(basis, encode(basis, corpus))
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-10)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-10)

    def test_constant_dimension_std_floored(self):
        rng = np.random.default_rng(6)
        base = rng.standard_normal(8)
        corpus = np.outer(np.full(20, 2.0), base)  # all rows identical
        basis = fit_basis(corpus, 1)
        assert basis.code_std[0] == 1.0  # floored, not ~0


class TestEnergyProfile:
    def test_rank1(self):
        rng = np.random.default_rng(11)
        corpus = np.outer(rng.standard_normal(20), rng.standard_normal(6))
        basis = fit_basis(corpus, 1)
        assert energy_profile(basis)[0] == pytest.approx(1.0, abs=1e-12)

    def test_nondecreasing_ends_at_one(self):
        basis = fit_basis(_corpus(), 3)
        prof = energy_profile(basis)
        assert np.all(np.diff(prof) >= -1e-15)
        assert prof[-1] == pytest.approx(1.0, abs=1e-12)
