import numpy as np
import pytest

from slamfrontkit.errors import (
    BadMagicError,
    DimensionMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from slamfrontkit.matcher import (
    AttentionUnitWeights,
    MatcherWeights,
    apply_attention_unit,
    assignment_matrix,
    extract_matches,
    load_matcher_weights,
    match_descriptors,
    match_feature_sets,
    matchability,
    save_matcher_weights,
    similarity_matrix,
)


def unit_rows(n, dim, seed):
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def random_unit(dim, kind, seed):
    rng = np.random.default_rng(seed)
    return AttentionUnitWeights(
        kind=kind,
        query=rng.normal(size=(dim, dim)),
        key=rng.normal(size=(dim, dim)),
        value=rng.normal(size=(dim, dim)),
        mlp_weight=rng.normal(size=(dim, 2 * dim)) * 0.1,
        mlp_bias=rng.normal(size=dim) * 0.1,
    )


def random_weights(dim, n_units=2, seed=0):
    rng = np.random.default_rng(seed)
    kinds = ["self", "cross"]
    return MatcherWeights(
        sim_a_weight=rng.normal(size=(dim, dim)),
        sim_a_bias=rng.normal(size=dim),
        sim_b_weight=rng.normal(size=(dim, dim)),
        sim_b_bias=rng.normal(size=dim),
        match_weight=rng.normal(size=dim),
        match_bias=float(rng.normal()),
        units=tuple(random_unit(dim, kinds[i % 2], seed + i + 1)
                    for i in range(n_units)),
    )


class TestWeightTypes:
    def test_identity_weights(self):
        w = MatcherWeights.identity(8)
        assert w.dim == 8
        assert w.units == ()
        np.testing.assert_array_equal(w.sim_a_weight, np.eye(8))
        np.testing.assert_array_equal(w.match_weight, np.zeros(8))
        assert w.match_bias == 40.0

    def test_identity_matchability_saturates_to_one(self):
        w = MatcherWeights.identity(4)
        sig = matchability(unit_rows(5, 4, 0), w)
        np.testing.assert_array_equal(sig, np.ones(5))

    def test_rejects_bad_shapes(self):
        with pytest.raises(DimensionMismatchError):
            MatcherWeights(np.eye(4), np.zeros(3), np.eye(4), np.zeros(4),
                           np.zeros(4), 0.0)

    def test_rejects_non_finite(self):
        bad = np.eye(4)
        bad[0, 0] = np.nan
        with pytest.raises(ValueError):
            MatcherWeights(bad, np.zeros(4), np.eye(4), np.zeros(4),
                           np.zeros(4), 0.0)

    def test_rejects_unit_dim_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            MatcherWeights(np.eye(4), np.zeros(4), np.eye(4), np.zeros(4),
                           np.zeros(4), 0.0, units=(random_unit(6, "self", 1),))

    def test_rejects_bad_unit_kind(self):
        with pytest.raises(ValueError):
            AttentionUnitWeights("sideways", np.eye(2), np.eye(2), np.eye(2),
                                 np.zeros((2, 4)), np.zeros(2))


class TestMatchability:
    def test_sigmoid_formula(self):
        w = MatcherWeights(np.eye(3), np.zeros(3), np.eye(3), np.zeros(3),
                           np.array([1.0, -2.0, 0.5]), 0.25)
        x = np.array([[0.2, 0.1, -0.4], [1.0, 0.0, 0.0]])
        want = 1.0 / (1.0 + np.exp(-(x @ w.match_weight + 0.25)))
        np.testing.assert_allclose(matchability(x, w), want, rtol=1e-15)

    def test_extreme_logits_do_not_overflow(self):
        w = MatcherWeights(np.eye(1), np.zeros(1), np.eye(1), np.zeros(1),
                           np.array([1.0]), 0.0)
        with np.errstate(over="raise"):
            sig = matchability(np.array([[-1000.0], [1000.0]]), w)
        np.testing.assert_array_equal(sig, [0.0, 1.0])


def naive_assignment(s, sa, sb, mask=None):
    s = s.astype(np.float64).copy()
    if mask is not None:
        s[~mask] = -np.inf
    m, n = s.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            if not np.isfinite(s[i, j]):
                continue
            col = s[:, j]
            row = s[i, :]
            cmax = np.max(col[np.isfinite(col)])
            rmax = np.max(row[np.isfinite(row)])
            csm = np.exp(s[i, j] - cmax) / np.sum(np.exp(col[np.isfinite(col)] - cmax))
            rsm = np.exp(s[i, j] - rmax) / np.sum(np.exp(row[np.isfinite(row)] - rmax))
            out[i, j] = sa[i] * sb[j] * csm * rsm
    return out


class TestAssignmentMatrix:
    def test_matches_naive_reference(self):
        rng = np.random.default_rng(5)
        s = rng.normal(size=(7, 5)) * 3.0
        sa = rng.uniform(0.1, 1.0, 7)
        sb = rng.uniform(0.1, 1.0, 5)
        np.testing.assert_allclose(assignment_matrix(s, sa, sb),
                                   naive_assignment(s, sa, sb), rtol=1e-12)

    def test_masked_matches_naive_reference(self):
        rng = np.random.default_rng(6)
        s = rng.normal(size=(6, 8))
        sa = rng.uniform(0.1, 1.0, 6)
        sb = rng.uniform(0.1, 1.0, 8)
        mask = rng.uniform(size=(6, 8)) > 0.4
        got = assignment_matrix(s, sa, sb, mask=mask)
        np.testing.assert_allclose(got, naive_assignment(s, sa, sb, mask),
                                   rtol=1e-12)
        assert np.all(got[~mask] == 0.0)
        assert np.all(np.isfinite(got))

    def test_row_and_column_sums_bounded_by_sigma(self):
        rng = np.random.default_rng(7)
        s = rng.normal(size=(9, 11)) * 2
        sa = rng.uniform(0.0, 1.0, 9)
        sb = rng.uniform(0.0, 1.0, 11)
        p = assignment_matrix(s, sa, sb)
        assert np.all(p.sum(axis=1) <= sa + 1e-12)
        assert np.all(p.sum(axis=0) <= sb + 1e-12)
        assert np.all(p.sum(axis=1) <= 1.0 + 1e-12)
        assert np.all(p.sum(axis=0) <= 1.0 + 1e-12)

    def test_fully_masked_row_is_zero(self):
        s = np.ones((3, 3))
        mask = np.ones((3, 3), dtype=bool)
        mask[1, :] = False
        p = assignment_matrix(s, np.ones(3), np.ones(3), mask=mask)
        np.testing.assert_array_equal(p[1], 0.0)
        assert np.all(np.isfinite(p))

    def test_single_pair_is_product_of_sigmas(self):
        p = assignment_matrix(np.array([[3.7]]), [0.8], [0.5])
        np.testing.assert_allclose(p, [[0.4]], rtol=1e-15)

    def test_uniform_logits_give_quarter(self):
        p = assignment_matrix(np.zeros((2, 2)), np.ones(2), np.ones(2))
        np.testing.assert_allclose(p, 0.25, rtol=1e-15)

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionMismatchError):
            assignment_matrix(np.zeros((2, 3)), np.ones(2), np.ones(2))

    def test_empty_inputs(self):
        p = assignment_matrix(np.zeros((0, 4)), np.zeros(0), np.ones(4))
        assert p.shape == (0, 4)


class TestExtractMatches:
    def test_mutual_pairs_above_threshold(self):
        p = np.array([[0.9, 0.05], [0.1, 0.3]])
        assert extract_matches(p, 0.2) == [(0, 0, 0.9), (1, 1, 0.3)]

    def test_non_mutual_pair_dropped(self):
        p = np.array([[0.9, 0.8], [0.85, 0.1]])
        assert extract_matches(p, 0.2) == [(0, 0, 0.9)]

    def test_threshold_is_inclusive(self):
        p = np.array([[0.2]])
        assert extract_matches(p, 0.2) == [(0, 0, 0.2)]
        assert extract_matches(p, 0.2000001) == []

    def test_tie_goes_to_first_index(self):
        assert extract_matches(np.array([[0.5, 0.5]]), 0.1) == [(0, 0, 0.5)]

    def test_one_to_one(self):
        rng = np.random.default_rng(8)
        p = rng.uniform(size=(20, 15))
        matches = extract_matches(p, 0.0)
        assert len({i for i, _, _ in matches}) == len(matches)
        assert len({j for _, j, _ in matches}) == len(matches)

    def test_empty(self):
        assert extract_matches(np.zeros((0, 3)), 0.1) == []


class TestAttentionUnit:
    def test_zero_mlp_is_identity_update(self):
        dim = 6
        unit = AttentionUnitWeights("self", np.eye(dim), np.eye(dim),
                                    np.eye(dim), np.zeros((dim, 2 * dim)),
                                    np.zeros(dim))
        a = unit_rows(4, dim, 1)
        b = unit_rows(3, dim, 2)
        na, nb = apply_attention_unit(a, b, unit)
        np.testing.assert_array_equal(na, a)
        np.testing.assert_array_equal(nb, b)

    def _mean_passing_unit(self, dim, kind):
        # zero q/k makes attention uniform; mlp [0 | I] adds the message
        mlp = np.concatenate([np.zeros((dim, dim)), np.eye(dim)], axis=1)
        return AttentionUnitWeights(kind, np.zeros((dim, dim)),
                                    np.zeros((dim, dim)), np.eye(dim),
                                    mlp, np.zeros(dim))

    def test_self_unit_adds_own_mean(self):
        dim = 5
        a = unit_rows(4, dim, 3)
        b = unit_rows(2, dim, 4)
        na, nb = apply_attention_unit(a, b, self._mean_passing_unit(dim, "self"))
        np.testing.assert_allclose(na, a + a.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(nb, b + b.mean(axis=0), rtol=1e-12)

    def test_cross_unit_adds_other_mean(self):
        dim = 5
        a = unit_rows(4, dim, 5)
        b = unit_rows(2, dim, 6)
        na, nb = apply_attention_unit(a, b, self._mean_passing_unit(dim, "cross"))
        np.testing.assert_allclose(na, a + b.mean(axis=0), rtol=1e-12)
        np.testing.assert_allclose(nb, b + a.mean(axis=0), rtol=1e-12)

    def test_logit_scaling(self):
        # one target along e0, two opposed sources: the attention-weighted
        # message has a closed form through tanh(c/sqrt(d))
        dim = 4
        c = 2.0
        unit = AttentionUnitWeights("cross", np.eye(dim), np.eye(dim),
                                    np.eye(dim),
                                    np.concatenate([np.zeros((dim, dim)),
                                                    np.eye(dim)], axis=1),
                                    np.zeros(dim))
        a = np.zeros((1, dim))
        a[0, 0] = 1.0
        b = np.zeros((2, dim))
        b[0, 0] = c
        b[1, 0] = -c
        na, _ = apply_attention_unit(a, b, unit)
        want = 1.0 + np.tanh(c / np.sqrt(dim)) * c
        np.testing.assert_allclose(na[0, 0], want, rtol=1e-12)

    def test_update_uses_pre_update_states(self):
        # symmetric pass: if b's update used the already-updated a, the
        # result would differ from the closed form on both sides
        dim = 3
        a = unit_rows(2, dim, 7)
        b = unit_rows(2, dim, 8)
        na, nb = apply_attention_unit(a, b, self._mean_passing_unit(dim, "cross"))
        np.testing.assert_allclose(nb, b + a.mean(axis=0), rtol=1e-12)

    def test_empty_side(self):
        dim = 4
        unit = self._mean_passing_unit(dim, "cross")
        a = np.zeros((0, dim))
        b = unit_rows(3, dim, 9)
        na, nb = apply_attention_unit(a, b, unit)
        assert na.shape == (0, dim)
        np.testing.assert_allclose(nb, b, rtol=1e-12)

    def test_dim_mismatch_raises(self):
        unit = random_unit(4, "self", 10)
        with pytest.raises(DimensionMismatchError):
            apply_attention_unit(np.zeros((2, 5)), np.zeros((2, 4)), unit)


class TestSimilarity:
    def test_projected_dot_products(self):
        rng = np.random.default_rng(11)
        w = random_weights(6, n_units=0, seed=12)
        a = rng.normal(size=(4, 6))
        b = rng.normal(size=(5, 6))
        s = similarity_matrix(a, b, w)
        pa = a @ w.sim_a_weight.T + w.sim_a_bias
        pb = b @ w.sim_b_weight.T + w.sim_b_bias
        np.testing.assert_allclose(s, pa @ pb.T, rtol=1e-12)
        assert s.shape == (4, 5)


class TestMatchPipeline:
    def test_small_set_identity_match(self):
        # three well-separated descriptors: the mutual softmax product
        # clears the default 0.2 threshold
        desc = np.eye(3, 16)
        res = match_descriptors(desc, desc, MatcherWeights.identity(16))
        assert [(i, j) for i, j, _ in res.matches] == [(0, 0), (1, 1), (2, 2)]
        assert all(s >= 0.2 for _, _, s in res.matches)
        np.testing.assert_array_equal(res.sigma_a, np.ones(3))

    def test_permutation_recovery(self):
        rng = np.random.default_rng(13)
        a = unit_rows(40, 64, 14)
        perm = rng.permutation(40)
        b = a[perm]
        res = match_descriptors(a, b, MatcherWeights.identity(64), threshold=0.0)
        got = {(i, j) for i, j, _ in res.matches}
        want = {(int(perm[j]), int(j)) for j in range(40)}
        assert got == want

    def test_large_sets_dilute_below_threshold(self):
        # double softmax spreads mass across 40 candidates, so unmasked
        # matching at the default threshold keeps nothing
        a = unit_rows(40, 64, 15)
        res = match_descriptors(a, a, MatcherWeights.identity(64), threshold=0.2)
        assert res.matches == ()

    def test_mask_restores_confidence(self):
        a = unit_rows(40, 64, 16)
        mask = np.eye(40, dtype=bool)
        res = match_descriptors(a, a, MatcherWeights.identity(64),
                                threshold=0.2, mask=mask)
        assert [(i, j) for i, j, _ in res.matches] == [(i, i) for i in range(40)]
        assert all(s > 0.99 for _, _, s in res.matches)

    def test_mask_forbids_pairs(self):
        a = unit_rows(5, 32, 17)
        mask = np.ones((5, 5), dtype=bool)
        mask[2, :] = False
        res = match_descriptors(a, a, MatcherWeights.identity(32),
                                threshold=0.0, mask=mask)
        assert all(i != 2 for i, _, _ in res.matches)

    def test_attention_stack_is_applied(self):
        a = unit_rows(4, 8, 18)
        w_plain = MatcherWeights.identity(8)
        w_stack = MatcherWeights(
            np.eye(8), np.zeros(8), np.eye(8), np.zeros(8), np.zeros(8), 40.0,
            units=(random_unit(8, "cross", 19),),
        )
        p_plain = match_descriptors(a, a, w_plain, threshold=0.0).probabilities
        p_stack = match_descriptors(a, a, w_stack, threshold=0.0).probabilities
        assert not np.allclose(p_plain, p_stack)

    def test_dim_mismatch_raises(self):
        with pytest.raises(DimensionMismatchError):
            match_descriptors(unit_rows(3, 16, 20), unit_rows(3, 16, 21),
                              MatcherWeights.identity(8))

    def test_feature_set_wrapper(self):
        from slamfrontkit.core import FeatureSet, Keypoint

        d = unit_rows(3, 64, 22).astype(np.float32)
        fs = FeatureSet(tuple(Keypoint(float(i), 0.0) for i in range(3)), d)
        res = match_feature_sets(fs, fs, MatcherWeights.identity(64),
                                 threshold=0.0)
        assert [(i, j) for i, j, _ in res.matches] == [(0, 0), (1, 1), (2, 2)]
        with pytest.raises(DimensionMismatchError):
            match_feature_sets(fs, fs, MatcherWeights.identity(32))


class TestWeightsIO:
    def test_round_trip(self, tmp_path):
        w = random_weights(16, n_units=3, seed=23)
        path = tmp_path / "w.lsmw"
        save_matcher_weights(path, w)
        got = load_matcher_weights(path)
        np.testing.assert_array_equal(got.sim_a_weight, w.sim_a_weight)
        np.testing.assert_array_equal(got.sim_a_bias, w.sim_a_bias)
        np.testing.assert_array_equal(got.sim_b_weight, w.sim_b_weight)
        np.testing.assert_array_equal(got.sim_b_bias, w.sim_b_bias)
        np.testing.assert_array_equal(got.match_weight, w.match_weight)
        assert got.match_bias == w.match_bias
        assert len(got.units) == 3
        for gu, wu in zip(got.units, w.units):
            assert gu.kind == wu.kind
            np.testing.assert_array_equal(gu.query, wu.query)
            np.testing.assert_array_equal(gu.key, wu.key)
            np.testing.assert_array_equal(gu.value, wu.value)
            np.testing.assert_array_equal(gu.mlp_weight, wu.mlp_weight)
            np.testing.assert_array_equal(gu.mlp_bias, wu.mlp_bias)

    def test_identity_round_trip_still_saturates(self, tmp_path):
        path = tmp_path / "w.lsmw"
        save_matcher_weights(path, MatcherWeights.identity(64))
        got = load_matcher_weights(path)
        np.testing.assert_array_equal(matchability(unit_rows(4, 64, 24), got),
                                      np.ones(4))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.lsmw"
        path.write_bytes(b"WRNG" + b"\x00" * 32)
        with pytest.raises(BadMagicError):
            load_matcher_weights(path)

    def test_bad_version(self, tmp_path):
        import struct

        path = tmp_path / "w.lsmw"
        path.write_bytes(b"LSMW" + struct.pack("<III", 9, 4, 0))
        with pytest.raises(VersionMismatchError):
            load_matcher_weights(path)

    def test_truncated(self, tmp_path):
        w = random_weights(8, n_units=1, seed=25)
        path = tmp_path / "w.lsmw"
        save_matcher_weights(path, w)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(TruncatedFileError):
            load_matcher_weights(path)

    def test_unknown_unit_kind_byte(self, tmp_path):
        w = random_weights(4, n_units=1, seed=26)
        path = tmp_path / "w.lsmw"
        save_matcher_weights(path, w)
        raw = bytearray(path.read_bytes())
        kind_off = 16 + 8 * (16 + 4 + 16 + 4 + 4 + 1)
        assert raw[kind_off] in (0, 1)
        raw[kind_off] = 7
        path.write_bytes(bytes(raw))
        with pytest.raises(TruncatedFileError):
            load_matcher_weights(path)

    def test_no_temp_file_left_behind(self, tmp_path):
        path = tmp_path / "w.lsmw"
        save_matcher_weights(path, MatcherWeights.identity(8))
        save_matcher_weights(path, MatcherWeights.identity(16))
        assert sorted(p.name for p in tmp_path.iterdir()) == ["w.lsmw"]
        assert load_matcher_weights(path).dim == 16
