import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fkd.core import softmax
from fkd.quantize import (FULL, HARD, SMOOTH, SSL_LOGITS, CompressedLabel, Kind,
                          QuantizationMode, compress, full, harden, marginal_renorm,
                          marginal_renorm_mode, marginal_smooth, marginal_smooth_mode, recover,
                          smooth, top_k)

from oracles import argmax_scan, marginal_smooth_direct


def dist(rng, n, sharp=1.0):
    return softmax(sharp * rng.standard_normal(n))


probs = arrays(np.float64, st.integers(3, 40), elements=st.floats(1e-6, 1.0)).map(
    lambda a: a / a.sum())


class TestMode:
    @pytest.mark.parametrize("mode", [FULL, HARD, SMOOTH, SSL_LOGITS, marginal_smooth_mode(5),
                                      marginal_renorm_mode(3)])
    def test_name_round_trip(self, mode):
        assert QuantizationMode.parse(mode.name) == mode

    def test_payload_counts(self):
        assert [m.payload_values(1000) for m in (FULL, HARD, SMOOTH, marginal_smooth_mode(5))] \
            == [1000, 1, 2, 10]

    def test_k_rules(self):
        with pytest.raises(ValueError):
            QuantizationMode(Kind.MARGINAL_SMOOTH, 0)
        with pytest.raises(ValueError):
            QuantizationMode(Kind.HARD, 3)
        with pytest.raises(ValueError):
            marginal_smooth_mode(10).validate_for(10)

    def test_unknown_name(self):
        with pytest.raises(ValueError, match="unknown"):
            QuantizationMode.parse("bogus")


class TestHarden:
    def test_unique_max(self):
        assert harden([2.0, 1.0, 0.5]).indices.tolist() == [0]

    def test_tie_goes_low(self):
        assert harden([1.0, 1.0]).indices.tolist() == [0]

    def test_matches_scan(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            z = rng.standard_normal(1000)
            assert harden(z).indices[0] == argmax_scan(z.tolist())

    def test_one_hot_recovery(self):
        assert recover(CompressedLabel(HARD, [3], []), 5).tolist() == [0, 0, 0, 1, 0]


class TestSmooth:
    def test_degenerate_one_hot(self):
        assert recover(smooth([0, 0, 1.0, 0, 0]), 5).tolist() == [0, 0, 1, 0, 0]

    def test_closed_form(self):
        r = recover(smooth([0.8, 0.05, 0.05, 0.05, 0.05]), 5)
        assert np.allclose(r, [0.8, 0.05, 0.05, 0.05, 0.05], rtol=0, atol=1e-15)

    def test_sums_to_one(self):
        rng = np.random.default_rng(11)
        for _ in range(50):
            assert abs(recover(smooth(dist(rng, 100)), 100).sum() - 1) < 1e-9

    def test_rejects_single_class(self):
        with pytest.raises(ValueError):
            smooth([1.0])


class TestMarginalSmooth:
    def test_closed_form(self):
        r = recover(marginal_smooth([0.5, 0.2, 0.1, 0.1, 0.05, 0.05], 2), 6)
        assert np.allclose(r, [0.5, 0.2, 0.075, 0.075, 0.075, 0.075], rtol=0, atol=1e-15)

    def test_k_c_minus_one_reproduces(self):
        p = np.array([0.4, 0.3, 0.2, 0.1])
        assert np.allclose(recover(marginal_smooth(p, 3), 4), p, rtol=0, atol=1e-15)

    def test_random_top5_exact(self):
        rng = np.random.default_rng(12)
        for _ in range(50):
            p = dist(rng, 50, 2.0)
            r = recover(marginal_smooth(p, 5), 50)
            top = np.argsort(-p, kind="stable")[:5]
            assert abs(r.sum() - 1) < 1e-9
            assert r[top].tobytes() == p[top].tobytes()

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(13)
        for _ in range(50):
            p = dist(rng, 30, 3.0)
            want = marginal_smooth_direct(p.tolist(), 5)
            assert np.allclose(recover(marginal_smooth(p, 5), 30), want, rtol=0, atol=1e-15)

    def test_k_out_of_range(self):
        with pytest.raises(ValueError):
            marginal_smooth([0.5, 0.5], 2)

    @given(probs)
    def test_k1_equals_smooth_bitwise(self, p):
        a = recover(marginal_smooth(p, 1), p.size)
        b = recover(smooth(p), p.size)
        assert a.tobytes() == b.tobytes()


class TestMarginalRenorm:
    def test_closed_form(self):
        r = recover(marginal_renorm([0.5, 0.2, 0.1, 0.1, 0.05, 0.05], 2), 6)
        assert np.allclose(r, [0.5 / 0.7, 0.2 / 0.7, 0, 0, 0, 0], rtol=0, atol=1e-15)

    def test_sparse_reproduces(self):
        p = np.array([0.0, 0.75, 0.0, 0.25, 0.0])
        assert recover(marginal_renorm(p, 3), 5).tolist() == p.tolist()

    def test_zero_mass_rejected(self):
        with pytest.raises(ValueError):
            CompressedLabel(marginal_renorm_mode(1), [0], [0.0]).validate(3)

    def test_ratios_and_exact_zeros(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            p = dist(rng, 1000, 2.0)
            lab = marginal_renorm(p, 5)
            r = recover(lab, 1000)
            mask = np.ones(1000, bool)
            mask[lab.indices] = False
            assert np.all(r[mask] == 0.0)
            got = r[lab.indices] / r[lab.indices[0]]
            want = p[lab.indices] / p[lab.indices[0]]
            assert np.allclose(got, want, rtol=1e-12, atol=0)


class TestRecover:
    def test_full_identity(self):
        p = np.array([0.25, 0.5, 0.25])
        assert recover(full(p), 3).tobytes() == p.tobytes()

    def test_index_out_of_range(self):
        with pytest.raises(ValueError, match="out of range"):
            recover(CompressedLabel(HARD, [5], []), 5)

    def test_unsorted_marginal_rejected(self):
        with pytest.raises(ValueError, match="sorted"):
            CompressedLabel(marginal_smooth_mode(2), [1, 0], [0.2, 0.5]).validate(4)

    def test_top_k_ties_low_index(self):
        idx, vals = top_k([0.2, 0.3, 0.2, 0.3], 3)
        assert idx.tolist() == [1, 3, 0]
        assert vals.tolist() == [0.3, 0.3, 0.2]

    def test_compress_dispatch(self):
        p = np.array([0.1, 0.6, 0.3])
        assert compress(p, HARD).indices.tolist() == [1]
        assert compress(p, SMOOTH).values.tolist() == [0.6]
        assert compress(p, marginal_renorm_mode(2)).indices.tolist() == [1, 2]

    @settings(max_examples=200)
    @given(probs, st.integers(1, 2))
    def test_every_mode_valid_and_keeps_top_class(self, p, k):
        c = p.size
        if np.sort(p)[-1] == np.sort(p)[-2]:
            return
        top = int(np.argmax(p))
        for mode in (FULL, SMOOTH, marginal_smooth_mode(k), marginal_renorm_mode(k)):
            r = recover(compress(p, mode), c)
            assert np.all(r >= 0) and abs(r.sum() - 1) < 1e-9
            if p[top] > 1 / c:
                assert int(np.argmax(r)) == top
