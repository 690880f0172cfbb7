import io
import math
import tracemalloc

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

import stead.attention as attn
from fd import check_gradients
from gradcases import GRAD_CASES
from stead.attention import (
    PROBE_FIELDS,
    AttentionBundle,
    attention_scaling_probe,
    draw_feature_map,
    exact_attention,
    performer_attention,
    positive_feature_map,
    write_probe_csv,
)
from stead.errors import DimensionError, NumericalUnderflowError
from stead.tensor import precision


def softmax_reference(Q, K, V):
    """Direct loops over rows, no shared code with the library."""
    L, C = Q.shape
    out = np.zeros_like(V)
    for i in range(L):
        s = np.array([math.exp(float(Q[i] @ K[j]) / math.sqrt(C)) for j in range(L)])
        out[i] = (s / s.sum()) @ V
    return out


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


def peak_attention_memory(L, C=64, m=256):
    """Peak traced bytes of one (exact, performer) call on float32 inputs."""
    rng = np.random.default_rng(L)
    b = AttentionBundle(*(rng.standard_normal((L, C)).astype(np.float32) for _ in range(3)))
    p = draw_feature_map(C, m, 0, dtype=np.float32)
    peaks = []
    for f in (exact_attention, lambda x: performer_attention(x, p)):
        f(b)
        tracemalloc.start()
        f(b)
        peaks.append(tracemalloc.get_traced_memory()[1])
        tracemalloc.stop()
    return tuple(peaks)


def bundle(rng, L, C, scale=1.0):
    return AttentionBundle(*(rng.standard_normal((L, C)) * scale for _ in range(3)))


class TestExactAttention:
    def test_single_token_returns_value(self, rng):
        b = AttentionBundle(rng.standard_normal((1, 4)), rng.standard_normal((1, 4)), rng.standard_normal((1, 4)))
        assert_allclose(exact_attention(b).data, b.V.data, rtol=1e-6)

    def test_identical_keys_average_values(self, rng):
        k = np.tile(rng.standard_normal(3), (5, 1))
        b = AttentionBundle(rng.standard_normal((5, 3)), k, rng.standard_normal((5, 3)))
        expected = np.tile(b.V.data.mean(axis=0), (5, 1))
        assert_allclose(exact_attention(b).data, expected, rtol=1e-5)

    def test_two_token_hand_case(self):
        Q = K = np.array([[0.0], [math.log(3.0)]])
        V = np.array([[0.0], [1.0]])
        with precision(np.float64):
            out = exact_attention(AttentionBundle(Q, K, V)).data
        assert out[0, 0] == pytest.approx(0.5)
        assert_allclose(out, softmax_reference(Q, K, V), rtol=1e-12)

    def test_matches_loop_reference(self, rng):
        with precision(np.float64):
            b = bundle(rng, 7, 3)
            assert_allclose(exact_attention(b).data, softmax_reference(b.Q.data, b.K.data, b.V.data), rtol=1e-10)

    def test_bundle_shape_mismatch(self):
        with pytest.raises(DimensionError):
            AttentionBundle(np.ones((3, 2)), np.ones((4, 2)), np.ones((3, 2)))


class TestFeatureMap:
    def test_deterministic(self):
        a, b = draw_feature_map(8, 40, seed=5), draw_feature_map(8, 40, seed=5)
        assert_array_equal(a.W_rand, b.W_rand)
        assert not np.array_equal(a.W_rand, draw_feature_map(8, 40, seed=6).W_rand)

    def test_orthogonal_rows_within_block(self):
        W = draw_feature_map(16, 16, seed=1, dtype=np.float64).W_rand
        gram = W @ W.T
        assert np.abs(gram - np.diag(np.diag(gram))).max() < 1e-5

    def test_blocks_of_at_most_C_rows(self):
        W = draw_feature_map(4, 10, seed=2, dtype=np.float64).W_rand
        assert W.shape == (10, 4)
        for start in (0, 4, 8):
            block = W[start : start + 4]
            gram = block @ block.T
            assert np.abs(gram - np.diag(np.diag(gram))).max() < 1e-10

    def test_gaussian_entries_centered(self):
        C = 32
        W = draw_feature_map(C, 4 * C, seed=0, orthogonal=False, dtype=np.float64).W_rand
        assert abs(W.mean()) < 3.0 / math.sqrt(4 * C * C)

    def test_zero_input_gives_uniform_features(self):
        p = draw_feature_map(6, 50, seed=0)
        assert_allclose(positive_feature_map(np.zeros((3, 6)), p).data, 50**-0.5, rtol=1e-6)

    def test_strictly_positive(self, rng):
        p = draw_feature_map(6, 50, seed=0)
        assert (positive_feature_map(rng.standard_normal((20, 6)) * 3, p).data > 0).all()

    def test_kernel_estimate_is_unbiased(self, rng):
        C, m = 8, 1024
        q = rng.standard_normal((6, C))
        k = rng.standard_normal((6, C))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
        k /= np.linalg.norm(k, axis=1, keepdims=True)
        with precision(np.float64):
            estimates = []
            for seed in range(10):
                p = draw_feature_map(C, m, seed)
                fq, fk = positive_feature_map(q, p).data, positive_feature_map(k, p).data
                estimates.append((fq * fk).sum(axis=1))
        truth = np.exp((q * k).sum(axis=1))
        assert (np.abs(np.mean(estimates, axis=0) - truth) / truth).max() < 0.05


class TestPerformer:
    def test_single_token_returns_value(self, rng):
        with precision(np.float64):
            b = bundle(rng, 1, 5)
            assert_allclose(performer_attention(b, draw_feature_map(5, 7, 0)).data, b.V.data, rtol=1e-12)

    def test_zero_values_give_zero(self, rng):
        b = AttentionBundle(rng.standard_normal((9, 4)), rng.standard_normal((9, 4)), np.zeros((9, 4)))
        assert not performer_attention(b, draw_feature_map(4, 16, 0)).data.any()

    @pytest.mark.parametrize("path", ["exact", "performer"])
    def test_query_permutation_equivariance(self, path, rng):
        with precision(np.float64):
            b = bundle(rng, 12, 4)
            p = draw_feature_map(4, 32, 1)
            f = exact_attention if path == "exact" else (lambda x: performer_attention(x, p))
            perm = rng.permutation(12)
            out = f(b).data
            out_perm = f(AttentionBundle(b.Q.data[perm], b.K, b.V)).data
        assert_allclose(out_perm, out[perm], rtol=1e-10)

    @pytest.mark.parametrize("path", ["exact", "performer"])
    def test_value_shift(self, path, rng):
        with precision(np.float64):
            b = bundle(rng, 10, 4)
            c = rng.standard_normal(4)
            p = draw_feature_map(4, 32, 1)
            f = exact_attention if path == "exact" else (lambda x: performer_attention(x, p))
            shifted = f(AttentionBundle(b.Q, b.K, b.V.data + c)).data
            assert_allclose(shifted, f(b).data + c, rtol=1e-9, atol=1e-12)

    def test_deterministic_given_feature_map(self, rng):
        b = bundle(rng, 20, 8)
        p = draw_feature_map(8, 64, 3)
        assert_array_equal(performer_attention(b, p).data, performer_attention(b, p).data)

    def test_batched_matches_per_item(self, rng):
        with precision(np.float64):
            Q, K, V = (rng.standard_normal((3, 10, 4)) for _ in range(3))
            p = draw_feature_map(4, 16, 0)
            batched = performer_attention(AttentionBundle(Q, K, V), p).data
            for i in range(3):
                single = performer_attention(AttentionBundle(Q[i], K[i], V[i]), p).data
                assert_allclose(batched[i], single, rtol=1e-12)

    def test_converges_at_moderate_logit_scale(self, rng):
        # with small inputs the estimator variance is modest and error falls like m^-1/2
        errs = []
        with precision(np.float64):
            for m in (16, 256, 4096):
                per_seed = []
                for seed in range(10):
                    b = bundle(np.random.default_rng(seed), 64, 16, scale=0.3)
                    p = draw_feature_map(16, m, 100 + seed)
                    per_seed.append(rel_fro(performer_attention(b, p).data, exact_attention(b).data))
                errs.append(np.median(per_seed))
        assert errs[0] > errs[1] > errs[2]
        assert errs[2] < 0.02

    def test_large_logits_stay_finite(self, rng):
        # queries and keys far from the origin: per-feature stabilization keeps every
        # normalizer above the floor instead of underflowing
        b = bundle(rng, 50, 8, scale=30.0)
        out = performer_attention(b, draw_feature_map(8, 64, 0)).data
        assert np.isfinite(out).all()

    def test_underflow_names_row(self, rng, monkeypatch):
        monkeypatch.setattr(attn, "UNDERFLOW_FLOOR", 10.0)
        with pytest.raises(NumericalUnderflowError, match=r"row \(0,\)"):
            performer_attention(bundle(rng, 4, 2), draw_feature_map(2, 4, 0))

    def test_no_quadratic_allocation(self):
        peak = peak_attention_memory(400), peak_attention_memory(3200)
        (exact_small, perf_small), (exact_big, perf_big) = peak
        square = 3200 * 3200 * np.dtype(np.float32).itemsize
        assert exact_big >= square  # the control really does build L x L
        assert perf_big < square
        assert perf_big / perf_small < 12  # ideal 8 for O(L (m + C))

    @pytest.mark.parametrize("name", ["positive_feature_map", "exact_attention", "performer_attention"])
    def test_gradient_matches_finite_differences(self, name, rng):
        fn, inputs = GRAD_CASES[name](rng)
        err, _ = check_gradients(fn, inputs, rng, probes=15)
        assert err < 1e-4


def test_scaling_probe_rows_and_csv():
    rows = attention_scaling_probe([16, 32], m=8, C=4, reps=2, warmup=0)
    assert [(r.L, r.rep) for r in rows] == [(16, 0), (16, 1), (32, 0), (32, 1)]
    assert all(r.exact_ns > 0 and r.performer_ns > 0 and r.m == 8 and r.C == 4 for r in rows)
    buf = io.StringIO()
    write_probe_csv(rows, buf)
    lines = buf.getvalue().splitlines()
    assert lines[0] == ",".join(PROBE_FIELDS)
    assert len(lines) == 5


def _median_times(L_values, m, C, reps=5):
    rows = attention_scaling_probe(L_values, m=m, C=C, reps=reps)
    med = {}
    for L in L_values:
        med[L] = (
            np.median([r.exact_ns for r in rows if r.L == L]),
            np.median([r.performer_ns for r in rows if r.L == L]),
        )
    return med


def test_doubling_L_time_trends():
    med = _median_times([800, 1600], m=128, C=32)
    exact_ratio = med[1600][0] / med[800][0]
    perf_ratio = med[1600][1] / med[800][1]
    # quadratic vs linear growth, with slack for timer noise on a shared CPU
    assert exact_ratio > 2.5
    assert perf_ratio < 3.0


def test_doubling_m_roughly_doubles_performer_time():
    t = {m: _median_times([1600], m=m, C=32)[1600][1] for m in (256, 512)}
    assert 1.3 < t[512] / t[256] < 3.0
