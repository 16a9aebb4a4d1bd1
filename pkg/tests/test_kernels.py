import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from icleq import kernels
from icleq.kernels import (beta_logit_grad, linear_attention, lms_step, lms_step_deltanet,
                           lrms_step, multi_lms_step, run_recurrent, run_recurrent_grad,
                           softmax_attention)
from icleq.numerics import make_rng


def unit(rng, d):
    k = rng.standard_normal(d)
    return k / np.linalg.norm(k)


def loop_softmax(q, k, v):
    """Scalar-loop oracle for causal softmax attention."""
    T, d = q.shape
    out = np.zeros_like(v)
    for i in range(T):
        logits = np.array([k[j] @ q[i] for j in range(i + 1)])
        w = np.exp(logits - logits.max())
        w /= w.sum()
        out[i] = sum(w[j] * v[j] for j in range(i + 1))
    return out


def loop_recurrent(q, k, v, beta, kind, M=1, read_before_update=False):
    """Position-by-position oracle built from the single-step updates."""
    d = q.shape[1]
    S = np.zeros((d, d))
    out = []
    for i in range(q.shape[0]):
        S_prev = S
        if kind == "lms":
            S = lms_step(S, k[i], v[i], beta[i])
        elif kind == "multi_lms":
            for _ in range(M):
                S = lms_step(S, k[i], v[i], beta[i])
        else:
            S = lrms_step(S, k[i], v[i], beta[i])
        out.append((S_prev if read_before_update else S) @ q[i])
    return np.array(out), S


# -- softmax --------------------------------------------------------------------------------

def test_softmax_single_token():
    rng = make_rng(0)
    q, k, v = rng.standard_normal((3, 1, 4))
    np.testing.assert_allclose(softmax_attention(q, k, v), v)


def test_softmax_identical_keys_average():
    rng = make_rng(1)
    q = rng.standard_normal((5, 3))
    k = np.tile(rng.standard_normal(3), (5, 1))
    v = rng.standard_normal((5, 3))
    expected = np.cumsum(v, axis=0) / np.arange(1, 6)[:, None]
    np.testing.assert_allclose(softmax_attention(q, k, v), expected, atol=1e-14)


def test_softmax_dominating_logit():
    d = 4
    q = np.zeros((4, d))
    q[3, 0] = 1.0
    k = np.zeros((4, d))
    k[0, 0] = 50.0
    v = make_rng(2).standard_normal((4, d))
    o = softmax_attention(q, k, v)
    assert np.linalg.norm(o[3] - v[0]) <= 1e-12 * max(1.0, np.abs(v).max()) * 10


def test_softmax_matches_loop():
    q, k, v = make_rng(3).standard_normal((3, 7, 4))
    np.testing.assert_allclose(softmax_attention(q, k, v), loop_softmax(q, k, v), atol=1e-13)


def test_softmax_scale_flag():
    q, k, v = make_rng(4).standard_normal((3, 5, 4))
    np.testing.assert_allclose(softmax_attention(q, k, v, scale=True),
                               softmax_attention(q / 2.0, k, v), atol=1e-14)


def test_linear_attention_is_outer_product_sum():
    q, k, v = make_rng(5).standard_normal((3, 6, 3))
    S = np.zeros((3, 3))
    for i in range(6):
        S += np.outer(v[i], k[i])
        np.testing.assert_allclose(linear_attention(q, k, v)[i], S @ q[i], atol=1e-12)


# -- single steps ----------------------------------------------------------------------------

def test_lms_zero_beta_is_identity():
    rng = make_rng(6)
    S = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(lms_step(S, unit(rng, 3), rng.standard_normal(3), 0.0), S)


def test_lms_full_step_interpolates():
    rng = make_rng(7)
    k, v = unit(rng, 4), rng.standard_normal(4)
    S1 = lms_step(np.zeros((4, 4)), k, v, 1.0)
    np.testing.assert_allclose(S1, np.outer(v, k), atol=1e-15)
    np.testing.assert_allclose(S1 @ k, v, atol=1e-14)


def test_lms_deltanet_forms_agree():
    rng = make_rng(8)
    for _ in range(50):
        d = int(rng.integers(1, 10))
        S, k, v, b = rng.standard_normal((d, d)), rng.standard_normal(d), rng.standard_normal(d), rng.uniform()
        assert np.max(np.abs(lms_step(S, k, v, b) - lms_step_deltanet(S, k, v, b))) <= 1e-12


def test_lms_contraction_on_unit_keys():
    rng = make_rng(9)
    S, v, k, b = rng.standard_normal((5, 5)), rng.standard_normal(5), unit(rng, 5), 0.3
    before = np.linalg.norm(S @ k - v)
    after = np.linalg.norm(lms_step(S, k, v, b) @ k - v)
    assert abs(after - (1 - b) * before) <= 1e-12 * before


def test_multi_lms_one_step_is_lms():
    rng = make_rng(10)
    S, k, v = rng.standard_normal((4, 4)), rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_allclose(multi_lms_step(S, k, v, 0.4, 1), lms_step(S, k, v, 0.4), atol=1e-15)


@pytest.mark.parametrize("M", [2, 4, 8])
def test_multi_lms_equals_iterated(M):
    rng = make_rng(11 + M)
    S, k, v = rng.standard_normal((6, 6)), rng.standard_normal(6) * 0.5, rng.standard_normal(6)
    b = 0.7
    it = S
    for _ in range(M):
        it = lms_step(it, k, v, b)
    np.testing.assert_allclose(multi_lms_step(S, k, v, b, M), it, atol=1e-10)


def test_multi_lms_converges_geometrically():
    rng = make_rng(12)
    S, v = rng.standard_normal((4, 4)), rng.standard_normal(4)
    k = unit(rng, 4) * np.sqrt(0.5 / 0.8)  # beta * ||k||^2 = 0.5
    r0 = np.linalg.norm(S @ k - v)
    S64 = multi_lms_step(S, k, v, 0.8, 64)
    assert np.linalg.norm(S64 @ k - v) <= 0.5**64 * r0 + 1e-15 * np.linalg.norm(v)


def test_multi_lms_zero_key_skips():
    S = np.eye(3)
    np.testing.assert_array_equal(multi_lms_step(S, np.zeros(3), np.ones(3), 0.5, 4), S)


def test_lrms_zero_residual_guard():
    rng = make_rng(13)
    S, k = rng.standard_normal((3, 3)), unit(rng, 3)
    np.testing.assert_array_equal(lrms_step(S, k, S @ k, 0.5), S)


def test_lrms_unit_residual_matches_lms():
    rng = make_rng(14)
    S, k = rng.standard_normal((3, 3)), unit(rng, 3)
    r = unit(rng, 3)
    v = S @ k - r
    np.testing.assert_allclose(lrms_step(S, k, v, 0.6), lms_step(S, k, v, 0.6), atol=1e-14)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 12), beta=st.floats(0.01, 0.99),
       outlier=st.floats(1.0, 1e8))
def test_lrms_update_norm_is_bounded(seed, d, beta, outlier):
    rng = make_rng(seed)
    S, k = rng.standard_normal((d, d)), rng.standard_normal(d)
    v = rng.standard_normal(d) * outlier
    delta = np.linalg.norm(lrms_step(S, k, v, beta) - S)
    assert abs(delta - beta * np.linalg.norm(k)) <= 1e-9 * beta * np.linalg.norm(k)


def test_lms_update_grows_with_outlier():
    rng = make_rng(15)
    S, k, v0 = rng.standard_normal((4, 4)), unit(rng, 4), rng.standard_normal(4)
    norms = [np.linalg.norm(lms_step(S, k, v0 * s, 0.5) - S) for s in (1e2, 1e4, 1e6)]
    ratios = np.diff(np.log10(norms))
    np.testing.assert_allclose(ratios, 2.0, atol=0.01)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), d=st.integers(1, 16), M=st.integers(1, 16),
       beta=st.floats(0.01, 0.99))
def test_multi_lms_iterated_property(seed, d, M, beta):
    rng = make_rng(seed)
    S, k, v = rng.standard_normal((d, d)), unit(rng, d), rng.standard_normal(d)
    it = S
    for _ in range(M):
        it = lms_step(it, k, v, beta)
    assert np.max(np.abs(multi_lms_step(S, k, v, beta, M) - it)) <= 1e-10


def test_steps_broadcast_over_batch():
    rng = make_rng(16)
    S, k, v = rng.standard_normal((5, 3, 3)), rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
    b = rng.uniform(size=5)
    batched = lrms_step(S, k, v, b)
    for i in range(5):
        np.testing.assert_allclose(batched[i], lrms_step(S[i], k[i], v[i], b[i]), atol=1e-15)


# -- sequences -------------------------------------------------------------------------------

def test_one_step_unrolling():
    rng = make_rng(17)
    q, v = rng.standard_normal((2, 1, 4))
    k = unit(rng, 4)[None]
    o, _ = run_recurrent(q, k, v, np.ones(1), "lms")
    np.testing.assert_allclose(o[0], (k[0] @ q[0]) * v[0], atol=1e-14)


@pytest.mark.parametrize("kind,M", [("lms", 1), ("multi_lms", 3), ("lrms", 1)])
@pytest.mark.parametrize("rbu", [False, True])
def test_recurrence_matches_loop_oracle(kind, M, rbu):
    rng = make_rng(18)
    q, k, v = rng.standard_normal((3, 8, 5))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    beta = rng.uniform(0.1, 0.9, 8)
    o, S = run_recurrent(q, k, v, beta, kind, M, read_before_update=rbu)
    o_ref, S_ref = loop_recurrent(q, k, v, beta, kind, M, rbu)
    np.testing.assert_allclose(o, o_ref, atol=1e-12)
    np.testing.assert_allclose(S, S_ref, atol=1e-12)


@pytest.mark.parametrize("kind", kernels.KINDS)
def test_recurrence_is_causal(kind):
    rng = make_rng(19)
    q, k, v = rng.standard_normal((3, 6, 4))
    beta = rng.uniform(0.1, 0.9, 6)
    o, _ = run_recurrent(q, k, v, beta, kind, 2)
    q2, k2, v2 = q.copy(), k.copy(), v.copy()
    q2[4] += 1.0
    k2[4] -= 2.0
    v2[4] *= 3.0
    o2, _ = run_recurrent(q2, k2, v2, beta, kind, 2)
    np.testing.assert_array_equal(o[:4], o2[:4])
    assert not np.allclose(o[4:], o2[4:])


def test_unit_key_lms_residual_recursion():
    rng = make_rng(20)
    T, d = 10, 4
    k = rng.standard_normal((T, d))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    v = rng.standard_normal((T, d))
    beta = rng.uniform(0.05, 0.95, T)
    _, _, states = run_recurrent(np.zeros((T, d)), k, v, beta, "lms", return_states=True)
    for i in range(T):
        before = np.linalg.norm(states[i] @ k[i] - v[i])
        after = np.linalg.norm(states[i + 1] @ k[i] - v[i])
        assert abs(after - (1 - beta[i]) * before) <= 1e-12 * max(1.0, before)


def test_batched_recurrence_matches_single():
    rng = make_rng(21)
    q, k, v = rng.standard_normal((3, 2, 3, 5, 4))
    beta = rng.uniform(0.1, 0.9, (2, 3, 5))
    o, S = run_recurrent(q, k, v, beta, "lrms")
    o1, S1 = run_recurrent(q[1, 2], k[1, 2], v[1, 2], beta[1, 2], "lrms")
    np.testing.assert_allclose(o[1, 2], o1, atol=1e-15)
    np.testing.assert_allclose(S[1, 2], S1, atol=1e-15)


# -- gradients ---------------------------------------------------------------------------------

def test_zero_upstream_gives_zero_gradients():
    rng = make_rng(22)
    q, k, v = rng.standard_normal((3, 5, 4))
    g = run_recurrent_grad(q, k, v, rng.uniform(0.1, 0.9, 5), np.zeros((5, 4)), "lms")
    for arr in g.values():
        assert not np.any(arr)


@pytest.mark.parametrize("kind,M", [("lms", 1), ("multi_lms", 4), ("lrms", 1)])
@pytest.mark.parametrize("rbu", [False, True])
def test_gradients_match_finite_differences(kind, M, rbu):
    rng = make_rng(23)
    T, d = 5, 4
    q, k, v = rng.standard_normal((3, T, d))
    k *= 0.8 / np.linalg.norm(k, axis=1, keepdims=True)
    beta = rng.uniform(0.1, 0.9, T)
    go = rng.standard_normal((T, d))
    g = run_recurrent_grad(q, k, v, beta, go, kind, M, read_before_update=rbu)

    def f(q_, k_, v_, b_):
        return np.sum(run_recurrent(q_, k_, v_, b_, kind, M, read_before_update=rbu)[0] * go)

    h = 1e-5
    for name, a in {"q": q, "k": k, "v": v, "beta": beta}.items():
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f(q, k, v, beta)
            a[idx] = old - h
            fm = f(q, k, v, beta)
            a[idx] = old
            num = (fp - fm) / (2 * h)
            assert abs(g[name][idx] - num) <= 1e-4 * max(abs(num), 1e-3), (name, idx)


def test_gradients_with_final_state_upstream():
    rng = make_rng(24)
    q, k, v = rng.standard_normal((3, 4, 3))
    beta = rng.uniform(0.2, 0.8, 4)
    W = rng.standard_normal((3, 3))
    g = run_recurrent_grad(q, k, v, beta, np.zeros((4, 3)), "multi_lms", M=2, grad_S=W)
    h = 1e-6
    old = v[1, 2]
    v[1, 2] = old + h
    fp = np.sum(run_recurrent(q, k, v, beta, "multi_lms", 2)[1] * W)
    v[1, 2] = old - h
    fm = np.sum(run_recurrent(q, k, v, beta, "multi_lms", 2)[1] * W)
    v[1, 2] = old
    assert abs(g["v"][1, 2] - (fp - fm) / (2 * h)) <= 1e-6


def test_lrms_guard_has_zero_gradient():
    rng = make_rng(25)
    d = 3
    k = unit(rng, d)[None]
    q = rng.standard_normal((1, d))
    v = np.zeros((1, d))  # S_0 k - v = 0: guard fires
    g = run_recurrent_grad(q, k, v, np.array([0.5]), rng.standard_normal((1, d)), "lrms")
    assert not np.any(g["beta"]) and not np.any(g["k"]) and not np.any(g["v"])


def test_saturated_gate_gradient_vanishes():
    rng = make_rng(26)
    T, d = 3, 4
    q, k, v = rng.standard_normal((3, T, d))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    logits = np.array([20.0, -20.0, 20.0])
    beta = kernels.sigmoid(logits)
    g = run_recurrent_grad(q, k, v, beta, rng.standard_normal((T, d)), "lms")
    assert np.max(np.abs(beta_logit_grad(g["beta"], logits))) <= 1e-7
