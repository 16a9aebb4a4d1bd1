"""Attention as online regression of a state matrix ``S`` from keys to values.

Every recurrent kind shares the update-then-read loop::

    S_0 = 0
    S_i = step(S_{i-1}, k_i, v_i, beta_i)
    o_i = S_i q_i

and differs only in ``step``:

``lms``
    one gradient step on ``0.5 ||S k - v||^2``:
    ``S - beta (S k - v) k^T``  (the delta-rule / DeltaNet update).
``multi_lms``
    ``M`` such steps on the same token, collapsed to one rank-1 update with
    coefficient ``(1 - (1 - beta ||k||^2)^M) / ||k||^2``.
``lrms``
    one step on the un-squared residual norm:
    ``S - beta (r / ||r||) k^T`` with ``r = S k - v``. The update norm is
    ``beta ||k||`` regardless of how large the residual is.

All functions broadcast over arbitrary leading batch dimensions: states are
``(..., d, d)``, vectors ``(..., d)``, gates ``(...)`` and sequences
``(..., T, d)`` / ``(..., T)``. Arrays keep the dtype they arrive with.
"""

from __future__ import annotations

import numpy as np

KINDS = ("lms", "multi_lms", "lrms")
LRMS_EPS = 1e-8


def _mv(S, x):
    return np.matmul(S, x[..., None])[..., 0]


def _mtv(S, x):
    return np.matmul(np.swapaxes(S, -1, -2), x[..., None])[..., 0]


def _outer(a, b):
    return a[..., :, None] * b[..., None, :]


def _dot(a, b):
    return np.sum(a * b, axis=-1)


# -- single steps ------------------------------------------------------------------

def lms_step(S, k, v, beta):
    """``S - beta (S k - v) k^T``."""
    beta = np.asarray(beta)
    r = _mv(S, k) - v
    return S - beta[..., None, None] * _outer(r, k)


def lms_step_deltanet(S, k, v, beta):
    """The same update written as ``S (I - beta k k^T) + beta v k^T``."""
    beta = np.asarray(beta)[..., None, None]
    eye = np.eye(S.shape[-1], dtype=S.dtype)
    return np.matmul(S, eye - beta * _outer(k, k)) + beta * _outer(v, k)


def multi_lms_coef(beta, sqnorm, M: int):
    """Scalar step size of ``M`` fused LMS steps; 0 where ``||k|| = 0``."""
    beta = np.asarray(beta)
    sqnorm = np.asarray(sqnorm)
    safe = np.where(sqnorm > 0, sqnorm, 1.0)
    coef = (1.0 - (1.0 - beta * safe) ** M) / safe
    return np.where(sqnorm > 0, coef, 0.0)


def multi_lms_step(S, k, v, beta, M: int):
    """Closed form of ``M`` composed :func:`lms_step` calls on one token.

    A zero key leaves ``S`` untouched.
    """
    if M < 1:
        raise ValueError(f"M must be >= 1, got {M}")
    coef = multi_lms_coef(beta, _dot(k, k), M)
    r = _mv(S, k) - v
    return S - coef[..., None, None] * _outer(r, k)


def lrms_step(S, k, v, beta, eps: float = LRMS_EPS):
    """``S - beta (r / ||r||) k^T``; no-op where ``||r|| <= eps``."""
    beta = np.asarray(beta)
    r = _mv(S, k) - v
    nr = np.linalg.norm(r, axis=-1)
    active = nr > eps
    u = r / np.where(active, nr, 1.0)[..., None]
    scale = np.where(active, beta, 0.0)
    return S - scale[..., None, None] * _outer(u, k)


def _step(kind, S, k, v, beta, M, eps):
    if kind == "lms":
        return lms_step(S, k, v, beta)
    if kind == "multi_lms":
        return multi_lms_step(S, k, v, beta, M)
    if kind == "lrms":
        return lrms_step(S, k, v, beta, eps)
    raise ValueError(f"unknown recurrent kind {kind!r}; expected one of {KINDS}")


# -- sequences -----------------------------------------------------------------------

def run_recurrent(q, k, v, beta, kind: str = "lms", M: int = 1,
                  read_before_update: bool = False, eps: float = LRMS_EPS,
                  return_states: bool = False):
    """Scan a recurrent kernel over a sequence.

    Parameters
    ----------
    q, k, v : ndarray, shape (..., T, d)
    beta : ndarray, shape (..., T)
    kind : {'lms', 'multi_lms', 'lrms'}
    M : int
        Step count for ``multi_lms``.
    read_before_update : bool
        Read ``o_i = S_{i-1} q_i`` instead of the default ``S_i q_i``.
    return_states : bool
        Also return every state ``S_0 .. S_T`` stacked on axis -3, which
        :func:`run_recurrent_grad` can reuse.

    Returns
    -------
    o : ndarray, shape (..., T, d)
    S_T : ndarray, shape (..., d, d)
    states : ndarray, shape (..., T+1, d, d), only if ``return_states``
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    beta = np.asarray(beta, dtype=q.dtype)
    if not (q.shape == k.shape == v.shape):
        raise ValueError(f"q, k, v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    if beta.shape != q.shape[:-1]:
        raise ValueError(f"beta shape {beta.shape} does not match sequence {q.shape[:-1]}")
    *batch, T, d = q.shape
    states = np.zeros((*batch, T + 1, d, d), dtype=q.dtype)
    o = np.empty_like(q)
    for t in range(T):
        S_prev = states[..., t, :, :]
        S = _step(kind, S_prev, k[..., t, :], v[..., t, :], beta[..., t], M, eps)
        states[..., t + 1, :, :] = S
        o[..., t, :] = _mv(S_prev if read_before_update else S, q[..., t, :])
    if return_states:
        return o, states[..., T, :, :], states
    return o, states[..., T, :, :]


def _step_backward(kind, G, S, k, v, beta, M, eps):
    """Pull ``G = dL/dS'`` back through one step; returns (dS, dk, dv, dbeta)."""
    Gk = _mv(G, k)
    r = _mv(S, k) - v
    if kind == "lrms":
        nr = np.linalg.norm(r, axis=-1)
        active = nr > eps
        safe = np.where(active, nr, 1.0)
        u = r / safe[..., None]
        b = np.where(active, beta, 0.0)
        dbeta = np.where(active, -_dot(u, Gk), 0.0)
        du = -b[..., None] * Gk
        dr = (du - u * _dot(u, du)[..., None]) / safe[..., None]
        dk = -b[..., None] * _mtv(G, u) + _mtv(S, dr)
        return G + _outer(dr, k), dk, -dr, dbeta

    if kind == "lms":
        c = beta
    elif kind == "multi_lms":
        n = _dot(k, k)
        c = multi_lms_coef(beta, n, M)
    else:
        raise ValueError(f"unknown recurrent kind {kind!r}; expected one of {KINDS}")
    dc = -_dot(r, Gk)
    dr = -c[..., None] * Gk
    dk = -c[..., None] * _mtv(G, r) + _mtv(S, dr)
    if kind == "lms":
        dbeta = dc
    else:
        live = n > 0
        safe = np.where(live, n, 1.0)
        a = 1.0 - beta * safe
        a_pow = a ** (M - 1)
        dbeta = np.where(live, dc * M * a_pow, 0.0)
        dc_dn = (M * a_pow * beta * safe - (1.0 - a_pow * a)) / safe ** 2
        dk = dk + np.where(live, 2.0 * dc * dc_dn, 0.0)[..., None] * k
    return G + _outer(dr, k), dk, -dr, dbeta


def run_recurrent_grad(q, k, v, beta, grad_o, kind: str = "lms", M: int = 1,
                       read_before_update: bool = False, eps: float = LRMS_EPS,
                       states=None, grad_S=None):
    """Reverse-mode gradients of :func:`run_recurrent` (backpropagation through time).

    ``grad_o`` is the upstream gradient on the outputs, shape (..., T, d);
    ``grad_S`` optionally adds an upstream gradient on the final state.
    Pass ``states`` from a ``return_states=True`` forward call to skip the
    recomputation. The ``lrms`` guard branch propagates zero gradient.

    Returns
    -------
    dict with keys ``'q', 'k', 'v', 'beta'``.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    beta = np.asarray(beta, dtype=q.dtype)
    grad_o = np.asarray(grad_o, dtype=q.dtype)
    if states is None:
        _, _, states = run_recurrent(q, k, v, beta, kind, M, read_before_update, eps,
                                     return_states=True)
    *batch, T, d = q.shape
    G = np.zeros((*batch, d, d), dtype=q.dtype) if grad_S is None else np.array(grad_S, dtype=q.dtype)
    dq = np.empty_like(q)
    dk = np.empty_like(k)
    dv = np.empty_like(v)
    dbeta = np.empty_like(beta)
    for t in range(T - 1, -1, -1):
        g = grad_o[..., t, :]
        if not read_before_update:
            S_read = states[..., t + 1, :, :]
            G = G + _outer(g, q[..., t, :])
            dq[..., t, :] = _mtv(S_read, g)
        G, dk[..., t, :], dv[..., t, :], dbeta[..., t] = _step_backward(
            kind, G, states[..., t, :, :], k[..., t, :], v[..., t, :], beta[..., t], M, eps)
        if read_before_update:
            S_read = states[..., t, :, :]
            G = G + _outer(g, q[..., t, :])
            dq[..., t, :] = _mtv(S_read, g)
    return {"q": dq, "k": dk, "v": dv, "beta": dbeta}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def beta_logit_grad(grad_beta, logits):
    """Chain ``dL/dbeta`` through ``beta = sigmoid(logits)``."""
    s = sigmoid(logits)
    return grad_beta * s * (1.0 - s)


# -- softmax and linear attention ------------------------------------------------------

def softmax_attention(q, k, v, scale: bool = False):
    """Causal softmax attention ``o_i = sum_{j<=i} softmax_j(k_j . q_i) v_j``.

    No ``1/sqrt(d)`` temperature unless ``scale=True``. Logits are shifted
    by their causal row maximum before exponentiation.
    """
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    T, d = q.shape[-2:]
    logits = np.matmul(q, np.swapaxes(k, -1, -2))
    if scale:
        logits = logits / np.sqrt(d)
    mask = np.tril(np.ones((T, T), dtype=bool))
    logits = np.where(mask, logits, -np.inf)
    logits = logits - logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return np.matmul(w, v)


def linear_attention(q, k, v):
    """Causal attention without the softmax: ``o_i = (sum_{j<=i} v_j k_j^T) q_i``."""
    q, k, v = np.asarray(q), np.asarray(k), np.asarray(v)
    T = q.shape[-2]
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * np.tril(np.ones((T, T)))
    return np.matmul(scores, v)
