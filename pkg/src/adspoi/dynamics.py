"""K parallel gated recurrences with per-state spatiotemporal decay, and
context-conditioned aggregation of the sub-states into a decision state.

Sub-state update for state k::

    gamma = exp(-lambda_k * dt / tau_t) * exp(-mu_k * dd / tau_d)
    z     = sigmoid(Wz x + Uz s + bz)
    r     = sigmoid(Wr x + Ur s + br)
    cand  = tanh(Wc x + Uc (r * s) + bc)
    s'    = gamma * (1 - z) * s + z * cand

lambda_k and mu_k are softplus images of unconstrained raws. The decision
state places ``alpha_k * s_k`` in block k of a ``K * d_s`` vector.
"""

from __future__ import annotations

import numpy as np

from .config import ModelConfig
from .params import ParameterSet


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def decay_rates(params: ParameterSet) -> tuple[np.ndarray, np.ndarray]:
    return softplus(params["raw_lambda"]), softplus(params["raw_mu"])


def decay(k: int, dt: float, dd: float, params: ParameterSet, m: ModelConfig) -> float:
    lam, mu = decay_rates(params)
    return float(np.exp(-lam[k] * dt / m.tau_t) * np.exp(-mu[k] * dd / m.tau_d))


def state_update(k: int, s_prev: np.ndarray, xh: np.ndarray, gamma: float, params: ParameterSet) -> np.ndarray:
    z = sigmoid(params["Wz"][k] @ xh + params["Uz"][k] @ s_prev + params["bz"][k])
    r = sigmoid(params["Wr"][k] @ xh + params["Ur"][k] @ s_prev + params["br"][k])
    cand = np.tanh(params["Wc"][k] @ xh + params["Uc"][k] @ (r * s_prev) + params["bc"][k])
    return gamma * (1.0 - z) * s_prev + z * cand


def step_all(bank: np.ndarray, xh: np.ndarray, dt: float, dd: float,
             params: ParameterSet, m: ModelConfig) -> np.ndarray:
    """Advance a (K, d_s) sub-state bank by one event; rows never read each other."""
    lam, mu = decay_rates(params)
    gammas = np.exp(-lam * dt / m.tau_t) * np.exp(-mu * dd / m.tau_d)
    return np.stack([state_update(k, bank[k], xh, gammas[k], params) for k in range(bank.shape[0])])


def scores(states: np.ndarray, c: np.ndarray, params: ParameterSet) -> np.ndarray:
    """g(s_k, c) for every row of ``states``: a one-hidden-layer tanh scorer."""
    hidden = np.tanh(states @ params["g_Ws"].T + c @ params["g_Wc"].T + params["g_b"])
    return hidden @ params["g_v"]


def softmax(x, axis=-1):
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def aggregate(bank: np.ndarray, c: np.ndarray, params: ParameterSet, m: ModelConfig):
    """Returns (h_dec of length K*d_s, alpha of length K)."""
    K = bank.shape[0]
    if m.variant == "uniform_agg":
        alpha = np.full(K, 1.0 / K)
    else:
        alpha = softmax(scores(bank, c, params) / m.temperature)
    return (alpha[:, None] * bank).reshape(-1), alpha


# --------------------------------------------------------------------------
# batched forward/backward


def rollout_forward(XH: np.ndarray, dt: np.ndarray, dd: np.ndarray, params: ParameterSet, m: ModelConfig):
    """Run all K recurrences over (T, B, d_s) projected inputs.

    Returns S with shape (T, K, B, d_s) and the cache needed by
    :func:`rollout_backward`.
    """
    T, B, ds = XH.shape
    K = m.K
    lam, mu = decay_rates(params)
    gamma = np.exp(-(lam[:, None, None] * dt[None] / m.tau_t + mu[:, None, None] * dd[None] / m.tau_d))
    W_T = np.concatenate([params["Wz"], params["Wr"], params["Wc"]], axis=1).transpose(0, 2, 1)
    bias = np.concatenate([params["bz"], params["br"], params["bc"]], axis=1)
    XW = np.matmul(XH.reshape(1, T * B, ds), W_T).reshape(K, T, B, 3 * ds) + bias[:, None, None, :]
    Uzr_T = np.concatenate([params["Uz"], params["Ur"]], axis=1).transpose(0, 2, 1)
    Uc_T = params["Uc"].transpose(0, 2, 1)

    S = np.empty((T, K, B, ds))
    Z = np.empty_like(S)
    R = np.empty_like(S)
    Cand = np.empty_like(S)
    s = np.zeros((K, B, ds))
    for t in range(T):
        a = XW[:, t]
        zr = sigmoid(a[..., :2 * ds] + np.matmul(s, Uzr_T))
        z, r = zr[..., :ds], zr[..., ds:]
        cand = np.tanh(a[..., 2 * ds:] + np.matmul(r * s, Uc_T))
        s = gamma[:, t, :, None] * (1.0 - z) * s + z * cand
        S[t], Z[t], R[t], Cand[t] = s, z, r, cand
    cache = (XH, dt, dd, gamma, S, Z, R, Cand, W_T)
    return S, cache


def rollout_backward(dS: np.ndarray, cache, params: ParameterSet, grad: ParameterSet, m: ModelConfig) -> np.ndarray:
    """Back-propagate dL/dS (T, K, B, d_s) through time; returns dL/dXH (T, B, d_s)."""
    XH, dt, dd, gamma, S, Z, R, Cand, W_T = cache
    T, K, B, ds = S.shape
    Uzr = np.concatenate([params["Uz"], params["Ur"]], axis=1)
    Uc = params["Uc"]
    dXW = np.empty((K, T, B, 3 * ds))
    dgamma = np.empty((K, T, B))
    dUzr = np.zeros((K, 2 * ds, ds))
    dUc = np.zeros((K, ds, ds))
    carry = np.zeros((K, B, ds))
    zeros = np.zeros((K, B, ds))
    for t in range(T - 1, -1, -1):
        ds_t = dS[t] + carry
        s_prev = S[t - 1] if t > 0 else zeros
        z, r, cand = Z[t], R[t], Cand[t]
        g = gamma[:, t, :, None]
        dgamma[:, t] = np.sum(ds_t * (1.0 - z) * s_prev, axis=-1)
        d_prev = ds_t * g * (1.0 - z)
        da_c = ds_t * z * (1.0 - cand * cand)
        da_z = ds_t * (cand - g * s_prev) * z * (1.0 - z)
        rs = r * s_prev
        dUc += np.matmul(da_c.transpose(0, 2, 1), rs)
        d_rs = np.matmul(da_c, Uc)
        d_prev += d_rs * r
        da_r = d_rs * s_prev * r * (1.0 - r)
        da_zr = np.concatenate([da_z, da_r], axis=-1)
        dUzr += np.matmul(da_zr.transpose(0, 2, 1), s_prev)
        d_prev += np.matmul(da_zr, Uzr)
        dXW[:, t, :, :2 * ds] = da_zr
        dXW[:, t, :, 2 * ds:] = da_c
        carry = d_prev

    flat = dXW.reshape(K, T * B, 3 * ds)
    XH_flat = XH.reshape(T * B, ds)
    dW_T = np.matmul(XH_flat.T[None], flat)  # (K, ds, 3ds)
    dW = dW_T.transpose(0, 2, 1)
    grad["Wz"] += dW[:, :ds]
    grad["Wr"] += dW[:, ds:2 * ds]
    grad["Wc"] += dW[:, 2 * ds:]
    db = flat.sum(axis=1)
    grad["bz"] += db[:, :ds]
    grad["br"] += db[:, ds:2 * ds]
    grad["bc"] += db[:, 2 * ds:]
    grad["Uz"] += dUzr[:, :ds]
    grad["Ur"] += dUzr[:, ds:]
    grad["Uc"] += dUc

    # d gamma / d raw = gamma * (-gap / tau) * sigmoid(raw)
    weighted = dgamma * gamma
    grad["raw_lambda"] += -np.einsum("ktb,tb->k", weighted, dt) / m.tau_t * sigmoid(params["raw_lambda"])
    grad["raw_mu"] += -np.einsum("ktb,tb->k", weighted, dd) / m.tau_d * sigmoid(params["raw_mu"])

    dXH = np.einsum("kmo,kio->mi", flat, W_T, optimize=True)
    return dXH.reshape(T, B, ds)


def aggregate_forward(S_rows: np.ndarray, C_rows: np.ndarray, params: ParameterSet, m: ModelConfig):
    """S_rows: (K, R, d_s); C_rows: (R, d_context). Returns (Hdec (R, K*d_s), alpha (K, R), cache)."""
    K, Rn, ds = S_rows.shape
    if m.variant == "uniform_agg":
        alpha = np.full((K, Rn), 1.0 / K)
        hidden = None
    else:
        hidden = np.tanh(np.matmul(S_rows, params["g_Ws"].T) + (C_rows @ params["g_Wc"].T)[None] + params["g_b"])
        alpha = softmax(hidden @ params["g_v"] / m.temperature, axis=0)
    Hdec = (alpha[..., None] * S_rows).transpose(1, 0, 2).reshape(Rn, K * ds)
    return Hdec, alpha, (S_rows, C_rows, alpha, hidden)


def aggregate_backward(dHdec: np.ndarray, cache, params: ParameterSet, grad: ParameterSet, m: ModelConfig):
    S_rows, C_rows, alpha, hidden = cache
    K, Rn, ds = S_rows.shape
    dblk = dHdec.reshape(Rn, K, ds).transpose(1, 0, 2)
    dS = alpha[..., None] * dblk
    dC = np.zeros_like(C_rows)
    if hidden is None:
        return dS, dC
    dalpha = np.sum(dblk * S_rows, axis=-1)
    dscore = alpha * (dalpha - np.sum(alpha * dalpha, axis=0, keepdims=True)) / m.temperature
    grad["g_v"] += np.einsum("kr,krh->h", dscore, hidden)
    dpre = dscore[..., None] * params["g_v"] * (1.0 - hidden * hidden)
    grad["g_Ws"] += np.einsum("krh,krd->hd", dpre, S_rows)
    dS += np.matmul(dpre, params["g_Ws"])
    grad["g_b"] += dpre.sum(axis=(0, 1))
    dctx = dpre.sum(axis=0)
    grad["g_Wc"] += dctx.T @ C_rows
    dC = dctx @ params["g_Wc"]
    return dS, dC
