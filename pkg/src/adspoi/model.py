"""Batched forward and reverse-mode passes of the full model.

Pipeline per step: encode -> project input (dropout) -> decay + K state
updates -> aggregate with context -> (dropout) project decision -> score
the slate -> ce + beta * bpr. Training sequences are right-padded into
(T, B) arrays; padded steps come after every real step of their column so
they never influence real ones and are masked out of the loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics, encoding, objective
from .config import RunConfig
from .ingest import Trajectory
from .params import TRANSITION, ParameterSet


@dataclass
class Batch:
    feats: encoding.EventFeatures
    mask: np.ndarray      # (T, B) steps that produce a prediction
    target: np.ndarray    # (T, B) next-POI index, -1 where masked
    lengths: np.ndarray   # input steps per column


@dataclass
class Noise:
    """All randomness of one training pass, drawn up front so passes are repeatable."""

    negatives: np.ndarray          # (M, n_neg) for the masked rows in (T, B) row-major order
    drop_in: np.ndarray | None     # (T, B, d_s) inverted-dropout multipliers
    drop_dec: np.ndarray | None    # (T, B, K*d_s)


def make_batch(trajs: list[Trajectory], cfg: RunConfig, train: bool) -> Batch:
    """``train``: steps 0..n-2 predict events 1..n-1. Otherwise every event is input."""
    m = cfg.model
    trajs = [t.tail(cfg.optim.max_seq_len) for t in trajs]
    steps = [len(t) - 1 if train else len(t) for t in trajs]
    if min(steps) < 1:
        raise ValueError("every sequence needs at least one input step")
    feats = encoding.stack_features([encoding.trajectory_features(t, m.bucket_edges) for t in trajs], steps)
    T, B = feats.poi.shape
    mask = np.zeros((T, B), dtype=bool)
    target = np.full((T, B), -1, dtype=np.int64)
    for b, tr in enumerate(trajs):
        mask[:steps[b], b] = True
        if train:
            target[:steps[b], b] = tr.poi[1:]
    return Batch(feats, mask, target, np.asarray(steps))


def sample_noise(rng: np.random.Generator, batch: Batch, n_pois: int, cfg: RunConfig, train: bool = True) -> Noise:
    rows = batch.target[batch.mask]
    negatives = objective.sample_negative_matrix(rng, n_pois, rows, cfg.objective.n_neg)
    p = cfg.optim.dropout
    if not train or p == 0.0:
        return Noise(negatives, None, None)
    T, B = batch.mask.shape
    keep = 1.0 - p
    drop_in = (rng.random((T, B, cfg.model.d_s)) < keep) / keep
    drop_dec = (rng.random((T, B, cfg.model.d)) < keep) / keep
    return Noise(negatives, drop_in, drop_dec)


@dataclass
class PassResult:
    loss: float             # mean per-step total over the batch
    loss_sum: float         # summed per-step total
    ce: np.ndarray          # per-step ce for masked rows
    bpr: np.ndarray
    n_steps: int
    alpha: np.ndarray       # (K, M) aggregation weights of the masked rows
    h_proj: np.ndarray      # (M, d_e)
    slates: np.ndarray      # (M, 1 + n_neg)
    logits: np.ndarray      # (M, 1 + n_neg)
    states: np.ndarray      # (T, K, B, d_s)


def _forward_trunk(params: ParameterSet, batch: Batch, cfg: RunConfig, drop_in):
    m = cfg.model
    f = batch.feats
    X, C, pre = encoding.encoder_forward(f, params, m)
    XH = encoding.project_input(X, params)
    XHd = XH if drop_in is None else XH * drop_in
    S, rcache = dynamics.rollout_forward(XHd, f.dt, f.dd, params, m)
    return X, C, pre, XHd, S, rcache


def forward_backward(params: ParameterSet, batch: Batch, noise: Noise, cfg: RunConfig,
                     grad: bool = True) -> tuple[PassResult, ParameterSet | None]:
    """Loss of one batch and, when ``grad``, its exact gradient w.r.t. every parameter."""
    m, o = cfg.model, cfg.objective
    f = batch.feats
    T, B = batch.mask.shape
    X, C, pre, XHd, S, rcache = _forward_trunk(params, batch, cfg, noise.drop_in)

    tt, bb = np.nonzero(batch.mask)
    M = len(tt)
    S_rows = S[tt, :, bb].transpose(1, 0, 2)          # (K, M, d_s)
    C_rows = C[tt, bb]
    Hdec, alpha, acache = dynamics.aggregate_forward(S_rows, C_rows, params, m)
    drop_dec = None if noise.drop_dec is None else noise.drop_dec[tt, bb]
    Hdec_d = Hdec if drop_dec is None else Hdec * drop_dec
    Hp = encoding.project_decision(Hdec_d, params)

    slates = np.concatenate([batch.target[tt, bb][:, None], noise.negatives], axis=1)
    E = params["poi_emb"][slates]                         # (M, C, d_e)
    logits = np.einsum("md,mcd->mc", Hp, E) + params["poi_bias"][slates]
    ce, bpr, dlogits = objective.slate_loss_and_grad(logits, o.epsilon, o.k_hard, o.margin, o.beta)
    total = ce + o.beta * bpr
    result = PassResult(float(total.sum() / M), float(total.sum()), ce, bpr, M, alpha, Hp, slates, logits, S)
    if not grad:
        return result, None

    g = params.zeros_like()
    dlogits /= M
    np.add.at(g["poi_bias"], slates.ravel(), dlogits.ravel())
    np.add.at(g["poi_emb"], slates.ravel(), (dlogits[..., None] * Hp[:, None, :]).reshape(-1, m.d_e))
    dHp = np.einsum("mc,mcd->md", dlogits, E)
    g["out_W"] += dHp.T @ Hdec_d
    g["out_b"] += dHp.sum(axis=0)
    dHdec = dHp @ params["out_W"]
    if drop_dec is not None:
        dHdec *= drop_dec
    dS_rows, dC_rows = dynamics.aggregate_backward(dHdec, acache, params, g, m)

    dS = np.zeros_like(S)
    dS[tt, :, bb] = dS_rows.transpose(1, 0, 2)
    dC = np.zeros_like(C)
    dC[tt, bb] = dC_rows
    dXHd = dynamics.rollout_backward(dS, rcache, params, g, m)
    dXH = dXHd if noise.drop_in is None else dXHd * noise.drop_in
    flat = dXH.reshape(T * B, -1)
    g["in_W"] += flat.T @ X.reshape(T * B, -1)
    g["in_b"] += flat.sum(axis=0)
    dX = dXH @ params["in_W"]
    encoding.encoder_backward(f, pre, dX, dC, params, g, m)

    if m.variant == "homogeneous":
        tie_transition_grads(g)
    return result, g


def tie_transition_grads(g: ParameterSet) -> None:
    """Sum per-state transition gradients and give every state the total (tied weights)."""
    for name in TRANSITION:
        block = g[name]
        block[...] = block.sum(axis=0, keepdims=True)


def batch_loss(params: ParameterSet, batch: Batch, noise: Noise, cfg: RunConfig) -> float:
    return forward_backward(params, batch, noise, cfg, grad=False)[0].loss


def decision_states(params: ParameterSet, trajs: list[Trajectory], cfg: RunConfig):
    """Eval-mode rollout of each full sequence; returns (h_proj (N, d_e), alpha (K, N))."""
    m = cfg.model
    batch = make_batch(trajs, cfg, train=False)
    _, C, _, _, S, _ = _forward_trunk(params, batch, cfg, None)
    last = batch.lengths - 1
    cols = np.arange(len(trajs))
    S_rows = S[last, :, cols].transpose(1, 0, 2)
    Hdec, alpha, _ = dynamics.aggregate_forward(S_rows, C[last, cols], params, m)
    return encoding.project_decision(Hdec, params), alpha


def score_all(params: ParameterSet, trajs: list[Trajectory], cfg: RunConfig, chunk: int = 512) -> np.ndarray:
    """Scores of every catalog POI for the next step after each sequence, shape (N, |L|)."""
    order = np.argsort([len(t) for t in trajs], kind="stable")
    rows = np.empty((len(trajs), params["poi_bias"].shape[0]))
    for lo in range(0, len(trajs), chunk):
        idx = order[lo:lo + chunk]
        h, _ = decision_states(params, [trajs[i] for i in idx], cfg)
        rows[idx] = h @ params["poi_emb"].T + params["poi_bias"]
    return rows
