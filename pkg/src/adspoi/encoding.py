"""Per-step input encoding: POI identity, periodic time, spatial movement.

``x_i = [e_{l_i}; p_i; d_i]`` with

* ``p_i = [sin(w_h h), cos(w_h h), sin(w_w w), cos(w_w w), e_slot]``
* ``d_i = W_d [log(1 + dd), e_dist[bucket(dd)], dlat, dlon]``

The first event of a sequence has no predecessor and uses the learned
``spatial_start`` vector in place of ``d_0``. Hours are taken in UTC.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import ModelConfig
from .ingest import CheckIn, Trajectory, haversine
from .params import ParameterSet

OMEGA_HOUR = 2.0 * math.pi / 24.0
OMEGA_WEEK = 2.0 * math.pi / 7.0
N_SLOT = 48
# 1970-01-01 was a Thursday; with Monday = 0 it is day 3.
_EPOCH_WEEKDAY = 3


def hour_of_day(t) -> np.ndarray | float:
    return np.mod(t, 86400) / 3600.0


def day_of_week(t) -> np.ndarray | int:
    """0 = Monday ... 6 = Sunday."""
    return np.mod(np.floor_divide(t, 86400) + _EPOCH_WEEKDAY, 7)


def time_slot(t) -> np.ndarray | int:
    """Hour of day plus 24 on weekends, in ``0..47``."""
    hour = np.floor_divide(np.mod(t, 86400), 3600)
    weekend = day_of_week(t) >= 5
    out = hour + 24 * weekend
    return int(out) if np.ndim(out) == 0 else out.astype(np.int64)


def periodic_features(t) -> np.ndarray:
    """The four sinusoidal components of the temporal encoding, shape (..., 4)."""
    t = np.asarray(t)
    h = hour_of_day(t)
    w = day_of_week(t)
    return np.stack([np.sin(OMEGA_HOUR * h), np.cos(OMEGA_HOUR * h),
                     np.sin(OMEGA_WEEK * w), np.cos(OMEGA_WEEK * w)], axis=-1)


def encode_time(t: int, params: ParameterSet) -> np.ndarray:
    return np.concatenate([periodic_features(t), params["slot_emb"][time_slot(t)]])


def distance_bucket(dd, edges) -> np.ndarray | int:
    """Index of the interval containing ``dd`` for edges ``0 < e_1 < ... < inf``."""
    out = np.searchsorted(np.asarray(edges, dtype=np.float64), dd, side="right")
    return int(out) if np.ndim(out) == 0 else out


def spatial_preimage(prev: CheckIn, cur: CheckIn, params: ParameterSet, edges) -> np.ndarray:
    dd = haversine((prev.lat, prev.lon), (cur.lat, cur.lon))
    return np.concatenate([[math.log1p(dd)], params["dist_emb"][distance_bucket(dd, edges)],
                           [cur.lat - prev.lat, cur.lon - prev.lon]])


def encode_space(prev: CheckIn, cur: CheckIn, params: ParameterSet, edges) -> np.ndarray:
    return params["spatial_W"] @ spatial_preimage(prev, cur, params, edges)


def build_input(i: int, traj: Trajectory, params: ParameterSet, m: ModelConfig) -> np.ndarray:
    """x_i for event ``i`` of ``traj`` (POI block, temporal block, spatial block)."""
    events = traj.events()
    poi = int(traj.poi[i])
    if not 0 <= poi < params["poi_emb"].shape[0]:
        raise KeyError(f"POI index {poi} not in catalog")
    if i == 0:
        d = params["spatial_start"].copy()
    else:
        d = encode_space(events[i - 1], events[i], params, m.bucket_edges)
    return np.concatenate([params["poi_emb"][poi], encode_time(int(traj.timestamp[i]), params), d])


def context_vector(i: int, traj: Trajectory, params: ParameterSet, m: ModelConfig) -> np.ndarray:
    """c_i = [p_i; d_i], the tail of x_i."""
    return build_input(i, traj, params, m)[m.d_e:]


def project_input(x: np.ndarray, params: ParameterSet) -> np.ndarray:
    return x @ params["in_W"].T + params["in_b"]


def project_decision(h: np.ndarray, params: ParameterSet) -> np.ndarray:
    return h @ params["out_W"].T + params["out_b"]


# --------------------------------------------------------------------------
# batched form used by the training engine


@dataclass
class EventFeatures:
    """Parameter-free per-event features, arrays shaped (T, B, ...)."""

    poi: np.ndarray
    slot: np.ndarray
    bucket: np.ndarray
    periodic: np.ndarray
    scalars: np.ndarray  # log(1+dd), dlat, dlon
    has_prev: np.ndarray
    dt: np.ndarray
    dd: np.ndarray


def trajectory_features(traj: Trajectory, edges) -> dict[str, np.ndarray]:
    n = len(traj)
    dt, dd = traj.gaps[:, 0], traj.gaps[:, 1]
    dlat = np.zeros(n)
    dlon = np.zeros(n)
    dlat[1:] = np.diff(traj.lat)
    dlon[1:] = np.diff(traj.lon)
    has_prev = np.ones(n, dtype=bool)
    has_prev[0] = False
    return {
        "poi": traj.poi,
        "slot": time_slot(traj.timestamp),
        "bucket": distance_bucket(dd, edges),
        "periodic": periodic_features(traj.timestamp),
        "scalars": np.stack([np.log1p(dd), dlat, dlon], axis=-1),
        "has_prev": has_prev,
        "dt": dt.astype(np.float64),
        "dd": dd,
    }


def stack_features(per_traj: list[dict[str, np.ndarray]], steps: list[int]) -> EventFeatures:
    """Right-pad the first ``steps[b]`` events of each trajectory into (T, B, ...) arrays."""
    T, B = max(steps), len(per_traj)
    out = {}
    for key, proto in per_traj[0].items():
        arr = np.zeros((T, B) + proto.shape[1:], dtype=proto.dtype)
        for b, feats in enumerate(per_traj):
            arr[:steps[b], b] = feats[key][:steps[b]]
        out[key] = arr
    return EventFeatures(**out)


def encoder_forward(f: EventFeatures, params: ParameterSet, m: ModelConfig):
    """Returns (X, C, cache) with X: (T,B,d_x) and the context C: (T,B,d_context)."""
    slot_vec = params["slot_emb"][f.slot]
    P = np.concatenate([f.periodic, slot_vec], axis=-1)
    pre = np.concatenate([f.scalars[..., :1], params["dist_emb"][f.bucket], f.scalars[..., 1:]], axis=-1)
    moved = pre @ params["spatial_W"].T
    D = np.where(f.has_prev[..., None], moved, params["spatial_start"])
    C = np.concatenate([P, D], axis=-1)
    X = np.concatenate([params["poi_emb"][f.poi], C], axis=-1)
    return X, C, pre


def encoder_backward(f: EventFeatures, pre: np.ndarray, dX: np.ndarray, dC: np.ndarray,
                     params: ParameterSet, grad: ParameterSet, m: ModelConfig) -> None:
    de, dt_ = m.d_e, m.d_time
    dctx = dX[..., de:] + dC
    d_e = dX[..., :de].reshape(-1, de)
    np.add.at(grad["poi_emb"], f.poi.ravel(), d_e)
    d_slot = dctx[..., 4:dt_].reshape(-1, m.d_slot)
    np.add.at(grad["slot_emb"], f.slot.ravel(), d_slot)
    dD = dctx[..., dt_:]
    moved = f.has_prev
    grad["spatial_start"] += dD[~moved].sum(axis=0)
    dD_m = dD[moved]
    pre_m = pre[moved]
    grad["spatial_W"] += dD_m.T @ pre_m
    dpre = dD_m @ params["spatial_W"]
    np.add.at(grad["dist_emb"], f.bucket[moved], dpre[:, 1:1 + m.d_dist])
