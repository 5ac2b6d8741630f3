"""Learnable parameters: shape table, flat/named views, initialisation."""

from __future__ import annotations

import math

import numpy as np

from .config import ModelConfig

# Per-sub-state transition blocks; the leading axis indexes k.
TRANSITION = ("Wz", "Wr", "Wc", "Uz", "Ur", "Uc", "bz", "br", "bc", "raw_lambda", "raw_mu")
SCORER = ("g_Ws", "g_Wc", "g_b", "g_v")
# Exempt from weight decay.
BIASES = ("poi_bias", "in_b", "bz", "br", "bc", "g_b", "out_b")


def param_shapes(m: ModelConfig, n_pois: int) -> dict[str, tuple[int, ...]]:
    """Ordered shape table. Scorer parameters exist only when aggregation is learned."""
    K, ds = m.K, m.d_s
    shapes = {
        # encoder
        "poi_emb": (n_pois, m.d_e),
        "poi_bias": (n_pois,),
        "slot_emb": (m.n_slot, m.d_slot),
        "dist_emb": (m.n_bucket, m.d_dist),
        "spatial_W": (m.d_spatial, 3 + m.d_dist),
        "spatial_start": (m.d_spatial,),
        "in_W": (ds, m.d_x),
        "in_b": (ds,),
        # transitions
        "Wz": (K, ds, ds), "Wr": (K, ds, ds), "Wc": (K, ds, ds),
        "Uz": (K, ds, ds), "Ur": (K, ds, ds), "Uc": (K, ds, ds),
        "bz": (K, ds), "br": (K, ds), "bc": (K, ds),
        "raw_lambda": (K,),
        "raw_mu": (K,),
    }
    if m.variant != "uniform_agg":
        shapes.update({"g_Ws": (ds, ds), "g_Wc": (ds, m.d_context), "g_b": (ds,), "g_v": (ds,)})
    shapes.update({"out_W": (m.d_e, K * ds), "out_b": (m.d_e,)})
    return shapes


class ParameterSet:
    """All parameters in one contiguous float64 vector; ``ps[name]`` is a reshaped view into it."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], flat: np.ndarray | None = None):
        self.shapes = {k: tuple(v) for k, v in shapes.items()}
        self.offsets: dict[str, tuple[int, int]] = {}
        pos = 0
        for name, shape in self.shapes.items():
            n = math.prod(shape)
            self.offsets[name] = (pos, pos + n)
            pos += n
        if flat is None:
            flat = np.zeros(pos)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (pos,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({pos},)")
        self.flat = flat

    @property
    def size(self) -> int:
        return self.flat.size

    def names(self) -> list[str]:
        return list(self.shapes)

    def __contains__(self, name: str) -> bool:
        return name in self.shapes

    def __getitem__(self, name: str) -> np.ndarray:
        lo, hi = self.offsets[name]
        return self.flat[lo:hi].reshape(self.shapes[name])

    def __setitem__(self, name: str, value) -> None:
        self[name][...] = value

    def items(self):
        for name in self.shapes:
            yield name, self[name]

    def copy(self) -> "ParameterSet":
        return ParameterSet(self.shapes, self.flat.copy())

    def zeros_like(self) -> "ParameterSet":
        return ParameterSet(self.shapes)

    def mask(self, names) -> np.ndarray:
        """Boolean flat mask selecting the named blocks."""
        out = np.zeros(self.size, dtype=bool)
        for name in names:
            if name in self.offsets:
                lo, hi = self.offsets[name]
                out[lo:hi] = True
        return out

    def block_of(self, index: int) -> str:
        for name, (lo, hi) in self.offsets.items():
            if lo <= index < hi:
                return name
        raise IndexError(index)


def count_params(m: ModelConfig, n_pois: int) -> int:
    return sum(math.prod(s) for s in param_shapes(m, n_pois).values())


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


def init_params(m: ModelConfig, n_pois: int, seed: int) -> ParameterSet:
    """Embeddings ~ N(0, 0.02); weights ~ U(+-1/sqrt(fan_in)); biases zero.

    Decay raws are set so softplus(raw_k) = decay_init + decay_stagger * k;
    the homogeneous variant starts all K copies identical (no stagger).
    """
    ps = ParameterSet(param_shapes(m, n_pois))
    rng = np.random.default_rng(seed)
    homogeneous = m.variant == "homogeneous"
    for name, view in ps.items():
        shape = view.shape
        if name in ("poi_emb", "slot_emb", "dist_emb", "spatial_start"):
            view[...] = rng.normal(0.0, 0.02, size=shape)
        elif name in BIASES:
            continue
        elif name in ("raw_lambda", "raw_mu"):
            stagger = 0.0 if homogeneous else m.decay_stagger
            view[...] = [inverse_softplus(m.decay_init + stagger * k) for k in range(m.K)]
        else:
            fan_in = shape[-1] if name != "g_v" else shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            if homogeneous and name in TRANSITION:
                view[...] = rng.uniform(-bound, bound, size=shape[1:])[None]
            else:
                view[...] = rng.uniform(-bound, bound, size=shape)
    return ps
