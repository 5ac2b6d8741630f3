"""Checkpoint files: config hash, shape table, best and live parameters, Adam state, history."""

from __future__ import annotations

import numpy as np

from . import config as config_mod
from . import container
from .config import RunConfig
from .params import ParameterSet
from .training import Checkpoint, TrainState

MAGIC = b"ADSPOICK"


class CheckpointError(ValueError):
    pass


def _to_bytes(ckpt: Checkpoint) -> bytes:
    st = ckpt.state
    header = {
        "config": ckpt.config.to_dict(),
        "config_hash": ckpt.config.hash(),
        "seed": ckpt.seed,
        "n_pois": ckpt.n_pois,
        "shapes": [[name, list(shape)] for name, shape in ckpt.params.shapes.items()],
        "step": st.step,
        "epoch": st.epoch,
        "best_mrr": st.best_mrr,
        "since_improvement": st.since_improvement,
        "stopped": st.stopped,
        "rng": st.rng.bit_generator.state,
        "history": ckpt.history,
    }
    arrays = {
        "best": ckpt.params.flat,
        "current": st.params.flat,
        "adam_m": st.m,
        "adam_v": st.v,
    }
    return container.encode(MAGIC, header, arrays)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    container.atomic_write(path, _to_bytes(ckpt))


def load_checkpoint(path, cfg: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``cfg`` given, refuse one trained under a different config."""
    try:
        header, arrays = container.read(path, MAGIC)
    except container.ContainerError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    try:
        stored = config_mod.from_dict(header["config"])
    except config_mod.ConfigError as exc:
        raise CheckpointError(f"{path}: embedded config invalid: {exc}") from exc
    if stored.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: embedded config does not match its recorded hash")
    if cfg is not None and cfg.hash() != header["config_hash"]:
        raise CheckpointError(
            f"config hash mismatch: checkpoint {header['config_hash']} vs config {cfg.hash()}")
    shapes = {name: tuple(shape) for name, shape in header["shapes"]}
    best = ParameterSet(shapes, arrays["best"].copy())
    current = ParameterSet(shapes, arrays["current"].copy())
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    state = TrainState(
        params=current, m=arrays["adam_m"].copy(), v=arrays["adam_v"].copy(),
        step=header["step"], epoch=header["epoch"], best_mrr=header["best_mrr"],
        best_params=best.copy() if header["best_mrr"] is not None else None,
        since_improvement=header["since_improvement"], rng=rng,
        history=list(header["history"]), stopped=header["stopped"],
    )
    return Checkpoint(stored, header["seed"], header["n_pois"], best, state, list(header["history"]))
