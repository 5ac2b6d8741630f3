"""Optimisation: per-trajectory passes, gradients, Adam, the epoch loop, gradient checks."""

from __future__ import annotations

import contextlib
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import model
from .config import RunConfig
from .ingest import DatasetSplit, Trajectory
from .params import BIASES, TRANSITION, ParameterSet, init_params

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@contextlib.contextmanager
def thread_limit(cfg: RunConfig | None = None):
    """Cap BLAS threads: one in deterministic mode, else ``ADSPOI_THREADS`` if set."""
    limit = None
    if cfg is not None and cfg.deterministic:
        limit = 1
    elif os.environ.get("ADSPOI_THREADS"):
        limit = max(1, int(os.environ["ADSPOI_THREADS"]))
    if limit is None:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=limit):
        yield


# --------------------------------------------------------------------------
# single trajectory / batch passes


@dataclass
class StepOutput:
    h_proj: np.ndarray
    slate: np.ndarray
    ce: float
    bpr: float
    loss: float


@dataclass
class TrajectoryPass:
    steps: list[StepOutput]
    loss: float              # summed over steps
    final_states: np.ndarray  # (K, d_s) after the last input step
    alpha: np.ndarray         # (K, n_steps)


def forward_trajectory(params: ParameterSet, traj: Trajectory, rng: np.random.Generator,
                       cfg: RunConfig, mode: str = "train") -> TrajectoryPass:
    """Training-style pass over one trajectory: events 0..n-2 each predict their successor."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    if len(traj) < 2:
        raise ValueError("a training trajectory needs at least two events")
    batch = model.make_batch([traj], cfg, train=True)
    n_pois = params["poi_bias"].shape[0]
    noise = model.sample_noise(rng, batch, n_pois, cfg, train=(mode == "train"))
    res, _ = model.forward_backward(params, batch, noise, cfg, grad=False)
    total = res.ce + cfg.objective.beta * res.bpr
    steps = [StepOutput(res.h_proj[i], res.slates[i], float(res.ce[i]), float(res.bpr[i]), float(total[i]))
             for i in range(res.n_steps)]
    return TrajectoryPass(steps, float(res.loss_sum), res.states[res.n_steps - 1, :, 0].copy(), res.alpha)


def compute_gradients(params: ParameterSet, trajs: list[Trajectory], cfg: RunConfig,
                      rng: np.random.Generator) -> tuple[float, np.ndarray]:
    """Mean per-step loss of the batch and its gradient as a flat vector."""
    batch = model.make_batch(trajs, cfg, train=True)
    noise = model.sample_noise(rng, batch, params["poi_bias"].shape[0], cfg)
    res, grad = model.forward_backward(params, batch, noise, cfg)
    return res.loss, grad.flat


# --------------------------------------------------------------------------
# Adam


@dataclass
class TrainState:
    params: ParameterSet
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    epoch: int = 0
    best_mrr: float | None = None
    best_params: ParameterSet | None = None
    since_improvement: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list[dict] = field(default_factory=list)
    stopped: bool = False

    @classmethod
    def fresh(cls, params: ParameterSet, seed: int) -> "TrainState":
        return cls(params, np.zeros(params.size), np.zeros(params.size),
                   rng=np.random.default_rng([seed, 1]))


def decay_mask(params: ParameterSet) -> np.ndarray:
    """1 for parameters under L2 weight decay, 0 for biases."""
    return (~params.mask(BIASES)).astype(np.float64)


def adam_step(state: TrainState, grads: np.ndarray, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
              wd_mask: np.ndarray | None = None) -> TrainState:
    """Bias-corrected Adam with coupled L2 (``weight_decay * theta`` added to the gradient)."""
    theta = state.params.flat
    g = grads
    if weight_decay:
        g = g + weight_decay * theta * (1.0 if wd_mask is None else wd_mask)
    state.step += 1
    state.m *= beta1
    state.m += (1.0 - beta1) * g
    state.v *= beta2
    state.v += (1.0 - beta2) * (g * g)
    m_hat = state.m / (1.0 - beta1 ** state.step)
    v_hat = state.v / (1.0 - beta2 ** state.step)
    theta -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return state


# --------------------------------------------------------------------------
# epoch loop


@dataclass
class Checkpoint:
    config: RunConfig
    seed: int
    n_pois: int
    params: ParameterSet          # best-validation parameters
    state: TrainState             # live optimiser state for resuming
    history: list[dict]

    @property
    def config_hash(self) -> str:
        return self.config.hash()


def training_sequences(split: DatasetSplit) -> list[Trajectory]:
    return [t for t in split.train if len(t) >= 2]


def run_epoch(state: TrainState, trajs: list[Trajectory], cfg: RunConfig, wd_mask: np.ndarray) -> float:
    o = cfg.optim
    order = state.rng.permutation(len(trajs))
    loss_sum = 0.0
    n_steps = 0
    for lo in range(0, len(order), o.batch_size):
        chunk = [trajs[i] for i in order[lo:lo + o.batch_size]]
        batch = model.make_batch(chunk, cfg, train=True)
        noise = model.sample_noise(state.rng, batch, state.params["poi_bias"].shape[0], cfg)
        res, grad = model.forward_backward(state.params, batch, noise, cfg)
        adam_step(state, grad.flat, o.lr, o.beta1, o.beta2, o.eps, o.weight_decay, wd_mask)
        loss_sum += res.loss_sum
        n_steps += res.n_steps
    return loss_sum / n_steps


def train(split: DatasetSplit, cfg: RunConfig, seed: int,
          val_metric: Callable[[ParameterSet], float] | None = None,
          resume: Checkpoint | None = None,
          on_epoch: Callable[[TrainState], None] | None = None) -> Checkpoint:
    """Mini-batch Adam with early stopping on validation MRR.

    ``val_metric`` overrides the validation score (full-ranking MRR on
    ``split.val`` by default). ``optim.patience == 0`` disables early stopping.
    """
    from .evaluation import validation_mrr

    trajs = training_sequences(split)
    if not trajs:
        raise TrainingError("training set is empty")
    n_pois = len(split.catalog)
    o = cfg.optim
    if resume is not None:
        if resume.config.hash() != cfg.hash():
            raise TrainingError("resume checkpoint was trained under a different config")
        state = resume.state
    else:
        state = TrainState.fresh(init_params(cfg.model, n_pois, seed), seed)
    if val_metric is None:
        def val_metric(p):
            return validation_mrr(p, split, cfg, state.rng)
    wd_mask = decay_mask(state.params)

    with thread_limit(cfg):
        while not state.stopped and state.epoch < o.epochs:
            train_loss = run_epoch(state, trajs, cfg, wd_mask)
            state.epoch += 1
            mrr = float(val_metric(state.params))
            if state.best_mrr is None or mrr > state.best_mrr:
                state.best_mrr = mrr
                state.best_params = state.params.copy()
                state.since_improvement = 0
            else:
                state.since_improvement += 1
            state.history.append({"epoch": state.epoch, "train_loss": train_loss, "val_mrr": mrr})
            log.info("epoch %d loss %.5f val MRR %.5f", state.epoch, train_loss, mrr)
            if not math.isfinite(train_loss):
                raise TrainingError(f"non-finite training loss at epoch {state.epoch}")
            if o.patience and state.since_improvement >= o.patience:
                state.stopped = True
            if on_epoch is not None:
                on_epoch(state)
    best = state.best_params if state.best_params is not None else state.params.copy()
    return Checkpoint(cfg, seed, n_pois, best, state, list(state.history))


# --------------------------------------------------------------------------
# gradient verification


def _tied_group(params: ParameterSet, index: int) -> np.ndarray:
    """Flat indices of every copy of ``index`` when transition blocks are tied across k."""
    name = params.block_of(index)
    if name not in TRANSITION:
        return np.array([index])
    lo, hi = params.offsets[name]
    K = params.shapes[name][0]
    stride = (hi - lo) // K
    return lo + (index - lo) % stride + stride * np.arange(K)


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_index: int
    worst_block: str
    per_block: dict[str, float]
    n_checked: int
    n_params: int
    fd_step: float
    # per checked coordinate: flat index, block name, analytic and numeric derivative
    coords: np.ndarray = field(default=None, repr=False)
    blocks: np.ndarray = field(default=None, repr=False)
    analytic: np.ndarray = field(default=None, repr=False)
    numeric: np.ndarray = field(default=None, repr=False)

    def mutation_errors(self) -> dict[str, float]:
        """Worst relative error the check would report if one block's gradient were doubled."""
        out = {}
        for name in dict.fromkeys(self.blocks.tolist()):
            sel = self.blocks == name
            doubled = self.analytic.copy()
            doubled[sel] *= 2.0
            out[name] = float(relative_error(doubled, self.numeric).max())
        return out

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= 1e-4


# denominator floor for coordinates whose true gradient is ~0
REL_FLOOR = 1e-7


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return np.abs(analytic - numeric) / scale


def toy_trajectories(n_pois: int, n_traj: int, length: int, seed: int) -> list[Trajectory]:
    """Random short trajectories around Manhattan with realistic gaps."""
    rng = np.random.default_rng(seed)
    out = []
    for u in range(n_traj):
        poi = [int(rng.integers(n_pois))]
        while len(poi) < length:
            nxt = int(rng.integers(n_pois))
            if nxt != poi[-1]:
                poi.append(nxt)
        t = 1_333_238_400 + np.cumsum(rng.integers(600, 3 * 86400, size=length))
        out.append(Trajectory(u, poi, t, 40.75 + rng.normal(0, 0.05, length), -73.98 + rng.normal(0, 0.05, length)))
    return out


def grad_check(cfg: RunConfig, seed: int = 0, fd_step: float = 1e-4, n_pois: int = 40,
               trajs: list[Trajectory] | None = None, corrupt: str | None = None,
               max_full: int = 5000) -> GradCheckReport:
    """Compare the analytic gradient with central differences.

    Every coordinate is checked up to ``max_full`` parameters, otherwise a
    random 10% subsample. ``corrupt`` doubles one block of the analytic
    gradient (mutation testing of the harness itself).
    """
    if trajs is None:
        trajs = toy_trajectories(n_pois, 3, 5, seed)
    params = init_params(cfg.model, n_pois, seed)
    # move off the symmetric init so every block carries signal
    params.flat += np.random.default_rng([seed, 7]).normal(0.0, 0.1, params.size)
    tied = cfg.model.variant == "homogeneous"
    if tied:
        # one shared transition parameter: a finite-difference move shifts every copy at once
        for name in TRANSITION:
            params[name] = params[name][:1]
    batch = model.make_batch(trajs, cfg, train=True)
    noise = model.sample_noise(np.random.default_rng([seed, 11]), batch, n_pois, cfg)
    _, grad = model.forward_backward(params, batch, noise, cfg)
    analytic = grad.flat.copy()
    if corrupt is not None:
        lo, hi = grad.offsets[corrupt]
        analytic[lo:hi] *= 2.0
    P = params.size
    if P <= max_full:
        coords = np.arange(P)
    else:
        coords = np.sort(np.random.default_rng([seed, 13]).choice(P, size=P // 10, replace=False))
    numeric = np.empty(len(coords))
    theta = params.flat
    for j, i in enumerate(coords):
        group = _tied_group(params, int(i)) if tied else np.array([i])
        old = theta[group].copy()
        theta[group] = old + fd_step
        up = model.batch_loss(params, batch, noise, cfg)
        theta[group] = old - fd_step
        down = model.batch_loss(params, batch, noise, cfg)
        theta[group] = old
        numeric[j] = (up - down) / (2.0 * fd_step)
    rel = relative_error(analytic[coords], numeric)
    blocks = np.array([params.block_of(int(i)) for i in coords])
    per_block: dict[str, float] = {}
    for name, r in zip(blocks.tolist(), rel):
        per_block[name] = max(per_block.get(name, 0.0), float(r))
    worst = int(np.argmax(rel))
    return GradCheckReport(float(rel[worst]), int(coords[worst]), str(blocks[worst]), per_block, len(coords), P,
                           fd_step, coords, blocks, analytic[coords].copy(), numeric)
