"""Full-ranking evaluation, multi-seed reports, paired t-tests, and the latency benchmark."""

from __future__ import annotations

import csv
import io
import json
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import dynamics, model
from .config import RunConfig
from .ingest import DatasetSplit, RankingInstance, Trajectory
from .params import ParameterSet, init_params

METRICS = ("HR@5", "HR@10", "NDCG@5", "NDCG@10", "MRR")


def hr_at_k(rank, k: int):
    return (np.asarray(rank) <= k).astype(np.float64) if np.ndim(rank) else float(rank <= k)


def ndcg_at_k(rank, k: int):
    r = np.asarray(rank, dtype=np.float64)
    out = np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0)
    return out if np.ndim(rank) else float(out)


def mrr(rank):
    out = 1.0 / np.asarray(rank, dtype=np.float64)
    return out if np.ndim(rank) else float(out)


def metric_values(ranks: np.ndarray) -> dict[str, np.ndarray]:
    """Per-instance value of every reported metric."""
    ranks = np.asarray(ranks)
    return {
        "HR@5": hr_at_k(ranks, 5), "HR@10": hr_at_k(ranks, 10),
        "NDCG@5": ndcg_at_k(ranks, 5), "NDCG@10": ndcg_at_k(ranks, 10),
        "MRR": mrr(ranks),
    }


def ranks_from_scores(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """1 + #strictly better + #equal with a smaller catalog index (pessimistic-by-id ties)."""
    scores = np.atleast_2d(scores)
    targets = np.asarray(targets).reshape(-1)
    rows = np.arange(len(targets))
    st = scores[rows, targets][:, None]
    ids = np.arange(scores.shape[1])[None, :]
    better = np.sum(scores > st, axis=1)
    tied_before = np.sum((scores == st) & (ids < targets[:, None]), axis=1)
    return 1 + better + tied_before


def rank_full(params: ParameterSet, instance: RankingInstance, cfg: RunConfig) -> int:
    return int(rank_instances(params, [instance], cfg)[0])


def rank_instances(params: ParameterSet, instances: list[RankingInstance], cfg: RunConfig,
                   chunk: int = 512) -> np.ndarray:
    """Full-catalog rank of each target, computed chunk by chunk to bound memory."""
    ranks = np.empty(len(instances), dtype=np.int64)
    order = np.argsort([len(i.context) for i in instances], kind="stable")
    for lo in range(0, len(instances), chunk):
        idx = order[lo:lo + chunk]
        scores = model.score_all(params, [instances[i].context for i in idx], cfg)
        ranks[idx] = ranks_from_scores(scores, np.array([instances[i].target for i in idx]))
    return ranks


def sampled_ranks(params: ParameterSet, instances: list[RankingInstance], cfg: RunConfig,
                  n_sampled: int, rng: np.random.Generator) -> np.ndarray:
    """Non-protocol speed option: rank against ``n_sampled`` random POIs only."""
    from .objective import sample_negatives

    n_pois = params["poi_bias"].shape[0]
    n_sampled = min(n_sampled, n_pois - 1)
    scores = model.score_all(params, [i.context for i in instances], cfg)
    out = np.empty(len(instances), dtype=np.int64)
    for r, inst in enumerate(instances):
        cand = np.concatenate([[inst.target], sample_negatives(rng, n_pois, inst.target, n_sampled)])
        cand.sort()
        sub = scores[r, cand][None]
        out[r] = ranks_from_scores(sub, [int(np.searchsorted(cand, inst.target))])[0]
    return out


def validation_mrr(params: ParameterSet, split: DatasetSplit, cfg: RunConfig, rng=None) -> float:
    if not split.val:
        return 0.0
    if cfg.optim.val_sampled:
        ranks = sampled_ranks(params, split.val, cfg, cfg.optim.val_sampled, rng or np.random.default_rng(0))
    else:
        ranks = rank_instances(params, split.val, cfg)
    return float(np.mean(1.0 / ranks))


def train_hit_rate(params: ParameterSet, trajs: list[Trajectory], cfg: RunConfig, k: int = 1) -> float:
    """HR@k over every next-step prediction inside the given training sequences."""
    instances = [RankingInstance(t.user_id, t[:i], int(t.poi[i]), int(t.timestamp[i]))
                 for t in trajs for i in range(1, len(t))]
    ranks = rank_instances(params, instances, cfg)
    return float(np.mean(ranks <= k))


# --------------------------------------------------------------------------
# reports


@dataclass
class RankingReport:
    metrics: dict[str, dict]              # name -> {"mean", "std", "per_seed"}
    seeds: list[int]
    n_instances: int
    config_hash: str
    dataset: str = ""
    dataset_fingerprint: str = ""
    variant: str = "full"
    split: str = "test"
    std_defined: bool = True
    tie_break: str = "pessimistic-by-id"
    ranks: dict[str, list[int]] = field(default_factory=dict)   # seed -> per-instance ranks

    def mean(self, name: str) -> float:
        return self.metrics[name]["mean"]

    def per_instance(self, name: str) -> np.ndarray:
        """Metric value per instance, averaged over seeds."""
        vals = [metric_values(np.array(self.ranks[str(s)]))[name] for s in sorted(self.seeds)]
        return np.mean(vals, axis=0)

    def to_json(self) -> str:
        body = {
            "metrics": self.metrics, "seeds": self.seeds, "n_instances": self.n_instances,
            "config_hash": self.config_hash, "dataset": self.dataset,
            "dataset_fingerprint": self.dataset_fingerprint, "variant": self.variant,
            "split": self.split, "std_defined": self.std_defined, "tie_break": self.tie_break,
            "ranks": self.ranks,
        }
        return json.dumps(body, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RankingReport":
        return cls(**json.loads(text))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["dataset", "variant", "split", "seed", "metric", "value"])
        for name in METRICS:
            for seed, value in zip(self.seeds, self.metrics[name]["per_seed"]):
                w.writerow([self.dataset, self.variant, self.split, seed, name, repr(value)])
        return buf.getvalue()


def aggregate_seeds(per_seed: dict[int, dict[str, float]]) -> tuple[dict[str, dict], bool]:
    """Mean and sample std (n-1) per metric, in ascending seed order."""
    seeds = sorted(per_seed)
    out = {}
    for name in METRICS:
        vals = [float(per_seed[s][name]) for s in seeds]
        mean = math.fsum(vals) / len(vals)
        std = statistics.stdev(vals) if len(vals) >= 2 else 0.0
        out[name] = {"mean": mean, "std": std, "per_seed": vals}
    return out, len(seeds) >= 2


def report_from_ranks(ranks_by_seed: dict[int, np.ndarray], cfg: RunConfig, split: str = "test",
                      dataset: str = "", fingerprint: str = "") -> RankingReport:
    per_seed = {}
    for seed, ranks in ranks_by_seed.items():
        vals = metric_values(ranks)
        per_seed[seed] = {name: math.fsum(v) / len(v) for name, v in vals.items()}
    metrics, ok = aggregate_seeds(per_seed)
    seeds = sorted(ranks_by_seed)
    n = len(next(iter(ranks_by_seed.values())))
    return RankingReport(metrics, seeds, n, cfg.hash(), dataset or cfg.data.name, fingerprint,
                         cfg.model.variant, split, ok,
                         ranks={str(s): [int(r) for r in ranks_by_seed[s]] for s in seeds})


def evaluate(params: ParameterSet, split: DatasetSplit, cfg: RunConfig, which: str = "test",
             seed: int = 0, fingerprint: str = "") -> RankingReport:
    instances = {"val": split.val, "test": split.test}[which]
    if not instances:
        raise ValueError(f"split {which!r} has no instances")
    ranks = rank_instances(params, instances, cfg)
    return report_from_ranks({seed: ranks}, cfg, which, fingerprint=fingerprint)


def multi_seed(split: DatasetSplit, cfg: RunConfig, seeds: list[int], fingerprint: str = "",
               checkpoints: dict | None = None) -> RankingReport:
    """Train once per seed, rank the test split, aggregate. Trained checkpoints land in ``checkpoints``."""
    from .training import train

    ranks = {}
    for seed in sorted(seeds):
        ckpt = train(split, cfg, seed)
        if checkpoints is not None:
            checkpoints[seed] = ckpt
        ranks[seed] = rank_instances(ckpt.params, split.test, cfg)
    return report_from_ranks(ranks, cfg, "test", fingerprint=fingerprint)


# --------------------------------------------------------------------------
# significance


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularised incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 1000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-15:
            break
    return h


def betainc(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    return betainc(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class TTestResult:
    t: float
    p: float
    df: int
    mean_diff: float
    degenerate: bool


def paired_ttest(a, b) -> TTestResult:
    """Two-sided paired t-test of ``a - b``; zero-variance differences are flagged degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or len(a) < 2:
        raise ValueError("paired_ttest needs two equal-length vectors with at least 2 pairs")
    d = a - b
    n = len(d)
    mean = math.fsum(d) / n
    sd = statistics.stdev(d.tolist())
    if sd == 0.0:
        if mean == 0.0:
            return TTestResult(0.0, 1.0, n - 1, 0.0, True)
        return TTestResult(math.copysign(math.inf, mean), 0.0, n - 1, mean, True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, t_two_sided_p(t, n - 1), n - 1, mean, False)


# --------------------------------------------------------------------------
# efficiency


def estimate_flops(cfg: RunConfig, n_pois: int, seq_len: int) -> dict[str, int]:
    """Analytic multiply-add count (2 per multiply) for one single-query inference."""
    m = cfg.model
    K, ds = m.K, m.d_s
    per_step_encode = 2 * m.d_spatial * (3 + m.d_dist) + 2 * m.d_x * ds
    per_step_rollout = K * 12 * ds * ds
    aggregate = 0 if m.variant == "uniform_agg" else K * (2 * ds * ds + 2 * ds) + 2 * m.d_context * ds
    project = 2 * K * ds * m.d_e
    scoring = 2 * n_pois * m.d_e
    rollout = seq_len * per_step_rollout
    return {"rollout": rollout,
            "total": seq_len * per_step_encode + rollout + aggregate + project + scoring}


@dataclass
class BenchResult:
    latency_ms: float
    throughput_qps: float
    peak_memory_mb: float
    flops: int
    rollout_flops: int
    catalog_size: int
    seq_len: int
    repetitions: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True, indent=2) + "\n"


def _bench_query(n_pois: int, seq_len: int, seed: int = 0) -> Trajectory:
    from .training import toy_trajectories

    return toy_trajectories(n_pois, 1, seq_len, seed)[0]


def bench(params: ParameterSet, cfg: RunConfig, seq_len: int = 64, repetitions: int = 100,
          warmup: int = 10) -> BenchResult:
    """Batch-size-1 end-to-end latency: rollout plus scoring of the whole catalog."""
    from .training import thread_limit

    n_pois = params["poi_bias"].shape[0]
    traj = _bench_query(n_pois, seq_len)
    cfg = cfg.replace(optim={"max_seq_len": max(cfg.optim.max_seq_len, seq_len)})

    def query():
        h, _ = model.decision_states(params, [traj], cfg)
        return h @ params["poi_emb"].T + params["poi_bias"]

    with thread_limit(cfg.replace(deterministic=True)):
        for _ in range(warmup):
            query()
        times = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            query()
            times.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        for _ in range(repetitions):
            query()
        qps = repetitions / (time.perf_counter() - t0)
        tracemalloc.start()
        query()
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
    flops = estimate_flops(cfg, n_pois, seq_len)
    return BenchResult(1000.0 * statistics.median(times), qps, peak / 2 ** 20, flops["total"],
                       flops["rollout"], n_pois, seq_len, repetitions)


def time_rollout(cfg: RunConfig, seq_len: int, batch: int = 32, repetitions: int = 5, seed: int = 0) -> float:
    """Median wall time (s) of the K-state recurrence alone over a (seq_len, batch) input."""
    m = cfg.model
    params = init_params(m, 8, seed)
    rng = np.random.default_rng(seed)
    XH = rng.normal(size=(seq_len, batch, m.d_s))
    dt = rng.uniform(0, 86400, size=(seq_len, batch))
    dd = rng.uniform(0, 10, size=(seq_len, batch))
    dynamics.rollout_forward(XH, dt, dd, params, m)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        dynamics.rollout_forward(XH, dt, dd, params, m)
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def origin_fit(x, y) -> tuple[float, float]:
    """Least-squares slope through the origin and its (centred) R^2."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    slope = float(x @ y / (x @ x))
    resid = y - slope * x
    tot = np.sum((y - y.mean()) ** 2)
    return slope, float(1.0 - resid @ resid / tot) if tot > 0 else 1.0
