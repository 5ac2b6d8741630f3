"""Synthetic check-ins with several behavioural regimes.

Each regime owns a disjoint POI id range inside its own spatial cluster, an
hour-of-day window, and a transition kernel over its POIs. A user's day is
a sequence of visits: each regime in turn contributes ``visits_per_day``
events inside its window, and the next POI of a regime is drawn from the
kernel row of the last POI the user visited *in that regime*, so every
regime carries its own memory across interruptions by the others.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ConfigError
from .ingest import CheckIn

BASE_EPOCH = 1_333_238_400  # 2012-04-01 00:00 UTC


@dataclass
class Regime:
    name: str
    first_poi: int
    n_pois: int
    hours: tuple[float, float]            # active window [start, end) in hours of day
    visits_per_day: int
    center: tuple[float, float] = (40.75, -73.98)
    radius_km: float = 3.0
    kernel: str = "random"                # "random" or "cyclic"
    successors: int = 3
    concentration: float = 1.0

    @property
    def poi_range(self) -> range:
        return range(self.first_poi, self.first_poi + self.n_pois)


@dataclass
class SynthConfig:
    n_users: int
    days: int
    regimes: list[Regime]
    # probability that a scheduled visit is skipped, which jitters trajectories between users
    skip_prob: float = 0.0
    start_jitter_days: int = 7

    @classmethod
    def from_dict(cls, raw: dict) -> "SynthConfig":
        raw = dict(raw)
        regimes = []
        for r in raw.pop("regimes", []):
            r = dict(r)
            for key in ("hours", "center"):
                if key in r:
                    r[key] = tuple(r[key])
            regimes.append(Regime(**r))
        return cls(regimes=regimes, **raw)

    @property
    def n_pois(self) -> int:
        return sum(r.n_pois for r in self.regimes)

    def validate(self) -> None:
        if self.n_users < 1 or self.days < 1:
            raise ConfigError("synth: n_users and days must be >= 1")
        if not self.regimes:
            raise ConfigError("synth.regimes: need at least one regime")
        if not 0.0 <= self.skip_prob < 1.0:
            raise ConfigError("synth.skip_prob: must lie in [0, 1)")
        seen: set[int] = set()
        for r in self.regimes:
            where = f"synth.regimes[{r.name}]"
            if r.n_pois < 2:
                raise ConfigError(f"{where}.n_pois: need at least 2 POIs")
            ids = set(r.poi_range)
            if ids & seen:
                raise ConfigError(f"{where}: POI id range overlaps another regime")
            seen |= ids
            lo, hi = r.hours
            if not 0 <= lo < hi <= 24:
                raise ConfigError(f"{where}.hours: need 0 <= start < end <= 24")
            if r.visits_per_day < 1:
                raise ConfigError(f"{where}.visits_per_day: must be >= 1")
            if r.kernel not in ("random", "cyclic"):
                raise ConfigError(f"{where}.kernel: must be 'random' or 'cyclic'")
            if r.kernel == "random" and not 1 <= r.successors < r.n_pois:
                raise ConfigError(f"{where}.successors: must lie in [1, n_pois)")
        windows = sorted(r.hours for r in self.regimes)
        for (_, end), (start, _) in zip(windows, windows[1:]):
            if start < end:
                raise ConfigError("synth.regimes: hour windows must not overlap")


def regime_kernel(regime: Regime, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic (n, n) matrix over the regime's local POI indices, zero diagonal."""
    n = regime.n_pois
    P = np.zeros((n, n))
    if regime.kernel == "cyclic":
        P[np.arange(n), (np.arange(n) + 1) % n] = 1.0
        return P
    for i in range(n):
        others = np.delete(np.arange(n), i)
        succ = rng.choice(others, size=regime.successors, replace=False)
        P[i, succ] = rng.dirichlet(np.full(regime.successors, regime.concentration))
    return P


def poi_coordinates(regime: Regime, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in a disc around the regime centre, (n, 2) lat/lon."""
    r = regime.radius_km * np.sqrt(rng.random(regime.n_pois))
    theta = rng.uniform(0, 2 * math.pi, regime.n_pois)
    lat0, lon0 = regime.center
    dlat = r * np.cos(theta) / 111.195
    dlon = r * np.sin(theta) / (111.195 * math.cos(math.radians(lat0)))
    return np.stack([lat0 + dlat, lon0 + dlon], axis=1)


@dataclass
class SynthWorld:
    config: SynthConfig
    kernels: list[np.ndarray]
    coords: list[np.ndarray]
    checkins: list[CheckIn] = field(default_factory=list)


def build_world(cfg: SynthConfig, seed: int) -> SynthWorld:
    cfg.validate()
    rng = np.random.default_rng([seed, 0])
    kernels = [regime_kernel(r, rng) for r in cfg.regimes]
    coords = [poi_coordinates(r, rng) for r in cfg.regimes]
    return SynthWorld(cfg, kernels, coords)


def synth_generate(cfg: SynthConfig, seed: int) -> list[CheckIn]:
    """Deterministic check-ins for ``cfg`` and ``seed``, sorted by (user, time)."""
    return generate_world(cfg, seed).checkins


def generate_world(cfg: SynthConfig, seed: int) -> SynthWorld:
    world = build_world(cfg, seed)
    order = sorted(range(len(cfg.regimes)), key=lambda j: cfg.regimes[j].hours)
    out: list[CheckIn] = []
    for user in range(cfg.n_users):
        rng = np.random.default_rng([seed, 1, user])
        last = [int(rng.integers(r.n_pois)) for r in cfg.regimes]
        day0 = int(rng.integers(cfg.start_jitter_days)) if cfg.start_jitter_days > 0 else 0
        for day in range(cfg.days):
            base = BASE_EPOCH + (day0 + day) * 86400
            for j in order:
                reg = cfg.regimes[j]
                lo, hi = reg.hours
                # distinct whole seconds inside the window, one per visit
                span = int((hi - lo) * 3600)
                offs = np.sort(rng.choice(span, size=reg.visits_per_day, replace=False))
                for off in offs:
                    if cfg.skip_prob and rng.random() < cfg.skip_prob:
                        continue
                    nxt = int(rng.choice(reg.n_pois, p=world.kernels[j][last[j]]))
                    last[j] = nxt
                    lat, lon = world.coords[j][nxt]
                    out.append(CheckIn(user, reg.first_poi + nxt, base + int(lo * 3600) + int(off),
                                       float(lat), float(lon)))
    world.checkins = out
    return world


def regime_transition_counts(checkins: list[CheckIn], cfg: SynthConfig) -> list[np.ndarray]:
    """Empirical within-regime transition counts (last-in-regime -> next-in-regime)."""
    counts = [np.zeros((r.n_pois, r.n_pois)) for r in cfg.regimes]
    owner = {}
    for j, r in enumerate(cfg.regimes):
        for p in r.poi_range:
            owner[p] = j
    last: dict[tuple[int, int], int] = {}
    for ci in checkins:
        j = owner[ci.poi_id]
        local = ci.poi_id - cfg.regimes[j].first_poi
        key = (ci.user_id, j)
        if key in last:
            counts[j][last[key], local] += 1
        last[key] = local
    return counts


def two_regime_config(n_users: int = 200, days: int = 6) -> SynthConfig:
    """Default desk-scale world: a dense daytime routine and a sparse evening regime."""
    return SynthConfig(
        n_users=n_users,
        days=days,
        regimes=[
            Regime("routine", 0, 20, (8.0, 18.0), 4, center=(40.75, -73.99), radius_km=2.0,
                   kernel="random", successors=2, concentration=5.0),
            Regime("leisure", 20, 20, (19.0, 23.0), 2, center=(40.68, -73.95), radius_km=4.0,
                   kernel="random", successors=2, concentration=5.0),
        ],
    )
