"""Catalog and scenario generation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ServerParams, SystemConfig, VideoFile

TABLE_I_ALPHA = (
    18.2298, 24.0552, 11.8750, 17.0526, 26.1912, 23.9059,
    27.006, 21.3812, 9.9106, 24.9589, 26.5288, 21.8067,
)
TABLE_I_BETA = 0.01


def default_tableI() -> list[ServerParams]:
    """The twelve reference servers (rate alpha in 1/s, shift beta in s)."""
    return [ServerParams(a, TABLE_I_BETA) for a in TABLE_I_ALPHA]


@dataclass(frozen=True)
class RateRule:
    """Piecewise arrival rates: file ``i`` falls in the bucket of ``i / r``.

    ``breaks`` are fractions in (0, 1) splitting the catalog; ``rates`` has one
    more entry than ``breaks``.  The default gives the first half of the files
    0.002/s and the second half 0.003/s.
    """

    rates: tuple[float, ...] = (0.002, 0.003)
    breaks: tuple[float, ...] = (0.5,)

    def __post_init__(self):
        if len(self.rates) != len(self.breaks) + 1:
            raise ValueError("need one more rate than break")
        if any(r < 0 for r in self.rates):
            raise ValueError("rates must be nonnegative")
        if list(self.breaks) != sorted(self.breaks) or any(not 0 < b < 1 for b in self.breaks):
            raise ValueError("breaks must be increasing fractions in (0, 1)")

    def assign(self, r: int) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.breaks) * r, np.arange(r), side="right")
        return np.asarray(self.rates)[idx]


@dataclass(frozen=True)
class CatalogSpec:
    r: int
    n: int = 10
    k: int = 4
    tau: float = 4.0
    shape: float = 2.0
    scale: float = 300.0
    fixed_size: float | None = None
    max_size: float | None = None
    rates: RateRule = RateRule()

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("need at least one file")
        if not 1 <= self.k <= self.n:
            raise ValueError("need 1 <= k <= n")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.fixed_size is None:
            if not self.shape > 1:
                raise ValueError("Pareto shape must exceed 1 for a finite mean")
            if not self.scale > 0:
                raise ValueError("Pareto scale must be positive")
        elif not self.fixed_size > 0:
            raise ValueError("fixed size must be positive")


def sample_sizes(spec: CatalogSpec, rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Video durations in seconds."""
    count = spec.r if count is None else count
    if spec.fixed_size is not None:
        return np.full(count, float(spec.fixed_size))
    sizes = spec.scale * (1.0 + rng.pareto(spec.shape, count))
    if spec.max_size is not None:
        sizes = np.minimum(sizes, spec.max_size)
    return sizes


def generate_catalog(spec: CatalogSpec, seed: int) -> list[VideoFile]:
    rng = np.random.default_rng(seed)
    sizes = sample_sizes(spec, rng)
    rates = spec.rates.assign(spec.r)
    # tiny guard so that 600/4 stays 150 despite rounding in the draw
    segs = [max(1, math.ceil(s / spec.tau - 1e-9)) for s in sizes]
    return [VideoFile(L, spec.k, spec.n, float(lam), id=str(i)) for i, (L, lam) in enumerate(zip(segs, rates))]


def desk_config(r: int = 50, seed: int = 0, *, n: int = 10, k: int = 4, tau: float = 4.0, ds: float = 20.0,
                servers: list[ServerParams] | None = None, max_size: float | None = 7200.0,
                rate_scale: float = 1.0, x: float = 150.0, theta: float = 0.5) -> SystemConfig:
    """Scaled-down reference scenario: the twelve default servers, Pareto lengths."""
    servers = default_tableI() if servers is None else servers
    spec = CatalogSpec(r=r, n=n, k=k, tau=tau, max_size=max_size)
    files = generate_catalog(spec, seed)
    cfg = SystemConfig(servers=tuple(servers), files=tuple(files), tau=tau, ds=ds, x=x, theta=theta)
    return cfg.scale_rates(rate_scale) if rate_scale != 1.0 else cfg


def small_instance(seed: int, m: int = 4, r: int = 5, *, n: int = 3, k: int = 2, seg_range=(2, 10),
                   tau: float = 1.0, ds: float = 1.0, rho_max: float = 0.7, x: float = 5.0,
                   theta: float = 0.5):
    """Random small cluster with a random feasible access matrix.

    Arrival rates are scaled so the busiest server sits at a random
    utilisation in ``[0.5, 1) * rho_max``.  Returns ``(cfg, pi, S)``.
    """
    from .analysis import server_loads
    from .model import placement_mask, project_access, random_placement

    rng = np.random.default_rng(seed)
    servers = tuple(ServerParams(float(a), 0.01) for a in rng.uniform(8.0, 25.0, m))
    lo, hi = seg_range
    files = tuple(
        VideoFile(int(rng.integers(lo, hi + 1)), k, n, float(rng.uniform(0.5, 1.5)), id=str(i)) for i in range(r)
    )
    cfg = SystemConfig(servers=servers, files=files, tau=tau, ds=ds, x=x, theta=theta)
    S = random_placement(cfg, rng)
    mask = placement_mask(S, m)
    pi = project_access(np.where(mask, rng.uniform(0.2, 1.0, (r, m)), 0.0), S, cfg.k)
    _, rho = server_loads(cfg, pi)
    target = rho_max * rng.uniform(0.5, 1.0)
    return cfg.scale_rates(target / rho.max()), pi, S
