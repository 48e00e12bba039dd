"""Domain types for the storage cluster and feasibility helpers.

A cluster has ``m`` servers whose per-chunk service time is a shifted
exponential (shift ``beta``, rate ``alpha``).  Each video file ``i`` is split
into ``L_i`` segments; every segment is MDS-coded into ``n_i`` chunks of
which any ``k_i`` suffice.  A request for file ``i`` is sent to ``k_i`` of the
``n_i`` servers holding the file, server ``j`` being picked with marginal
probability ``pi[i, j]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

ROW_SUM_TOL = 1e-9

Placement = tuple[tuple[int, ...], ...]


class ConfigError(ValueError):
    """Invalid system description (bad parameters or malformed config text)."""


class InfeasibleError(ValueError):
    """A point or initialisation violates a feasibility constraint.

    ``category`` is a short machine tag, ``detail`` a human-readable message.
    """

    def __init__(self, category: str, detail: str):
        super().__init__(f"{category}: {detail}")
        self.category = category
        self.detail = detail


@dataclass(frozen=True)
class ServerParams:
    alpha: float
    beta: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"server rate alpha must be > 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ConfigError(f"server shift beta must be >= 0, got {self.beta}")

    @property
    def mean_service(self) -> float:
        return self.beta + 1.0 / self.alpha


@dataclass(frozen=True)
class VideoFile:
    segments: int
    k: int
    n: int
    rate: float
    cached: Mapping[int, int] = field(default_factory=dict)
    id: str = ""

    def __post_init__(self):
        if self.segments < 1:
            raise ConfigError(f"file {self.id!r}: segments must be >= 1")
        if not 1 <= self.k <= self.n:
            raise ConfigError(f"file {self.id!r}: need 1 <= k <= n, got k={self.k} n={self.n}")
        if not self.rate >= 0:
            raise ConfigError(f"file {self.id!r}: arrival rate must be >= 0")
        for j, c in self.cached.items():
            if not 0 <= c <= self.segments:
                raise ConfigError(
                    f"file {self.id!r}: cached prefix {c} on server {j} outside [0, {self.segments}]"
                )

    def cached_on(self, j: int) -> int:
        return int(self.cached.get(j, 0))


@dataclass(frozen=True)
class SystemConfig:
    servers: tuple[ServerParams, ...]
    files: tuple[VideoFile, ...]
    tau: float
    ds: float
    x: float = 0.0
    theta: float = 0.5
    y: int = 1

    def __post_init__(self):
        object.__setattr__(self, "servers", tuple(self.servers))
        object.__setattr__(self, "files", tuple(self.files))
        if not self.servers:
            raise ConfigError("at least one server is required")
        if not self.files:
            raise ConfigError("at least one file is required")
        m = len(self.servers)
        for f in self.files:
            if f.n > m:
                raise ConfigError(f"file {f.id!r}: n={f.n} exceeds server count {m}")
            for j in f.cached:
                if not 0 <= j < m:
                    raise ConfigError(f"file {f.id!r}: cache entry for unknown server {j}")
        if not self.tau > 0:
            raise ConfigError("tau must be > 0")
        if not self.ds >= 0:
            raise ConfigError("ds must be >= 0")
        if not self.x >= 0:
            raise ConfigError("x must be >= 0")
        if not 0 <= self.theta <= 1:
            raise ConfigError("theta must lie in [0, 1]")
        if int(self.y) != self.y or self.y < 1:
            raise ConfigError("y (streams per server) must be a positive integer")

    @property
    def m(self) -> int:
        return len(self.servers)

    @property
    def r(self) -> int:
        return len(self.files)

    @property
    def alpha(self) -> np.ndarray:
        return np.array([s.alpha for s in self.servers], dtype=float)

    @property
    def beta(self) -> np.ndarray:
        return np.array([s.beta for s in self.servers], dtype=float)

    @property
    def rates(self) -> np.ndarray:
        return np.array([f.rate for f in self.files], dtype=float)

    @property
    def segments(self) -> np.ndarray:
        return np.array([f.segments for f in self.files], dtype=int)

    @property
    def k(self) -> np.ndarray:
        return np.array([f.k for f in self.files], dtype=int)

    @property
    def n(self) -> np.ndarray:
        return np.array([f.n for f in self.files], dtype=int)

    def with_(self, **changes) -> "SystemConfig":
        return replace(self, **changes)

    def scale_rates(self, factor: float) -> "SystemConfig":
        return replace(self, files=tuple(replace(f, rate=f.rate * factor) for f in self.files))


@dataclass(frozen=True)
class AuxVars:
    """Per-file bound parameters: ``t_mean`` for the mean bound, ``t_tail`` for the tail."""

    t_mean: np.ndarray
    t_tail: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "t_mean", np.array(self.t_mean, dtype=float))
        object.__setattr__(self, "t_tail", np.array(self.t_tail, dtype=float))
        if self.t_mean.shape != self.t_tail.shape:
            raise ConfigError("t_mean and t_tail must have the same length")

    @classmethod
    def constant(cls, r: int, value: float) -> "AuxVars":
        return cls(np.full(r, value), np.full(r, value))

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.t_mean, self.t_tail])

    @classmethod
    def from_vector(cls, v) -> "AuxVars":
        v = np.asarray(v, dtype=float)
        r = v.size // 2
        return cls(v[:r], v[r:])


def make_placement(sets: Iterable[Iterable[int]]) -> Placement:
    return tuple(tuple(sorted(int(j) for j in s)) for s in sets)


def placement_mask(S: Placement, m: int) -> np.ndarray:
    mask = np.zeros((len(S), m), dtype=bool)
    for i, s in enumerate(S):
        mask[i, list(s)] = True
    return mask


def validate_config(cfg: SystemConfig, S: Placement, pi: np.ndarray) -> list[str]:
    """Return human-readable violations of the placement/access invariants."""
    out = []
    pi = np.asarray(pi, dtype=float)
    if pi.shape != (cfg.r, cfg.m):
        return [f"access matrix shape {pi.shape} != ({cfg.r}, {cfg.m})"]
    if len(S) != cfg.r:
        return [f"placement has {len(S)} files, config has {cfg.r}"]
    for i, f in enumerate(cfg.files):
        s = S[i]
        if len(set(s)) != len(s):
            out.append(f"file {i}: placement has duplicate servers {s}")
        if len(set(s)) != f.n:
            out.append(f"file {i}: placement size {len(set(s))} != n={f.n}")
        for j in s:
            if not 0 <= j < cfg.m:
                out.append(f"file {i}, server {j}: placement index out of range")
        for j in range(cfg.m):
            v = pi[i, j]
            if v < -ROW_SUM_TOL or v > 1 + ROW_SUM_TOL:
                out.append(f"file {i}, server {j}: probability {v:.6g} outside [0, 1]")
            if j not in s and abs(v) > ROW_SUM_TOL:
                out.append(f"file {i}, server {j}: support outside placement (pi={v:.6g})")
        total = pi[i].sum()
        if abs(total - f.k) > ROW_SUM_TOL:
            out.append(f"file {i}: row sum {total:.12g} != k={f.k}")
    return out


def lambda_agg(cfg: SystemConfig, pi: np.ndarray) -> np.ndarray:
    """Aggregate request rate arriving at each server."""
    return cfg.rates @ np.asarray(pi, dtype=float)


def utilization(cfg: SystemConfig, pi: np.ndarray) -> np.ndarray:
    """Per-server load ``rho_j``; values >= 1 mean the queue is unstable."""
    pi = np.asarray(pi, dtype=float)
    work = cfg.rates * cfg.segments
    return (work @ pi) * (cfg.beta + 1.0 / cfg.alpha)


def unstable_servers(cfg: SystemConfig, pi: np.ndarray) -> list[int]:
    return [int(j) for j in np.flatnonzero(utilization(cfg, pi) >= 1.0)]


def project_capped_simplex(v: np.ndarray, k: float, tol: float = 1e-12) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{0 <= p <= 1, sum(p) = k}``.

    Bisection on the shift ``mu`` in ``clip(v - mu, 0, 1)``; the final shift is
    recomputed from the active set so the sum is exact to rounding.
    """
    v = np.asarray(v, dtype=float)
    if k > v.size + 1e-12 or k < 0:
        raise InfeasibleError("projection", f"cannot place mass {k} on {v.size} coordinates capped at 1")
    if v.size == 0:
        return v.copy()
    return _project_rows(v[None, :], np.ones((1, v.size), bool), np.array([k], float), tol)[0]


def _project_rows(V: np.ndarray, mask: np.ndarray, k: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Row-wise capped-simplex projection restricted to ``mask`` (batched)."""
    W = np.where(mask, V, -np.inf)
    lo = np.where(mask, V, np.inf).min(axis=1) - 1.0
    hi = W.max(axis=1)
    for _ in range(200):
        mu = 0.5 * (lo + hi)
        over = np.clip(W - mu[:, None], 0.0, 1.0).sum(axis=1) > k
        lo = np.where(over, mu, lo)
        hi = np.where(over, hi, mu)
        if np.all(hi - lo < tol * np.maximum(1.0, np.abs(hi))):
            break
    mu = 0.5 * (lo + hi)
    D = W - mu[:, None]
    free = mask & (D > 0) & (D < 1)
    n_free = free.sum(axis=1)
    n_up = (mask & (D >= 1)).sum(axis=1)
    exact = np.where(free, V, 0.0).sum(axis=1) - (k - n_up)
    mu = np.where(n_free > 0, exact / np.maximum(n_free, 1), mu)
    return np.where(mask, np.clip(W - mu[:, None], 0.0, 1.0), 0.0)


def project_access(pi_raw: np.ndarray, S: Placement, k: Sequence[int]) -> np.ndarray:
    """Closest feasible access matrix: row-wise capped-simplex projection on ``S_i``."""
    pi_raw = np.asarray(pi_raw, dtype=float)
    k = np.asarray(k, dtype=float)
    mask = placement_mask(S, pi_raw.shape[1])
    sizes = mask.sum(axis=1)
    bad = np.flatnonzero(k > sizes)
    if bad.size:
        i = int(bad[0])
        raise InfeasibleError("projection", f"file {i}: k={int(k[i])} exceeds |S_i|={int(sizes[i])}")
    return _project_rows(pi_raw, mask, k)


def equal_access(cfg: SystemConfig, S: Placement) -> np.ndarray:
    """``pi = k/n`` on every placed server."""
    pi = np.zeros((cfg.r, cfg.m))
    for i, (f, s) in enumerate(zip(cfg.files, S)):
        pi[i, list(s)] = f.k / f.n
    return pi


def random_placement(cfg: SystemConfig, rng: np.random.Generator) -> Placement:
    """Each file on a uniformly random ``n_i``-subset of servers."""
    return make_placement(rng.choice(cfg.m, size=f.n, replace=False) for f in cfg.files)


# -- config text format ------------------------------------------------------

_SCALARS = {"tau": float, "ds": float, "x": float, "theta": float, "y": int}
_SERVER_KEYS = {"alpha": float, "beta": float}
_FILE_KEYS = {"id": str, "segments": int, "k": int, "n": int, "lambda": float, "cache": str}
_FILE_REQUIRED = ("segments", "k", "n", "lambda")


def _parse_cache(text: str, where: str) -> dict[int, int]:
    out = {}
    for tok in text.split():
        try:
            j, c = tok.split(":")
            out[int(j)] = int(c)
        except ValueError:
            raise ConfigError(f"{where}: bad cache entry {tok!r}, expected server:segments") from None
    return out


def loads_config(text: str) -> SystemConfig:
    """Parse the line-oriented config format (see README for the schema)."""
    scalars: dict = {}
    servers: list[dict] = []
    files: list[dict] = []
    block: dict | None = None
    keys = _SCALARS
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"line {lineno}"
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if name == "server":
                block, keys = {}, _SERVER_KEYS
                servers.append(block)
            elif name == "file":
                block, keys = {}, _FILE_KEYS
                files.append(block)
            else:
                raise ConfigError(f"{where}: unknown block [{name}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in keys:
            raise ConfigError(f"{where}: unknown key {key!r}")
        target = scalars if block is None else block
        if key in target:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        try:
            target[key] = keys[key](value)
        except ValueError:
            raise ConfigError(f"{where}: bad value {value!r} for {key!r}") from None
    for name in ("tau", "ds"):
        if name not in scalars:
            raise ConfigError(f"missing required scalar {name!r}")
    server_objs = []
    for n_, s in enumerate(servers):
        if set(s) != set(_SERVER_KEYS):
            raise ConfigError(f"server block {n_}: need exactly alpha and beta")
        server_objs.append(ServerParams(s["alpha"], s["beta"]))
    file_objs = []
    for n_, f in enumerate(files):
        missing = [k for k in _FILE_REQUIRED if k not in f]
        if missing:
            raise ConfigError(f"file block {n_}: missing {', '.join(missing)}")
        file_objs.append(
            VideoFile(
                segments=f["segments"],
                k=f["k"],
                n=f["n"],
                rate=f["lambda"],
                cached=_parse_cache(f.get("cache", ""), f"file block {n_}"),
                id=f.get("id", str(n_)),
            )
        )
    return SystemConfig(servers=server_objs, files=file_objs, **scalars)


def dumps_config(cfg: SystemConfig) -> str:
    lines = ["# stallbound system config", ""]
    for name in _SCALARS:
        lines.append(f"{name} = {getattr(cfg, name)!r}")
    for s in cfg.servers:
        lines += ["", "[server]", f"alpha = {s.alpha!r}", f"beta = {s.beta!r}"]
    for i, f in enumerate(cfg.files):
        lines += [
            "",
            "[file]",
            f"id = {f.id or i}",
            f"segments = {f.segments}",
            f"k = {f.k}",
            f"n = {f.n}",
            f"lambda = {f.rate!r}",
        ]
        cache = {j: c for j, c in sorted(f.cached.items()) if c}
        if cache:
            lines.append("cache = " + " ".join(f"{j}:{c}" for j, c in cache.items()))
    return "\n".join(lines) + "\n"


def load_config(path) -> SystemConfig:
    with open(path) as fh:
        return loads_config(fh.read())


def save_config(cfg: SystemConfig, path) -> None:
    with open(path, "w") as fh:
        fh.write(dumps_config(cfg))
