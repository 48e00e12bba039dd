"""MGF/LST machinery and the stall-duration bounds.

Everything here is evaluated in log space: a file of a few thousand segments
raises the chunk MGF to a power large enough to overflow a double long before
the bound itself does.

Notation used in the code::

    M_j(t)   chunk service MGF            alpha/(alpha - t) * exp(beta t)
    B_j(t)   file service-time MGF        mixture of M_j(t)**L_i
    Z^(l)    download-time MGF of chunk l of a file at server j
    H_ij     sum over l of exp(-t(ds + (l-1) tau)) Z^(l)(t)
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .model import (
    AuxVars,
    InfeasibleError,
    Placement,
    ServerParams,
    SystemConfig,
)

DEGENERATE_TOL = 1e-12
_ROW_CHUNK = 256


class DomainError(InfeasibleError):
    """An MGF is evaluated outside its region of existence."""

    def __init__(self, constraint: str, detail: str):
        super().__init__("domain", f"[{constraint}] {detail}")
        self.constraint = constraint


# -- scalar transforms -------------------------------------------------------


def log_chunk_mgf(alpha, beta, t):
    alpha = np.asarray(alpha, dtype=float)
    t = np.asarray(t, dtype=float)
    with np.errstate(invalid="ignore", divide="ignore"):
        return beta * t - np.log1p(-t / alpha)


def chunk_mgf(sp: ServerParams, t: float) -> float:
    """MGF of one shifted-exponential chunk service time."""
    if t >= sp.alpha:
        raise DomainError("43", f"t={t} >= alpha={sp.alpha}: chunk MGF has a pole")
    return float(np.exp(log_chunk_mgf(sp.alpha, sp.beta, t)))


class ShiftedMgf(NamedTuple):
    value: float
    constraint: float  # alpha (exp((beta - tau) t) - 1) + t, must be < 0
    below_one: bool


def shifted_chunk_mgf(sp: ServerParams, t: float, tau: float) -> ShiftedMgf:
    """``M_j(t) exp(-t tau)`` and the algebraic form of ``M~ < 1``."""
    if t >= sp.alpha:
        raise DomainError("43", f"t={t} >= alpha={sp.alpha}")
    value = float(np.exp(log_chunk_mgf(sp.alpha, sp.beta, t) - t * tau))
    c = sp.alpha * np.expm1((sp.beta - tau) * t) + t
    return ShiftedMgf(value, float(c), bool(c < 0))


def _log_geometric(lq, L):
    """``log(sum_{l=1..L} q**(l-1))`` for ``lq = log q``, elementwise.

    Closed form ``(q**L - 1)/(q - 1)`` away from ``q = 1``; direct summation where
    ``|1 - q| < DEGENERATE_TOL``.  Entries with ``L == 0`` give ``-inf``.
    """
    lq = np.asarray(lq, dtype=float)
    L = np.broadcast_to(np.asarray(L), lq.shape)
    out = np.full(lq.shape, -np.inf)
    pos = L > 0
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        degenerate = pos & (np.abs(np.expm1(lq)) < DEGENERATE_TOL)
        neg = pos & ~degenerate & (lq < 0)
        up = pos & ~degenerate & (lq > 0)
        out[neg] = np.log(-np.expm1(L[neg] * lq[neg])) - np.log(-np.expm1(lq[neg]))
        out[up] = L[up] * lq[up] + np.log(-np.expm1(-L[up] * lq[up])) - np.log(np.expm1(lq[up]))
    for idx in zip(*np.nonzero(degenerate)):
        ell = np.arange(int(L[idx]))
        out[idx] = logsumexp(ell * lq[idx])
    return out


def _dlog_geometric(lq, L):
    """Derivative of ``_log_geometric`` with respect to ``lq``."""
    lq = np.asarray(lq, dtype=float)
    L = np.broadcast_to(np.asarray(L, dtype=float), lq.shape)
    out = np.zeros(lq.shape)
    small = np.abs(lq) < 1e-5
    big = ~small & (L > 0)
    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        a = L[big] / -np.expm1(-L[big] * lq[big])
        b = 1.0 / -np.expm1(-lq[big])
        out[big] = a - b
    s = small & (L > 0)
    out[s] = (L[s] - 1) / 2 + (L[s] ** 2 - 1) * lq[s] / 12
    # L*lq may still be large when lq is tiny but L huge; exact form is safe there
    fix = s & (np.abs(L * lq) > 1e-3)
    if fix.any():
        out[fix] = L[fix] / -np.expm1(-L[fix] * lq[fix]) - 1.0 / -np.expm1(-lq[fix])
    return out


# -- appendix transforms -----------------------------------------------------


@dataclass(frozen=True)
class SegmentTable:
    """Per-(file, server) effective segment counts and startup deadlines.

    With a cached prefix of ``c`` segments for file ``i`` at server ``j`` the
    server only serves the last ``L_i - c`` chunks, and the first of them is not
    due before ``ds + c * tau``.
    """

    segments: np.ndarray  # (r, m) int
    startup: np.ndarray  # (r, m) float

    @property
    def fully_cached(self) -> np.ndarray:
        return np.all(self.segments == 0, axis=1)


def apply_caching(cfg: SystemConfig) -> SegmentTable:
    L = np.repeat(cfg.segments[:, None], cfg.m, axis=1)
    cached = np.zeros((cfg.r, cfg.m), dtype=int)
    for i, f in enumerate(cfg.files):
        for j, c in f.cached.items():
            if c > f.segments:
                raise InfeasibleError("cache", f"file {i}: cached {c} > L={f.segments} on server {j}")
            cached[i, j] = c
    return SegmentTable(L - cached, cfg.ds + cfg.tau * cached)


def apply_parallel_streams(cfg: SystemConfig, pi: np.ndarray) -> tuple[SystemConfig, np.ndarray]:
    """Split each server into ``y`` equal-bandwidth logical streams.

    Stream ``v`` of server ``j`` becomes logical server ``j*y + v`` with rate
    ``alpha/y`` and shift ``beta*y``; a file reaches it with probability
    ``pi/y``.  Codes widen to ``n*y`` so placements stay consistent.
    """
    y = int(cfg.y)
    pi = np.asarray(pi, dtype=float)
    if y == 1:
        return cfg, pi
    servers = tuple(ServerParams(s.alpha / y, s.beta * y) for s in cfg.servers for _ in range(y))
    files = tuple(
        replace(
            f,
            n=f.n * y,
            cached={j * y + v: c for j, c in f.cached.items() for v in range(y)},
        )
        for f in cfg.files
    )
    return replace(cfg, servers=servers, files=files, y=1), np.repeat(pi / y, y, axis=1)


def expand_placement(S: Placement, y: int) -> Placement:
    return tuple(tuple(j * y + v for j in s for v in range(y)) for s in S)


# -- vectorised evaluator ----------------------------------------------------


class Evaluator:
    """Bound evaluation for a fixed ``(cfg, pi)``.

    Handles parallel streams and caching transparently; all public per-file
    quantities refer to the physical files, per-server arrays to the logical
    (stream-level) servers.
    """

    def __init__(self, cfg: SystemConfig, pi: np.ndarray):
        self.cfg = cfg
        self.pi_phys = np.asarray(pi, dtype=float)
        scfg, spi = apply_parallel_streams(cfg, self.pi_phys)
        self.scfg = scfg
        self.pi = spi
        table = apply_caching(scfg)
        self.L = table.segments
        self.startup = table.startup
        self.alpha = scfg.alpha
        self.beta = scfg.beta
        self.tau = cfg.tau
        self.rates = cfg.rates
        self.active = self.L > 0
        self.w = self.rates[:, None] * spi * self.active
        self.Lam = self.w.sum(axis=0)
        self.mean_service = self.beta + 1.0 / self.alpha
        self.rho = (self.w * self.L).sum(axis=0) * self.mean_service
        self.full_horizon = cfg.ds + (cfg.segments - 1) * cfg.tau

    # constraint functions of t (shared by every file)
    def pole_gap(self, t):
        return np.asarray(t, dtype=float)[..., None] - self.alpha

    def shift_constraint(self, t):
        t = np.asarray(t, dtype=float)[..., None]
        return self.alpha * np.expm1((self.beta - self.tau) * t) + t

    def queue_constraint(self, t):
        """``Lambda_j (B_j(t) - 1) - t`` at scalar ``t``; must be < 0."""
        lM = log_chunk_mgf(self.alpha, self.beta, t)
        with np.errstate(over="ignore", invalid="ignore"):
            em1 = np.where(self.w > 0, np.expm1(self.L * lM), 0.0)
        return (self.w * em1).sum(axis=0) - t

    def feasibility(self, t) -> list[str]:
        """Violated constraint labels at a single scalar ``t``."""
        out = []
        if not t > 0:
            out.append(f"t={t} must be > 0")
            return out
        bad = np.flatnonzero(self.rho >= 1)
        if bad.size:
            out.append(f"[rho] servers {bad.tolist()} have utilisation >= 1")
        bad = np.flatnonzero(t >= self.alpha)
        if bad.size:
            out.append(f"[43] t={t} >= alpha on servers {bad.tolist()}")
            return out
        bad = np.flatnonzero(self.shift_constraint(t) >= 0)
        if bad.size:
            out.append(f"[44] shifted chunk MGF >= 1 on servers {bad.tolist()}")
        bad = np.flatnonzero(self.queue_constraint(t) >= 0)
        if bad.size:
            out.append(f"[46] download MGF undefined on servers {bad.tolist()}")
        return out

    def terms(self, t, rows=None):
        """Per-(row, server) pieces of ``H`` at per-row ``t``.

        Returns a dict with ``lM``, ``gm1`` (``Lambda (B - 1)``), ``den``,
        ``logP`` (log of the queue factor of ``Z``), ``logS``, ``H`` and a boolean
        ``ok`` per row that is False when ``t`` is outside the domain.
        """
        rows = np.arange(self.L.shape[0]) if rows is None else np.asarray(rows)
        t = np.asarray(t, dtype=float).reshape(-1)
        if t.size == 1 and rows.size != 1:
            t = np.full(rows.size, t[0])
        tc = t[:, None]
        lM = log_chunk_mgf(self.alpha, self.beta, tc)
        ok = (t > 0) & np.all(tc < self.alpha, axis=1) & np.all(self.rho < 1)
        lM = np.where(np.isfinite(lM), lM, np.inf)
        gm1 = np.empty_like(lM)
        for s in range(0, rows.size, _ROW_CHUNK):
            sl = slice(s, s + _ROW_CHUNK)
            with np.errstate(over="ignore", invalid="ignore"):
                em1 = np.expm1(self.L[None, :, :] * lM[sl, None, :])
                gm1[sl] = np.einsum("fj,ifj->ij", self.w, np.where(self.w > 0, em1, 0.0))
        den = tc - gm1
        ok &= np.all(den > 0, axis=1)
        ok &= np.all(self.shift_constraint(t) < 0, axis=1)
        busy = self.Lam > 0
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            logP = np.where(
                busy,
                np.log1p(-self.rho) + np.log(tc) + np.log1p(gm1 / np.where(busy, self.Lam, 1.0)) - np.log(den),
                0.0,
            )
            lMt = lM - self.tau * tc
            L = self.L[rows]
            logS = -tc * (self.startup[rows] - self.tau) + lMt + _log_geometric(np.where(L > 0, lMt, 0.0), L)
            logS = np.where(L > 0, logS, -np.inf)
            H = np.exp(logP + logS)
        H = np.where(L > 0, H, 0.0)
        return {"lM": lM, "gm1": gm1, "den": den, "logP": logP, "logS": logS, "H": H, "ok": ok, "rows": rows, "t": t}

    def mean_bounds(self, t_mean, rows=None) -> np.ndarray:
        d = self.terms(t_mean, rows)
        pi = self.pi[d["rows"]]
        A = (pi * (1.0 + d["H"])).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(A) / d["t"]
        return np.where(d["ok"], out, np.inf)

    def tail_bounds(self, t_tail, x=None, rows=None, discount=True) -> np.ndarray:
        x = self.cfg.x if x is None else x
        d = self.terms(t_tail, rows)
        pi = self.pi[d["rows"]]
        t = d["t"]
        H = d["H"]
        if discount:
            H = H * np.exp(-t * self.full_horizon[d["rows"]])[:, None]
        with np.errstate(over="ignore", invalid="ignore"):
            out = np.exp(-t * x) * (pi * (1.0 + H)).sum(axis=1)
        return np.where(d["ok"], out, np.inf)

    def t_max(self) -> "DomainLimit":
        return _domain_max(self)


class DomainLimit(NamedTuple):
    t_max: float
    constraint: str
    server: int


def _bisect_root(g, lo, hi, tol=1e-10, iters=200):
    """Largest-root bisection for a convex ``g`` with ``g(lo) < 0 <= g(hi)``."""
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if g(mid) < 0:  # nan counts as violated
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return lo


def _domain_max(ev: Evaluator) -> DomainLimit:
    if np.any(ev.rho >= 1):
        j = int(np.argmax(ev.rho))
        raise DomainError("rho", f"server {j} has utilisation {ev.rho[j]:.6g} >= 1")
    best = DomainLimit(float(ev.alpha.min()), "43", int(np.argmin(ev.alpha)))
    lo0 = 1e-12
    for j in range(ev.alpha.size):
        hi = ev.alpha[j] - 1e-9
        a, b = ev.alpha[j], ev.beta[j]
        shift = lambda t, a=a, b=b: a * np.expm1((b - ev.tau) * t) + t
        if shift(lo0) >= 0:
            raise DomainError("44", f"server {j}: no t > 0 gives shifted chunk MGF < 1 (alpha (tau - beta) <= 1)")
        if shift(hi) >= 0:
            root = _bisect_root(shift, lo0, hi)
            if root < best.t_max:
                best = DomainLimit(root, "44", j)
        w = ev.w[:, j]
        if w.sum() > 0:
            Lj = ev.L[:, j]

            def queue(t, w=w, Lj=Lj, a=a, b=b):
                lm = log_chunk_mgf(a, b, t)
                with np.errstate(over="ignore", invalid="ignore"):
                    v = float(np.dot(w[w > 0], np.expm1(Lj[w > 0] * lm))) - t
                return v if v == v else np.inf

            if queue(lo0) >= 0:
                raise DomainError("46", f"server {j}: download MGF undefined for every t > 0")
            if queue(hi) >= 0:
                root = _bisect_root(queue, lo0, hi)
                if root < best.t_max:
                    best = DomainLimit(root, "46", j)
    if best.constraint == "43":
        best = best._replace(t_max=best.t_max - 1e-9)
    return best


# -- public per-quantity operations -----------------------------------------


def server_loads(cfg: SystemConfig, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Cache- and stream-aware ``(Lambda_j, rho_j)`` on logical servers."""
    ev = Evaluator(cfg, pi)
    return ev.Lam, ev.rho


def file_service_mgf(cfg: SystemConfig, pi: np.ndarray, j: int, t: float) -> float:
    """``B_j(t)``; the LST of the service time is this at ``-s``."""
    ev = Evaluator(cfg, pi)
    if t >= ev.alpha[j]:
        raise DomainError("43", f"t={t} >= alpha_{j}={ev.alpha[j]}")
    if ev.Lam[j] <= 0:
        raise DomainError("Lambda", f"server {j} receives no requests; B_j is undefined")
    lm = log_chunk_mgf(ev.alpha[j], ev.beta[j], t)
    weights = ev.w[:, j] / ev.Lam[j]
    return float(np.dot(weights, np.exp(ev.L[:, j] * lm)))


def _b_minus_one(ev: Evaluator, j: int, t: float) -> float:
    lm = log_chunk_mgf(ev.alpha[j], ev.beta[j], t)
    return float(np.dot(ev.w[:, j] / ev.Lam[j], np.expm1(ev.L[:, j] * lm)))


def download_mgf(cfg: SystemConfig, pi: np.ndarray, i: int, j: int, ell: int, t: float, *, _ev=None) -> float:
    """``E[exp(t D)]`` for the ``ell``-th chunk of file ``i`` at server ``j``."""
    ev = _ev or Evaluator(cfg, pi)
    if not t > 0:
        raise DomainError("43", f"t={t} must be > 0")
    if t >= ev.alpha[j]:
        raise DomainError("43", f"t={t} >= alpha_{j}={ev.alpha[j]}")
    if ev.rho[j] >= 1:
        raise DomainError("rho", f"server {j} utilisation {ev.rho[j]:.6g} >= 1")
    lm = log_chunk_mgf(ev.alpha[j], ev.beta[j], t)
    if ev.Lam[j] <= 0:
        return float(np.exp(ell * lm))
    bm1 = _b_minus_one(ev, j, t)
    den = t - ev.Lam[j] * bm1
    if not den > 0:
        raise DomainError("46", f"server {j}: t - Lambda (B - 1) = {den:.3g} <= 0")
    log_wait = np.log1p(-ev.rho[j]) + np.log(t) + np.log1p(bm1) - np.log(den)
    return float(np.exp(log_wait + ell * lm))


def h_ij(cfg: SystemConfig, pi: np.ndarray, i: int, j: int, t: float, mode: str = "closed", *, _ev=None) -> float:
    """Discounted sum of download MGFs over the chunks of file ``i`` at server ``j``.

    ``mode="closed"`` uses the geometric-series form; ``mode="direct"`` sums
    ``download_mgf`` term by term and serves as the reference.
    """
    ev = _ev or Evaluator(cfg, pi)
    L = int(ev.L[i, j])
    start = ev.startup[i, j]
    if mode == "direct":
        if L == 0:
            return 0.0
        logs = [
            -t * (start + (ell - 1) * cfg.tau) + np.log(download_mgf(cfg, pi, i, j, ell, t, _ev=ev))
            for ell in range(1, L + 1)
        ]
        return float(np.exp(logsumexp(logs)))
    if mode != "closed":
        raise ValueError(f"unknown mode {mode!r}")
    # run the same precondition checks as the direct path
    download_mgf(cfg, pi, i, j, 1, t, _ev=ev)
    d = ev.terms(np.array([t]), rows=[i])
    return float(d["H"][0, j])


def _require(ev: Evaluator, t: float, what: str) -> None:
    problems = ev.feasibility(t)
    if problems:
        tag = problems[0][1:problems[0].index("]")] if problems[0].startswith("[") else "t"
        raise DomainError(tag, f"{what}: " + "; ".join(problems))


def mean_stall_bound(cfg: SystemConfig, pi: np.ndarray, i: int, t: float, *, _ev=None) -> float:
    """Upper bound on the mean stall duration of file ``i`` (seconds)."""
    ev = _ev or Evaluator(cfg, pi)
    _require(ev, t, f"file {i} mean-bound t")
    return float(ev.mean_bounds(np.array([t]), rows=[i])[0])


def tail_bound(cfg: SystemConfig, pi: np.ndarray, i: int, t: float, x: float | None = None,
               *, discount: bool = True, _ev=None) -> float:
    """Upper bound on ``P(stall >= x)`` for file ``i``; may exceed 1.

    ``discount=False`` drops the ``exp(-t (ds + (L-1) tau))`` factor on ``H``,
    giving the weaker but directly derived Chernoff form.
    """
    ev = _ev or Evaluator(cfg, pi)
    _require(ev, t, f"file {i} tail-bound t")
    return float(ev.tail_bounds(np.array([t]), x=x, rows=[i], discount=discount)[0])


def t_domain_max(cfg: SystemConfig, pi: np.ndarray, i: int | None = None) -> DomainLimit:
    """Supremum of feasible ``t`` and the binding constraint.

    Every constraint is convex in ``t`` and vanishes at 0, so the feasible set
    is ``(0, t_max)``.  It is the same for all files; ``i`` is accepted for
    symmetry with the per-file operations.
    """
    return _domain_max(Evaluator(cfg, pi))


def weight_vector(cfg: SystemConfig) -> np.ndarray:
    rates = cfg.rates
    total = rates.sum()
    if total <= 0:
        raise InfeasibleError("workload", "total arrival rate is zero")
    return rates / total


def weighted_objective(cfg: SystemConfig, pi: np.ndarray, S: Placement | None, t: AuxVars,
                       *, theta: float | None = None, _ev=None) -> float:
    """Request-weighted ``theta * mean + (1 - theta) * tail`` over all files.

    ``S`` is implied by the support of ``pi`` and only kept for signature
    symmetry with the optimiser.
    """
    theta = cfg.theta if theta is None else theta
    ev = _ev or Evaluator(cfg, pi)
    w = weight_vector(cfg)
    total = 0.0
    if theta > 0:
        total += theta * float(np.dot(w, _masked(ev.mean_bounds(t.t_mean), w)))
    if theta < 1:
        total += (1 - theta) * float(np.dot(w, _masked(ev.tail_bounds(t.t_tail), w)))
    return total


def _masked(v, w):
    # zero-weight files (e.g. fully cached) never make the objective infinite
    return np.where(w > 0, v, 0.0)


# -- reports -----------------------------------------------------------------


@dataclass
class BoundReport:
    mean_bound: np.ndarray
    tail_bound: np.ndarray
    t_mean: np.ndarray
    t_tail: np.ndarray
    rho: np.ndarray
    Lam: np.ndarray
    objective: float
    H_mean: np.ndarray
    H_tail: np.ndarray
    Q_mean: np.ndarray
    Q_tail: np.ndarray
    x: float
    theta: float

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "index", "mean_stall_bound", "tail_bound", "t_mean", "t_tail", "rho", "Lambda"])
        for i in range(self.mean_bound.size):
            w.writerow(["file", i, _fmt(self.mean_bound[i]), _fmt(self.tail_bound[i]),
                        _fmt(self.t_mean[i]), _fmt(self.t_tail[i]), "", ""])
        for j in range(self.rho.size):
            w.writerow(["server", j, "", "", "", "", _fmt(self.rho[j]), _fmt(self.Lam[j])])
        w.writerow(["objective", "", _fmt(self.objective), "", "", "", "", ""])
        return buf.getvalue()


def _fmt(v: float) -> str:
    return repr(float(v))


def bound_report(cfg: SystemConfig, pi: np.ndarray, S: Placement | None, t: AuxVars) -> BoundReport:
    ev = Evaluator(cfg, pi)
    dm = ev.terms(t.t_mean)
    dt = ev.terms(t.t_tail)

    def q_of(d):
        lMt = d["lM"] - cfg.tau * d["t"][:, None]
        with np.errstate(over="ignore", invalid="ignore"):
            return np.where(ev.L > 0, np.exp(lMt + _log_geometric(np.where(ev.L > 0, lMt, 0.0), ev.L)), 0.0)

    return BoundReport(
        mean_bound=ev.mean_bounds(t.t_mean),
        tail_bound=ev.tail_bounds(t.t_tail),
        t_mean=t.t_mean,
        t_tail=t.t_tail,
        rho=ev.rho,
        Lam=ev.Lam,
        objective=weighted_objective(cfg, pi, S, t, _ev=ev),
        H_mean=dm["H"],
        H_tail=dt["H"],
        Q_mean=q_of(dm),
        Q_tail=q_of(dt),
        x=cfg.x,
        theta=cfg.theta,
    )
