"""Alternating minimisation of the weighted stall objective.

Three blocks are optimised in turn, each with the other two frozen:

* access ``pi``   -- inner convex approximation: linearise the objective, add a
  proximal term, solve exactly over the row constraints (a capped-simplex
  projection) and take a damped step that keeps every iterate feasible;
* bound parameters ``t`` -- the objective is separable per file, so each
  ``t_mean[i]`` / ``t_tail[i]`` is a 1-D problem on ``(0, t_max)``;
* placement ``S`` -- per-file permutation of server roles, searched through a
  doubly-stochastic relaxation rounded by linear assignment plus a swap
  neighbourhood.

Every accepted move lowers the objective, so the outer trace is monotone.
"""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .analysis import Evaluator, _dlog_geometric, weight_vector, weighted_objective
from .model import (
    AuxVars,
    InfeasibleError,
    Placement,
    SystemConfig,
    equal_access,
    make_placement,
    project_access,
    random_placement,
    validate_config,
)

log = logging.getLogger(__name__)

_GOLDEN = (np.sqrt(5.0) - 1) / 2


AccessRule = Callable[[int, tuple], np.ndarray]


@dataclass(frozen=True)
class SolverSettings:
    tau_u: float = 1e-3
    tau_t: float = 1e-3
    gamma_power: float = 0.6
    eps: float = 1e-6
    max_outer: int = 1000
    max_inner: int = 200
    alpha_c: float = 50.0
    C: float | None = None
    seed: int = 0
    t_init: float = 0.01
    t_margin: float = 1e-6
    aux_method: str = "golden"
    relax_iters: int = 10
    swap_candidates: int = 8
    exhaustive_max_servers: int = 5
    pair_budget: int = 4000
    staged: bool = True
    rho_target: float = 0.95
    armijo: float = 1e-4
    step_rule: str = "armijo"
    adaptive_prox: bool = True

    def __post_init__(self):
        if not (self.tau_u > 0 and self.tau_t > 0):
            raise ValueError("proximal weights must be positive")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.step_rule not in ("armijo", "diminishing"):
            raise ValueError(f"unknown step rule {self.step_rule!r}")
        if self.aux_method not in ("golden", "nova"):
            raise ValueError(f"unknown aux method {self.aux_method!r}")

    def gamma(self, nu: int) -> float:
        """First trial step; backtracking halves it until sufficient decrease."""
        if self.step_rule == "armijo":
            return 1.0
        return 1.0 / (1.0 + nu) ** self.gamma_power

    def prox(self, base: float, ds: np.ndarray | None, dg: np.ndarray | None) -> float:
        # secant curvature along the last move, never below the configured weight
        if not self.adaptive_prox or ds is None:
            return base
        ss = float(np.sum(ds * ds))
        if ss <= 0:
            return base
        return max(base, abs(float(np.sum(ds * dg))) / ss)


@dataclass
class TraceRow:
    iteration: int
    objective: float
    subproblem: str
    inner: int
    residual: float = 0.0


@dataclass
class SolveTrace:
    rows: list = field(default_factory=list)
    converged: bool = True

    def add(self, iteration, objective, subproblem, inner, residual=0.0):
        self.rows.append(TraceRow(iteration, float(objective), subproblem, int(inner), float(residual)))

    def extend(self, other: "SolveTrace", iteration: int | None = None):
        for r in other.rows:
            self.rows.append(TraceRow(r.iteration if iteration is None else iteration, r.objective,
                                      r.subproblem, r.inner, r.residual))
        self.converged = self.converged and other.converged

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iteration", "objective", "subproblem", "inner_iterations", "residual"])
        for r in self.rows:
            w.writerow([r.iteration, repr(r.objective), r.subproblem, r.inner, repr(r.residual)])
        return buf.getvalue()


# -- objective and gradient --------------------------------------------------


def _objective(cfg, pi, t: AuxVars) -> float:
    try:
        val = weighted_objective(cfg, pi, None, t)
    except InfeasibleError:
        return np.inf
    return val if np.isfinite(val) else np.inf


def _require_feasible(cfg, pi, t):
    val = _objective(cfg, pi, t)
    if not np.isfinite(val):
        ev = Evaluator(cfg, pi)
        problems = ev.feasibility(float(max(t.t_mean.max(), t.t_tail.max())))
        raise InfeasibleError("infeasible-point", "; ".join(problems) or "objective is not finite")
    return val


def _part_pieces(ev: Evaluator, t, coef, disc):
    """Shared tensors for one objective part (mean or tail) at per-file ``t``."""
    d = ev.terms(t)
    if not np.all(d["ok"] | (coef == 0)):
        raise InfeasibleError("infeasible-point", "objective gradient requested outside the t domain")
    return d


def objective_gradient(cfg: SystemConfig, pi: np.ndarray, S: Placement | None, t: AuxVars,
                       wrt: str = "access") -> np.ndarray:
    """Analytic gradient of the weighted objective.

    ``wrt="access"`` returns an ``(r, m)`` matrix; ``wrt="aux"`` a length-``2r``
    vector ordered ``(t_mean, t_tail)``.
    """
    theta = cfg.theta
    ev = Evaluator(cfg, pi)
    w = weight_vector(cfg)
    r = cfg.r
    if wrt == "access":
        g = np.zeros_like(ev.pi)
        if theta > 0:
            g += _access_part(ev, t.t_mean, w, theta, mean=True)
        if theta < 1:
            g += _access_part(ev, t.t_tail, w, 1 - theta, mean=False)
        y = int(cfg.y)
        return g.reshape(r, cfg.m, y).sum(axis=2) / y
    if wrt == "aux":
        gm = _aux_part(ev, t.t_mean, w, theta, mean=True) if theta > 0 else np.zeros(r)
        gt = _aux_part(ev, t.t_tail, w, 1 - theta, mean=False) if theta < 1 else np.zeros(r)
        return np.concatenate([gm, gt])
    raise ValueError(f"unknown wrt {wrt!r}")


def _access_part(ev: Evaluator, t, w, weight, mean: bool):
    coef_w = w * weight
    d = _part_pieces(ev, t, coef_w, None)
    H, pi = d["H"], ev.pi
    tv = d["t"]
    if mean:
        A = (pi * (1.0 + H)).sum(axis=1)
        c = np.where(coef_w > 0, coef_w / (tv * A), 0.0)
        disc = np.ones_like(tv)
    else:
        c = coef_w * np.exp(-tv * ev.cfg.x)
        disc = np.exp(-tv * ev.full_horizon)
    Hd = H * disc[:, None]
    grad = c[:, None] * (1.0 + Hd)
    kappa = c[:, None] * pi * Hd  # (i, j)
    busy = ev.Lam > 0
    Lam = np.where(busy, ev.Lam, 1.0)
    G = Lam + d["gm1"]
    den = d["den"]
    K = kappa.sum(axis=0)
    a = ev.rates[:, None] * ev.active  # d w_fj / d pi_fj
    lin = K * (-ev.mean_service / (1.0 - ev.rho))  # multiplies L_fj
    const = -K / Lam - (kappa / den).sum(axis=0)
    coefE = kappa * (1.0 / G + 1.0 / den)  # (i, j)
    E_term = np.zeros_like(pi)
    for s in range(0, pi.shape[0], 128):
        sl = slice(s, s + 128)
        with np.errstate(over="ignore"):
            E = np.exp(ev.L[None, :, :] * d["lM"][sl, None, :])  # (i, f, j)
        E_term += np.einsum("ij,ifj->fj", coefE[sl], E)
    dlogP = a * (lin * ev.L + const + E_term)
    grad += np.where(busy, dlogP, 0.0)
    return grad


def _aux_part(ev: Evaluator, t, w, weight, mean: bool):
    coef_w = w * weight
    d = _part_pieces(ev, t, coef_w, None)
    H, pi, tv = d["H"], ev.pi, d["t"]
    tc = tv[:, None]
    dlM = ev.beta + 1.0 / (ev.alpha - tc)  # (i, j)
    gprime = np.zeros_like(H)
    for s in range(0, H.shape[0], 128):
        sl = slice(s, s + 128)
        with np.errstate(over="ignore"):
            E = np.exp(ev.L[None, :, :] * d["lM"][sl, None, :])
        gprime[sl] = np.einsum("fj,ifj->ij", ev.w * ev.L, E) * dlM[sl]
    busy = ev.Lam > 0
    G = np.where(busy, ev.Lam, 1.0) + d["gm1"]
    dlogP = np.where(busy, 1.0 / tc + gprime / G - (1.0 - gprime) / d["den"], 0.0)
    dlMt = dlM - ev.tau
    lMt = d["lM"] - ev.tau * tc
    dlogS = -(ev.startup - ev.tau) + dlMt + _dlog_geometric(np.where(ev.L > 0, lMt, 0.0), ev.L) * dlMt
    dH = H * (dlogP + dlogS)
    if mean:
        A = (pi * (1.0 + H)).sum(axis=1)
        val = np.log(A) / tv
        g = -val / tv + (pi * dH).sum(axis=1) / (tv * A)
    else:
        x = ev.cfg.x
        disc = np.exp(-tv * ev.full_horizon)
        base = (pi * (1.0 + disc[:, None] * H)).sum(axis=1)
        g = np.exp(-tv * x) * (-x * base + (pi * disc[:, None] * (dH - ev.full_horizon[:, None] * H)).sum(axis=1))
    return np.where(coef_w > 0, coef_w * g, 0.0)


# -- access block --------------------------------------------------------------


def surrogate_value(grad: np.ndarray, pi: np.ndarray, pi_ref: np.ndarray, tau_u: float) -> float:
    """Proximal linearisation ``<g, pi - ref> + tau/2 ||pi - ref||^2``."""
    d = pi - pi_ref
    return float(np.sum(grad * d) + 0.5 * tau_u * np.sum(d * d))


def optimize_access(cfg: SystemConfig, S: Placement, t: AuxVars, pi0: np.ndarray,
                    settings: SolverSettings = SolverSettings()) -> tuple[np.ndarray, SolveTrace]:
    pi = np.array(pi0, dtype=float)
    problems = validate_config(cfg, S, pi)
    if problems:
        raise InfeasibleError("infeasible-point", problems[0])
    obj = _require_feasible(cfg, pi, t)
    trace = SolveTrace()
    k = cfg.k
    last_step = last_g = None
    for nu in range(settings.max_inner):
        g = objective_gradient(cfg, pi, S, t, "access")
        if last_step is None:
            tau = settings.tau_u
            if settings.adaptive_prox:
                tau = max(tau, float(np.abs(g).max()))
        else:
            tau = settings.prox(settings.tau_u, last_step, g - last_g)
        pi_hat = project_access(pi - g / tau, S, k)
        step = pi_hat - pi
        slope = float(np.sum(g * step))
        if np.max(np.abs(step)) < 1e-12 or slope > -1e-15 * max(1.0, abs(obj)):
            break
        gamma = settings.gamma(nu)
        new_obj = np.inf
        while gamma > 1e-12:
            cand = pi + gamma * step
            new_obj = _objective(cfg, cand, t)
            if new_obj <= obj + settings.armijo * gamma * slope:
                break
            gamma *= 0.5
        if not new_obj < obj:
            break
        improvement = obj - new_obj
        cand = _clean_rows(cand, S, k)
        last_step, last_g = cand - pi, g
        pi, obj = cand, new_obj
        obj = _objective(cfg, pi, t)
        trace.add(nu, obj, "access", 1, gamma)
        if improvement <= settings.eps * abs(obj) * 1e-2:
            break
    else:
        trace.converged = False
    if not trace.rows:
        trace.add(0, obj, "access", 0)
    return pi, trace


def _clean_rows(pi, S, k):
    # undo drift from repeated convex combinations without moving the point
    out = np.clip(pi, 0.0, 1.0)
    for i, s in enumerate(S):
        row = list(s)
        drift = out[i, row].sum() - k[i]
        if abs(drift) > 1e-13:
            free = [j for j in row if 0 < out[i, j] < 1]
            if free:
                out[i, free] -= drift / len(free)
    return out


# -- auxiliary block -----------------------------------------------------------


def _part_values(ev: Evaluator, t, mean: bool):
    return ev.mean_bounds(t) if mean else ev.tail_bounds(t)


def _best_t(ev: Evaluator, t_max: float, t_cur, mean: bool, grid: int = 48):
    r = t_cur.size
    hi_t = t_max * (1 - 1e-9)
    pts = np.geomspace(t_max * 1e-6, hi_t, grid)
    vals = np.stack([_part_values(ev, np.full(r, p), mean) for p in pts])  # (grid, r)
    best = np.argmin(vals, axis=0)
    lo = pts[np.maximum(best - 1, 0)]
    hi = pts[np.minimum(best + 1, grid - 1)]
    x, fx = _golden_scalarwise(ev, lo, hi, mean)
    grid_best = vals[best, np.arange(r)]
    use_grid = grid_best < fx
    x = np.where(use_grid, pts[best], x)
    fx = np.where(use_grid, grid_best, fx)
    cur = _part_values(ev, t_cur, mean)
    keep = ~(fx < cur)
    return np.where(keep, t_cur, x)


def _golden_scalarwise(ev, lo, hi, mean, iters=60):
    a, b = lo.astype(float), hi.astype(float)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = _part_values(ev, c, mean), _part_values(ev, d, mean)
    for _ in range(iters):
        left = fc <= fd
        # shrink to [a, d] when f(c) <= f(d), else to [c, b]
        a, b = np.where(left, a, c), np.where(left, d, b)
        c_new = np.where(left, b - _GOLDEN * (b - a), d)
        d_new = np.where(left, c, a + _GOLDEN * (b - a))
        probe = np.where(left, c_new, d_new)
        fp = _part_values(ev, probe, mean)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = c_new, d_new
    x = 0.5 * (a + b)
    return x, _part_values(ev, x, mean)


def inside_domain(cfg: SystemConfig, pi: np.ndarray, t: AuxVars) -> AuxVars:
    """``t`` with entries outside the feasible interval moved to its midpoint.

    Only a part with zero objective weight can drift out while ``pi`` moves.
    """
    ev = Evaluator(cfg, pi)
    half = 0.5 * ev.t_max().t_max
    return AuxVars(*(np.where((v > 0) & ev.terms(v)["ok"], v, half) for v in (t.t_mean, t.t_tail)))


def t_upper(cfg: SystemConfig, pi: np.ndarray, settings: SolverSettings = SolverSettings()) -> float:
    return Evaluator(cfg, pi).t_max().t_max * (1 - settings.t_margin)


def optimize_aux(cfg: SystemConfig, S: Placement | None, pi: np.ndarray, t0: AuxVars,
                 settings: SolverSettings = SolverSettings()) -> tuple[AuxVars, SolveTrace]:
    ev = Evaluator(cfg, pi)
    t_max = ev.t_max().t_max
    parts = {"t_mean": t0.t_mean, "t_tail": t0.t_tail}
    for name, v in parts.items():
        # the bisected t_max can sit a hair below a t that still evaluates
        # finite, so judge membership by the constraints themselves
        ok = (v > 0) & ev.terms(v)["ok"]
        if ok.all():
            continue
        if cfg.theta == (0.0 if name == "t_mean" else 1.0):
            # zero-weight part: nothing kept it inside while pi moved
            parts[name] = np.where(ok, v, 0.5 * t_max)
        else:
            raise InfeasibleError("infeasible-point", f"{name} outside (0, {t_max:.6g})")
    t0 = AuxVars(parts["t_mean"], parts["t_tail"])
    obj0 = _require_feasible(cfg, pi, t0)
    trace = SolveTrace()
    hi = t_max * (1 - settings.t_margin)
    if settings.aux_method == "golden":
        tm = _best_t(ev, hi, t0.t_mean, True) if cfg.theta > 0 else t0.t_mean
        tt = _best_t(ev, hi, t0.t_tail, False) if cfg.theta < 1 else t0.t_tail
        t = AuxVars(tm, tt)
        trace.add(0, _objective(cfg, pi, t), "aux", 1)
    else:
        t, trace = _aux_nova(cfg, pi, t0, obj0, hi, settings)
    if not _objective(cfg, pi, t) <= obj0:
        t = t0
    return t, trace


def _aux_nova(cfg, pi, t0, obj, hi, settings):
    trace = SolveTrace()
    v = t0.as_vector()
    lo = hi * 1e-9
    for nu in range(settings.max_inner):
        g = objective_gradient(cfg, pi, None, AuxVars.from_vector(v), "aux")
        v_hat = np.clip(v - g / settings.tau_t, lo, hi)
        step = v_hat - v
        slope = float(g @ step)
        if np.max(np.abs(step)) < 1e-14 or slope >= 0:
            break
        gamma = settings.gamma(nu)
        new = np.inf
        while gamma > 1e-12:
            cand = v + gamma * step
            new = _objective(cfg, pi, AuxVars.from_vector(cand))
            if new <= obj + settings.armijo * gamma * slope:
                break
            gamma *= 0.5
        if not new < obj:
            break
        done = obj - new <= settings.eps * 1e-2 * abs(new)
        v, obj = cand, new
        trace.add(nu, obj, "aux", 1, gamma)
        if done:
            break
    else:
        trace.converged = False
    if not trace.rows:
        trace.add(0, obj, "aux", 0)
    return AuxVars.from_vector(v), trace


# -- placement block -----------------------------------------------------------


def _penalty(x, alpha_c):
    """Smooth bump that is ~1 strictly inside (0, 1) and 1/2 at the endpoints."""
    with np.errstate(over="ignore"):
        return -(1.0 / (1.0 + np.exp(alpha_c * x)) - 1.0 / (1.0 + np.exp(alpha_c * (x - 1.0))))


def _dpenalty(x, alpha_c):
    with np.errstate(over="ignore"):
        s0 = 1.0 / (1.0 + np.exp(alpha_c * x))
        s1 = 1.0 / (1.0 + np.exp(alpha_c * (x - 1.0)))
    return alpha_c * s0 * (1 - s0) - alpha_c * s1 * (1 - s1)


def project_birkhoff(X: np.ndarray, iters: int = 500, tol: float = 1e-10) -> np.ndarray:
    """Euclidean projection onto doubly-stochastic matrices (Dykstra)."""
    n = X.shape[0]
    Y = X.copy()
    P = np.zeros_like(X)
    Q = np.zeros_like(X)
    for _ in range(iters):
        Z = Y + P
        # affine set {rows and cols sum to 1}
        rs = Z.sum(axis=1, keepdims=True)
        cs = Z.sum(axis=0, keepdims=True)
        tot = Z.sum()
        A = Z - (rs - 1) / n - (cs - 1) / n + (tot - n) / n ** 2
        P = Z - A
        W = A + Q
        Y_new = np.clip(W, 0.0, None)
        Q = W - Y_new
        if np.max(np.abs(Y_new - Y)) < tol:
            Y = Y_new
            break
        Y = Y_new
    return Y


def _permute_row(row: np.ndarray, perm) -> np.ndarray:
    """New row with ``new[j] = row[perm[j]]``."""
    return row[np.asarray(perm)]


def _relaxed_assignment(cfg, pi, t, i, settings, C):
    """Relax the permutation of file ``i`` to a doubly-stochastic matrix and
    run damped proximal-linear steps; returns the relaxed matrix."""
    m = cfg.m
    p = pi[i].copy()
    X = 0.5 * np.eye(m) + 0.5 / m
    base = pi.copy()

    def f(Xm):
        base[i] = Xm @ p
        val = _objective(cfg, base, t)
        return val + C * float(_penalty(Xm, settings.alpha_c).sum())

    fx = f(X)
    if not np.isfinite(fx):
        return None
    for nu in range(settings.relax_iters):
        base[i] = X @ p
        g_pi = objective_gradient(cfg, base, None, t, "access")[i]
        grad = np.outer(g_pi, p) + C * _dpenalty(X, settings.alpha_c)
        X_hat = project_birkhoff(X - grad / max(settings.tau_u, 1e-12 + np.abs(grad).max()))
        step = X_hat - X
        gamma = settings.gamma(nu)
        while gamma > 1e-6:
            cand = X + gamma * step
            fc = f(cand)
            if fc < fx:
                X, fx = cand, fc
                break
            gamma *= 0.5
        else:
            break
    return X


def _candidate_perms(cfg, pi, t, i, settings, C):
    m = cfg.m
    ident = tuple(range(m))
    row = pi[i]
    if m <= settings.exhaustive_max_servers:
        # small clusters: every distinct rearrangement of the row
        seen = {}
        for perm in itertools.permutations(range(m)):
            seen.setdefault(tuple(row[list(perm)]), perm)
        return sorted(seen.values())
    cands = {ident}
    g = objective_gradient(cfg, pi, None, t, "access")[i]
    # swap neighbourhood, screened by the first-order change of exchanging
    # the roles of servers a and b
    scored = []
    for a, b in itertools.combinations(range(m), 2):
        if row[a] == row[b]:
            continue
        pred = (g[a] - g[b]) * (row[b] - row[a])
        if pred < 0:
            scored.append((pred, a, b))
    scored.sort()
    for _, a, b in scored[: settings.swap_candidates]:
        perm = list(ident)
        perm[a], perm[b] = b, a
        cands.add(tuple(perm))
    # first-order assignment: server j takes the value of server u
    cost = np.outer(g, row)
    rr, cc = linear_sum_assignment(cost)
    cands.add(tuple(int(c) for c in cc[np.argsort(rr)]))
    if settings.relax_iters > 0:
        X = _relaxed_assignment(cfg, pi, t, i, settings, C)
        if X is not None:
            rr, cc = linear_sum_assignment(-X)
            cands.add(tuple(int(c) for c in cc[np.argsort(rr)]))
    return sorted(cands)


def optimize_placement(cfg: SystemConfig, pi: np.ndarray, t: AuxVars, S0: Placement,
                       settings: SolverSettings = SolverSettings(), passes: int = 1,
                       access_rule: AccessRule | None = None):
    """Permute each file's server roles to lower the objective.

    Returns ``(S, pi, trace)``.  A file's permutation changes only when the
    full objective strictly decreases; ties keep the lexicographically lowest
    permutation, which is the identity when nothing improves.  By default the
    access row moves with the servers; ``access_rule(i, support)`` instead
    recomputes the row for the new support (fixed-formula policies).
    """
    pi = np.array(pi, dtype=float)
    problems = validate_config(cfg, S0, pi)
    if problems:
        raise InfeasibleError("infeasible-point", problems[0])
    obj = _require_feasible(cfg, pi, t)
    C = settings.C if settings.C is not None else 10.0 * abs(obj)
    trace = SolveTrace()
    perm_of = [list(range(cfg.m)) for _ in range(cfg.r)]

    def row_for(i, perm):
        if access_rule is None:
            return _permute_row(pi[i], perm)
        support = tuple(j for j in range(cfg.m) if perm_of[i][perm[j]] in S0[i])
        return access_rule(i, support)

    def commit(i, perm, row):
        pi[i] = row
        perm_of[i] = [perm_of[i][u] for u in perm]

    for sweep in range(passes):
        changed = 0
        for i in range(cfg.r):
            best, best_obj = None, obj
            for perm in _candidate_perms(cfg, pi, t, i, settings, C):
                cand = pi.copy()
                cand[i] = row_for(i, perm)
                val = _objective(cfg, cand, t)
                if val < best_obj - 1e-12 * abs(best_obj):
                    best, best_obj = (perm, cand[i]), val
            if best is not None:
                commit(i, *best)
                obj = best_obj
                changed += 1
        if not changed:
            # single-file moves are exhausted; try moving two files at once
            # when that neighbourhood is small enough to scan completely
            cands = [_candidate_perms(cfg, pi, t, i, settings, C) for i in range(cfg.r)]
            size = sum(len(cands[i]) * len(cands[j]) for i, j in itertools.combinations(range(cfg.r), 2))
            if 0 < size <= settings.pair_budget:
                best, best_obj = None, obj
                for i, j in itertools.combinations(range(cfg.r), 2):
                    for p in cands[i]:
                        ri = row_for(i, p)
                        for q in cands[j]:
                            cand = pi.copy()
                            cand[i], cand[j] = ri, row_for(j, q)
                            val = _objective(cfg, cand, t)
                            if val < best_obj - 1e-12 * abs(best_obj):
                                best, best_obj = (i, p, cand[i], j, q, cand[j]), val
                if best is not None:
                    i, p, ri, j, q, rj = best
                    commit(i, p, ri)
                    commit(j, q, rj)
                    obj = best_obj
                    changed = 2
        trace.add(sweep, obj, "placement", cfg.r, changed)
        if not changed:
            break
    S = make_placement(
        [j for j in range(cfg.m) if perm_of[i][j] in S0[i]] for i in range(cfg.r)
    )
    return S, pi, trace


def permute_placement(S: Placement, perms) -> Placement:
    """Placement after ``new_row[j] = old_row[perm[j]]`` for each file."""
    return make_placement([j for j in range(len(p)) if p[j] in s] for s, p in zip(S, perms))


# -- outer loop ----------------------------------------------------------------


@dataclass
class Solution:
    pi: np.ndarray
    S: Placement
    t: AuxVars
    objective: float
    trace: SolveTrace


def initial_point(cfg: SystemConfig, settings: SolverSettings = SolverSettings(),
                  S: Placement | None = None) -> tuple[np.ndarray, Placement, AuxVars]:
    """Random placement, ``pi = k/n`` projected, ``t`` at the requested start
    value pulled inside the feasible interval when needed."""
    rng = np.random.default_rng(settings.seed)
    S = random_placement(cfg, rng) if S is None else S
    pi = project_access(equal_access(cfg, S), S, cfg.k)
    pi = restore_stability(cfg, S, pi, settings.rho_target)
    t0 = feasible_t(cfg, pi, settings.t_init)
    return pi, S, AuxVars.constant(cfg.r, t0)


def restore_stability(cfg: SystemConfig, S: Placement, pi: np.ndarray, target: float = 0.95,
                      iters: int = 5000) -> np.ndarray:
    """Nearby access matrix with every server utilisation below one.

    Returns ``pi`` unchanged when it is already stable.  Otherwise runs
    projected gradient on the convex penalty ``sum_j max(0, rho_j - target)^2``
    (utilisation is linear in ``pi``) until all servers drop below ``target``.
    """
    ev = Evaluator(cfg, pi)
    if np.all(ev.rho < 1):
        return pi
    y = int(cfg.y)
    # d rho_j / d pi_ij per physical server
    coef = ev.rates[:, None] * ev.L * ev.mean_service
    coef = coef.reshape(cfg.r, cfg.m, y).mean(axis=2)
    step = 1.0 / max(float((coef ** 2).sum(axis=0).max()), 1e-300)
    cur = pi.copy()
    for _ in range(iters):
        rho = (coef * cur).sum(axis=0)
        excess = np.maximum(rho - target, 0.0)
        if not excess.any():
            return cur
        cur = project_access(cur - step * coef * excess, S, cfg.k)
    rho = (coef * cur).sum(axis=0)
    j = int(np.argmax(rho))
    if rho[j] >= 1:
        raise InfeasibleError("rho", f"server {j} utilisation {rho[j]:.6g} >= 1 for every access on this placement")
    return cur


def feasible_t(cfg: SystemConfig, pi: np.ndarray, t0: float) -> float:
    t_max = Evaluator(cfg, pi).t_max().t_max
    return t0 if t0 < t_max else 0.5 * t_max


def alternate(cfg: SystemConfig, settings: SolverSettings = SolverSettings(), *,
              pi0: np.ndarray | None = None, S0: Placement | None = None, t0: AuxVars | None = None,
              optimize_placement_step: bool = True, optimize_access_step: bool = True,
              access_rule: AccessRule | None = None) -> Solution:
    """Minimise the weighted objective by cycling access, aux and placement."""
    if pi0 is None:
        pi, S, t = initial_point(cfg, settings, S0)
    else:
        if S0 is None:
            raise ValueError("an explicit access matrix needs its placement")
        pi, S = np.array(pi0, dtype=float), S0
        t = AuxVars.constant(cfg.r, feasible_t(cfg, pi, settings.t_init))
    if t0 is not None:
        t = t0
    obj = _require_feasible(cfg, pi, t)
    trace = SolveTrace()
    trace.add(0, obj, "init", 0)
    offset = 0
    if settings.staged and optimize_placement_step and optimize_access_step:
        # settle access and t on the initial placement first; the placement
        # loop then starts from the best fixed-placement point
        first = alternate(cfg, replace(settings, staged=False), pi0=pi, S0=S, t0=t,
                          optimize_placement_step=False)
        trace.extend(SolveTrace(first.trace.rows[1:]))
        pi, t, obj = first.pi, first.t, first.objective
        offset = max((r.iteration for r in first.trace.rows), default=0)
    converged = False
    for it in range(offset + 1, settings.max_outer + 1):
        start = obj
        if optimize_access_step:
            pi, tr = optimize_access(cfg, S, t, pi, settings)
            trace.extend(tr, it)
        t, tr = optimize_aux(cfg, S, pi, t, settings)
        trace.extend(tr, it)
        if optimize_placement_step:
            S, pi, tr = optimize_placement(cfg, pi, t, S, settings, access_rule=access_rule)
            trace.extend(tr, it)
        obj = _objective(cfg, pi, t)
        log.debug("outer %d objective %.10g", it, obj)
        if start - obj <= settings.eps * abs(start):
            converged = True
            break
    trace.converged = converged
    return Solution(pi, S, t, obj, trace)


def trace_frontier(cfg: SystemConfig, thetas, settings: SolverSettings = SolverSettings()) -> list[Solution]:
    """Solutions along the mean/tail weight ``thetas`` (sorted ascending).

    Each point keeps the best of a cold start and warm starts from its
    neighbours' solutions, swept up and then down the list.  Block descent can
    stall where the best ``t`` sits on the domain edge; continuation from a
    neighbour carries an access matrix with a wider domain across.
    """
    thetas = [float(th) for th in thetas]
    if thetas != sorted(thetas):
        raise ValueError("thetas must be sorted ascending")
    cfgs = [cfg.with_(theta=th) for th in thetas]
    best: list[Solution | None] = [None] * len(thetas)

    def keep(idx, sol):
        if best[idx] is None or sol.objective < best[idx].objective:
            best[idx] = sol

    def warm(idx, src):
        prev = best[src]
        return alternate(cfgs[idx], settings, pi0=prev.pi, S0=prev.S, t0=inside_domain(cfg, prev.pi, prev.t))

    for idx in {0, len(thetas) - 1}:
        keep(idx, alternate(cfgs[idx], settings))
    for idx in range(1, len(thetas)):
        keep(idx, warm(idx, idx - 1))
    for idx in range(len(thetas) - 2, -1, -1):
        keep(idx, warm(idx, idx + 1))
    return best


# -- solution files --------------------------------------------------------------


def solution_to_csv(pi: np.ndarray, S: Placement, t: AuxVars) -> str:
    """Long-format CSV: one ``pi`` row per placed (file, server) pair plus the
    two bound parameters per file."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "file", "server", "value"])
    for i, s in enumerate(S):
        for j in s:
            w.writerow(["pi", i, j, repr(float(pi[i, j]))])
    for i in range(len(S)):
        w.writerow(["t_mean", i, "", repr(float(t.t_mean[i]))])
        w.writerow(["t_tail", i, "", repr(float(t.t_tail[i]))])
    return buf.getvalue()


def solution_from_csv(text: str, cfg: SystemConfig) -> tuple[np.ndarray, Placement, AuxVars]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames != ["kind", "file", "server", "value"]:
        raise ValueError("solution file must have columns kind,file,server,value")
    pi = np.zeros((cfg.r, cfg.m))
    sets: list[list[int]] = [[] for _ in range(cfg.r)]
    tm = np.full(cfg.r, np.nan)
    tt = np.full(cfg.r, np.nan)
    for line, row in enumerate(reader, start=2):
        try:
            i = int(row["file"])
            val = float(row["value"])
            if not 0 <= i < cfg.r:
                raise ValueError(f"file index {i} out of range")
            if row["kind"] == "pi":
                j = int(row["server"])
                if not 0 <= j < cfg.m:
                    raise ValueError(f"server index {j} out of range")
                pi[i, j] = val
                sets[i].append(j)
            elif row["kind"] == "t_mean":
                tm[i] = val
            elif row["kind"] == "t_tail":
                tt[i] = val
            else:
                raise ValueError(f"unknown kind {row['kind']!r}")
        except (TypeError, ValueError) as exc:
            raise ValueError(f"solution line {line}: {exc}") from None
    if np.isnan(tm).any() or np.isnan(tt).any():
        raise ValueError("solution is missing t values for some files")
    S = make_placement(sets)
    problems = validate_config(cfg, S, pi)
    if problems:
        raise InfeasibleError("infeasible-point", problems[0])
    return pi, S, AuxVars(tm, tt)
