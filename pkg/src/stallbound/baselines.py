"""Reference policies the optimiser is compared against.

Each policy restricts one or more blocks of the joint problem: random
placement instead of optimised placement, and a fixed access formula (equal
split or proportional to server speed) instead of optimised access.  The
remaining blocks go through the same solver as the full method, starting
from the same seeded random placement.
"""
from __future__ import annotations

import csv
import enum
import io
from dataclasses import dataclass, replace

import numpy as np

from .analysis import Evaluator, weight_vector
from .model import AuxVars, InfeasibleError, Placement, SystemConfig, project_access, random_placement
from .optimizer import SolverSettings, Solution, alternate, inside_domain, optimize_aux


class PolicyKind(enum.Enum):
    RP_OA = "RP-OA"
    OP_PEA = "OP-PEA"
    RP_PEA = "RP-PEA"
    OP_PSP = "OP-PSP"
    RP_PSP = "RP-PSP"

    @property
    def optimizes_placement(self) -> bool:
        return self.value.startswith("OP")

    @property
    def access(self) -> str:
        return self.value.split("-")[1]


def service_rates(cfg: SystemConfig) -> np.ndarray:
    """Mean chunk service rate ``1 / (beta + 1/alpha)`` per server."""
    return 1.0 / (cfg.beta + 1.0 / cfg.alpha)


def equal_rule(cfg: SystemConfig):
    k = cfg.k

    def rule(i: int, support) -> np.ndarray:
        raw = np.zeros(cfg.m)
        raw[list(support)] = k[i] / len(support)
        return _project_row(raw, support, k[i])

    return rule


def proportional_rule(cfg: SystemConfig):
    """``pi_ij = k_i mu_j / sum_j mu_j`` projected onto the file's servers."""
    k = cfg.k
    mu = service_rates(cfg)
    share = mu / mu.sum()

    def rule(i: int, support) -> np.ndarray:
        return _project_row(k[i] * share, support, k[i])

    return rule


def _project_row(raw, support, k):
    row = project_access(raw[None, :], (tuple(support),), [k])
    return row[0]


def _fixed_access(cfg, S, rule):
    return np.array([rule(i, s) for i, s in enumerate(S)])


def make_baseline(kind: PolicyKind | str, cfg: SystemConfig, seed: int = 0,
                  settings: SolverSettings = SolverSettings()) -> Solution:
    kind = PolicyKind(kind) if isinstance(kind, str) else kind
    settings = replace(settings, seed=seed)
    S = random_placement(cfg, np.random.default_rng(seed))
    if kind.access == "OA":
        try:
            return alternate(cfg, settings, S0=S, optimize_placement_step=False)
        except InfeasibleError as exc:
            raise InfeasibleError(exc.category, f"{kind.value}: {exc.detail}") from exc
    rule = equal_rule(cfg) if kind.access == "PEA" else proportional_rule(cfg)
    pi = _fixed_access(cfg, S, rule)
    ev = Evaluator(cfg, pi)
    if np.any(ev.rho >= 1):
        j = int(np.argmax(ev.rho))
        raise InfeasibleError("rho", f"{kind.value}: server {j} has utilisation {ev.rho[j]:.6g} >= 1")
    try:
        return alternate(cfg, settings, pi0=pi, S0=S, optimize_access_step=False,
                         optimize_placement_step=kind.optimizes_placement, access_rule=rule)
    except InfeasibleError as exc:
        raise InfeasibleError(exc.category, f"{kind.value}: {exc.detail}") from exc


@dataclass
class PolicyRow:
    policy: str
    objective: float
    mean_stall: float
    tail: float


def objective_parts(cfg: SystemConfig, pi: np.ndarray, t: AuxVars) -> tuple[float, float]:
    """Request-weighted mean-stall bound and tail bound.

    A part with zero weight in the objective (theta at 0 or 1) has arbitrary
    bound parameters after optimisation; they are re-tuned for that metric
    before reporting.
    """
    if cfg.theta in (0.0, 1.0):
        t, _ = optimize_aux(cfg.with_(theta=0.5), None, pi, inside_domain(cfg, pi, t))
    ev = Evaluator(cfg, pi)
    w = weight_vector(cfg)
    mean = np.where(w > 0, ev.mean_bounds(t.t_mean), 0.0)
    tail = np.where(w > 0, ev.tail_bounds(t.t_tail), 0.0)
    return float(w @ mean), float(w @ tail)


def policy_row(name: str, cfg: SystemConfig, sol: Solution) -> PolicyRow:
    mean, tail = objective_parts(cfg, sol.pi, sol.t)
    return PolicyRow(name, sol.objective, mean, tail)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "objective", "mean_stall", "tail"])
    for r in rows:
        w.writerow([r.policy, repr(r.objective), repr(r.mean_stall), repr(r.tail)])
    return buf.getvalue()


def compare_policies(cfg: SystemConfig, seed: int = 0, settings: SolverSettings = SolverSettings(),
                     kinds=tuple(PolicyKind)) -> list[PolicyRow]:
    """Full optimiser followed by each baseline, all from the same placement."""
    full = alternate(cfg, replace(settings, seed=seed))
    rows = [policy_row("Proposed", cfg, full)]
    for kind in kinds:
        rows.append(policy_row(kind.value, cfg, make_baseline(kind, cfg, seed, settings)))
    return rows
