"""Independent scalar reference implementations used by the tests.

These follow the bound formulas term by term with plain loops and no log-space
tricks, so they only work for moderate parameters.
"""
import math

import numpy as np
from scipy.integrate import quad


def chunk_mgf_quad(alpha, beta, t):
    """E[exp(t X)] for X = beta + Exp(alpha) by numerical integration."""
    val, _ = quad(lambda u: alpha * math.exp(t * u - alpha * (u - beta)), beta, np.inf,
                  epsabs=0, epsrel=1e-12, limit=200)
    return val


def loads(cfg, pi):
    lam = np.zeros(cfg.m)
    rho = np.zeros(cfg.m)
    for i, f in enumerate(cfg.files):
        for j, s in enumerate(cfg.servers):
            L = f.segments - f.cached_on(j)
            if L > 0:
                lam[j] += f.rate * pi[i, j]
                rho[j] += f.rate * pi[i, j] * L * (s.beta + 1 / s.alpha)
    return lam, rho


def service_mgf(cfg, pi, j, t):
    s = cfg.servers[j]
    M = math.exp(s.beta * t) * s.alpha / (s.alpha - t)
    lam, _ = loads(cfg, pi)
    B = 0.0
    for i, f in enumerate(cfg.files):
        L = f.segments - f.cached_on(j)
        if L > 0:
            B += f.rate * pi[i, j] / lam[j] * M ** L
    return B


def download(cfg, pi, j, ell, t):
    s = cfg.servers[j]
    M = math.exp(s.beta * t) * s.alpha / (s.alpha - t)
    lam, rho = loads(cfg, pi)
    if lam[j] == 0:
        return M ** ell
    B = service_mgf(cfg, pi, j, t)
    return (1 - rho[j]) * t * B / (t - lam[j] * (B - 1)) * M ** ell


def H(cfg, pi, i, j, t):
    f = cfg.files[i]
    c = f.cached_on(j)
    total = 0.0
    for ell in range(1, f.segments - c + 1):
        total += math.exp(-t * (cfg.ds + c * cfg.tau + (ell - 1) * cfg.tau)) * download(cfg, pi, j, ell, t)
    return total


def mean_bound(cfg, pi, i, t):
    return math.log(sum(pi[i, j] * (1 + H(cfg, pi, i, j, t)) for j in range(cfg.m))) / t


def tail_bound(cfg, pi, i, t, x):
    f = cfg.files[i]
    horizon = cfg.ds + (f.segments - 1) * cfg.tau
    return math.exp(-t * x) * sum(pi[i, j] * (1 + math.exp(-t * horizon) * H(cfg, pi, i, j, t))
                                  for j in range(cfg.m))
