import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import logsumexp

import oracles
from conftest import two_server_cfg
from stallbound.analysis import (
    DomainError, Evaluator, _dlog_geometric, _log_geometric, apply_caching, apply_parallel_streams,
    chunk_mgf, download_mgf, file_service_mgf, h_ij, mean_stall_bound, server_loads, shifted_chunk_mgf,
    t_domain_max, tail_bound, weighted_objective,
)
from stallbound.model import AuxVars, ServerParams, VideoFile, equal_access, make_placement, random_placement


@pytest.fixture(scope="module")
def point(small_cfg):
    S = random_placement(small_cfg, np.random.default_rng(0))
    return small_cfg, equal_access(small_cfg, S), S


def test_chunk_mgf_against_quadrature():
    assert chunk_mgf(ServerParams(18.2298, 0.01), 5.0) == pytest.approx(
        oracles.chunk_mgf_quad(18.2298, 0.01, 5.0), rel=1e-10)
    # frozen from the quadrature oracle
    assert chunk_mgf(ServerParams(18.2298, 0.01), 5.0) == pytest.approx(1.44858, rel=1e-5)


def test_chunk_mgf_pole():
    with pytest.raises(DomainError):
        chunk_mgf(ServerParams(2.0, 0.1), 2.0)


def test_shifted_mgf_constraint_sign_matches_value():
    sp = ServerParams(10.0, 0.01)
    for t in (0.5, 2.0, 8.0, 9.9):
        s = shifted_chunk_mgf(sp, t, tau=0.2)
        assert s.below_one == (s.value < 1)


def test_bounds_match_loop_oracle(point):
    cfg, pi, _ = point
    for i in range(cfg.r):
        for t in (0.1, 0.5, 0.75):
            assert mean_stall_bound(cfg, pi, i, t) == pytest.approx(oracles.mean_bound(cfg, pi, i, t), rel=1e-11)
            for x in (0.0, 2.0, 7.0):
                assert tail_bound(cfg, pi, i, t, x) == pytest.approx(oracles.tail_bound(cfg, pi, i, t, x), rel=1e-11)


def test_frozen_values(point):
    # equal access on the seed-0 placement of configs/small.cfg, checked against the loop oracle
    cfg, pi, _ = point
    assert mean_stall_bound(cfg, pi, 0, 0.5) == pytest.approx(4.413022126572, rel=1e-10)
    assert tail_bound(cfg, pi, 0, 0.5, 2.0) == pytest.approx(0.753318282580, rel=1e-10)
    lim = t_domain_max(cfg, pi)
    assert lim.constraint == "46" and lim.server == 2
    assert lim.t_max == pytest.approx(0.78094199, rel=1e-7)


def test_service_and_download_mgf_match_oracle(point):
    cfg, pi, _ = point
    for j in range(cfg.m):
        assert file_service_mgf(cfg, pi, j, 0.4) == pytest.approx(oracles.service_mgf(cfg, pi, j, 0.4), rel=1e-12)
        for ell in (1, 3, 7):
            assert download_mgf(cfg, pi, 0, j, ell, 0.4) == pytest.approx(
                oracles.download(cfg, pi, j, ell, 0.4), rel=1e-12)


def test_service_mgf_slope_is_mean_service(point):
    cfg, pi, _ = point
    Lam, rho = server_loads(cfg, pi)
    h = 1e-6
    for j in range(cfg.m):
        slope = (file_service_mgf(cfg, pi, j, h) - file_service_mgf(cfg, pi, j, -h)) / (2 * h)
        assert slope == pytest.approx(rho[j] / Lam[j], rel=1e-6)


def test_closed_form_matches_direct_sum(point):
    cfg, pi, _ = point
    for i in range(cfg.r):
        for j in range(cfg.m):
            for t in (0.05, 0.4, 0.77):
                d = h_ij(cfg, pi, i, j, t, mode="direct")
                assert h_ij(cfg, pi, i, j, t) == pytest.approx(d, rel=1e-9)


def test_single_segment_reduces_to_download_latency():
    cfg = two_server_cfg(lam=1.0, L=1, alphas=(8.0, 12.0))
    pi = np.array([[0.3, 0.7]])
    for t in (0.5, 2.0):
        for j in range(2):
            want = np.exp(-t * cfg.ds) * download_mgf(cfg, pi, 0, j, 1, t)
            assert h_ij(cfg, pi, 0, j, t) == want or h_ij(cfg, pi, 0, j, t) == pytest.approx(want, rel=1e-15)
        expected = np.log(sum(pi[0, j] * (1 + np.exp(-t * cfg.ds) * download_mgf(cfg, pi, 0, j, 1, t))
                              for j in range(2))) / t
        assert mean_stall_bound(cfg, pi, 0, t) == pytest.approx(expected, rel=1e-14)


def test_light_load_limit():
    # the queue factor tends to B(t), not to 1
    base = two_server_cfg(lam=1.0, L=4, alphas=(8.0, 12.0))
    pi = np.array([[0.4, 0.6]])
    cfg = base.scale_rates(1e-10)
    t = 1.5
    for j in range(2):
        M = chunk_mgf(cfg.servers[j], t)
        B = file_service_mgf(cfg, pi, j, t)
        assert B == pytest.approx(M ** 4, rel=1e-12)
        assert download_mgf(cfg, pi, 0, j, 2, t) == pytest.approx(B * M ** 2, rel=1e-8)


def test_idle_server_has_no_queue_factor():
    servers = (ServerParams(8.0, 0.01), ServerParams(12.0, 0.01), ServerParams(9.0, 0.01))
    files = (VideoFile(3, 1, 2, 0.5), VideoFile(2, 1, 3, 0.0))
    from stallbound.model import SystemConfig
    cfg = SystemConfig(servers=servers, files=files, tau=1.0, ds=1.0)
    pi = np.array([[0.5, 0.5, 0.0], [0.2, 0.3, 0.5]])
    M = chunk_mgf(servers[2], 1.0)
    assert download_mgf(cfg, pi, 1, 2, 2, 1.0) == pytest.approx(M ** 2, rel=1e-14)


def test_single_stream_is_identity(point):
    cfg, pi, _ = point
    c2, p2 = apply_parallel_streams(cfg, pi)
    assert c2 is cfg and np.array_equal(p2, pi)
    t = AuxVars.constant(cfg.r, 0.3)
    assert weighted_objective(cfg, pi, None, t) == weighted_objective(c2, p2, None, t)


def test_parallel_streams_preserve_load(point):
    cfg, pi, _ = point
    c2, p2 = apply_parallel_streams(cfg.with_(y=3), pi)
    assert c2.m == 3 * cfg.m
    np.testing.assert_allclose(p2.sum(axis=1), pi.sum(axis=1))
    ev = Evaluator(cfg.with_(y=3), pi)
    _, rho = server_loads(cfg, pi)
    # each stream sees a third of the requests with three times the mean service
    np.testing.assert_allclose(ev.rho.reshape(cfg.m, 3).mean(axis=1), rho * (3 * 0.01 + 3 / cfg.alpha) /
                               (0.01 + 1 / cfg.alpha) / 3, rtol=1e-12)


def test_zero_cache_is_identity(point):
    cfg, pi, _ = point
    files = tuple(VideoFile(f.segments, f.k, f.n, f.rate, cached={0: 0, 1: 0}, id=f.id) for f in cfg.files)
    c2 = cfg.with_(files=files)
    t = AuxVars.constant(cfg.r, 0.3)
    assert weighted_objective(c2, pi, None, t) == weighted_objective(cfg, pi, None, t)
    np.testing.assert_array_equal(apply_caching(c2).segments, apply_caching(cfg).segments)


def test_full_cache_removes_load(point):
    cfg, pi, _ = point
    f0 = cfg.files[0]
    full = VideoFile(f0.segments, f0.k, f0.n, f0.rate, cached={j: f0.segments for j in range(cfg.m)}, id=f0.id)
    c2 = cfg.with_(files=(full,) + cfg.files[1:])
    Lam, rho = server_loads(c2, pi)
    rest = cfg.with_(files=(VideoFile(1, f0.k, f0.n, 0.0),) + cfg.files[1:])
    Lam_r, rho_r = server_loads(rest, pi)
    np.testing.assert_allclose(rho, rho_r, rtol=1e-14)
    np.testing.assert_allclose(Lam, Lam_r, rtol=1e-14)


def test_partial_cache_matches_oracle(point):
    cfg, pi, _ = point
    f0 = cfg.files[0]
    c = VideoFile(f0.segments, f0.k, f0.n, f0.rate, cached={j: 2 for j in range(cfg.m)}, id=f0.id)
    c2 = cfg.with_(files=(c,) + cfg.files[1:])
    assert mean_stall_bound(c2, pi, 0, 0.3) == pytest.approx(oracles.mean_bound(c2, pi, 0, 0.3), rel=1e-11)


def test_domain_errors(point):
    cfg, pi, _ = point
    lim = t_domain_max(cfg, pi).t_max
    with pytest.raises(DomainError) as e:
        mean_stall_bound(cfg, pi, 0, lim * 1.01)
    assert e.value.constraint == "46"
    with pytest.raises(DomainError):
        tail_bound(cfg, pi, 0, 0.0)
    assert np.isfinite(mean_stall_bound(cfg, pi, 0, lim * 0.999))
    hot = cfg.scale_rates(10.0)
    with pytest.raises(DomainError) as e:
        download_mgf(hot, pi, 0, 2, 1, 0.1)
    assert e.value.constraint == "rho"


def test_domain_is_where_constraints_hold(point):
    cfg, pi, _ = point
    ev = Evaluator(cfg, pi)
    lim = ev.t_max().t_max
    for t in np.linspace(lim * 0.01, lim * 0.999, 25):
        assert ev.feasibility(t) == []
    assert ev.feasibility(lim * 1.001)


def test_tail_bound_decreases_in_x(point):
    cfg, pi, _ = point
    vals = [tail_bound(cfg, pi, 1, 0.4, x) for x in np.linspace(0, 20, 30)]
    assert all(a > b for a, b in zip(vals, vals[1:]))


def test_undiscounted_tail_is_weaker(point):
    cfg, pi, _ = point
    for i in range(cfg.r):
        assert tail_bound(cfg, pi, i, 0.4, discount=False) >= tail_bound(cfg, pi, i, 0.4)


@settings(max_examples=200, deadline=None)
@given(st.floats(-0.5, 0.5), st.integers(1, 40))
def test_geometric_sum_against_direct(lq, L):
    want = logsumexp(np.arange(L) * lq)
    assert _log_geometric(np.array([lq]), np.array([L]))[0] == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_geometric_sum_continuous_at_one():
    L = np.full(7, 12)
    lq = np.array([-1e-6, -1e-10, -1e-13, 0.0, 1e-13, 1e-10, 1e-6])
    vals = _log_geometric(lq, L)
    np.testing.assert_allclose(vals, np.log(12) + 5.5 * lq, rtol=1e-9)
    h = 1e-6
    for x in (-0.3, -2e-5, 0.0, 3e-6, 0.2):
        fd = (_log_geometric(np.array([x + h]), np.array([12]))[0]
              - _log_geometric(np.array([x - h]), np.array([12]))[0]) / (2 * h)
        assert _dlog_geometric(np.array([x]), np.array([12]))[0] == pytest.approx(fd, rel=1e-5)


def test_equal_split_on_symmetric_servers_is_symmetric():
    cfg = two_server_cfg()
    pi = equal_access(cfg, make_placement([(0, 1)]))
    assert h_ij(cfg, pi, 0, 0, 0.5) == h_ij(cfg, pi, 0, 1, 0.5)
