"""Discrete-event ground truth for the stall bounds.

Requests for file ``i`` arrive as a Poisson process of rate ``lambda_i``.  Each
request is dispatched to ``k_i`` servers drawn with marginals ``pi[i]``; every
chosen server appends all of the file's chunks to its FIFO queue at once and
serves them back to back.  Segment ``g`` is playable when the last of its
``k_i`` chunks is in; playback starts at ``ds`` and the stall is the total
freeze time.

Because every queue is FIFO and arrivals are known up front, each server's
completion times follow the max-plus (Lindley) recursion
``C_n = max(a_n, C_{n-1}) + R_n``, which is evaluated in closed form as
``C_n = cumR_n + max_{m <= n}(a_m - cumR_{m-1})``.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import InfeasibleError, Placement, SystemConfig, ROW_SUM_TOL


class InsufficientSamples(ValueError):
    pass


@dataclass(frozen=True)
class SimSettings:
    requests: int | None = 12_500
    duration: float | None = None
    warmup: float = 0.2
    replications: int = 1
    seed: int = 0
    xs: tuple[float, ...] = ()
    batches: int = 20
    keep_samples: bool = False
    workers: int = 1

    def __post_init__(self):
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup fraction must lie in [0, 1)")
        if self.replications < 1:
            raise ValueError("need at least one replication")
        if (self.requests is None) == (self.duration is None):
            raise ValueError("set exactly one of requests / duration")


def sample_server_set(pi_row: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``k`` distinct servers with inclusion probabilities ``pi_row``.

    Systematic sampling over a randomly ordered list: a single uniform offset
    ``u`` and the points ``u, u+1, ..., u+k-1`` on the cumulated row.  Each
    server owns an interval of length ``pi_j <= 1`` so it is hit at most once
    and with probability exactly ``pi_j``.
    """
    pi_row = np.asarray(pi_row, dtype=float)
    if np.any(pi_row < -ROW_SUM_TOL) or np.any(pi_row > 1 + ROW_SUM_TOL):
        raise InfeasibleError("access", "probabilities must lie in [0, 1]")
    if abs(pi_row.sum() - k) > 1e-6:
        raise InfeasibleError("access", f"row sums to {pi_row.sum():.9g}, expected k={k}")
    support = np.flatnonzero(pi_row > 0)
    order = rng.permutation(support)
    edges = np.cumsum(pi_row[order])
    edges *= k / edges[-1]
    points = rng.random() + np.arange(k)
    return np.sort(order[np.searchsorted(edges, points, side="right")])


def playback_times(download: np.ndarray, ds: float, tau: float) -> np.ndarray:
    """Play-start time of every segment from segment download times."""
    T = np.empty(len(download))
    T[0] = max(ds, download[0])
    for q in range(1, len(download)):
        T[q] = max(T[q - 1] + tau, download[q])
    return T


def stall_from_downloads(download: np.ndarray, ds: float, tau: float) -> float:
    L = len(download)
    return float(playback_times(download, ds, tau)[-1] - ds - (L - 1) * tau)


@dataclass
class Trace:
    """Raw output of one replication."""

    arrival: np.ndarray  # per request
    file: np.ndarray  # per request
    stall: np.ndarray  # per request
    warm: np.ndarray  # bool mask of post-warmup requests
    busy: np.ndarray  # per logical queue, busy seconds inside the window
    window: float
    # per chunk (only the served ones): request index, logical queue, position
    # of the chunk in the job (1-based), download delay from arrival
    chunk_request: np.ndarray
    chunk_queue: np.ndarray
    chunk_pos: np.ndarray
    chunk_delay: np.ndarray


def _arrivals(cfg: SystemConfig, sim: SimSettings, rng: np.random.Generator):
    rates = cfg.rates
    total = rates.sum()
    if total <= 0:
        raise InfeasibleError("workload", "total arrival rate is zero")
    if sim.requests is not None:
        n = int(sim.requests)
        times = np.cumsum(rng.exponential(1.0 / total, size=n))
    else:
        n = rng.poisson(total * sim.duration)
        times = np.sort(rng.uniform(0.0, sim.duration, size=n))
    files = rng.choice(cfg.r, size=n, p=rates / total)
    return times, files


def simulate_trace(cfg: SystemConfig, pi: np.ndarray, sim: SimSettings, seed) -> Trace:
    rng = np.random.default_rng(seed)
    pi = np.asarray(pi, dtype=float)
    y = int(cfg.y)
    alpha = np.repeat(cfg.alpha / y, y)
    beta = np.repeat(cfg.beta * y, y)
    n_queues = cfg.m * y
    arrival, files = _arrivals(cfg, sim, rng)
    n_req = arrival.size
    seg = cfg.segments
    cached = np.zeros((cfg.r, cfg.m), dtype=int)
    for i, f in enumerate(cfg.files):
        for j, c in f.cached.items():
            cached[i, j] = c

    # dispatch: one job per (request, chosen server) that still has chunks to send
    job_req, job_queue, job_first = [], [], []
    k = cfg.k
    for n in range(n_req):
        i = files[n]
        chosen = sample_server_set(pi[i], k[i], rng)
        streams = rng.integers(0, y, size=chosen.size) if y > 1 else np.zeros(chosen.size, dtype=int)
        for j, v in zip(chosen, streams):
            c = cached[i, j]
            if c < seg[i]:
                job_req.append(n)
                job_queue.append(j * y + v)
                job_first.append(c)
    job_req = np.asarray(job_req, dtype=np.int64)
    job_queue = np.asarray(job_queue, dtype=np.int64)
    job_first = np.asarray(job_first, dtype=np.int64)
    job_len = seg[files[job_req]] - job_first

    # chunk service times, grouped by job
    n_chunks = int(job_len.sum())
    chunk_job = np.repeat(np.arange(job_req.size), job_len)
    q = job_queue[chunk_job]
    service = beta[q] + rng.exponential(1.0, size=n_chunks) / alpha[q]
    job_start_idx = np.concatenate([[0], np.cumsum(job_len)[:-1]]).astype(np.int64)
    within = np.arange(n_chunks) - job_start_idx[chunk_job]
    job_R = np.add.reduceat(service, job_start_idx) if n_chunks else np.zeros(0)

    # FIFO per queue via the max-plus recursion; jobs are already in arrival order
    job_arr = arrival[job_req]
    job_done = np.empty(job_req.size)
    t_end = arrival[-1] if n_req else 0.0
    first = int(np.floor(sim.warmup * n_req))
    t_warm = arrival[first] if n_req and first < n_req else 0.0
    busy = np.zeros(n_queues)
    for qid in range(n_queues):
        idx = np.flatnonzero(job_queue == qid)
        if idx.size == 0:
            continue
        R = job_R[idx]
        cumR = np.cumsum(R)
        prev = np.concatenate([[0.0], cumR[:-1]])
        job_done[idx] = cumR + np.maximum.accumulate(job_arr[idx] - prev)
        start = job_done[idx] - R
        busy[qid] = np.clip(np.minimum(job_done[idx], t_end) - np.maximum(start, t_warm), 0.0, None).sum()

    job_begin = job_done - job_R
    csum = np.cumsum(service)
    base = np.concatenate([[0.0], csum])[job_start_idx]
    chunk_done = job_begin[chunk_job] + (csum - base[chunk_job])
    chunk_delay = chunk_done - job_arr[chunk_job]

    # segment download time = slowest of the k chunks (cached chunks count as 0)
    req_len = seg[files]
    req_off = np.concatenate([[0], np.cumsum(req_len)[:-1]]).astype(np.int64)
    download = np.zeros(int(req_len.sum()))
    seg_index = job_first[chunk_job] + within
    np.maximum.at(download, req_off[job_req[chunk_job]] + seg_index, chunk_delay)
    pos = np.arange(download.size) - np.repeat(req_off, req_len)
    lateness = download - cfg.ds - pos * cfg.tau
    stall = np.maximum(np.maximum.reduceat(lateness, req_off), 0.0) if n_req else np.zeros(0)

    warm = np.zeros(n_req, dtype=bool)
    warm[first:] = True
    return Trace(
        arrival=arrival,
        file=files,
        stall=stall,
        warm=warm,
        busy=busy,
        window=max(t_end - t_warm, 0.0),
        chunk_request=job_req[chunk_job],
        chunk_queue=q,
        chunk_pos=within + 1,
        chunk_delay=chunk_delay,
    )


@dataclass
class Estimate:
    mean: float
    mean_se: float
    tail: dict
    n: int


def estimate_metrics(samples, xs=(), batches: int = 20) -> Estimate:
    """Sample mean and tail frequencies with batch-means standard errors."""
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        raise InsufficientSamples(f"need at least 2 samples, got {s.size}")
    nb = min(max(batches, 10), s.size)
    chunks = np.array_split(s, nb)

    def se(values):
        means = np.array([v.mean() for v in values])
        return float(means.std(ddof=1) / np.sqrt(nb)) if nb > 1 else 0.0

    tail = {}
    for x in xs:
        hits = [(c >= x).astype(float) for c in chunks]
        tail[float(x)] = (float((s >= x).mean()), se(hits))
    return Estimate(float(s.mean()), se(chunks), tail, int(s.size))


@dataclass
class SimReport:
    files: list  # list[Estimate | None]
    rho_hat: np.ndarray
    unstable: bool
    xs: tuple
    samples: np.ndarray | None = field(default=None, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        head = ["kind", "index", "n", "mean_stall", "mean_stall_se"]
        for x in self.xs:
            head += [f"tail@{x:g}", f"tail@{x:g}_se"]
        head.append("rho_hat")
        w.writerow(head)
        for i, e in enumerate(self.files):
            if e is None:
                w.writerow(["file", i, 0] + [""] * (len(head) - 3))
                continue
            row = ["file", i, e.n, repr(e.mean), repr(e.mean_se)]
            for x in self.xs:
                p, s = e.tail[float(x)]
                row += [repr(p), repr(s)]
            w.writerow(row + [""])
        for j, r in enumerate(self.rho_hat):
            w.writerow(["server", j] + [""] * (len(head) - 3) + [repr(float(r))])
        return buf.getvalue()

    def samples_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["file", "arrival", "stall"])
        for f, a, s in self.samples:
            w.writerow([int(f), repr(float(a)), repr(float(s))])
        return buf.getvalue()


def _one(args):
    cfg, pi, sim, seed = args
    return simulate_trace(cfg, pi, sim, seed)


def run_simulation(cfg: SystemConfig, pi: np.ndarray, S: Placement | None, sim: SimSettings) -> SimReport:
    """Simulate ``sim.replications`` independent runs and merge the statistics."""
    from .analysis import server_loads

    _, rho = server_loads(cfg, pi)
    seeds = np.random.SeedSequence(sim.seed).spawn(sim.replications)
    jobs = [(cfg, pi, sim, s) for s in seeds]
    if sim.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(sim.workers) as ex:
            traces = list(ex.map(_one, jobs))
    else:
        traces = [_one(j) for j in jobs]
    per_file = []
    for i in range(cfg.r):
        s = np.concatenate([tr.stall[tr.warm & (tr.file == i)] for tr in traces])
        per_file.append(estimate_metrics(s, sim.xs, sim.batches) if s.size >= 2 else None)
    window = sum(tr.window for tr in traces)
    busy = sum(tr.busy for tr in traces)
    rho_hat = np.clip(busy / window, 0.0, 1.0) if window > 0 else np.zeros_like(traces[0].busy)
    samples = None
    if sim.keep_samples:
        samples = np.concatenate(
            [np.column_stack([tr.file[tr.warm], tr.arrival[tr.warm], tr.stall[tr.warm]]) for tr in traces]
        )
    return SimReport(per_file, rho_hat, bool(np.any(rho >= 1)), tuple(sim.xs), samples)
