"""Verification harness: numerical rank of kernelised attention, impulse-response
receptive fields, MAC accounting and attention benchmarks."""

from __future__ import annotations

import math
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import instrument
from .attention import (
    TileConfig, linear_attention_linear, linear_attention_quadratic, softmax_attention, tiled_exact_attention,
)
from .errors import ConfigError, NumericError
from .feature_maps import FeatureMap, HedgehogParams, apply_feature_map
from .instrument import MacReport, count_macs  # noqa: F401  (re-exported)
from .large_kernel import LkdConfig, hlk_branch, init_hlk_weights, predict_erf
from .tensor import EPS, rng as make_rng, softmax_lastdim

RANK_KINDS = ("relu", "elu1", "symrelu", "hedgehog", "identity", "softmax")


# ---------------------------------------------------------------- Jacobi SVD

def _round_robin(n):
    """Rounds of disjoint (p, q) index pairs covering every pair once."""
    m = n + n % 2
    idx = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a < n and b < n]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def jacobi_singular_values(A, tol: float = 1e-10, max_sweeps: int = 100, precondition: bool = True):
    """Singular values (descending) by two-sided Jacobi rotations.

    Each step diagonalises n/2 disjoint 2x2 blocks at once (round-robin order)
    with a left and a right plane rotation. Iteration stops once the
    off-diagonal Frobenius norm drops below ``tol * ||A||_F``. With
    ``precondition`` the matrix is first replaced by the triangular factor of
    two column-pivoted QR passes, which has the same singular values and
    converges in far fewer sweeps.
    """
    A = np.array(A, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {A.shape}")
    if A.shape[0] < A.shape[1]:
        A = A.T
    k = min(A.shape)
    fro = np.linalg.norm(A)
    if fro == 0.0:
        return np.zeros(k)
    if precondition:
        _, R, _ = scipy.linalg.qr(A, mode="economic", pivoting=True)
        _, R2, _ = scipy.linalg.qr(R.T, mode="economic", pivoting=True)
        A = np.ascontiguousarray(R2.T)
    elif A.shape[0] != A.shape[1]:
        A = np.linalg.qr(A, mode="r")
    n = A.shape[0]
    rounds = _round_robin(n)
    off = np.inf
    for _ in range(max_sweeps + 1):
        off = np.linalg.norm(A - np.diag(np.diag(A)))
        if off <= tol * fro:
            return np.sort(np.abs(np.diag(A)))[::-1]
        for p, q in rounds:
            a, b, c, d = A[p, p], A[p, q], A[q, p], A[q, q]
            alpha = np.arctan2(c - b, a + d)
            beta = np.arctan2(c + b, a - d)
            tl, tr = (alpha + beta) / 2, (beta - alpha) / 2
            cl, sl = np.cos(tl)[:, None], np.sin(tl)[:, None]
            cr, sr = np.cos(tr), np.sin(tr)
            rp, rq = A[p, :], A[q, :]
            A[p, :], A[q, :] = cl * rp + sl * rq, cl * rq - sl * rp
            cp, cq = A[:, p], A[:, q]
            A[:, p], A[:, q] = cp * cr + cq * sr, cq * cr - cp * sr
    raise NumericError(
        f"Jacobi SVD did not converge in {max_sweeps} sweeps (n={n}, off/||A||={off / fro:.3e}, tol={tol:g})"
    )


def top_singular_values_power(A, k: int = 3, iters: int = 5000, seed: int = 0, tol: float = 1e-14):
    """Top-k singular values from subspace (block power) iteration on A^T A."""
    A = np.asarray(A, dtype=np.float64)
    g = make_rng(seed)
    block = min(k + 4, A.shape[1])
    X, _ = np.linalg.qr(g.standard_normal((A.shape[1], block)))
    prev = None
    for _ in range(iters):
        Y = A.T @ (A @ X)
        X, _ = np.linalg.qr(Y)
        H = X.T @ (A.T @ (A @ X))
        lam = np.sort(np.linalg.eigvalsh((H + H.T) / 2))[::-1][:k]
        if prev is not None and np.all(np.abs(lam - prev) <= tol * abs(lam[0])):
            break
        prev = lam
    return np.sqrt(np.maximum(lam, 0.0))


# ---------------------------------------------------------------- rank

@dataclass
class RankReport:
    kind: str
    N: int
    d: int
    seed: int
    tol: float
    singular_values: np.ndarray = field(repr=False)
    rank: int = 0
    m: int = 1

    @property
    def bound(self) -> int:
        r = {"symrelu": 2 * self.d, "hedgehog": 2 * self.m * self.d, "softmax": self.N}.get(self.kind, self.d)
        return min(self.N, r)


def numerical_rank(s, tol: float) -> int:
    s = np.asarray(s)
    if s.size == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def feature_map_for(kind: str, d: int, m: int = 1, rng=None) -> FeatureMap:
    if kind == "hedgehog":
        return FeatureMap("hedgehog", HedgehogParams.init(d, m, rng if rng is not None else 0))
    return FeatureMap(kind)


def kernel_attention_matrix(fmap: FeatureMap, Q, K, eps: float = EPS):
    """Row-normalised ``phi(Q) phi(K)^T`` returned in factored form (left, right)."""
    fq = apply_feature_map(fmap, np.asarray(Q, np.float64)).astype(np.float64)
    fk = apply_feature_map(fmap, np.asarray(K, np.float64)).astype(np.float64)
    den = fq @ fk.sum(axis=0)
    den = np.where(np.abs(den) < eps, den + eps, den)
    return fq / den[:, None], fk


def kernel_singular_values(left, right, **kw):
    """Singular values of ``left @ right.T`` padded with zeros to the full size.

    When the factor width r is below N, thin QR of both factors reduces the
    problem to the r x r core ``R_l R_r^T``, whose singular values are the
    nonzero ones of the product.
    """
    n, r = left.shape
    m = right.shape[0]
    full = min(n, m)
    if r >= full:
        return jacobi_singular_values(left @ right.T, **kw)
    Rl = np.linalg.qr(left, mode="r")
    Rr = np.linalg.qr(right, mode="r")
    s = jacobi_singular_values(Rl @ Rr.T, **kw)
    return np.concatenate([s, np.zeros(full - s.size)])


def attention_rank(kind: str, N: int = 256, d: int = 48, seed: int = 0, tol: float = 1e-6,
                   m: int = 1, Q=None, K=None) -> RankReport:
    """Numerical rank of a row-stochastic attention matrix built from Gaussian Q, K.

    ``kind`` is a feature map name or ``"softmax"`` (scaled by 1/sqrt(d)) for the
    baseline. Q and K may be supplied to override the Gaussian draw.
    """
    if kind not in RANK_KINDS:
        raise ConfigError(f"unknown kind {kind!r}; expected one of {RANK_KINDS}")
    if N < 1 or d < 1:
        raise ConfigError(f"N and d must be >= 1, got N={N}, d={d}")
    g = make_rng(seed)
    Qs = g.standard_normal((N, d))
    Ks = g.standard_normal((N, d))
    Q = Qs if Q is None else np.asarray(Q, np.float64)
    K = Ks if K is None else np.asarray(K, np.float64)
    if kind == "softmax":
        s = jacobi_singular_values(softmax_lastdim(Q @ K.T / math.sqrt(Q.shape[1])))
    else:
        left, right = kernel_attention_matrix(feature_map_for(kind, Q.shape[1], m, g), Q, K)
        s = kernel_singular_values(left, right)
    return RankReport(kind, Q.shape[0], Q.shape[1], seed, tol, s, numerical_rank(s, tol), m)


def _rank_job(args):
    return attention_rank(*args)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("UCAN_THREADS", "1")))
    except ValueError:
        return 1


def rank_sweep(kind: str, N: int, d: int, seeds, tol: float = 1e-6, m: int = 1):
    """One RankReport per seed, sorted by seed; runs in a process pool if UCAN_THREADS > 1."""
    jobs = [(kind, N, d, s, tol, m) for s in sorted(seeds)]
    workers = worker_count()
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_rank_job, jobs))
    return [_rank_job(j) for j in jobs]


# ---------------------------------------------------------------- ERF

@dataclass
class ErfReport:
    config: LkdConfig
    predicted_erf: int
    measured_erf_h: int
    measured_erf_w: int
    profile: np.ndarray = field(default=None, repr=False)

    @property
    def matches(self) -> bool:
        return self.predicted_erf == self.measured_erf_h == self.measured_erf_w


def impulse_support(fn, size: int):
    """Support (rows, cols) of ``fn``'s response to a centred unit impulse.

    ``fn`` maps a (1, 1, size, size) tensor to a same-size tensor; support is the
    count of rows/columns holding any output with ``|value| > 0``.
    """
    x = np.zeros((1, 1, size, size), np.float32)
    x[0, 0, size // 2, size // 2] = 1.0
    y = np.asarray(fn(x))[0, 0]
    nz = np.abs(y) > 0
    return int(nz.any(axis=1).sum()), int(nz.any(axis=0).sum()), y


def measure_erf(cfg: LkdConfig) -> ErfReport:
    """Impulse response of the large-kernel stack with all-ones single-channel weights."""
    predicted = predict_erf(cfg)
    size = 2 * predicted + 9
    weights = init_hlk_weights(cfg, 1, fill=1.0)
    rows, cols, y = impulse_support(lambda x: hlk_branch(x, cfg, weights), size)
    return ErfReport(cfg, predicted, rows, cols, y[size // 2])


# ---------------------------------------------------------------- benchmark

ENGINES = ("naive", "tiled", "linear")


def bench_attention(n_list, d: int = 32, engines=ENGINES, tiles: TileConfig = TileConfig(64, 64),
                    warmup: int = 3, runs: int = 10, seed: int = 0):
    """Median wall time and peak temporary allocation per (N, engine).

    ``max_rel_dev`` is the deviation from the engine's oracle: naive softmax
    for ``tiled``, the quadratic path for ``linear`` (Hedgehog map), and 0 for
    ``naive`` itself.
    """
    if warmup < 3 or runs < 10:
        raise ConfigError("benchmarks need >= 3 warmup iterations and >= 10 timed runs")
    for e in engines:
        if e not in ENGINES:
            raise ConfigError(f"unknown engine {e!r}; expected one of {ENGINES}")
    rows = []
    scale = 1.0 / math.sqrt(d)
    for n in n_list:
        g = make_rng(seed + n)
        Q, K, V = (g.standard_normal((n, d)).astype(np.float32) for _ in range(3))
        fmap = FeatureMap("hedgehog", HedgehogParams.init(d, 1, g))
        naive = None
        for engine in engines:
            if engine == "naive":
                fn = lambda: softmax_attention(Q, K, V, scale)  # noqa: E731
            elif engine == "tiled":
                fn = lambda: tiled_exact_attention(Q, K, V, scale, tiles)  # noqa: E731
            else:
                fn = lambda: linear_attention_linear(Q, K, V, fmap)  # noqa: E731
            with instrument.counting() as report:
                out = fn()
                rep = report()
            if engine == "naive":
                naive = out
                ref = out
            elif engine == "tiled":
                ref = naive if naive is not None else softmax_attention(Q, K, V, scale)
            else:
                ref = linear_attention_quadratic(Q, K, V, fmap)
            dev = float(np.max(np.abs(out.astype(np.float64) - ref)) / max(np.max(np.abs(ref)), 1e-30))
            for _ in range(warmup):
                fn()
            times = []
            for _ in range(runs):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            rows.append({
                "N": n, "engine": engine, "wall_time_s": statistics.median(times),
                "peak_temp_elements": rep.peak_temp, "max_buffer_elements": rep.max_buffer,
                "macs": rep.macs, "max_rel_dev": dev,
            })
    return rows
