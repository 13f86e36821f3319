import csv
import math

import numpy as np
import pytest

from ucan import instrument
from ucan.analysis import (
    attention_rank, bench_attention, count_macs, jacobi_singular_values, kernel_attention_matrix,
    kernel_singular_values, measure_erf, numerical_rank, rank_sweep, top_singular_values_power,
)
from ucan.attention import TileConfig
from ucan.config import ModelConfig
from ucan.dual_fusion import DflWeights, dfl_branch_macs, dfl_forward_shared, dfl_mac_count
from ucan.attention import AttentionConfig
from ucan.errors import NumericError
from ucan.feature_maps import FeatureMap
from ucan.large_kernel import LkdConfig
from ucan.network import init_weights, ucan_forward
from ucan.tensor import conv2d, matmul, rng


@pytest.mark.parametrize("shape", [(1, 1), (2, 2), (5, 3), (3, 7), (40, 40), (64, 17)])
def test_jacobi_matches_lapack(g, shape):
    A = g.standard_normal(shape)
    np.testing.assert_allclose(jacobi_singular_values(A), np.linalg.svd(A, compute_uv=False), rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(jacobi_singular_values(A, precondition=False),
                               np.linalg.svd(A, compute_uv=False), rtol=1e-10, atol=1e-12)


def test_jacobi_graded_and_singular(g):
    U, _ = np.linalg.qr(g.standard_normal((30, 30)))
    V, _ = np.linalg.qr(g.standard_normal((30, 30)))
    s = np.logspace(0, -12, 30)
    s[20:] = 0
    got = jacobi_singular_values(U @ np.diag(s) @ V.T)
    np.testing.assert_allclose(got[:20], s[:20], rtol=1e-6)
    assert np.all(got[20:] < 1e-14)
    assert np.all(np.diff(got) <= 0) and np.all(got >= 0)


def test_jacobi_vs_power_iteration(g):
    A = g.standard_normal((80, 50))
    np.testing.assert_allclose(jacobi_singular_values(A)[:3], top_singular_values_power(A), rtol=1e-6)
    left, right = kernel_attention_matrix(FeatureMap("symrelu"), *g.standard_normal((2, 256, 48)))
    P = left @ right.T
    np.testing.assert_allclose(kernel_singular_values(left, right)[:3], top_singular_values_power(P), rtol=1e-6)


def test_jacobi_reports_non_convergence(g):
    with pytest.raises(NumericError, match="did not converge"):
        jacobi_singular_values(g.standard_normal((8, 8)), max_sweeps=0, precondition=False)


def test_factored_core_matches_explicit_product(g):
    left, right = g.standard_normal((60, 9)), g.standard_normal((60, 9))
    np.testing.assert_allclose(kernel_singular_values(left, right), np.linalg.svd(left @ right.T, compute_uv=False),
                               rtol=1e-9, atol=1e-12)


def test_identity_map_is_full_column_rank():
    rep = attention_rank("identity", 256, 48, seed=3)
    g = rng(3)
    Q, K = g.standard_normal((256, 48)), g.standard_normal((256, 48))
    A = Q @ K.T
    A = A / A.sum(1, keepdims=True)
    assert rep.rank == 48 == numerical_rank(np.linalg.svd(A, compute_uv=False), 1e-6)


@pytest.mark.parametrize("kind", ["relu", "elu1", "symrelu", "hedgehog", "identity", "softmax"])
def test_rank_one_construction(g, kind):
    q, k = np.abs(g.standard_normal((2, 1, 6))) + 0.1
    rep = attention_rank(kind, Q=np.repeat(q, 32, 0), K=np.repeat(k, 32, 0))
    assert rep.rank == 1 and rep.rank <= rep.bound


def test_rank_report_invariants():
    for kind in ("relu", "symrelu", "hedgehog"):
        rep = attention_rank(kind, 64, 12, seed=1)
        s = rep.singular_values
        assert rep.rank <= min(rep.N, rep.bound) and np.all(s >= 0) and np.all(np.diff(s) <= 0)


def test_rank_ordering_small_sweep():
    means = {k: np.mean([r.rank for r in rank_sweep(k, 256, 48, range(5))]) for k in ("relu", "symrelu", "hedgehog")}
    assert means["hedgehog"] >= means["symrelu"] > means["relu"]
    assert means["hedgehog"] >= 38


def test_rank_sweep_sorted_and_parallel_identical(monkeypatch):
    serial = rank_sweep("relu", 32, 8, [2, 0, 1])
    assert [r.seed for r in serial] == [0, 1, 2]
    monkeypatch.setenv("UCAN_THREADS", "2")
    parallel = rank_sweep("relu", 32, 8, [2, 0, 1])
    assert [r.rank for r in parallel] == [r.rank for r in serial]
    assert all(np.array_equal(a.singular_values, b.singular_values) for a, b in zip(serial, parallel))


def test_single_3x3_erf():
    x = np.zeros((1, 1, 11, 11), np.float32)
    x[0, 0, 5, 5] = 1
    y = conv2d(x, np.ones((1, 1, 3, 3), np.float32), groups=1)[0, 0]
    assert (np.abs(y) > 0).any(axis=1).sum() == 3
    rep = measure_erf(LkdConfig(5, 2))
    assert rep.matches and rep.profile.shape == (2 * 13 + 9,)


def test_mac_counter_is_compositional(g):
    A, B, C = g.standard_normal((3, 4, 5)), g.standard_normal((5, 6)), g.standard_normal((6, 2))
    w = g.standard_normal((3, 3, 3, 3)).astype(np.float32)
    x = g.standard_normal((1, 3, 6, 6)).astype(np.float32)
    f = lambda: matmul(matmul(A, B), C)  # noqa: E731
    h = lambda: conv2d(x, w)  # noqa: E731
    both = count_macs(lambda: (f(), h()))
    assert both.macs == count_macs(f).macs + count_macs(h).macs
    assert both.elementwise == count_macs(f).elementwise + count_macs(h).elementwise


def test_dfl_mac_report_matches_closed_form(g):
    w = DflWeights.init(64, 4, rng(0))
    x = g.standard_normal((1, 64, 16, 16)).astype(np.float32)
    rep = count_macs(dfl_forward_shared, x, w, AttentionConfig.for_channels(32, 4))
    assert dfl_branch_macs(rep) == dfl_mac_count(32, 16, 16, 4) == 991232
    assert rep.norm > 0 and rep.as_dict()["total_macs"] == rep.macs


def test_desk_config_macs_linear_in_pixels():
    cfg = ModelConfig()
    params = init_weights(cfg)
    sizes = (32, 64, 96)
    macs = [count_macs(ucan_forward, np.full((1, 3, s, s), 0.5, np.float32), params, cfg).macs for s in sizes]
    slope = np.polyfit(np.log([s * s for s in sizes]), np.log(macs), 1)[0]
    assert abs(slope - 1.0) <= 0.02


def test_bench_properties():
    rows = bench_attention([256, 1024], d=32, tiles=TileConfig(64, 64))
    by = {(r["N"], r["engine"]): r for r in rows}
    ratio = by[1024, "naive"]["peak_temp_elements"] / by[256, "naive"]["peak_temp_elements"]
    assert 14 <= ratio <= 18
    assert by[1024, "tiled"]["peak_temp_elements"] == by[256, "tiled"]["peak_temp_elements"]
    assert by[1024, "tiled"]["peak_temp_elements"] < by[256, "naive"]["peak_temp_elements"]
    assert by[1024, "linear"]["max_buffer_elements"] < 1024 * 1024
    assert all(r["max_rel_dev"] <= 1e-5 for r in rows)
    assert all(r["wall_time_s"] > 0 for r in rows)
