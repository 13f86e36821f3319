"""Kernel feature maps for linear attention and their analytic identities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import instrument
from .errors import ConfigError, DimensionError
from .tensor import matmul, rng as make_rng

KINDS = ("identity", "relu", "elu1", "symrelu", "hedgehog")
EXP_CLAMP = 30.0


@dataclass(frozen=True, eq=False)
class HedgehogParams:
    """Shared projection ``W`` (C x C) and ``m`` bias vectors ``b`` (m x C)."""

    W: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        W = np.asarray(self.W)
        b = np.atleast_2d(np.asarray(self.b))
        if W.ndim != 2 or W.shape[0] != W.shape[1]:
            raise ConfigError(f"Hedgehog W must be square, got {W.shape}")
        if b.shape[1] != W.shape[0] or b.shape[0] < 1:
            raise ConfigError(f"Hedgehog biases {b.shape} do not match W {W.shape}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.W.shape[0]

    @property
    def m(self) -> int:
        return self.b.shape[0]

    @classmethod
    def init(cls, dim: int, m: int = 1, seed=0, noise: float = 0.02):
        """Identity-anchored init: W = I + noise, biases evenly spaced in [-0.5, 0.5]."""
        if not 1 <= m <= 4:
            raise ConfigError(f"pair count m must be in 1..4, got {m}")
        g = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
        W = (np.eye(dim) + noise * g.standard_normal((dim, dim))).astype(np.float32)
        levels = np.linspace(-0.5, 0.5, m) if m > 1 else np.zeros(1)
        b = np.repeat(levels[:, None], dim, axis=1).astype(np.float32)
        return cls(W, b)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """A feature map ``phi``; ``normalize`` divides each output row by its sum."""

    kind: str
    hedgehog: HedgehogParams | None = None
    normalize: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown feature map {self.kind!r}; expected one of {KINDS}")
        if self.kind == "hedgehog" and self.hedgehog is None:
            raise ConfigError("hedgehog feature map needs HedgehogParams")

    def out_dim(self, d: int) -> int:
        if self.kind == "symrelu":
            return 2 * d
        if self.kind == "hedgehog":
            return 2 * self.hedgehog.m * self.hedgehog.dim
        return d

    def __call__(self, X):
        return apply_feature_map(self, X)


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0)))


def apply_feature_map(fmap: FeatureMap, X):
    """Apply ``fmap`` row-wise to a token matrix (..., N, d) -> (..., N, r)."""
    X = np.asarray(X)
    dtype = np.result_type(X.dtype, np.float32)
    kind = fmap.kind
    instrument.elementwise(X.size)
    if kind == "identity":
        out = X.astype(dtype)
    elif kind == "relu":
        out = np.maximum(X, 0).astype(dtype)
    elif kind == "elu1":
        out = (_elu(X.astype(np.float64)) + 1.0).astype(dtype)
    elif kind == "symrelu":
        out = np.concatenate([np.maximum(X, 0), np.maximum(-X, 0)], axis=-1).astype(dtype)
    else:
        p = fmap.hedgehog
        if X.shape[-1] != p.dim:
            raise ConfigError(f"Hedgehog params expect dim {p.dim}, input has {X.shape[-1]}")
        Z = matmul(X, p.W.astype(dtype)).astype(np.float64)
        pos = [np.exp(np.clip(Z + bi, -EXP_CLAMP, EXP_CLAMP)) for bi in p.b.astype(np.float64)]
        neg = [np.exp(np.clip(-Z - bi, -EXP_CLAMP, EXP_CLAMP)) for bi in p.b.astype(np.float64)]
        out = np.concatenate(pos + neg, axis=-1).astype(dtype)
        instrument.elementwise(out.size)
    if fmap.normalize:
        out = (out / out.sum(axis=-1, keepdims=True)).astype(dtype)
        instrument.elementwise(2 * out.size)
    return out


def kernel_value(fmap: FeatureMap, q, k) -> float:
    """``phi(q) . phi(k)`` for single vectors."""
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape:
        raise DimensionError(f"q {q.shape} and k {k.shape} differ")
    return float(apply_feature_map(fmap, q[None])[0] @ apply_feature_map(fmap, k[None])[0])


def elu_kernel_decomposition(q, k):
    """Split the ELU+1 kernel into (similarity, q_bias, k_bias, d).

    ``(elu(q)+1).(elu(k)+1) = <elu(q), elu(k)> + 1.elu(q) + 1.elu(k) + d``; only
    the first term compares q with k.
    """
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if q.shape != k.shape or q.ndim != 1:
        raise DimensionError(f"q {q.shape} and k {k.shape} must be equal-length vectors")
    sq, sk = _elu(q), _elu(k)
    return float(sq @ sk), float(sq.sum()), float(sk.sum()), q.shape[0]


def feature_map_jacobian(fmap: FeatureMap, x):
    """Analytic Jacobian d phi(x) / dx, shape (r, d)."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    kind = fmap.kind
    if kind == "identity":
        J = np.eye(d)
    elif kind == "relu":
        J = np.diag((x > 0).astype(np.float64))
    elif kind == "elu1":
        J = np.diag(np.where(x > 0, 1.0, np.exp(np.minimum(x, 0))))
    elif kind == "symrelu":
        J = np.vstack([np.diag((x > 0).astype(np.float64)), -np.diag((x < 0).astype(np.float64))])
    else:
        p = fmap.hedgehog
        W = p.W.astype(np.float64)
        z = x @ W
        blocks = []
        for bi in p.b.astype(np.float64):
            a = np.clip(z + bi, -EXP_CLAMP, EXP_CLAMP)
            blocks.append(np.exp(a)[:, None] * W.T * (np.abs(z + bi) < EXP_CLAMP)[:, None])
        for bi in p.b.astype(np.float64):
            a = np.clip(-z - bi, -EXP_CLAMP, EXP_CLAMP)
            blocks.append(-np.exp(a)[:, None] * W.T * (np.abs(z + bi) < EXP_CLAMP)[:, None])
        J = np.vstack(blocks)
    if fmap.normalize:
        raw = FeatureMap(fmap.kind, fmap.hedgehog, normalize=False)
        phi = apply_feature_map(raw, x[None])[0].astype(np.float64)
        s = phi.sum()
        J = J / s - np.outer(phi, J.sum(axis=0)) / s**2
    return J


def finite_difference_jacobian(fmap: FeatureMap, x, h: float = 1e-4):
    """Central-difference Jacobian, the independent check on the analytic one."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = h
        fp = apply_feature_map(fmap, (x + e)[None])[0].astype(np.float64)
        fm = apply_feature_map(fmap, (x - e)[None])[0].astype(np.float64)
        cols.append((fp - fm) / (2 * h))
    return np.stack(cols, axis=1)
