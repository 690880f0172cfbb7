"""Exact softmax attention and its linear-time random-feature approximation."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from typing import IO, Iterable

import numpy as np

from .errors import DimensionError, NumericalUnderflowError
from .tensor import Tensor, as_tensor, exp, get_default_dtype, matmul

UNDERFLOW_FLOOR = 1e-8


@dataclass(frozen=True)
class AttentionBundle:
    """Queries, keys and values, each ``(L, C)`` or batched ``(B, L, C)``."""

    Q: Tensor
    K: Tensor
    V: Tensor

    def __post_init__(self):
        for name in ("Q", "K", "V"):
            object.__setattr__(self, name, as_tensor(getattr(self, name)))
        shapes = {self.Q.shape, self.K.shape, self.V.shape}
        if len(shapes) != 1 or self.Q.ndim not in (2, 3):
            raise DimensionError(
                f"Q, K, V must share an (L, C) shape, got {self.Q.shape}, {self.K.shape}, {self.V.shape}"
            )

    @property
    def L(self) -> int:
        return self.Q.shape[-2]

    @property
    def C(self) -> int:
        return self.Q.shape[-1]


@dataclass(frozen=True)
class FeatureMapParams:
    """Random projection directions, one row per feature."""

    W_rand: np.ndarray = field(repr=False)
    seed: int
    orthogonal: bool

    @property
    def m(self) -> int:
        return self.W_rand.shape[0]

    @property
    def C(self) -> int:
        return self.W_rand.shape[1]

    @property
    def out_width(self) -> int:
        return self.m


def _swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)


def exact_attention(b: AttentionBundle) -> Tensor:
    """Row-wise ``softmax(Q K^T / sqrt(C)) V``; materializes the L x L matrix."""
    scores = matmul(b.Q, _swap_last(b.K)) * (1.0 / math.sqrt(b.C))
    # row max is a constant shift; it cancels between numerator and normalizer
    shift = Tensor(scores.data.max(axis=-1, keepdims=True))
    A = exp(scores - shift)
    return matmul(A, b.V) / A.sum(axis=-1, keepdims=True)


def draw_feature_map(C: int, m: int, seed: int, orthogonal: bool = True, dtype=None) -> FeatureMapParams:
    """Draw ``m`` projection rows in dimension ``C``.

    Orthogonal draws stack independent blocks of at most ``C`` mutually
    orthogonal rows (QR of a Gaussian matrix), then rescale each row to a
    length drawn from the chi distribution with ``C`` degrees of freedom, so
    rows are marginally Gaussian.
    """
    if m < 1 or C < 1:
        raise ValueError(f"need m >= 1 and C >= 1, got m={m}, C={C}")
    rng = np.random.default_rng(seed)
    if not orthogonal:
        W = rng.standard_normal((m, C))
    else:
        blocks = []
        for _ in range(-(-m // C)):
            q, r = np.linalg.qr(rng.standard_normal((C, C)))
            # sign fix makes q Haar-distributed
            blocks.append((q * np.sign(np.diag(r))).T)
        W = np.concatenate(blocks)[:m]
        W = W * np.linalg.norm(rng.standard_normal((m, C)), axis=1, keepdims=True)
    return FeatureMapParams(W.astype(dtype or get_default_dtype()), seed, orthogonal)


def _feature_logits(X: Tensor, p: FeatureMapParams) -> Tensor:
    if X.shape[-1] != p.C:
        raise DimensionError(f"feature map expects width {p.C}, got {X.shape}")
    W = Tensor(p.W_rand.astype(X.dtype, copy=False))
    return matmul(X, W.T) - (X * X).sum(axis=-1, keepdims=True) * 0.5


def positive_feature_map(X, p: FeatureMapParams, stabilize: str | None = None) -> Tensor:
    """``phi(x)_i = exp(w_i . x - |x|^2 / 2) / sqrt(m)``, strictly positive.

    ``stabilize="row"`` subtracts each row's max logit and ``"global"`` the
    max over all rows before exponentiating. Both only rescale the output
    (per row or overall), which performer_attention cancels exactly.
    """
    z = _feature_logits(as_tensor(X), p)
    if stabilize == "row":
        z = z - Tensor(z.data.max(axis=-1, keepdims=True))
    elif stabilize == "global":
        z = z - Tensor(z.data.max(axis=(-2, -1), keepdims=True))
    elif stabilize is not None:
        raise ValueError(f"unknown stabilize mode {stabilize!r}")
    return exp(z) * (1.0 / math.sqrt(p.m))


def performer_attention(b: AttentionBundle, p: FeatureMapParams) -> Tensor:
    """Linear-time attention ``phi(Q) (phi(K)^T V) / phi(Q) (phi(K)^T 1)``.

    Q and K are scaled by ``C**-0.25`` so the feature inner products target
    ``exp(Q K^T / sqrt(C))``. No L x L array is ever formed.
    """
    scale = b.C**-0.25
    zq = _feature_logits(b.Q * scale, p)
    zk = _feature_logits(b.K * scale, p)
    # Move each feature column's key max onto the query side: phi_q[i, j] * phi_k[l, j]
    # is unchanged, every key entry is <= 1, and after the query row shift each row's
    # best column meets a key sum >= 1, so the normalizer stays >= 1/m.
    col = Tensor(zk.data.max(axis=-2, keepdims=True))
    zq = zq + col
    zq = zq - Tensor(zq.data.max(axis=-1, keepdims=True))
    inv = 1.0 / math.sqrt(p.m)
    phi_q = exp(zq) * inv
    phi_k = exp(zk - col) * inv
    kv = matmul(_swap_last(phi_k), b.V)  # (m, C)
    k_sum = phi_k.sum(axis=-2, keepdims=True)  # (1, m)
    numer = matmul(phi_q, kv)
    denom = matmul(phi_q, _swap_last(k_sum))  # (L, 1)
    low = np.argwhere(denom.data[..., 0] < UNDERFLOW_FLOOR)
    if low.size:
        raise NumericalUnderflowError(
            f"attention normalizer below {UNDERFLOW_FLOOR:g} at row {tuple(int(i) for i in low[0])}"
        )
    return numer / denom


@dataclass(frozen=True)
class ProbeRow:
    L: int
    exact_ns: int
    performer_ns: int
    m: int
    C: int
    rep: int


PROBE_FIELDS = ("L", "exact_ns", "performer_ns", "m", "C", "rep")


def attention_scaling_probe(
    L_values: Iterable[int], m: int, C: int, reps: int, warmup: int = 1, seed: int = 0
) -> list[ProbeRow]:
    """Wall-clock both attention paths at each sequence length.

    ``warmup`` untimed calls precede the ``reps`` timed ones for every L.
    """
    rng = np.random.default_rng(seed)
    p = draw_feature_map(C, m, seed)
    rows = []
    for L in L_values:
        Q, K, V = (rng.standard_normal((L, C)).astype(get_default_dtype()) for _ in range(3))
        bundle = AttentionBundle(Q, K, V)
        for _ in range(warmup):
            exact_attention(bundle)
            performer_attention(bundle, p)
        for rep in range(reps):
            t0 = time.perf_counter_ns()
            exact_attention(bundle)
            t1 = time.perf_counter_ns()
            performer_attention(bundle, p)
            t2 = time.perf_counter_ns()
            rows.append(ProbeRow(L, t1 - t0, t2 - t1, m, C, rep))
    return rows


def write_probe_csv(rows: Iterable[ProbeRow], stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(PROBE_FIELDS)
    for r in rows:
        writer.writerow([r.L, r.exact_ns, r.performer_ns, r.m, r.C, r.rep])
