"""Query-conditioned dynamic filter and guided temporal attention.

Both modalities are projected affinely into a shared width ``d``. The query
projection passes through ``theta = tanh(W_theta h + b_theta)``; attention is
``softmax(<G_d[i], theta> / sqrt(n))`` over the n feature positions, and each
projected feature row is scaled by its weight.

The scale is 1/sqrt(n) with n the number of video features, not the usual
1/sqrt(d).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Rng, Tensor
from .errors import DimensionError, EmptyInputError, RangeError

LOG_FLOOR = 1e-12


@dataclass
class AttentionParams:
    P_v: Tensor       # (d, d_v)
    b_v: Tensor       # (d,)
    P_s: Tensor       # (d, d_s)
    b_s: Tensor       # (d,)
    W_theta: Tensor   # (d, d)
    b_theta: Tensor   # (d,)

    @classmethod
    def init(cls, d_v: int, d_s: int, d: int, rng: Rng) -> "AttentionParams":
        def w(rows, cols):
            k = 1.0 / np.sqrt(cols)
            return Tensor(rng.uniform(-k, k, (rows, cols)), requires_grad=True)

        def b(n):
            return Tensor(np.zeros(n), requires_grad=True)

        return cls(w(d, d_v), b(d), w(d, d_s), b(d), w(d, d), b(d))

    @property
    def d(self) -> int:
        return self.P_v.shape[0]

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))


@dataclass
class AttentionOutput:
    A: Tensor        # (n,) or (B, T)
    G_bar: Tensor    # (n, d) or (B, T, d)
    scores: Tensor


def project(G, hbar, p: AttentionParams) -> tuple[Tensor, Tensor]:
    """Affine maps of video features (..., n, d_v) and query (..., d_s) into width d."""
    G, hbar = dc.as_tensor(G), dc.as_tensor(hbar)
    if G.shape[-1] != p.P_v.shape[1]:
        raise DimensionError(f"video features have width {G.shape[-1]}, projection expects {p.P_v.shape[1]}")
    if hbar.shape[-1] != p.P_s.shape[1]:
        raise DimensionError(f"query vector has width {hbar.shape[-1]}, projection expects {p.P_s.shape[1]}")
    return G @ p.P_v.T + p.b_v, hbar @ p.P_s.T + p.b_s


def dynamic_filter(h_d, p: AttentionParams) -> Tensor:
    h_d = dc.as_tensor(h_d)
    if h_d.shape[-1] != p.W_theta.shape[1]:
        raise DimensionError(f"filter input width {h_d.shape[-1]} != {p.W_theta.shape[1]}")
    return dc.tanh(h_d @ p.W_theta.T + p.b_theta)


def guided_attention(G_d, theta, lengths=None) -> AttentionOutput:
    """Attention over positions for (n, d) / (d,) or batched (B, T, d) / (B, d) inputs.

    In the batched form each row uses its own n = ``lengths[b]`` both for the
    1/sqrt(n) scale and the softmax support.
    """
    G_d, theta = dc.as_tensor(G_d), dc.as_tensor(theta)
    if G_d.shape[-2] == 0:
        raise EmptyInputError("attention over zero video features")
    if G_d.shape[-1] != theta.shape[-1]:
        raise DimensionError(f"feature width {G_d.shape[-1]} != filter width {theta.shape[-1]}")
    if G_d.ndim == 2:
        n = G_d.shape[0]
        scores = dc.matmul(G_d, theta) * (1.0 / np.sqrt(n))
        A = dc.softmax(scores)
        G_bar = G_d * dc.reshape(A, (n, 1))
        return AttentionOutput(A, G_bar, scores)
    B, T, _ = G_d.shape
    lengths = np.full(B, T) if lengths is None else np.asarray(lengths)
    mask = np.arange(T)[None, :] < lengths[:, None]
    raw = dc.tsum(G_d * dc.reshape(theta, (B, 1, -1)), axis=-1)
    scores = raw * (1.0 / np.sqrt(lengths))[:, None]
    A = dc.softmax(scores, axis=-1, mask=mask)
    G_bar = G_d * dc.reshape(A, (B, T, 1))
    return AttentionOutput(A, G_bar, scores)


def outside_span_mask(tau_s, tau_e, T: int, lengths=None) -> np.ndarray:
    """1.0 at valid 1-based positions strictly outside [tau_s, tau_e]."""
    tau_s, tau_e = np.atleast_1d(tau_s), np.atleast_1d(tau_e)
    pos = np.arange(1, T + 1)[None, :]
    out = (pos < tau_s[:, None]) | (pos > tau_e[:, None])
    if lengths is not None:
        out &= pos <= np.asarray(lengths)[:, None]
    return out.astype(np.float64)


def attention_loss(A, tau_s, tau_e, lengths=None) -> Tensor:
    """Sum of -log(1 - a_i) over positions outside the inclusive span.

    ``1 - a_i`` is floored at 1e-12 before the log. Batched input sums over
    the batch.
    """
    A = dc.as_tensor(A)
    single = A.ndim == 1
    T = A.shape[-1]
    ns = np.atleast_1d(np.full(A.shape[0] if not single else 1, T) if lengths is None else lengths)
    for s, e, n in zip(np.atleast_1d(tau_s), np.atleast_1d(tau_e), ns):
        if not (1 <= s <= e <= n):
            raise RangeError(f"invalid span [{s}, {e}] for n={n}")
    outside = outside_span_mask(tau_s, tau_e, T, None if lengths is None else ns)
    if single:
        outside = outside[0]
    terms = dc.log(1.0 - A, floor=LOG_FLOOR) * outside
    return -dc.tsum(terms)
