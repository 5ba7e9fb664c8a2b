"""Seeded finite-difference checks over every differentiable op and model path.

Each check draws one random instance from an :class:`Rng` and returns the
max relative error reported by :func:`grad_check`. Recurrent and model-sized
composites perturb ``COMPOSITE_COORDS`` coordinates per instance, drawn across
all inputs; the analytic gradient is still computed in full.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import diffcore as dc
from .attention import AttentionParams, attention_loss, dynamic_filter, guided_attention, project
from .dataio import EmbeddingTable, Sample
from .diffcore import Rng, Tensor, grad_check
from .localization import LocalizationParams, SpanDistributions, kl_loss, localize, nll_loss, soft_labels
from .model import Batch, ModelDims, ModelParams, compute_losses, forward
from .sentenc import BiGruParams, GruCellParams, bigru_forward, encode_sentence, gru_cell_step, gru_sequence

H = 1e-5
TOLERANCE = 1e-4
COMPOSITE_COORDS = 16


def _sumw(out: Tensor, w: np.ndarray) -> Tensor:
    # random linear functional so every output coordinate matters
    return dc.tsum(out * w)


def check_matmul(rng: Rng) -> float:
    p, q, r = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 4)
    w = rng.normal(1.0, (p, r))
    return grad_check(lambda t: _sumw(t[0] @ t[1], w), [rng.normal(1.0, (p, q)), rng.normal(1.0, (q, r))], H)


def check_batched_matmul(rng: Rng) -> float:
    w = rng.normal(1.0, (2, 3, 2))
    return grad_check(lambda t: _sumw(t[0] @ t[1].T, w), [rng.normal(1.0, (2, 3, 4)), rng.normal(1.0, (2, 4))], H)


def check_broadcast_arith(rng: Rng) -> float:
    w = rng.normal(1.0, (3, 4))

    def f(t):
        a, b, c = t
        return _sumw((a * b - c) / (2.0 + c * c) + b, w)

    return grad_check(f, [rng.normal(1.0, (3, 4)), rng.normal(1.0, (4,)), rng.normal(1.0, (3, 1))], H)


def _unary(kind: str) -> Callable[[Rng], float]:
    def check(rng: Rng) -> float:
        x = rng.normal(1.0, 6)
        if kind == "log":
            x = rng.uniform(0.2, 3.0, 6)
        w = rng.normal(1.0, 6)
        return grad_check(lambda t: _sumw(dc.apply_unary(kind, t[0]), w), [x], H)

    check.__name__ = f"check_{kind}"
    return check


def check_softmax(rng: Rng) -> float:
    n = rng.integers(1, 7)
    w = rng.normal(1.0, n)
    return grad_check(lambda t: _sumw(dc.softmax(t[0]), w), [rng.normal(2.0, n)], H)


def check_masked_log_softmax(rng: Rng) -> float:
    mask = np.array([[True] * 5, [True, True, True, False, False]])
    w = rng.normal(1.0, (2, 5))
    return grad_check(lambda t: _sumw(dc.log_softmax(t[0], mask=mask), w), [rng.normal(2.0, (2, 5))], H)


def check_reduce_mean_rows(rng: Rng) -> float:
    w = rng.normal(1.0, (2, 3))
    lengths = np.array([4, rng.integers(1, 4)])
    return grad_check(lambda t: _sumw(dc.reduce_mean_rows(t[0], lengths), w), [rng.normal(1.0, (2, 4, 3))], H)


def check_dropout(rng: Rng) -> float:
    state = rng.state
    w = rng.normal(1.0, 8)
    return grad_check(lambda t: _sumw(dc.dropout(t[0], 0.5, Rng.from_state(state), True), w),
                      [rng.normal(1.0, 8)], H)


def check_take_rows_concat(rng: Rng) -> float:
    idx = np.array([[2, 1, 0, 3], [0, 0, 1, 3]])
    w = rng.normal(1.0, (2, 4, 5))
    return grad_check(lambda t: _sumw(dc.concat([dc.take_rows(t[0], idx), t[1]], axis=-1), w),
                      [rng.normal(1.0, (2, 4, 3)), rng.normal(1.0, (2, 4, 2))], H)


def _cell_arrays(rng: Rng, x: int, u: int) -> list[np.ndarray]:
    return ([rng.normal(0.7, (u, x)) for _ in range(3)] + [rng.normal(0.7, (u, u)) for _ in range(3)]
            + [rng.normal(0.3, u) for _ in range(3)])


def check_gru_cell_step(rng: Rng) -> float:
    x, u = 3, 4
    w = rng.normal(1.0, (2, u))

    def f(t):
        return _sumw(gru_cell_step(t[0], t[1], GruCellParams(*t[2:])), w)

    return grad_check(f, [rng.normal(1.0, (2, x)), rng.uniform(-0.9, 0.9, (2, u))] + _cell_arrays(rng, x, u), H)


def check_gru_sequence(rng: Rng) -> float:
    x, u = 3, 3
    w = rng.normal(1.0, (2, 5, u))
    return grad_check(lambda t: _sumw(gru_sequence(t[0], GruCellParams(*t[1:])), w),
                      [rng.normal(1.0, (2, 5, x))] + _cell_arrays(rng, x, u), H,
                      coords=COMPOSITE_COORDS, rng=rng)


def check_bigru(rng: Rng) -> float:
    x, u = 2, 3
    lengths = np.array([5, rng.integers(1, 5)])
    w = rng.normal(1.0, (2, 5, 2 * u))

    def f(t):
        p = BiGruParams(GruCellParams(*t[1:10]), GruCellParams(*t[10:]))
        return _sumw(bigru_forward(t[0], p, lengths), w)

    return grad_check(f, [rng.normal(1.0, (2, 5, x))] + _cell_arrays(rng, x, u) + _cell_arrays(rng, x, u), H,
                      coords=COMPOSITE_COORDS, rng=rng)


def check_encode_sentence(rng: Rng) -> float:
    x, u = 4, 3
    E = EmbeddingTable(rng.normal(1.0, (6, x)))
    ids = [rng.integers(1, 5) for _ in range(3)]
    w = rng.normal(1.0, 2 * u)

    def f(t):
        p = BiGruParams(GruCellParams(*t[:9]), GruCellParams(*t[9:]))
        return _sumw(encode_sentence(ids, E, p), w)

    return grad_check(f, _cell_arrays(rng, x, u) + _cell_arrays(rng, x, u), H,
                      coords=COMPOSITE_COORDS, rng=rng)


def _att_arrays(rng: Rng, d_v: int, d_s: int, d: int) -> list[np.ndarray]:
    return [rng.normal(0.5, (d, d_v)), rng.normal(0.2, d), rng.normal(0.5, (d, d_s)), rng.normal(0.2, d),
            rng.normal(0.5, (d, d)), rng.normal(0.2, d)]


def check_attention_path(rng: Rng) -> float:
    n, d_v, d_s, d = 6, 5, 4, 4
    tau_s = rng.integers(1, n)
    tau_e = rng.integers(tau_s, n)

    def f(t):
        G, hbar, *rest = t
        p = AttentionParams(*rest)
        G_d, h_d = project(G, hbar, p)
        out = guided_attention(G_d, dynamic_filter(h_d, p))
        return attention_loss(out.A, tau_s, tau_e) + dc.tsum(out.G_bar * 0.1)

    return grad_check(f, [rng.normal(1.0, (n, d_v)), rng.normal(1.0, d_s)] + _att_arrays(rng, d_v, d_s, d), H,
                      coords=COMPOSITE_COORDS, rng=rng)


def _loc_arrays(rng: Rng, d: int, u: int) -> list[np.ndarray]:
    return (_cell_arrays(rng, d, u) + _cell_arrays(rng, d, u) + _cell_arrays(rng, 2 * u, u)
            + _cell_arrays(rng, 2 * u, u)
            + [rng.normal(0.5, (1, 2 * u)), rng.normal(0.2, 1), rng.normal(0.5, (1, 2 * u)), rng.normal(0.2, 1)])


def _loc_params(t: list[Tensor]) -> LocalizationParams:
    l1 = BiGruParams(GruCellParams(*t[0:9]), GruCellParams(*t[9:18]))
    l2 = BiGruParams(GruCellParams(*t[18:27]), GruCellParams(*t[27:36]))
    return LocalizationParams(l1, l2, *t[36:40])


def _loc_check(rng: Rng, loss: str) -> float:
    n, d, u = 6, 4, 3
    tau_s = rng.integers(1, n)
    tau_e = rng.integers(tau_s, n)
    target = soft_labels(tau_s, tau_e, n)

    def f(t):
        spans = localize(t[0], _loc_params(t[1:]), training=False)
        if loss == "KL":
            return kl_loss(spans, target)
        return nll_loss(spans, tau_s, tau_e)

    return grad_check(f, [rng.normal(1.0, (n, d))] + _loc_arrays(rng, d, u), H,
                      coords=COMPOSITE_COORDS, rng=rng)


def check_localize_kl(rng: Rng) -> float:
    return _loc_check(rng, "KL")


def check_localize_nll(rng: Rng) -> float:
    return _loc_check(rng, "NLL")


def check_kl_scores(rng: Rng) -> float:
    n = rng.integers(2, 8)
    tau_s = rng.integers(1, n)
    tau_e = rng.integers(tau_s, n)
    target = soft_labels(tau_s, tau_e, n)
    return grad_check(lambda t: kl_loss(SpanDistributions.from_scores(t[0], t[1]), target),
                      [rng.normal(2.0, n), rng.normal(2.0, n)], H)


def tiny_model(rng: Rng, n: int = 6, d: int = 4, u: int = 3, emb_dim: int = 3, d_v: int = 3):
    dims = ModelDims(emb_dim=emb_dim, d_v=d_v, d=d, sent_hidden=u, loc_hidden=u)
    params = ModelParams.init(dims, rng)
    for t in params.named().values():
        t.data = rng.normal(0.5, t.shape)
    emb = EmbeddingTable(rng.normal(1.0, (6, emb_dim)))
    samples = []
    for length in (n, n - 1):
        s = rng.integers(1, length)
        samples.append(Sample(rng.normal(1.0, (length, d_v)), [rng.integers(1, 5) for _ in range(3)], s,
                              rng.integers(s, length)))
    return params, emb, Batch.from_samples(samples)


def full_loss_fn(params: ModelParams, emb: EmbeddingTable, batch: Batch, loss_mode: str = "KL",
                 use_attention: bool = True):
    def f(t):
        out = forward(params.with_tensors(t), batch, emb)
        return compute_losses(out, batch, loss_mode, use_attention).total
    return f


def check_full_loss(rng: Rng) -> float:
    params, emb, batch = tiny_model(rng)
    return grad_check(full_loss_fn(params, emb, batch), [t.data for t in params.named().values()], H,
                      coords=COMPOSITE_COORDS, rng=rng)


CHECKS: dict[str, Callable[[Rng], float]] = {
    "matmul": check_matmul,
    "batched_matmul": check_batched_matmul,
    "broadcast_arith": check_broadcast_arith,
    **{f"unary_{k}": _unary(k) for k in dc.UNARY_KINDS},
    "softmax": check_softmax,
    "masked_log_softmax": check_masked_log_softmax,
    "reduce_mean_rows": check_reduce_mean_rows,
    "dropout": check_dropout,
    "take_rows_concat": check_take_rows_concat,
    "gru_cell_step": check_gru_cell_step,
    "gru_sequence": check_gru_sequence,
    "bigru_forward": check_bigru,
    "encode_sentence": check_encode_sentence,
    "attention_path": check_attention_path,
    "kl_scores": check_kl_scores,
    "localize_kl": check_localize_kl,
    "localize_nll": check_localize_nll,
    "full_loss": check_full_loss,
}


@dataclass
class SuiteResult:
    errors: dict[str, float]
    seconds: float

    @property
    def ok(self) -> bool:
        return all(e <= TOLERANCE for e in self.errors.values())


def run_suite(instances: int = 100, seed: int = 0, names=None) -> SuiteResult:
    t0 = time.perf_counter()
    errors = {}
    for i, name in enumerate(names or CHECKS):
        rng = Rng(seed, stream=10_000 + i)
        errors[name] = max(CHECKS[name](rng) for _ in range(instances))
    return SuiteResult(errors, time.perf_counter() - t0)
