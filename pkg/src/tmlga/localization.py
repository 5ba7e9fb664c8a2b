"""Localization layer, soft labels, losses and span decoding."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Rng, Tensor
from .errors import DimensionError, EmptyInputError, ParameterError, RangeError
from .sentenc import BiGruParams, bigru_forward

LOG_FLOOR = 1e-12
KL_DIRECTIONS = ("pred_target", "target_pred")


@dataclass
class LocalizationParams:
    layer1: BiGruParams
    layer2: BiGruParams
    head_s_W: Tensor   # (1, 2h)
    head_s_b: Tensor   # (1,)
    head_e_W: Tensor
    head_e_b: Tensor
    dropout: float = 0.5

    @classmethod
    def init(cls, d: int, hidden: int, rng: Rng, dropout: float = 0.5) -> "LocalizationParams":
        layer1 = BiGruParams.init(d, hidden, rng)
        layer2 = BiGruParams.init(2 * hidden, hidden, rng)
        k = 1.0 / np.sqrt(2 * hidden)

        def head():
            return (Tensor(rng.uniform(-k, k, (1, 2 * hidden)), requires_grad=True),
                    Tensor(np.zeros(1), requires_grad=True))

        return cls(layer1, layer2, *head(), *head(), dropout=dropout)

    def named(self) -> dict[str, Tensor]:
        out = {f"layer1.{k}": v for k, v in self.layer1.named().items()}
        out.update({f"layer2.{k}": v for k, v in self.layer2.named().items()})
        out.update({"head_s.W": self.head_s_W, "head_s.b": self.head_s_b,
                    "head_e.W": self.head_e_W, "head_e.b": self.head_e_b})
        return out


@dataclass
class SpanDistributions:
    """Start/end categorical distributions and their logs.

    Shapes are (n,) for one sample or (B, T) for a padded batch, where
    ``mask`` marks the valid positions.
    """

    start: Tensor
    end: Tensor
    log_start: Tensor
    log_end: Tensor
    mask: np.ndarray | None = None

    @classmethod
    def from_scores(cls, s_scores, e_scores, mask=None) -> "SpanDistributions":
        return cls(dc.softmax(s_scores, mask=mask), dc.softmax(e_scores, mask=mask),
                   dc.log_softmax(s_scores, mask=mask), dc.log_softmax(e_scores, mask=mask), mask)

    @classmethod
    def from_probs(cls, start, end) -> "SpanDistributions":
        """Wrap fixed probability vectors (log floored at 1e-12)."""
        start, end = dc.as_tensor(start), dc.as_tensor(end)
        return cls(start, end, dc.log(start, floor=LOG_FLOOR), dc.log(end, floor=LOG_FLOOR))


@dataclass
class SoftLabels:
    start: np.ndarray
    end: np.ndarray
    sigma: float = 1.0


def localize(G_bar, p: LocalizationParams, rng: Rng | None = None, training: bool = False,
             lengths=None) -> SpanDistributions:
    """2-layer BiGRU over attended features, then per-position start/end scores and softmax."""
    G_bar = dc.as_tensor(G_bar)
    single = G_bar.ndim == 2
    if G_bar.shape[-2] == 0:
        raise EmptyInputError("localize over zero positions")
    if single:
        G_bar = dc.reshape(G_bar, (1,) + G_bar.shape)
    B, T, _ = G_bar.shape
    H1 = bigru_forward(G_bar, p.layer1, lengths)
    if training:
        if rng is None:
            raise ParameterError("training-mode localize needs an rng for dropout")
        H1 = dc.dropout(H1, p.dropout, rng, training=True)
    H2 = bigru_forward(H1, p.layer2, lengths)
    s = dc.reshape(H2 @ p.head_s_W.T + p.head_s_b, (B, T))
    e = dc.reshape(H2 @ p.head_e_W.T + p.head_e_b, (B, T))
    if single:
        return SpanDistributions.from_scores(dc.reshape(s, (T,)), dc.reshape(e, (T,)))
    mask = None if lengths is None else np.arange(T)[None, :] < np.asarray(lengths)[:, None]
    return SpanDistributions.from_scores(s, e, mask)


def quantized_gaussian(mu: float, sigma: float, n: int) -> np.ndarray:
    """Gaussian density at positions 1..n, renormalized to sum to 1."""
    if not 1 <= mu <= n:
        raise RangeError(f"centre {mu} outside [1, {n}]")
    if not sigma > 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    pos = np.arange(1, n + 1)
    logits = -((pos - mu) ** 2) / (2.0 * sigma * sigma)
    w = np.exp(logits - logits.max())
    return w / w.sum()


def soft_labels(tau_s: int, tau_e: int, n: int, sigma: float = 1.0) -> SoftLabels:
    return SoftLabels(quantized_gaussian(tau_s, sigma, n), quantized_gaussian(tau_e, sigma, n), sigma)


def batch_soft_labels(tau_s, tau_e, lengths, T: int, sigma: float = 1.0) -> SoftLabels:
    """Soft labels for a padded batch; padded positions hold 0."""
    S = np.zeros((len(lengths), T))
    E = np.zeros((len(lengths), T))
    for b, (s, e, n) in enumerate(zip(tau_s, tau_e, lengths)):
        S[b, :n] = quantized_gaussian(s, sigma, n)
        E[b, :n] = quantized_gaussian(e, sigma, n)
    return SoftLabels(S, E, sigma)


def _kl_term(p: Tensor, log_p: Tensor, q: np.ndarray, direction: str) -> Tensor:
    # padded positions carry p = 0, log p = 0 and q = 0, so every term there is 0
    log_q = np.log(np.maximum(q, LOG_FLOOR))
    if direction == "pred_target":
        return dc.tsum(p * (log_p - log_q))
    return dc.tsum(q * (log_q - log_p))


def kl_loss(pred: SpanDistributions, target: SoftLabels, direction: str = "pred_target") -> Tensor:
    """D_KL(pred || target) for start plus end (summed over a batch).

    ``direction="target_pred"`` swaps the arguments of each divergence.
    """
    if direction not in KL_DIRECTIONS:
        raise ParameterError(f"kl direction must be one of {KL_DIRECTIONS}, got {direction!r}")
    qs, qe = np.asarray(target.start, float), np.asarray(target.end, float)
    if pred.start.shape != qs.shape or pred.end.shape != qe.shape:
        raise DimensionError(f"prediction shapes {pred.start.shape}/{pred.end.shape} "
                             f"!= target shapes {qs.shape}/{qe.shape}")
    return (_kl_term(pred.start, pred.log_start, qs, direction)
            + _kl_term(pred.end, pred.log_end, qe, direction))


def _one_hot(idx, shape) -> np.ndarray:
    idx = np.atleast_1d(idx)
    n = shape[-1]
    if np.any(idx < 1) or np.any(idx > n):
        raise RangeError(f"index {idx} outside [1, {n}]")
    oh = np.zeros((len(idx), n))
    oh[np.arange(len(idx)), idx - 1] = 1.0
    return oh.reshape(shape)


def nll_loss(pred: SpanDistributions, tau_s, tau_e) -> Tensor:
    """-log p_start[tau_s] - log p_end[tau_e], with probabilities floored at 1e-12."""
    floor = np.log(LOG_FLOOR)
    ohs = _one_hot(tau_s, pred.log_start.shape)
    ohe = _one_hot(tau_e, pred.log_end.shape)
    ls = dc.tsum(pred.log_start * ohs, axis=-1)
    le = dc.tsum(pred.log_end * ohe, axis=-1)
    ls = _clamp_below(ls, floor)
    le = _clamp_below(le, floor)
    return -(dc.tsum(ls) + dc.tsum(le))


def _clamp_below(t: Tensor, lo: float) -> Tensor:
    live = t.data > lo
    return dc.make_op(np.where(live, t.data, lo), (t,), "clamp",
                      lambda g: (np.where(live, g, 0.0),))


def total_loss(main, att, use_attention: bool = True):
    return main + att if use_attention else main


def predict_span(pred: SpanDistributions) -> tuple[int, int]:
    """1-based argmax of each distribution, ties to the smallest index."""
    s = np.asarray(pred.start.data if isinstance(pred.start, Tensor) else pred.start)
    e = np.asarray(pred.end.data if isinstance(pred.end, Tensor) else pred.end)
    return int(np.argmax(s)) + 1, int(np.argmax(e)) + 1


def predict_spans(pred: SpanDistributions) -> list[tuple[int, int]]:
    s = np.argmax(pred.start.data, axis=-1) + 1
    e = np.argmax(pred.end.data, axis=-1) + 1
    return [(int(a), int(b)) for a, b in zip(np.atleast_1d(s), np.atleast_1d(e))]
