"""Parameter bundle and the full forward pass over a padded batch of samples."""
from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass, replace

import numpy as np

from . import diffcore as dc
from .attention import AttentionOutput, AttentionParams, attention_loss, dynamic_filter, guided_attention, project
from .dataio import EmbeddingTable, Sample
from .diffcore import Rng, Tensor
from .localization import (LocalizationParams, SpanDistributions, batch_soft_labels, kl_loss,
                           localize, nll_loss)
from .sentenc import BiGruParams, encode_sentence


@dataclass
class ModelDims:
    emb_dim: int
    d_v: int
    d: int = 256
    sent_hidden: int = 256
    loc_hidden: int = 256
    dropout: float = 0.5


@dataclass
class ModelParams:
    sentence: BiGruParams
    attention: AttentionParams
    localization: LocalizationParams

    @classmethod
    def init(cls, dims: ModelDims, rng: Rng) -> "ModelParams":
        sentence = BiGruParams.init(dims.emb_dim, dims.sent_hidden, rng)
        attention = AttentionParams.init(dims.d_v, 2 * dims.sent_hidden, dims.d, rng)
        loc = LocalizationParams.init(dims.d, dims.loc_hidden, rng, dims.dropout)
        return cls(sentence, attention, loc)

    def named(self) -> dict[str, Tensor]:
        out = {f"sentence.{k}": v for k, v in self.sentence.named().items()}
        out.update({f"attention.{k}": v for k, v in self.attention.named().items()})
        out.update({f"localization.{k}": v for k, v in self.localization.named().items()})
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named().items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        named = self.named()
        if set(named) != set(arrays):
            raise ValueError(f"parameter names differ: {sorted(set(named) ^ set(arrays))}")
        for k, t in named.items():
            a = np.asarray(arrays[k], dtype=np.float64)
            if a.shape != t.shape:
                raise ValueError(f"parameter {k}: shape {a.shape} != {t.shape}")
            t.data = a.copy()

    def zero_grad(self) -> None:
        for t in self.named().values():
            t.zero_grad()

    def with_tensors(self, tensors) -> "ModelParams":
        """Copy of this structure holding ``tensors`` in :meth:`named` order."""
        return rebuild(self, iter(tensors))


def rebuild(obj, tensors):
    """Recreate a (nested) dataclass, taking Tensor fields from the ``tensors`` iterator."""
    changes = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, Tensor):
            changes[f.name] = next(tensors)
        elif is_dataclass(v):
            changes[f.name] = rebuild(v, tensors)
    return replace(obj, **changes)


@dataclass
class Batch:
    features: np.ndarray      # (B, T, d_v), zero padded
    lengths: np.ndarray       # (B,)
    token_ids: list[list[int]]
    tau_s: np.ndarray
    tau_e: np.ndarray

    @classmethod
    def from_samples(cls, samples: list[Sample]) -> "Batch":
        lengths = np.array([s.n for s in samples])
        T = int(lengths.max())
        d_v = samples[0].features.shape[1]
        feats = np.zeros((len(samples), T, d_v))
        for i, s in enumerate(samples):
            feats[i, :s.n] = s.features
        return cls(feats, lengths, [list(s.token_ids) for s in samples],
                   np.array([s.tau_s for s in samples]), np.array([s.tau_e for s in samples]))


@dataclass
class ForwardOut:
    spans: SpanDistributions
    attention: AttentionOutput


def forward(params: ModelParams, batch: Batch, emb: EmbeddingTable, rng: Rng | None = None,
            training: bool = False) -> ForwardOut:
    hbar = encode_sentence(batch.token_ids, emb, params.sentence)
    G_d, h_d = project(Tensor(batch.features), hbar, params.attention)
    theta = dynamic_filter(h_d, params.attention)
    att = guided_attention(G_d, theta, batch.lengths)
    spans = localize(att.G_bar, params.localization, rng, training, batch.lengths)
    return ForwardOut(spans, att)


@dataclass
class Losses:
    total: Tensor
    main: Tensor
    att: Tensor


def compute_losses(out: ForwardOut, batch: Batch, loss_mode: str = "KL", use_attention: bool = True,
                   sigma: float = 1.0, kl_direction: str = "pred_target") -> Losses:
    """Batch-summed losses. ``att`` is always computed so it can be logged."""
    if loss_mode == "KL":
        T = out.spans.start.shape[-1]
        target = batch_soft_labels(batch.tau_s, batch.tau_e, batch.lengths, T, sigma)
        main = kl_loss(out.spans, target, kl_direction)
    elif loss_mode == "NLL":
        main = nll_loss(out.spans, batch.tau_s, batch.tau_e)
    else:
        raise ValueError(f"loss_mode must be 'KL' or 'NLL', got {loss_mode!r}")
    att = attention_loss(out.attention.A, batch.tau_s, batch.tau_e, batch.lengths)
    total = main + att if use_attention else main
    return Losses(total, main, att)


def predict_indices(params: ModelParams, samples: list[Sample], emb: EmbeddingTable,
                    batch_size: int = 64) -> list[tuple[int, int]]:
    """Eval-mode argmax (start, end) feature indices for each sample."""
    out = []
    with dc.no_grad():
        for i in range(0, len(samples), batch_size):
            batch = Batch.from_samples(samples[i:i + batch_size])
            spans = forward(params, batch, emb).spans
            s = np.argmax(spans.start.data, axis=-1) + 1
            e = np.argmax(spans.end.data, axis=-1) + 1
            out.extend((int(a), int(b)) for a, b in zip(s, e))
    return out
