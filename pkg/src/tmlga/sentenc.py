"""GRU recurrences and the query encoder.

Cell convention (update gate carries the old state)::

    z  = sigmoid(W_z x + U_z h + b_z)
    r  = sigmoid(W_r x + U_r h + b_r)
    hc = tanh(W_h x + U_h (r * h) + b_h)
    h' = (1 - z) * hc + z * h

:func:`gru_cell_step` builds one step from core ops. :func:`gru_sequence`
runs a whole (batched) sequence as a single tape node with a hand-written
backpropagation-through-time rule; it is the path used for training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataio import EmbeddingTable
from .diffcore import Rng, Tensor
from .errors import DimensionError, EmptyInputError

GATES = ("z", "r", "h")


@dataclass
class GruCellParams:
    W_z: Tensor
    W_r: Tensor
    W_h: Tensor
    U_z: Tensor
    U_r: Tensor
    U_h: Tensor
    b_z: Tensor
    b_r: Tensor
    b_h: Tensor

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: Rng) -> "GruCellParams":
        """uniform(-k, k) weights with k = 1/sqrt(hidden_size); zero biases."""
        k = 1.0 / np.sqrt(hidden_size)

        def w(shape):
            return Tensor(rng.uniform(-k, k, shape), requires_grad=True)

        Ws = [w((hidden_size, input_size)) for _ in GATES]
        Us = [w((hidden_size, hidden_size)) for _ in GATES]
        bs = [Tensor(np.zeros(hidden_size), requires_grad=True) for _ in GATES]
        return cls(*Ws, *Us, *bs)

    @classmethod
    def from_arrays(cls, arrays: dict) -> "GruCellParams":
        return cls(**{k: Tensor(np.asarray(v, dtype=np.float64), requires_grad=True)
                      for k, v in arrays.items()})

    @property
    def input_size(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_size(self) -> int:
        return self.W_z.shape[0]

    def named(self) -> dict[str, Tensor]:
        return dict(vars(self))

    def tensors(self) -> list[Tensor]:
        return list(vars(self).values())

    def check(self) -> None:
        u, x = self.hidden_size, self.input_size
        want = {"W": (u, x), "U": (u, u), "b": (u,)}
        for name, t in self.named().items():
            if t.shape != want[name[0]]:
                raise DimensionError(f"GRU param {name} has shape {t.shape}, expected {want[name[0]]}")


@dataclass
class BiGruParams:
    forward: GruCellParams
    backward: GruCellParams

    @classmethod
    def init(cls, input_size: int, hidden_size: int, rng: Rng) -> "BiGruParams":
        return cls(GruCellParams.init(input_size, hidden_size, rng),
                   GruCellParams.init(input_size, hidden_size, rng))

    @property
    def output_size(self) -> int:
        return 2 * self.forward.hidden_size

    def named(self) -> dict[str, Tensor]:
        out = {f"fwd.{k}": v for k, v in self.forward.named().items()}
        out.update({f"bwd.{k}": v for k, v in self.backward.named().items()})
        return out


SentenceEncoderParams = BiGruParams


def gru_cell_step(x, h, p: GruCellParams) -> Tensor:
    """One GRU step for x of shape (..., input) and h of shape (..., hidden)."""
    x, h = dc.as_tensor(x), dc.as_tensor(h)
    if x.shape[-1] != p.input_size or h.shape[-1] != p.hidden_size:
        raise DimensionError(f"gru_cell_step: x {x.shape} / h {h.shape} do not match "
                             f"params (input {p.input_size}, hidden {p.hidden_size})")
    z = dc.sigmoid(x @ p.W_z.T + h @ p.U_z.T + p.b_z)
    r = dc.sigmoid(x @ p.W_r.T + h @ p.U_r.T + p.b_r)
    hc = dc.tanh(x @ p.W_h.T + (r * h) @ p.U_h.T + p.b_h)
    return (1.0 - z) * hc + z * h


def gru_sequence(X, p: GruCellParams) -> Tensor:
    """Run a GRU from a zero state over X of shape (B, T, input); returns (B, T, hidden)."""
    X = dc.as_tensor(X)
    if X.ndim != 3 or X.shape[2] != p.input_size:
        raise DimensionError(f"gru_sequence: input shape {X.shape} does not match input size {p.input_size}")
    B, T, _ = X.shape
    if T == 0:
        raise EmptyInputError("gru_sequence over an empty sequence")
    u = p.hidden_size
    Wcat = np.concatenate([p.W_z.data, p.W_r.data, p.W_h.data])      # (3u, x)
    bcat = np.concatenate([p.b_z.data, p.b_r.data, p.b_h.data])
    Uzr = np.concatenate([p.U_z.data, p.U_r.data])                    # (2u, u)
    Uh = p.U_h.data
    UzrT, UhT = np.ascontiguousarray(Uzr.T), np.ascontiguousarray(Uh.T)
    # time-major so each step touches contiguous memory
    Xp = np.ascontiguousarray(np.swapaxes(X.data @ Wcat.T + bcat, 0, 1))   # (T, B, 3u)

    H = np.empty((T + 1, B, u))      # H[0] is the zero initial state
    H[0] = 0.0
    ZR = np.empty((T, B, 2 * u))
    HC = np.empty((T, B, u))
    for t in range(T):
        h = H[t]
        zr = dc._sigmoid(Xp[t, :, :2 * u] + h @ UzrT)
        ZR[t] = zr
        z, r = zr[:, :u], zr[:, u:]
        hc = np.tanh(Xp[t, :, 2 * u:] + (r * h) @ UhT)
        HC[t] = hc
        H[t + 1] = hc + z * (h - hc)

    def bw(g):
        g = np.swapaxes(g, 0, 1)
        dXp = np.empty_like(Xp)
        dUzr = np.zeros_like(Uzr)
        dUh = np.zeros_like(Uh)
        carry = np.zeros((B, u))
        for t in range(T - 1, -1, -1):
            hprev = H[t]
            zr, hc = ZR[t], HC[t]
            z, r = zr[:, :u], zr[:, u:]
            dh = g[t] + carry
            dah = dh * (1.0 - z) * (1.0 - hc * hc)
            drh = dah @ Uh
            dUh += dah.T @ (r * hprev)
            dazr = dXp[t, :, :2 * u]
            dazr[:, :u] = dh * (hprev - hc) * z * (1.0 - z)
            dazr[:, u:] = drh * hprev * r * (1.0 - r)
            dUzr += dazr.T @ hprev
            carry = dh * z + drh * r + dazr @ Uzr
            dXp[t, :, 2 * u:] = dah
        flat = dXp.reshape(-1, 3 * u)
        dW = flat.T @ np.swapaxes(X.data, 0, 1).reshape(-1, X.shape[2])
        db = flat.sum(axis=0)
        dX = np.swapaxes(dXp @ Wcat, 0, 1)
        return (dX,
                dW[:u], dW[u:2 * u], dW[2 * u:],
                dUzr[:u], dUzr[u:], dUh,
                db[:u], db[u:2 * u], db[2 * u:])

    inputs = (X, p.W_z, p.W_r, p.W_h, p.U_z, p.U_r, p.U_h, p.b_z, p.b_r, p.b_h)
    return dc.make_op(np.swapaxes(H[1:], 0, 1), inputs, "gru_sequence", bw)


def reverse_index(lengths, T: int) -> np.ndarray:
    """Per-row time index that reverses the first ``lengths[b]`` steps in place."""
    lengths = np.asarray(lengths)
    t = np.arange(T)[None, :]
    return np.where(t < lengths[:, None], lengths[:, None] - 1 - t, t)


def length_mask(lengths, T: int) -> np.ndarray:
    return np.arange(T)[None, :] < np.asarray(lengths)[:, None]


def bigru_forward(X, p: BiGruParams, lengths=None) -> Tensor:
    """Bidirectional GRU; row j is [forward state after x_1..x_j, backward state after x_m..x_j].

    Accepts (m, input) or batched (B, T, input) with per-row ``lengths``;
    rows past a sequence's length come out as zeros.
    """
    X = dc.as_tensor(X)
    single = X.ndim == 2
    if single:
        X = dc.reshape(X, (1,) + X.shape)
    if X.ndim != 3:
        raise DimensionError(f"bigru_forward expects (m, x) or (B, T, x), got {X.shape}")
    B, T, _ = X.shape
    if T == 0:
        raise EmptyInputError("bigru_forward over an empty sequence")
    if lengths is None:
        lengths = np.full(B, T)
    lengths = np.asarray(lengths)
    rev = reverse_index(lengths, T)
    fwd = gru_sequence(X, p.forward)
    bwd = dc.take_rows(gru_sequence(dc.take_rows(X, rev), p.backward), rev)
    H = dc.concat([fwd, bwd], axis=-1)
    if np.any(lengths < T):
        H = H * length_mask(lengths, T)[..., None]
    if single:
        H = dc.reshape(H, H.shape[1:])
    return H


def pad_tokens(batch: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(ids) for ids in batch])
    if lengths.size == 0 or np.any(lengths == 0):
        raise EmptyInputError("empty token list")
    ids = np.zeros((len(batch), lengths.max()), dtype=np.intp)
    for i, row in enumerate(batch):
        ids[i, :len(row)] = row
    return ids, lengths


def encode_sentence(token_ids, E: EmbeddingTable, p: SentenceEncoderParams) -> Tensor:
    """Mean-pooled BiGRU states of the embedded query.

    ``token_ids`` is one list of ids (returns shape (2u,)) or a list of such
    lists (returns (B, 2u)). Embeddings enter as constants, so no gradient
    ever reaches the table.
    """
    single = len(token_ids) > 0 and not isinstance(token_ids[0], (list, tuple, np.ndarray))
    batch = [list(token_ids)] if single else [list(t) for t in token_ids]
    if not batch:
        raise EmptyInputError("empty token list")
    ids, lengths = pad_tokens(batch)
    X = Tensor(E.lookup(ids))
    H = bigru_forward(X, p, lengths)
    hbar = dc.reduce_mean_rows(H, lengths)
    return dc.reshape(hbar, hbar.shape[1:]) if single else hbar
