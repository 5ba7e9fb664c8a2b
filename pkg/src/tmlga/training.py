"""Adam with coupled weight decay, random-crop augmentation, the epoch loop and checkpoints.

Checkpoint layout: ``b"TMLC1"``, u64 header length, UTF-8 JSON header,
then the raw little-endian float64 arrays listed in the header. The header
stores the SHA-256 of the array payload, so a damaged file is rejected
before anything is restored.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .dataio import (DatasetManifest, EmbeddingTable, Sample, Vocabulary, build_vocabulary,
                     load_embeddings, make_samples)
from .diffcore import Rng
from .errors import ConfigurationError, FormatError, TrainingDiverged
from .model import Batch, ModelDims, ModelParams, compute_losses, forward

log = logging.getLogger(__name__)

CKPT_MAGIC = b"TMLC"
CKPT_VERSION = b"1"
LOG_FIELDS = ("epoch", "sample_count", "mean_total", "mean_main", "mean_att")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 10
    accumulate: int = 1
    loss_mode: str = "KL"
    use_attention_loss: bool = True
    sigma: float = 1.0
    seed: int = 0
    augment: bool = True
    kl_direction: str = "pred_target"
    d: int = 256
    sent_hidden: int = 256
    loc_hidden: int = 256
    dropout: float = 0.5
    min_freq: int = 5
    max_query_len: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.accumulate < 1:
            raise ConfigurationError(f"accumulate must be >= 1, got {self.accumulate}")
        if self.loss_mode not in ("KL", "NLL"):
            raise ConfigurationError(f"loss_mode must be KL or NLL, got {self.loss_mode!r}")
        if self.kl_direction not in ("pred_target", "target_pred"):
            raise ConfigurationError(f"unknown kl_direction {self.kl_direction!r}")
        if not self.sigma > 0:
            raise ConfigurationError("sigma must be > 0")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# --------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update; weight decay is added to the gradient (coupled L2).

    ``params`` maps names to Tensors, ``grads`` names to arrays.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if weight_decay:
            g = g + weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ------------------------------------------------------------- augmentation

def augment_random_crop(sample: Sample, rng: Rng, crop: int | None = None) -> Sample:
    """Drop a random-length prefix that ends before the annotated span.

    The crop length is uniform on [0, tau_s - 1]; ``crop`` fixes it instead.
    """
    if sample.tau_s <= 1:
        return sample
    c = rng.integers(0, sample.tau_s - 1) if crop is None else crop
    if c == 0:
        return sample
    return Sample(sample.features[c:], sample.token_ids, sample.tau_s - c, sample.tau_e - c,
                  sample.video_id, sample.query, sample.l, sample.fps, sample.t_s, sample.t_e)


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    params: ModelParams
    adam: AdamState
    rng: Rng
    log: list[dict]
    vocab: Vocabulary
    embeddings: EmbeddingTable
    config: TrainConfig
    epoch: int


def model_dims(config: TrainConfig, emb: EmbeddingTable, d_v: int) -> ModelDims:
    return ModelDims(emb.dim, d_v, config.d, config.sent_hidden, config.loc_hidden, config.dropout)


def prepare(manifest: DatasetManifest, embeddings, config: TrainConfig):
    """Vocabulary, embedding table and samples for a training manifest."""
    queries = manifest.queries()
    if not queries:
        raise ConfigurationError("training manifest has no annotated samples")
    vocab = build_vocabulary(queries, config.min_freq)
    if isinstance(embeddings, EmbeddingTable):
        emb = embeddings
    else:
        emb = load_embeddings(embeddings, vocab, Rng(config.seed, stream=1))
    return vocab, emb, make_samples(manifest, vocab, config.max_query_len)


def train(manifest: DatasetManifest, embeddings, config: TrainConfig, out_dir=None,
          resume=None, max_epochs: int | None = None) -> TrainResult:
    """Train from a manifest. ``embeddings`` is a path or a prepared EmbeddingTable.

    ``resume`` is a :class:`Checkpoint` (or path) to continue from; with
    ``out_dir`` a checkpoint and the loss CSV are rewritten after every
    epoch. ``max_epochs`` stops early after that many epochs in this call.
    """
    config.validate()
    if resume is not None and not isinstance(resume, Checkpoint):
        resume = load_checkpoint(resume)
    vocab, emb, samples = prepare(manifest, resume.embeddings if resume else embeddings, config)
    if resume is not None and resume.vocab_hash != vocab.hash():
        raise ConfigurationError(
            "checkpoint vocabulary differs from the one built from this manifest "
            f"({resume.vocab_hash[:12]} vs {vocab.hash()[:12]}); refusing to resume")
    return fit(samples, vocab, emb, config, out_dir, resume, max_epochs)


def fit(samples: list[Sample], vocab: Vocabulary, emb: EmbeddingTable, config: TrainConfig,
        out_dir=None, resume: "Checkpoint | None" = None, max_epochs: int | None = None) -> TrainResult:
    config.validate()
    if not samples:
        raise ConfigurationError("no training samples")
    if resume is None:
        rng = Rng(config.seed)
        params = ModelParams.init(model_dims(config, emb, samples[0].features.shape[1]), rng)
        adam, history, epoch = AdamState(), [], 0
    else:
        rng = Rng.from_state(resume.rng_state)
        params = ModelParams.init(model_dims(config, emb, samples[0].features.shape[1]), Rng(0))
        params.load_arrays(resume.params)
        adam = AdamState({k: v.copy() for k, v in resume.adam_m.items()},
                         {k: v.copy() for k, v in resume.adam_v.items()}, resume.adam_t)
        history, epoch = [dict(r) for r in resume.log], resume.epoch
    named = params.named()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    stop = config.epochs if max_epochs is None else min(config.epochs, epoch + max_epochs)
    while epoch < stop:
        order = rng.permutation(len(samples))
        sums = np.zeros(3)
        for start in range(0, len(order), config.accumulate):
            group = [samples[i] for i in order[start:start + config.accumulate]]
            if config.augment:
                group = [augment_random_crop(s, rng) for s in group]
            batch = Batch.from_samples(group)
            params.zero_grad()
            fwd = forward(params, batch, emb, rng, training=True)
            losses = compute_losses(fwd, batch, config.loss_mode, config.use_attention_loss,
                                    config.sigma, config.kl_direction)
            values = np.array([losses.total.item(), losses.main.item(), losses.att.item()])
            if not np.all(np.isfinite(values)):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch + 1}; "
                                       "last completed checkpoint kept")
            sums += values
            dc.backward(losses.total * (1.0 / len(group)), list(named.values()))
            adam_step(named, {k: t.grad for k, t in named.items()}, adam, config.learning_rate,
                      config.weight_decay, config.beta1, config.beta2, config.eps)
        epoch += 1
        row = {"epoch": epoch, "sample_count": len(samples),
               "mean_total": sums[0] / len(samples), "mean_main": sums[1] / len(samples),
               "mean_att": sums[2] / len(samples)}
        history.append(row)
        log.info("epoch %d total %.5f main %.5f att %.5f", epoch, row["mean_total"],
                 row["mean_main"], row["mean_att"])
        result = TrainResult(params, adam, rng, history, vocab, emb, config, epoch)
        if out is not None:
            save_checkpoint(out / "checkpoint.tmlc", Checkpoint.from_result(result))
            write_loss_log(out / "loss.csv", history)
    return TrainResult(params, adam, rng, history, vocab, emb, config, epoch)


def write_loss_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_FIELDS)
        for r in rows:
            w.writerow([r["epoch"], r["sample_count"]] + [repr(float(r[k])) for k in LOG_FIELDS[2:]])


# -------------------------------------------------------------- checkpoint

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    adam_t: int
    config: dict
    epoch: int
    rng_state: dict
    vocab_tokens: list[str]
    embeddings: EmbeddingTable
    log: list[dict]

    @property
    def vocab_hash(self) -> str:
        return self.vocabulary().hash()

    def vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_tokens)

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self) -> ModelParams:
        cfg = self.train_config()
        d_v = self.params["attention.P_v"].shape[1]
        params = ModelParams.init(model_dims(cfg, self.embeddings, d_v), Rng(0))
        params.load_arrays(self.params)
        return params

    @classmethod
    def from_result(cls, r: TrainResult) -> "Checkpoint":
        return cls(r.params.arrays(), {k: v.copy() for k, v in r.adam.m.items()},
                   {k: v.copy() for k, v in r.adam.v.items()}, r.adam.t, asdict(r.config),
                   r.epoch, r.rng.state, r.vocab.tokens(), r.embeddings, [dict(x) for x in r.log])


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays: list[tuple[str, np.ndarray]] = [("embeddings", ckpt.embeddings.rows)]
    arrays += [(f"param/{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    arrays += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    index, chunks, offset = [], [], 0
    for name, a in arrays:
        raw = np.ascontiguousarray(a, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = json.dumps({
        "arrays": index,
        "sha256": hashlib.sha256(payload).hexdigest(),
        "adam_t": ckpt.adam_t,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "vocab_tokens": ckpt.vocab_tokens,
        "vocab_hash": ckpt.vocab_hash,
        "log": ckpt.log,
    }).encode("utf-8")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(CKPT_MAGIC + CKPT_VERSION + struct.pack("<Q", len(header)) + header + payload)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 13 or raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file")
    if raw[4:5] != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {raw[4:5]!r}")
    (hlen,) = struct.unpack_from("<Q", raw, 5)
    try:
        header = json.loads(raw[13:13 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupted checkpoint header") from exc
    payload = raw[13 + hlen:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise FormatError(f"{path}: checkpoint payload is corrupted (checksum mismatch)")
    arrays = {}
    for spec in header["arrays"]:
        a = np.frombuffer(payload, dtype="<f8", count=spec["nbytes"] // 8, offset=spec["offset"])
        arrays[spec["name"]] = a.reshape(spec["shape"]).astype(np.float64)

    def group(prefix):
        return {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}

    ckpt = Checkpoint(group("param/"), group("adam_m/"), group("adam_v/"), header["adam_t"],
                      header["config"], header["epoch"], header["rng_state"], header["vocab_tokens"],
                      EmbeddingTable(arrays["embeddings"]), header["log"])
    if ckpt.vocab_hash != header["vocab_hash"]:
        raise FormatError(f"{path}: vocabulary hash mismatch inside checkpoint")
    return ckpt

