"""File formats, vocabulary, embeddings and the time <-> feature-index mapping.

Formats
-------
Manifest (UTF-8 JSON)::

    {"entries": [{"video_id": str, "feature_path": str, "l": int, "fps": float,
                  "annotations": [{"query": str, "t_s": float, "t_e": float}]}]}

Relative ``feature_path`` values resolve against the manifest's directory.

TMLF feature file (little-endian): magic ``b"TMLF"``, u32 version (1), u32 n,
u32 d_v, then n*d_v float32 values in row-major order. No padding.

Embedding file: one ``token v1 ... v_dim`` line per token.
"""
from __future__ import annotations

import hashlib
import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .diffcore import Rng
from .errors import EmptyInputError, FormatError, RangeError, TruncationError, ValidationError

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
MAX_QUERY_LEN = 30
MIN_FREQ = 5

TMLF_MAGIC = b"TMLF"
TMLF_VERSION = 1
_TMLF_HEADER = struct.Struct("<4sIII")

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


# -------------------------------------------------------------------- types

@dataclass
class Annotation:
    query: str
    t_s: float
    t_e: float


@dataclass
class VideoEntry:
    video_id: str
    feature_path: str
    l: int
    fps: float
    annotations: list[Annotation] = field(default_factory=list)

    @property
    def duration(self) -> float:
        return self.l / self.fps


@dataclass
class DatasetManifest:
    entries: list[VideoEntry]
    root: Path = field(default_factory=Path)

    def feature_file(self, entry: VideoEntry) -> Path:
        p = Path(entry.feature_path)
        return p if p.is_absolute() else self.root / p

    def entry(self, video_id: str) -> VideoEntry:
        for e in self.entries:
            if e.video_id == video_id:
                return e
        raise ValidationError(f"video_id {video_id!r} not in manifest")

    def queries(self) -> list[str]:
        return [a.query for e in self.entries for a in e.annotations]

    def to_json(self) -> dict:
        return {"entries": [
            {"video_id": e.video_id, "feature_path": e.feature_path, "l": e.l, "fps": e.fps,
             "annotations": [{"query": a.query, "t_s": a.t_s, "t_e": a.t_e} for a in e.annotations]}
            for e in self.entries]}


@dataclass
class Sample:
    """One (video, query, span) training or evaluation example."""

    features: np.ndarray
    token_ids: list[int]
    tau_s: int
    tau_e: int
    video_id: str = ""
    query: str = ""
    l: int = 0
    fps: float = 0.0
    t_s: float = 0.0
    t_e: float = 0.0

    @property
    def n(self) -> int:
        return self.features.shape[0]


# ----------------------------------------------------------------- manifest

def _check_entry(raw: dict, i: int) -> VideoEntry:
    vid = raw.get("video_id", f"<entry {i}>")

    def fail(fieldname: str, why: str):
        raise ValidationError(f"video {vid!r}: field {fieldname!r} {why}")

    for key, kind in (("video_id", str), ("feature_path", str)):
        if not isinstance(raw.get(key), kind):
            fail(key, "missing or not a string")
    l, fps = raw.get("l"), raw.get("fps")
    if isinstance(l, bool) or not isinstance(l, int) or l < 1:
        fail("l", f"must be an integer >= 1, got {l!r}")
    if isinstance(fps, bool) or not isinstance(fps, (int, float)) or not fps > 0:
        fail("fps", f"must be a positive number, got {fps!r}")
    duration = l / fps
    anns = raw.get("annotations")
    if not isinstance(anns, list):
        fail("annotations", "must be a list")
    parsed = []
    for j, a in enumerate(anns):
        q, ts, te = a.get("query"), a.get("t_s"), a.get("t_e")
        if not isinstance(q, str) or not q.strip():
            fail(f"annotations[{j}].query", "must be a non-empty string")
        for name, v in (("t_s", ts), ("t_e", te)):
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
                fail(f"annotations[{j}].{name}", f"must be a finite number, got {v!r}")
        if not (0 <= ts < te <= duration + 1e-9):
            fail(f"annotations[{j}].t_s/t_e",
                 f"needs 0 <= t_s < t_e <= l/fps={duration:g}, got ({ts}, {te})")
        parsed.append(Annotation(q, float(ts), float(te)))
    return VideoEntry(raw["video_id"], raw["feature_path"], l, float(fps), parsed)


def parse_manifest(obj: dict, root: Path | str = ".") -> DatasetManifest:
    if not isinstance(obj, dict) or not isinstance(obj.get("entries"), list):
        raise ValidationError("manifest must be an object with an 'entries' list")
    entries = [_check_entry(raw, i) for i, raw in enumerate(obj["entries"])]
    seen = set()
    for e in entries:
        if e.video_id in seen:
            raise ValidationError(f"video {e.video_id!r}: field 'video_id' is duplicated")
        seen.add(e.video_id)
    return DatasetManifest(entries, Path(root))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: malformed JSON at line {exc.lineno}: {exc.msg}") from exc
    return parse_manifest(obj, path.parent)


def write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")


# ----------------------------------------------------------------- features

def write_features(path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"feature matrix must be n x d_v with n, d_v >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("feature matrix contains non-finite values")
    n, d = arr.shape
    payload = np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(_TMLF_HEADER.pack(TMLF_MAGIC, TMLF_VERSION, n, d) + payload)


def load_features(path) -> np.ndarray:
    """Read a TMLF file into an (n, d_v) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _TMLF_HEADER.size:
        raise TruncationError(f"{path}: {len(raw)} bytes is shorter than the TMLF header")
    magic, version, n, d = _TMLF_HEADER.unpack_from(raw)
    if magic != TMLF_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {TMLF_MAGIC!r}")
    if version != TMLF_VERSION:
        raise FormatError(f"{path}: unsupported TMLF version {version}")
    if n < 1 or d < 1:
        raise FormatError(f"{path}: invalid dimensions n={n}, d_v={d}")
    expected = _TMLF_HEADER.size + 4 * n * d
    if len(raw) != expected:
        raise TruncationError(f"{path}: expected {expected} bytes for n={n}, d_v={d}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=_TMLF_HEADER.size).reshape(n, d)
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{path}: non-finite feature values")
    return data.astype(np.float64)


# --------------------------------------------------------------- vocabulary

def tokenize(text: str) -> list[str]:
    """Lowercase, then split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


class Vocabulary:
    """Token <-> id map with PAD=0 and UNK=1 reserved."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def tokens(self) -> list[str]:
        return self.itos[2:]

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()


def build_vocabulary(queries: Sequence[str], min_freq: int = MIN_FREQ) -> Vocabulary:
    if not queries:
        raise EmptyInputError("cannot build a vocabulary from an empty corpus")
    counts: Counter = Counter()
    order: dict[str, int] = {}
    for q in queries:
        for tok in tokenize(q):
            counts[tok] += 1
            order.setdefault(tok, len(order))
    return Vocabulary(t for t in order if counts[t] >= min_freq)


def encode_query(query: str, vocab: Vocabulary, max_len: int = MAX_QUERY_LEN) -> list[int]:
    toks = tokenize(query)
    if not toks:
        raise EmptyInputError(f"query {query!r} has no tokens")
    return [vocab.id(t) for t in toks[:max_len]]


# --------------------------------------------------------------- embeddings

@dataclass
class EmbeddingTable:
    rows: np.ndarray

    @property
    def dim(self) -> int:
        return self.rows.shape[1]

    def lookup(self, ids) -> np.ndarray:
        return self.rows[np.asarray(ids, dtype=np.intp)]


def read_embedding_file(path) -> tuple[dict[str, np.ndarray], int]:
    vectors: dict[str, np.ndarray] = {}
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split(" ")
            if not parts or parts == [""]:
                continue
            tok, vals = parts[0], parts[1:]
            if dim is None:
                dim = len(vals)
                if dim == 0:
                    raise FormatError(f"{path}:{lineno}: no vector values")
            elif len(vals) != dim:
                raise FormatError(f"{path}:{lineno}: expected {dim} values, got {len(vals)}")
            try:
                vec = np.array([float(v) for v in vals])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            vectors.setdefault(tok, vec)
    if dim is None:
        raise FormatError(f"{path}: empty embedding file")
    return vectors, dim


def load_embeddings(path, vocab: Vocabulary, rng: Rng | None = None) -> EmbeddingTable:
    """Rows aligned to vocab ids; tokens absent from the file get uniform(-0.05, 0.05)."""
    vectors, dim = read_embedding_file(path)
    rng = rng or Rng(0, stream=1)
    rows = np.zeros((len(vocab), dim))
    for i, tok in enumerate(vocab.itos):
        if i == PAD:
            continue
        vec = vectors.get(tok)
        rows[i] = vec if vec is not None else rng.uniform(-0.05, 0.05, dim)
    return EmbeddingTable(rows)


# ------------------------------------------------------------------ mapping

def time_to_index(t: float, n: int, fps: float, l: int) -> int:
    """Seconds to feature index in [1, n], rounding half up."""
    if not (0 <= t <= l / fps + 1e-9):
        raise RangeError(f"time {t} outside [0, {l / fps}]")
    tau = t * n * fps / l
    return min(max(int(math.floor(tau + 0.5)), 1), n)


def index_to_time(tau: int, n: int, fps: float, l: int) -> float:
    if not (1 <= tau <= n):
        raise RangeError(f"feature index {tau} outside [1, {n}]")
    return tau * l / (n * fps)


# ------------------------------------------------------------------ samples

def make_samples(manifest: DatasetManifest, vocab: Vocabulary,
                 max_len: int = MAX_QUERY_LEN) -> list[Sample]:
    """One Sample per annotation, in manifest order."""
    samples = []
    for entry in manifest.entries:
        feats = load_features(manifest.feature_file(entry))
        n = feats.shape[0]
        for a in entry.annotations:
            ts = time_to_index(a.t_s, n, entry.fps, entry.l)
            te = time_to_index(a.t_e, n, entry.fps, entry.l)
            samples.append(Sample(feats, encode_query(a.query, vocab, max_len), ts, te,
                                  entry.video_id, a.query, entry.l, entry.fps, a.t_s, a.t_e))
    return samples
