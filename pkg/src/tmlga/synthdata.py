"""Synthetic videos with query-conditioned planted moments.

Each action k owns a prototype vector and a short query template. A video is
background noise with one planted span of its action (prototype + noise)
and, with some probability, a non-overlapping distractor span of another
action. Everything derives from the seed; video i draws from its own Philox
stream ``(seed, 1000 + i)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (Annotation, DatasetManifest, VideoEntry, index_to_time, write_features,
                     write_manifest)
from .diffcore import Rng
from .errors import GenerationError, ValidationError

SUBJECTS = ("person", "someone", "man", "woman")
MAX_PLACEMENT_TRIES = 100


@dataclass
class SynthSpec:
    num_videos: int = 600
    n: int = 64
    d_v: int = 32
    num_actions: int = 8
    moment_len_range: tuple[int, int] = (6, 20)
    noise_sigma: float = 0.7
    distractor_prob: float = 1.0
    seed: int = 0
    emb_dim: int = 32
    fps: float = 25.0
    frames_range: tuple[int, int] = (600, 1000)
    boundary_jitter: int = 2

    def validate(self) -> None:
        lo, hi = self.moment_len_range
        if self.num_actions < 2:
            raise ValidationError("num_actions must be >= 2")
        if not 2 <= lo <= hi <= self.n:
            raise ValidationError(f"moment_len_range {self.moment_len_range} must fit in n={self.n}")
        if self.num_videos < 0 or self.d_v < 1 or self.noise_sigma < 0:
            raise ValidationError("num_videos, d_v and noise_sigma must be non-negative (d_v >= 1)")
        if self.boundary_jitter < 0:
            raise ValidationError("boundary_jitter must be >= 0")
        if not 0 <= self.distractor_prob <= 1:
            raise ValidationError("distractor_prob must lie in [0, 1]")


@dataclass
class PlantedVideo:
    video_id: str
    action: int
    span: tuple[int, int]                 # 1-based inclusive feature indices
    annotated: tuple[int, int]            # span after annotator jitter
    distractor: tuple[int, tuple[int, int]] | None
    features: np.ndarray


@dataclass
class SynthData:
    manifest: DatasetManifest
    prototypes: np.ndarray                # (num_actions, d_v)
    templates: list[str]
    videos: list[PlantedVideo] = field(default_factory=list)


def _templates(spec: SynthSpec, rng: Rng) -> list[str]:
    out = []
    for k in range(spec.num_actions):
        length = rng.integers(2, 4)
        words = [SUBJECTS[k % len(SUBJECTS)], f"verb{k}"]
        if length >= 3:
            words.append(f"noun{k}")
        if length == 4:
            words.insert(2, "the")
        out.append(" ".join(words))
    return out


def _place(n: int, lengths: tuple[int, int], taken: list[tuple[int, int]], rng: Rng) -> tuple[int, int]:
    """Draw (length, start) pairs until the span avoids every span in ``taken``."""
    for _ in range(MAX_PLACEMENT_TRIES):
        length = rng.integers(*lengths)
        s = rng.integers(1, n - length + 1)
        e = s + length - 1
        if all(e < a or s > b for a, b in taken):
            return s, e
    raise GenerationError(f"could not place a span with length in {lengths} in n={n} "
                          f"after {MAX_PLACEMENT_TRIES} attempts")


def _jitter(span: tuple[int, int], j: int, n: int, rng: Rng) -> tuple[int, int]:
    """Shift each boundary by a uniform integer in [-j, j], keeping start < end inside [1, n]."""
    if j == 0:
        return span
    s = min(max(span[0] + rng.integers(-j, j), 1), n - 1)
    e = min(max(span[1] + rng.integers(-j, j), s + 1), n)
    return s, e


def synthesize(spec: SynthSpec) -> SynthData:
    """Generate everything in memory (feature paths point at ``features/<id>.tmlf``)."""
    spec.validate()
    base = Rng(spec.seed, stream=0)
    # float32-representable so noiseless planted rows survive the TMLF round trip exactly
    prototypes = base.normal(1.0, (spec.num_actions, spec.d_v)).astype(np.float32).astype(np.float64)
    templates = _templates(spec, base)
    entries, videos = [], []
    for i in range(spec.num_videos):
        rng = Rng(spec.seed, stream=1000 + i)
        vid = f"vid{i:05d}"
        action = rng.integers(0, spec.num_actions - 1)
        feats = rng.normal(spec.noise_sigma, (spec.n, spec.d_v))
        span = _place(spec.n, spec.moment_len_range, [], rng)
        feats[span[0] - 1:span[1]] += prototypes[action]
        distractor = None
        if rng.random() < spec.distractor_prob:
            other = (action + rng.integers(1, spec.num_actions - 1)) % spec.num_actions
            dspan = _place(spec.n, spec.moment_len_range, [span], rng)
            feats[dspan[0] - 1:dspan[1]] += prototypes[other]
            distractor = (other, dspan)
        l = rng.integers(*spec.frames_range)
        annotated = _jitter(span, spec.boundary_jitter, spec.n, rng)
        t_s = index_to_time(annotated[0], spec.n, spec.fps, l)
        t_e = index_to_time(annotated[1], spec.n, spec.fps, l)
        entries.append(VideoEntry(vid, f"features/{vid}.tmlf", l, spec.fps,
                                  [Annotation(templates[action], t_s, t_e)]))
        videos.append(PlantedVideo(vid, action, span, annotated, distractor, feats.astype(np.float32)))
    return SynthData(DatasetManifest(entries), prototypes, templates, videos)


def write_embedding_file(path, tokens: list[str], dim: int, rng: Rng) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok in tokens:
            vec = rng.normal(1.0 / np.sqrt(dim), dim)
            fh.write(tok + " " + " ".join(f"{v:.6f}" for v in vec) + "\n")


def vocabulary_tokens(templates: list[str]) -> list[str]:
    seen: dict[str, None] = {}
    for t in templates:
        for w in t.split():
            seen.setdefault(w, None)
    return list(seen)


def split_manifest(manifest: DatasetManifest, num_train: int) -> tuple[DatasetManifest, DatasetManifest]:
    return (DatasetManifest(manifest.entries[:num_train], manifest.root),
            DatasetManifest(manifest.entries[num_train:], manifest.root))


def generate(spec: SynthSpec, out_dir, num_train: int | None = None) -> SynthData:
    """Write ``manifest.json``, ``features/*.tmlf`` and ``embeddings.txt`` under ``out_dir``.

    With ``num_train``, also writes ``train.json`` (first ``num_train``
    videos) and ``test.json`` (the rest).
    """
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    data = synthesize(spec)
    for v in data.videos:
        write_features(out / "features" / f"{v.video_id}.tmlf", v.features)
    data.manifest.root = out
    write_manifest(out / "manifest.json", data.manifest)
    if num_train is not None:
        train, test = split_manifest(data.manifest, num_train)
        write_manifest(out / "train.json", train)
        write_manifest(out / "test.json", test)
    write_embedding_file(out / "embeddings.txt", vocabulary_tokens(data.templates), spec.emb_dim,
                         Rng(spec.seed, stream=2))
    return data


def cosine_rows(features: np.ndarray, prototype: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1) * np.linalg.norm(prototype)
    return np.where(norms > 0, features @ prototype / np.where(norms > 0, norms, 1.0), 0.0)


def oracle_localize(features: np.ndarray, prototype: np.ndarray,
                    threshold: float = 0.5) -> tuple[int, int] | None:
    """Longest run of rows with cosine similarity above ``threshold``; None if no row qualifies.

    Ties between equally long runs go to the earliest.
    """
    hit = cosine_rows(np.asarray(features, dtype=np.float64), np.asarray(prototype, dtype=np.float64)) > threshold
    best, best_len, start = None, 0, None
    for i, h in enumerate(list(hit) + [False]):
        if h and start is None:
            start = i
        elif not h and start is not None:
            if i - start > best_len:
                best, best_len = (start + 1, i), i - start
            start = None
    return best
