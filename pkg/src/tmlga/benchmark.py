"""Desk-scale synthetic benchmark: data split, training settings and the oracle baseline.

The model here is far smaller than the full-size one (32 hidden units instead
of 256) so that a run fits in a couple of minutes on one CPU core. The
learning rate is raised to match, and gradients are averaged over groups of
16 samples.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

from .dataio import index_to_time, load_manifest
from .evaluation import DEFAULT_ALPHAS, PredictionRecord, evaluate_records, predict_manifest
from .synthdata import SynthData, SynthSpec, generate, oracle_localize
from .training import TrainConfig, train

NUM_TRAIN = 500
NUM_TEST = 100
DESK_CONFIG = TrainConfig(learning_rate=1e-3, epochs=5, accumulate=16, d=32, sent_hidden=32,
                          loc_hidden=32, min_freq=5)


def benchmark_spec(seed: int = 0) -> SynthSpec:
    return SynthSpec(num_videos=NUM_TRAIN + NUM_TEST, seed=seed)


@dataclass
class Benchmark:
    root: Path
    data: SynthData

    @property
    def train_manifest(self):
        return load_manifest(self.root / "train.json")

    @property
    def test_manifest(self):
        return load_manifest(self.root / "test.json")

    @property
    def embeddings(self) -> Path:
        return self.root / "embeddings.txt"


def build(out_dir, seed: int = 0, spec: SynthSpec | None = None) -> Benchmark:
    spec = spec or benchmark_spec(seed)
    data = generate(spec, out_dir, num_train=NUM_TRAIN)
    return Benchmark(Path(out_dir), data)


def oracle_records(data: SynthData, first: int = NUM_TRAIN) -> list[PredictionRecord]:
    """Oracle predictions for videos ``first..`` scored against their annotations.

    A not-found result becomes the empty interval at time 0.
    """
    out = []
    for v, e in zip(data.videos[first:], data.manifest.entries[first:]):
        span = oracle_localize(v.features, data.prototypes[v.action])
        n = v.features.shape[0]
        pred = (0.0, 0.0) if span is None else (index_to_time(span[0], n, e.fps, e.l),
                                                 index_to_time(span[1], n, e.fps, e.l))
        a = e.annotations[0]
        out.append(PredictionRecord(v.video_id, a.query, pred, (a.t_s, a.t_e), span))
    return out


def run(bench: Benchmark, config: TrainConfig = DESK_CONFIG, alphas=DEFAULT_ALPHAS, **overrides):
    """Train on the benchmark split and score the test split."""
    cfg = replace(config, **overrides)
    res = train(bench.train_manifest, bench.embeddings, cfg)
    records = predict_manifest(res.params, res.vocab, res.embeddings, bench.test_manifest, cfg.max_query_len)
    return res, evaluate_records(records, alphas)
