"""tIoU metrics, prediction records and the four-way loss ablation."""
from __future__ import annotations

import json
import statistics
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .dataio import DatasetManifest, EmbeddingTable, Sample, Vocabulary, index_to_time, make_samples
from .errors import EmptyInputError, ParameterError
from .model import ModelParams, predict_indices

DEFAULT_ALPHAS = (0.3, 0.5, 0.7)
ABLATION_CONFIGS = {
    "NLL": ("NLL", False),
    "KL": ("KL", False),
    "NLL+AL": ("NLL", True),
    "KL+AL": ("KL", True),
}


@dataclass
class PredictionRecord:
    video_id: str
    query: str
    pred: tuple[float, float]
    gt: tuple[float, float]
    tau_pred: tuple[int, int] | None = None

    def to_json(self) -> dict:
        out = {"video_id": self.video_id, "query": self.query,
               "t_s_pred": self.pred[0], "t_e_pred": self.pred[1]}
        if self.tau_pred is not None:
            out["tau_s"], out["tau_e"] = self.tau_pred
        out["t_s_gt"], out["t_e_gt"] = self.gt
        return out


@dataclass
class EvalReport:
    accuracy_at: dict[float, float]
    mean_tiou: float
    count: int

    def to_json(self) -> dict:
        return {"accuracy": {str(a): v for a, v in self.accuracy_at.items()},
                "miou": self.mean_tiou, "count": self.count}

    def table(self) -> str:
        heads = [f"alpha={a}" for a in self.accuracy_at] + ["mIoU", "count"]
        vals = [f"{v * 100:.2f}" for v in self.accuracy_at.values()] + [f"{self.mean_tiou * 100:.2f}",
                                                                        str(self.count)]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        return "\n".join("  ".join(x.rjust(w) for x, w in zip(row, widths)) for row in (heads, vals))


def tiou(a: Sequence[float], b: Sequence[float], strict_inverted_zero: bool = False) -> float:
    """Temporal IoU of a (possibly inverted) prediction ``a`` against ground truth ``b``."""
    a0, a1 = a
    if a1 < a0:
        if strict_inverted_zero:
            return 0.0
        a0, a1 = a1, a0
    b0, b1 = b
    inter = max(0.0, min(a1, b1) - max(a0, b0))
    union = (a1 - a0) + (b1 - b0) - inter
    return inter / union if union > 0 else 0.0


def _tious(records, strict_inverted_zero: bool = False) -> list[float]:
    if not records:
        raise EmptyInputError("no prediction records")
    return [tiou(r.pred, r.gt, strict_inverted_zero) for r in records]


def accuracy_at(records, alpha: float, strict_inverted_zero: bool = False) -> float:
    """Fraction of records with tIoU >= alpha."""
    if not 0 < alpha <= 1:
        raise ParameterError(f"alpha must lie in (0, 1], got {alpha}")
    ts = _tious(records, strict_inverted_zero)
    return sum(t >= alpha for t in ts) / len(ts)


def mean_tiou(records, strict_inverted_zero: bool = False) -> float:
    ts = _tious(records, strict_inverted_zero)
    return sum(ts) / len(ts)


def evaluate_records(records, alphas=DEFAULT_ALPHAS, strict_inverted_zero: bool = False) -> EvalReport:
    return EvalReport({a: accuracy_at(records, a, strict_inverted_zero) for a in alphas},
                      mean_tiou(records, strict_inverted_zero), len(records))


# ---------------------------------------------------------------- predict

def predict_records(params: ModelParams, samples: list[Sample], emb: EmbeddingTable) -> list[PredictionRecord]:
    out = []
    for s, (ps, pe) in zip(samples, predict_indices(params, samples, emb)):
        pred = (index_to_time(ps, s.n, s.fps, s.l), index_to_time(pe, s.n, s.fps, s.l))
        out.append(PredictionRecord(s.video_id, s.query, pred, (s.t_s, s.t_e), (ps, pe)))
    return out


def predict_manifest(params: ModelParams, vocab: Vocabulary, emb: EmbeddingTable,
                     manifest: DatasetManifest, max_len: int = 30) -> list[PredictionRecord]:
    return predict_records(params, make_samples(manifest, vocab, max_len), emb)


def write_predictions(path, records: list[PredictionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_predictions(path, manifest: DatasetManifest | None = None) -> list[PredictionRecord]:
    """Load JSON-lines predictions; ground truth comes from ``manifest`` when given.

    Manifest matching is by (video_id, query) and order of occurrence, so a
    query annotated twice in one video pairs with its annotations in order.
    """
    rows = [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]
    gts: dict[tuple[str, str], list[tuple[float, float]]] = {}
    if manifest is not None:
        for e in manifest.entries:
            for a in e.annotations:
                gts.setdefault((e.video_id, a.query), []).append((a.t_s, a.t_e))
    used: dict[tuple[str, str], int] = {}
    out = []
    for row in rows:
        key = (row["video_id"], row["query"])
        if manifest is not None:
            k = used.get(key, 0)
            if key not in gts or k >= len(gts[key]):
                raise ParameterError(f"prediction for {key} has no matching annotation in the manifest")
            gt = gts[key][k]
            used[key] = k + 1
        elif "t_s_gt" in row:
            gt = (row["t_s_gt"], row["t_e_gt"])
        else:
            raise ParameterError("predictions carry no ground truth; pass a manifest")
        tau = (row["tau_s"], row["tau_e"]) if "tau_s" in row else None
        out.append(PredictionRecord(row["video_id"], row["query"],
                                    (row["t_s_pred"], row["t_e_pred"]), tuple(gt), tau))
    return out


# --------------------------------------------------------------- ablation

@dataclass
class AblationRow:
    config: str
    seed: int
    report: EvalReport
    final_loss: float
    seconds: float = 0.0


@dataclass
class AblationTable:
    rows: list[AblationRow] = field(default_factory=list)
    alphas: tuple = DEFAULT_ALPHAS

    def mean(self, config: str, alpha: float | None = None) -> float:
        vals = [r.report.accuracy_at[alpha] if alpha is not None else r.report.mean_tiou
                for r in self.rows if r.config == config]
        return statistics.fmean(vals)

    def median(self, config: str, alpha: float) -> float:
        return statistics.median(r.report.accuracy_at[alpha] for r in self.rows if r.config == config)

    def to_json(self) -> dict:
        return {
            "runs": [{"config": r.config, "seed": r.seed, **r.report.to_json(),
                      "final_loss": r.final_loss, "seconds": r.seconds} for r in self.rows],
            "means": {c: {"accuracy": {str(a): self.mean(c, a) for a in self.alphas},
                          "miou": self.mean(c)}
                      for c in ABLATION_CONFIGS if any(r.config == c for r in self.rows)},
        }

    def table(self) -> str:
        heads = ["Method"] + [f"alpha={a}" for a in self.alphas] + ["mIoU"]
        lines = [heads]
        for c in ABLATION_CONFIGS:
            if any(r.config == c for r in self.rows):
                lines.append([c] + [f"{self.mean(c, a) * 100:.2f}" for a in self.alphas]
                             + [f"{self.mean(c) * 100:.2f}"])
        widths = [max(len(row[i]) for row in lines) for i in range(len(heads))]
        return "\n".join("  ".join(x.ljust(w) if i == 0 else x.rjust(w)
                                   for i, (x, w) in enumerate(zip(row, widths))) for row in lines)


def run_ablation(manifest_train: DatasetManifest, manifest_test: DatasetManifest, embeddings,
                 base_config, seeds: Sequence[int], configs: Sequence[str] = tuple(ABLATION_CONFIGS),
                 alphas=DEFAULT_ALPHAS, progress=None) -> AblationTable:
    """Train and score each loss configuration for every seed, sequentially."""
    import time

    from .training import train

    if not seeds:
        raise ParameterError("run_ablation needs at least one seed")
    table = AblationTable(alphas=tuple(alphas))
    for seed in seeds:
        for name in configs:
            mode, use_att = ABLATION_CONFIGS[name]
            cfg = replace(base_config, loss_mode=mode, use_attention_loss=use_att, seed=seed)
            t0 = time.perf_counter()
            res = train(manifest_train, embeddings, cfg)
            records = predict_manifest(res.params, res.vocab, res.embeddings, manifest_test,
                                       cfg.max_query_len)
            row = AblationRow(name, seed, evaluate_records(records, alphas),
                              res.log[-1]["mean_total"], time.perf_counter() - t0)
            table.rows.append(row)
            if progress is not None:
                progress(row)
    return table
