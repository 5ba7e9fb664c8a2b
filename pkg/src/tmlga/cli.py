"""``tmlga`` command line: train, predict, evaluate, ablate, synth, gradcheck, dump-attention.

Configs are flat JSON objects whose keys are :class:`RunConfig` fields. Any
key can be overridden on the command line as ``--key value``. Relative paths
in a config file are resolved against the file's directory.

Exit status is 0 on success, 1 for usage and validation errors and 2 for
runtime failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import benchmark, gradsuite
from . import diffcore as dc
from .dataio import Sample, encode_query, index_to_time, load_features, load_manifest
from .errors import ConfigurationError
from .evaluation import (ABLATION_CONFIGS, DEFAULT_ALPHAS, evaluate_records, predict_manifest,
                         read_predictions, run_ablation, write_predictions)
from .model import Batch, forward
from .synthdata import SynthSpec, generate
from .training import TrainConfig, load_checkpoint, train

log = logging.getLogger("tmlga")

LOG_LEVELS = {"quiet": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}
PATH_KEYS = ("manifest_train", "manifest_test", "embeddings", "output_dir")


@dataclass
class RunConfig(TrainConfig):
    manifest_train: str | None = None
    manifest_test: str | None = None
    embeddings: str | None = None
    output_dir: str | None = None
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    strict_inverted_zero: bool = False

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(asdict(self))

    def require(self, *keys: str) -> None:
        """Every named path must be set and, except output_dir, must exist."""
        for k in keys:
            v = getattr(self, k)
            if v is None:
                raise ConfigurationError(f"config key {k!r} is required for this command")
            if k != "output_dir" and not Path(v).exists():
                raise ConfigurationError(f"{k}: {v} does not exist")

    def to_json(self) -> dict:
        d = asdict(self)
        d["alphas"] = list(self.alphas)
        return d


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_alphas(text: str) -> tuple[float, ...]:
    return tuple(float(a) for a in text.split(",") if a.strip())


def _parse_pair(text: str) -> tuple[int, int]:
    lo, hi = (int(a) for a in text.split(","))
    return lo, hi


def _parse_ints(text: str) -> list[int]:
    return [int(a) for a in text.split(",") if a.strip()]


def _field_type(f):
    if f.name == "alphas":
        return _parse_alphas
    default = f.default
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return str


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON config file")
    for f in fields(RunConfig):
        if f.name in ("seed", "output_dir"):
            continue
        p.add_argument(f"--{f.name}", dest=f"cfg_{f.name}", type=_field_type(f), default=None,
                       metavar=f.name.upper())


def load_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """RunConfig from an optional JSON file plus overrides (already typed)."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file {path} does not exist") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"{path}: config must be a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"{path}: unknown config keys {unknown}")
        for k in PATH_KEYS:
            if data.get(k) is not None:
                data[k] = str((path.parent / data[k]).resolve()) if not Path(data[k]).is_absolute() else data[k]
    if "alphas" in data:
        data["alphas"] = tuple(data["alphas"])
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    cfg = RunConfig(**data)
    cfg.validate()
    for a in cfg.alphas:
        if not 0 < a <= 1:
            raise ConfigurationError(f"alpha must lie in (0, 1], got {a}")
    return cfg


def _config_from_args(args) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output_dir"] = args.out
    return load_run_config(args.config, overrides)


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


# --------------------------------------------------------------- commands

def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    cfg.require("manifest_train", "embeddings", "output_dir")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())
    res = train(load_manifest(cfg.manifest_train), cfg.embeddings, cfg.train_config(), out_dir=out,
                resume=args.resume)
    last = res.log[-1]
    print(f"trained {res.epoch} epochs; final mean loss {last['mean_total']:.6f}")
    print(f"checkpoint: {out / 'checkpoint.tmlc'}")
    if cfg.manifest_test is not None:
        cfg.require("manifest_test")
        records = predict_manifest(res.params, res.vocab, res.embeddings, load_manifest(cfg.manifest_test),
                                   cfg.max_query_len)
        write_predictions(out / "predictions.jsonl", records)
        report = evaluate_records(records, cfg.alphas, cfg.strict_inverted_zero)
        _write_json(out / "report.json", report.to_json())
        print(report.table())
    return 0


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config()
    records = predict_manifest(ckpt.model(), ckpt.vocabulary(), ckpt.embeddings, load_manifest(args.manifest),
                               cfg.max_query_len)
    write_predictions(args.out, records)
    print(f"wrote {len(records)} predictions to {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    manifest = load_manifest(args.manifest) if args.manifest else None
    records = read_predictions(args.predictions, manifest)
    report = evaluate_records(records, args.alphas, args.strict_inverted_zero)
    print(json.dumps(report.to_json()))
    print(report.table())
    if args.out:
        _write_json(args.out, report.to_json())
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    cfg.require("manifest_train", "manifest_test", "embeddings", "output_dir")
    configs = [c.strip() for c in args.configs.split(",")] if args.configs else list(ABLATION_CONFIGS)
    bad = [c for c in configs if c not in ABLATION_CONFIGS]
    if bad:
        raise ConfigurationError(f"unknown ablation configs {bad}; choose from {list(ABLATION_CONFIGS)}")
    seeds = args.seeds if args.seeds else [cfg.seed]

    def progress(row):
        log.info("%s seed %d: acc@0.5 %.4f (%.1fs)", row.config, row.seed,
                 row.report.accuracy_at.get(0.5, float("nan")), row.seconds)

    table = run_ablation(load_manifest(cfg.manifest_train), load_manifest(cfg.manifest_test), cfg.embeddings,
                         cfg.train_config(), seeds, configs, cfg.alphas, progress)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "ablation.json", table.to_json())
    (out / "ablation.txt").write_text(table.table() + "\n", encoding="utf-8")
    print(table.table())
    return 0


def cmd_synth(args) -> int:
    overrides = {k[6:]: v for k, v in vars(args).items() if k.startswith("synth_") and v is not None}
    spec = replace(benchmark.benchmark_spec(args.seed), **overrides)
    num_train = args.num_train if args.num_train is not None else min(benchmark.NUM_TRAIN, spec.num_videos)
    generate(spec, args.out, num_train=num_train)
    cfg = RunConfig(**asdict(benchmark.DESK_CONFIG))
    cfg = replace(cfg, seed=args.seed, manifest_train="train.json", manifest_test="test.json",
                  embeddings="embeddings.txt", output_dir="run")
    _write_json(Path(args.out) / "config.json", cfg.to_json())
    print(f"wrote {spec.num_videos} videos ({num_train} train) to {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    result = gradsuite.run_suite(args.instances, args.seed)
    width = max(map(len, result.errors))
    for name, err in result.errors.items():
        status = "ok" if err <= gradsuite.TOLERANCE else "FAIL"
        print(f"{name.ljust(width)}  {err:.3e}  {status}")
    print(f"{len(result.errors)} checks x {args.instances} instances in {result.seconds:.1f}s")
    return 0 if result.ok else 1


def cmd_dump_attention(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.train_config()
    manifest = load_manifest(args.manifest)
    entry = manifest.entry(args.video)
    features = load_features(manifest.feature_file(entry))
    n = features.shape[0]
    sample = Sample(features, encode_query(args.query, ckpt.vocabulary(), cfg.max_query_len), 1, 1)
    with dc.no_grad():
        out = forward(ckpt.model(), Batch.from_samples([sample]), ckpt.embeddings)
    weights = out.attention.A.data[0]
    tau_s = int(np.argmax(out.spans.start.data[0])) + 1
    tau_e = int(np.argmax(out.spans.end.data[0])) + 1
    rows = ["index,a_i"] + [f"{i},{repr(float(a))}" for i, a in enumerate(weights, start=1)]
    text = "\n".join(rows) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    t_s, t_e = index_to_time(tau_s, n, entry.fps, entry.l), index_to_time(tau_e, n, entry.fps, entry.l)
    print(f"predicted span: tau_s={tau_s} tau_e={tau_e} t_s={t_s:.3f} t_e={t_e:.3f}",
          file=sys.stderr if not args.out else sys.stdout)
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tmlga", description="Proposal-free temporal moment localization with guided attention.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train a model and write checkpoint.tmlc and loss.csv")
    _add_config_args(t)
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to continue training from")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="write JSON-lines predictions for a manifest")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--manifest", required=True)
    pr.add_argument("--out", required=True)
    pr.add_argument("--seed", type=int, help="accepted for uniformity; prediction is deterministic")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="score predictions (accuracy at tIoU thresholds and mIoU)")
    e.add_argument("--predictions", required=True)
    e.add_argument("--manifest", help="ground truth; defaults to the gt fields in the predictions")
    e.add_argument("--alphas", type=_parse_alphas, default=DEFAULT_ALPHAS)
    e.add_argument("--strict-inverted-zero", action="store_true",
                   help="score inverted predictions as tIoU 0 instead of swapping them")
    e.add_argument("--out", help="also write the report JSON here")
    e.add_argument("--seed", type=int, help="accepted for uniformity; evaluation is deterministic")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score NLL, KL, NLL+AL and KL+AL over several seeds")
    _add_config_args(a)
    a.add_argument("--seeds", type=_parse_ints)
    a.add_argument("--configs", help="comma-separated subset of " + ",".join(ABLATION_CONFIGS))
    a.add_argument("--out", help="output directory (overrides output_dir)")
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="generate the synthetic benchmark and a matching config.json")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--num-train", type=int)
    for f in fields(SynthSpec):
        if f.name == "seed":
            continue
        kind = _parse_pair if isinstance(f.default, tuple) else type(f.default)
        s.add_argument(f"--{f.name.replace('_', '-')}", dest=f"synth_{f.name}", type=kind)
    s.set_defaults(func=cmd_synth)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op and model path")
    g.add_argument("--instances", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)

    d = sub.add_parser("dump-attention", help="CSV of attention weights for one video and query")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--manifest", required=True, help="manifest locating the video's features")
    d.add_argument("--video", required=True)
    d.add_argument("--query", required=True)
    d.add_argument("--out", help="CSV path; defaults to stdout")
    d.add_argument("--seed", type=int, help="accepted for uniformity; inference is deterministic")
    d.set_defaults(func=cmd_dump_attention)
    return p


def _configure_logging() -> None:
    level = os.environ.get("TMLGA_LOG", "quiet").lower()
    logging.basicConfig(level=LOG_LEVELS.get(level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv=None) -> int:
    _configure_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"tmlga: error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"tmlga: error: {exc}", file=sys.stderr)
        return 1
    except (RuntimeError, OSError, ArithmeticError) as exc:
        print(f"tmlga: failed: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
