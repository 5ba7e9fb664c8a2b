"""Four-configuration loss ablation (NLL, KL, NLL+AL, KL+AL) on the synthetic benchmark.

    python3 scripts/run_ablation.py --seeds 1,2,3,4,5 --out ablation
"""
import argparse
import json
from dataclasses import replace
from pathlib import Path

from tmlga import benchmark
from tmlga.evaluation import run_ablation


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="ablation")
    ap.add_argument("--seeds", default="1,2,3,4,5")
    ap.add_argument("--epochs", type=int, default=benchmark.DESK_CONFIG.epochs)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    bench = benchmark.build(out / "data", seed=args.data_seed)
    config = replace(benchmark.DESK_CONFIG, epochs=args.epochs)
    seeds = [int(s) for s in args.seeds.split(",")]

    def progress(row):
        print(f"{row.config:7s} seed {row.seed}: acc@0.5 {row.report.accuracy_at[0.5]:.3f} ({row.seconds:.0f} s)",
              flush=True)

    table = run_ablation(bench.train_manifest, bench.test_manifest, bench.embeddings, config, seeds,
                         progress=progress)
    (out / "ablation.json").write_text(json.dumps(table.to_json(), indent=2) + "\n")
    print(table.table())


if __name__ == "__main__":
    main()
