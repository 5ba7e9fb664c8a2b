"""Train KL+AL on the default synthetic benchmark for a few seeds and report accuracy.

    python3 scripts/run_benchmark.py --seeds 1,2,3 --workdir /tmp/tmlga-bench
"""
import argparse
import statistics
import time
from dataclasses import replace

from tmlga import benchmark
from tmlga.evaluation import accuracy_at
from tmlga.synthdata import synthesize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--workdir", default="bench")
    ap.add_argument("--seeds", default="1,2,3")
    ap.add_argument("--epochs", type=int, default=benchmark.DESK_CONFIG.epochs)
    ap.add_argument("--data-seed", type=int, default=0)
    args = ap.parse_args()

    bench = benchmark.build(args.workdir, seed=args.data_seed)
    oracle = accuracy_at(benchmark.oracle_records(synthesize(benchmark.benchmark_spec(args.data_seed))), 0.5)
    print(f"oracle acc@0.5 {oracle:.3f}")
    config = replace(benchmark.DESK_CONFIG, epochs=args.epochs)
    accs = []
    for seed in (int(s) for s in args.seeds.split(",")):
        t0 = time.perf_counter()
        res, report = benchmark.run(bench, config, seed=seed)
        accs.append(report.accuracy_at[0.5])
        print(f"seed {seed}: acc@0.3 {report.accuracy_at[0.3]:.3f} acc@0.5 {report.accuracy_at[0.5]:.3f} "
              f"acc@0.7 {report.accuracy_at[0.7]:.3f} mIoU {report.mean_tiou:.3f} "
              f"final loss {res.log[-1]['mean_total']:.3f} ({time.perf_counter() - t0:.0f} s)")
    print(f"median acc@0.5 {statistics.median(accs):.3f}")


if __name__ == "__main__":
    main()
