"""Oracle and KL+AL accuracy as the feature noise level varies.

Shows where the planted-span task stops being learnable.

    python3 scripts/sweep_noise.py --sigmas 0.5,0.7,0.9 --seed 1
"""
import argparse
import tempfile
from dataclasses import replace

from tmlga import benchmark
from tmlga.evaluation import accuracy_at
from tmlga.synthdata import synthesize


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sigmas", default="0.5,0.7,0.9")
    ap.add_argument("--seed", type=int, default=1)
    args = ap.parse_args()

    for sigma in (float(s) for s in args.sigmas.split(",")):
        spec = replace(benchmark.benchmark_spec(), noise_sigma=sigma)
        oracle = accuracy_at(benchmark.oracle_records(synthesize(spec)), 0.5)
        with tempfile.TemporaryDirectory() as tmp:
            _, report = benchmark.run(benchmark.build(tmp, spec=spec), seed=args.seed)
        print(f"sigma {sigma}: oracle acc@0.5 {oracle:.3f}, KL+AL acc@0.5 {report.accuracy_at[0.5]:.3f}", flush=True)


if __name__ == "__main__":
    main()
