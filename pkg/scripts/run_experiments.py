"""Run the seeded desk-scale experiments and write their numbers as JSON.

    python scripts/run_experiments.py                 # everything, seed 21
    python scripts/run_experiments.py quant bench     # a subset
    python scripts/run_experiments.py --seed 22 -o runs/seed22.json
"""

import argparse
import json
import logging
import time
from dataclasses import replace

from threadpoolctl import threadpool_limits

from slmkit import experiments as ex

EXPERIMENTS = {
    "kd": ex.kd_vs_sft,
    "two_stage": ex.two_stage_vs_single,
    "teacher_size": ex.teacher_size,
    "prune": ex.prune_recovery,
    "gradual": ex.gradual_vs_oneshot,
    "calibration": ex.calibration_domain,
    "quant": ex.quant_ordering,
}


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("names", nargs="*", help=f"any of {', '.join([*EXPERIMENTS, 'bench'])}; default: all")
    p.add_argument("--seed", type=int, default=ex.SEED)
    p.add_argument("-o", "--out", default="experiments.json")
    p.add_argument("-v", "--verbose", action="store_true", help="log every epoch")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    setup = replace(ex.Setup(), seed=args.seed)
    names = args.names or [*EXPERIMENTS, "bench"]
    unknown = set(names) - {*EXPERIMENTS, "bench"}
    if unknown:
        p.error(f"unknown experiment(s): {', '.join(sorted(unknown))}")
    results = {"seed": args.seed}
    with threadpool_limits(limits=1):
        for name in names:
            t0 = time.monotonic()
            r = ex.bench_directions(args.seed) if name == "bench" else EXPERIMENTS[name](setup)
            results[name] = r
            print(f"{name} ({time.monotonic() - t0:.0f}s): {json.dumps(r)}", flush=True)
    with open(args.out, "w") as f:
        json.dump(results, f, indent=2)
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
