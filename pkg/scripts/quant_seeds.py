"""Validation-loss deltas of every quantization scheme across seeds.

Shows how much of the scheme ranking is seed noise at this model size:

    python scripts/quant_seeds.py 21 22 23
"""

import argparse
from dataclasses import replace

from threadpoolctl import threadpool_limits

from slmkit import experiments as ex
from slmkit.quant import Scheme, quantize_model


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("seeds", nargs="*", type=int, default=[ex.SEED])
    p.add_argument("--sequential", action="store_true", help="re-collect calibration after each quantized site")
    args = p.parse_args()
    print("seed  " + "  ".join(f"{s.value:>15}" for s in Scheme) + "    layer error GPTQ/RTN")
    with threadpool_limits(limits=1):
        for seed in args.seeds:
            setup = replace(ex.Setup(), seed=seed)
            _, val, calib, _ = ex._data(setup)
            model = ex.distilled_student(setup)
            reps = {s: quantize_model(model, s, calib, val_data=val, sequential=args.sequential)[1] for s in Scheme}
            ratio = reps[Scheme.W4A16_GPTQ].total_error / reps[Scheme.W4A16_RTN].total_error
            print(f"{seed:4d}  " + "  ".join(f"{reps[s].val_loss_delta:+15.2e}" for s in Scheme) + f"    {ratio:.3f}",
                  flush=True)


if __name__ == "__main__":
    main()
