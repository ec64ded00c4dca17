"""``slmctl``: command-line front end.

Exit codes: 0 success, 1 usage or validation error, 2 numeric failure.
Single-stage subcommands run a one-stage pipeline, so their output directory
has the same layout as ``slmctl pipeline``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
from threadpoolctl import threadpool_limits

from ..distill import RECIPES, DivergenceError
from ..evaluate import evaluate
from ..matcal import NumericError
from ..quant import Scheme
from ..toylm.data import BayesOracle, SynthConfig, SynthDataset, synth_data, synth_offdomain
from .checkpoint import CheckpointError
from .config import ConfigError, PipelineConfig, config_from_dict, load_config
from .pipeline import run_pipeline

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _table(rows: List[dict], cols: List[str]) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.4f}"
        return "-" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) if cells else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _emit(records: List[dict], cols: List[str], as_json: bool) -> None:
    if as_json:
        for r in records:
            print(json.dumps(r, sort_keys=True))
    else:
        print(_table(records, cols))


def _base_config(args) -> dict:
    raw = {}
    if args.config:
        raw = load_config(args.config).to_dict()
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.threads is not None:
        raw["threads"] = args.threads
    if args.out is not None:
        raw.setdefault("paths", {})["out"] = args.out
    return raw


def _set(raw: dict, section: str, key: str, value) -> None:
    if value is not None:
        raw.setdefault(section, {})[key] = value


def _stage_command(stage: str):
    def run(args) -> int:
        raw = _base_config(args)
        raw["stages"] = [stage] if stage != "pipeline" else raw.get("stages", ["eval"])
        for key in ("model", "teacher", "train", "val", "calib"):
            _set(raw, "paths", key, getattr(args, key, None))
        if stage == "distill":
            _set(raw, "distill", "recipe", args.recipe)
            _set(raw, "distill", "epochs", args.epochs)
            _set(raw, "distill", "stage2_epochs", args.stage2_epochs)
        elif stage in ("prune_mlp", "prune_heads"):
            if not raw.get("paths", {}).get("calib"):
                raise UsageError("missing required field paths.calib (pass --calib or set it in the config)")
            _set(raw, stage, "count", args.count)
            _set(raw, stage, "fraction", args.fraction)
            _set(raw, stage, "n_steps", args.steps)
        elif stage == "quantize":
            _set(raw, "quantize", "scheme", args.scheme)
        elif stage == "bench":
            _set(raw, "bench", "context", args.context)
            _set(raw, "bench", "k", args.k)
            _set(raw, "bench", "hot", args.hot)
            _set(raw, "bench", "repeats", args.repeats)
        cfg = config_from_dict(raw)
        if stage == "bench" and not cfg.paths.model:
            return _bench_fresh(cfg, args)
        res = run_pipeline(cfg)
        rows = [{"stage": r["stage"], **{k: v for k, v in r["metrics"].items() if not isinstance(v, (list, dict))}}
                for r in res.records]
        _emit(res.records if args.json else rows, ["stage", "val_loss", "val_auc", "params"], args.json)
        print(f"report: {res.out / 'report.jsonl'}", file=sys.stderr)
        return EXIT_OK
    return run


def _bench_fresh(cfg: PipelineConfig, args) -> int:
    """Benchmark a randomly initialised model sized for the requested context."""
    from ..experiments import bench_model
    from .bench import bench

    b = cfg.bench
    model = bench_model(cfg.seed, b.context + b.decode_tokens)
    with threadpool_limits(limits=cfg.threads):
        rep = bench(model, b.context, b.k, hot=b.hot, repeats=b.repeats, prefix_frac=b.prefix_frac,
                    decode_tokens=b.decode_tokens, seed=cfg.seed)
    rep.check()
    out = Path(cfg.paths.out)
    out.mkdir(parents=True, exist_ok=True)
    rec = rep.to_dict()
    (out / "bench.jsonl").write_text(json.dumps(rec, sort_keys=True) + "\n")
    if args.json:
        print(json.dumps(rec, sort_keys=True))
    else:
        print(_table([{"prompt": e.prompt, "hot": e.hot, "ttft_ms": e.ttft_ms} for e in rep.entries],
                     ["prompt", "hot", "ttft_ms"]))
        print(f"p50 {rep.p50_ttft_ms:.2f} ms  p99 {rep.p99_ttft_ms:.2f} ms  decode {rep.decode_ms_per_token:.2f} ms/token")
        print("split ms: " + ", ".join(f"{k} {v:.2f}" for k, v in rep.split_ms.items()))
    return EXIT_OK


def cmd_synth(args) -> int:
    seed = 21 if args.seed is None else args.seed
    out = Path(args.out or "synth-data")
    out.mkdir(parents=True, exist_ok=True)
    cfg = SynthConfig()
    sets = {
        "train": synth_data(seed, args.train_users, args.items_per_user, cfg),
        "val": synth_data(seed + 1000, args.val_users, args.items_per_user, cfg),
        "calib": synth_data(seed + 2000, args.calib_n // args.items_per_user + 1, args.items_per_user, cfg)
        .subset(np.arange(args.calib_n)),
        "offdomain": synth_offdomain(seed + 3000, args.calib_n, cfg),
    }
    rows = []
    for name, ds in sets.items():
        path = out / f"{name}.jsonl"
        ds.save(path)
        pos = float(np.mean(ds.labels == 1)) if ds.labeled else None
        rows.append({"split": name, "path": str(path), "n": len(ds), "positive_rate": pos})
    _emit(rows, ["split", "n", "positive_rate", "path"], args.json)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.oracle:
        raw = _base_config(args)
        _set(raw, "paths", "val", args.val)
        cfg = config_from_dict(raw)
        if not cfg.paths.val:
            raise UsageError("--oracle needs a labeled dataset: missing required field paths.val (--val)")
        ds = SynthDataset.load(cfg.paths.val)
        m = evaluate(BayesOracle(), ds)
        rec = {"stage": "eval", "model": "bayes-oracle", "metrics": m}
        _emit([rec] if args.json else [{"model": "bayes-oracle", "val_loss": m["loss"], "val_auc": m["auc"]}],
              ["model", "val_loss", "val_auc"], args.json)
        return EXIT_OK
    return _stage_command("eval")(args)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML pipeline config")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="BLAS threads; 1 is the bit-reproducible mode")
    common.add_argument("--json", action="store_true", help="print JSON lines instead of a table")

    paths = _Parser(add_help=False)
    for key in ("model", "teacher", "train", "val", "calib"):
        paths.add_argument(f"--{key}", help=f"{key} path")

    p = _Parser(prog="slmctl", description="Distill, prune, quantize and benchmark toy language models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", parents=[common], help="write synthetic train/val/calibration sets")
    s.add_argument("--train-users", type=int, default=200)
    s.add_argument("--val-users", type=int, default=200)
    s.add_argument("--items-per-user", type=int, default=5)
    s.add_argument("--calib-n", type=int, default=512)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("distill", parents=[common, paths], help="train a student against a teacher")
    s.add_argument("--recipe", choices=RECIPES)
    s.add_argument("--epochs", type=int)
    s.add_argument("--stage2-epochs", type=int)
    s.set_defaults(func=_stage_command("distill"))

    s = sub.add_parser("prune", parents=[common, paths], help="structured pruning of MLP neurons or heads")
    s.add_argument("--target", choices=("mlp", "heads"), default="mlp")
    s.add_argument("--count", type=int, help="groups removed per layer")
    s.add_argument("--fraction", type=float)
    s.add_argument("--steps", type=int)
    s.set_defaults(func=lambda a: _stage_command(f"prune_{a.target}")(a))

    s = sub.add_parser("quantize", parents=[common, paths], help="post-training quantization")
    s.add_argument("--scheme", choices=[x.value for x in Scheme])
    s.set_defaults(func=_stage_command("quantize"))

    s = sub.add_parser("eval", parents=[common, paths], help="validation loss and AUC")
    s.add_argument("--oracle", action="store_true", help="score with the generator's Bayes oracle")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", parents=[common, paths], help="prefill/decode latency")
    s.add_argument("--context", type=int)
    s.add_argument("--k", type=int)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--hot", dest="hot", action="store_true", default=None)
    g.add_argument("--cold", dest="hot", action="store_false")
    s.add_argument("--repeats", type=int)
    s.set_defaults(func=_stage_command("bench"))

    s = sub.add_parser("pipeline", parents=[common, paths], help="run the configured stage list")
    s.set_defaults(func=_stage_command("pipeline"))
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # --help and argparse errors
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=args.threads or 1):
            return args.func(args)
    except (UsageError, ConfigError, CheckpointError) as e:
        print(f"slmctl: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, DivergenceError, FloatingPointError) as e:
        print(f"slmctl: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as e:
        print(f"slmctl: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
