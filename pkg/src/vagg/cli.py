"""Command-line entry point: synth, run, train, eval, ablate, bench.

Exit codes: 0 success, 2 config error, 3 data/schema/format error,
4 numeric error, 1 anything else the package raises on purpose.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .config import MODES, PipelineConfig, dump_config, load_config_file
from .errors import ConfigError, DataError, VaggError
from .fam import AggregationBatch, FamWeights, OpCounter, fam_forward
from .pipeline import (SWEEPABLE, ablate, ap_per_class, count_ops, ground_truth_of, read_detections,
                       run_to_files, write_ablation)
from .stream import read_feature_stream, write_feature_stream
from .synth import SynthConfig, generate
from .train import train

log = logging.getLogger("vagg")


def _config(path) -> tuple[PipelineConfig, dict | None]:
    if path is None:
        return PipelineConfig(), None
    doc = load_config_file(path)
    return doc["pipeline"], doc["synth"]


def _stream(path):
    try:
        return read_feature_stream(path)
    except FileNotFoundError:
        raise DataError(f"no such stream file: {path}") from None


def _weights(path):
    try:
        return FamWeights.load(path)
    except FileNotFoundError:
        raise DataError(f"no such weights file: {path}") from None


def _apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    changes = {k: getattr(args, k) for k in ("mode", "seed") if getattr(args, k, None) is not None}
    return cfg.with_(**changes) if changes else cfg


def cmd_synth(args) -> None:
    cfg, synth = _config(args.config)
    scfg = SynthConfig.from_dict(dict(synth or {}))
    if args.seed is not None:
        scfg = SynthConfig.from_dict({**scfg.to_dict(), "seed": args.seed})
    records = generate(scfg, workers=args.workers)
    write_feature_stream(records, args.out, scfg.num_classes, scfg.d_q)
    log.info("wrote %d frames to %s", len(records), args.out)


def cmd_run(args) -> None:
    cfg, _ = _config(args.config)
    cfg = _apply_overrides(cfg, args)
    records = _stream(args.stream)
    w = None if cfg.mode == "baseline" else _weights(args.weights) if args.weights else None
    if cfg.mode != "baseline" and w is None:
        raise ConfigError(f"mode {cfg.mode!r} needs --weights")
    dets = run_to_files(records, w, cfg, args.out, workers=args.workers)
    log.info("wrote %d detections to %s", len(dets), args.out)


def cmd_train(args) -> None:
    cfg, _ = _config(args.config)
    cfg = _apply_overrides(cfg, args)
    records = _stream(args.stream)
    validation = _stream(args.validation) if args.validation else None
    w = train(records, cfg, args.epochs, args.lr, cfg.seed, validation=validation,
              metrics_path=args.metrics, workers=args.workers)
    w.save(args.out)
    dump_config(cfg, Path(str(args.out) + ".config.json"))


def cmd_eval(args) -> None:
    dets = read_detections(args.detections)
    gts = ground_truth_of(_stream(args.stream))
    if not gts:
        raise DataError("stream carries no ground truth; AP50 is undefined")
    per_class = ap_per_class(dets, gts, 0.5)
    report = {"ap50": float(np.mean(list(per_class.values()))),
              "per_class": {str(c): v for c, v in per_class.items()},
              "num_detections": len(dets), "num_ground_truth": len(gts)}
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def _parse_values(param: str, raw: str) -> list:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    if not items:
        raise ConfigError("--values is empty")
    if param == "mode":
        return items
    try:
        return [float(s) if param == "tau" else int(s) for s in items]
    except ValueError:
        raise ConfigError(f"bad value list for {param}: {raw!r}") from None


def cmd_ablate(args) -> None:
    cfg, _ = _config(args.config)
    cfg = _apply_overrides(cfg, args)
    records = _stream(args.stream)
    values = _parse_values(args.param, args.values)
    needs_w = args.param == "mode" and any(v != "baseline" for v in values) or \
        args.param != "mode" and cfg.mode != "baseline"
    w = _weights(args.weights) if needs_w and args.weights else None
    if needs_w and w is None:
        raise ConfigError("this sweep needs --weights")
    rows = ablate(records, w, cfg, args.param, values, workers=args.workers)
    write_ablation(rows, args.table, args.plot)
    dump_config(cfg, Path(str(args.table) + ".config.json"))
    for r in rows:
        print(f"{args.param}={r['value']}  ap50={r['ap50']:.4f}  ms/frame={r['ms_per_frame']:.1f}")


def cmd_bench(args) -> None:
    cfg, _ = _config(args.config)
    cfg = _apply_overrides(cfg, args)
    mode = "affinity" if cfg.mode in ("baseline", "cosine_diag") else cfg.mode
    rng = np.random.default_rng(cfg.seed)
    w = FamWeights.init(args.d_q, cfg.m, cfg.d_head, args.num_classes, seed=cfg.seed)
    out = []
    for n in args.N:
        ops = count_ops(cfg, n, args.d_q, args.num_classes, mode)
        row = {"N": n, "attention_macs": ops["attention"], "total_macs": ops["total"], "stages": ops["stages"]}
        if args.time:
            batch = AggregationBatch(rng.normal(size=(n, args.d_q)), rng.normal(size=(n, args.d_q)),
                                     rng.uniform(size=(n, 2)), np.zeros(n))
            counter = OpCounter()
            t0 = time.perf_counter()
            fam_forward(batch, w, mode, cfg.tau, counter)
            row["seconds"] = time.perf_counter() - t0
            row["counted_macs"] = counter.total
        out.append(row)
    text = json.dumps(out, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vagg", description="Proposal selection and cross-frame aggregation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, workers=True):
        if config:
            sp.add_argument("--config", help="JSON config: pipeline fields plus an optional 'synth' object")
            sp.add_argument("--seed", type=int)
        if workers:
            sp.add_argument("--workers", type=int, default=1)

    sp = sub.add_parser("synth", help="generate a synthetic feature stream")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("run", help="detect on every frame of a stream")
    common(sp)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("train", help="fit aggregation weights on a labelled stream")
    common(sp)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--validation")
    sp.add_argument("--mode", choices=("affinity", "qk", "cosine_diag"))
    sp.add_argument("--epochs", type=int, default=12)
    sp.add_argument("--lr", type=float, default=0.5)
    sp.add_argument("--metrics")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="AP50 of a detections file against a stream's ground truth")
    sp.add_argument("--detections", required=True)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="sweep one parameter and tabulate AP50")
    common(sp)
    sp.add_argument("--stream", required=True)
    sp.add_argument("--weights")
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--param", required=True, choices=SWEEPABLE)
    sp.add_argument("--values", required=True, help="comma-separated")
    sp.add_argument("--table", required=True)
    sp.add_argument("--plot", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bench", help="op counts (and optional timing) of one aggregation")
    common(sp, workers=False)
    sp.add_argument("--mode", choices=MODES)
    sp.add_argument("--N", type=int, nargs="+", default=[256, 512, 1024])
    sp.add_argument("--d-q", dest="d_q", type=int, default=64)
    sp.add_argument("--num-classes", type=int, default=6)
    sp.add_argument("--time", action="store_true")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "workers", 1) < 1:
            raise ConfigError("--workers must be >= 1")
        args.func(args)
    except VaggError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (ValueError, IndexError) as exc:
        # argument combinations the library rejects (bad epochs, lr, key index)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
