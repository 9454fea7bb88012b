"""Command-line interface.

Commands: simulate, deepfdr, baseline, bench, metrics.  Every command is
deterministic given (flags, config, seed); wall-clock timings go to sidecar
files excluded from that guarantee.  Exit codes: 0 success, 1 runtime or I/O
failure, 2 usage or validation error.  Diagnostics go to stderr; results go
to files (and stdout for metrics without --out).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .baselines import bh, local_fdr, qvalue
from .lis import TestOutcome, deepfdr_pipeline_detailed
from .rng import Rng, split_seed
from .sim import (SimSetting, compute_metrics, generate_labels_blobs, padded_dims_for,
                  run_replications, sample_statistics, write_aggregate_csv,
                  write_rows_csv, write_timings_csv)
from .volume import load_volume, save_volume
from .wnet import PAPER_CHANNELS, WnetConfig


class UsageError(ValueError):
    """Validation problem: maps to exit code 2."""


def _parse_dims(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--dims expects three comma-separated integers, got {text!r}")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError as e:
        raise UsageError(f"bad --dims {text!r}") from e
    if any(d <= 0 for d in dims):
        raise UsageError("--dims entries must be positive")
    return dims


def _parse_channels(text: str) -> tuple[int, int, int]:
    parts = text.split(",")
    if len(parts) != 3:
        raise UsageError(f"--channels expects three comma-separated integers, got {text!r}")
    return tuple(int(p) for p in parts)


def _require_inputs(*paths: str) -> None:
    for p in paths:
        if not Path(p).exists():
            raise UsageError(f"missing input file {p}")


def _ensure_outdir(out: str) -> Path:
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def _outcome_files(outcome: TestOutcome, outdir: Path, flip_applied=None,
                   alpha_q_used=None, reference=None, write_scores=False) -> None:
    save_volume(outcome.rejections, outdir / "rejections.vol", "rejection")
    if write_scores and outcome.scores is not None:
        save_volume(outcome.scores, outdir / "scores.vol", "probability")
    m = int(outcome.rejections.effective_mask().sum())
    _write_json(outdir / "summary.json", {
        "method": outcome.method,
        "alpha": outcome.alpha,
        "k": outcome.k,
        "m": m,
        "flip_applied": flip_applied,
        "alpha_q_used": alpha_q_used,
        "reference": reference,
    })


def cmd_simulate(args) -> int:
    dims = _parse_dims(args.dims)
    setting = SimSetting(dims=dims, target_p1=args.p1, mu1=args.mu1,
                         sigma1sq=args.sigma1sq, seed=args.seed,
                         replications=args.reps)
    outdir = _ensure_outdir(args.out)
    truth = generate_labels_blobs(setting.dims, setting.target_p1,
                                  Rng(split_seed(setting.seed, 0)))
    save_volume(truth, outdir / "h.vol", "label")
    manifest = {
        "dims": list(dims),
        "target_p1": setting.target_p1,
        "mu1": setting.mu1,
        "sigma1sq": setting.sigma1sq,
        "seed": setting.seed,
        "replications": setting.replications,
        "realized_p1": float(truth.data.mean()),
        "truth": "h.vol",
        "files": [],
    }
    for rep in range(setting.replications):
        rep_seed = split_seed(setting.seed, rep + 1)
        x, p = sample_statistics(truth, setting.mu1, setting.sigma1sq,
                                 Rng(split_seed(rep_seed, 0)))
        xname, pname = f"x_rep{rep}.vol", f"p_rep{rep}.vol"
        save_volume(x, outdir / xname, "statistic")
        save_volume(p, outdir / pname, "pvalue")
        manifest["files"].append({"rep": rep, "seed": rep_seed, "x": xname, "p": pname})
    _write_json(outdir / "manifest.json", manifest)
    return 0


def cmd_deepfdr(args) -> int:
    _require_inputs(args.x, args.p)
    x = load_volume(args.x)
    p = load_volume(args.p)
    channels = PAPER_CHANNELS if args.paper_scale else _parse_channels(args.channels)
    padded = (32, 32, 32) if args.paper_scale else padded_dims_for(x.dims)
    cfg = WnetConfig(channels=channels, padded_dims=padded, lr=args.lr,
                     max_epochs=args.max_epochs, seed=args.seed)
    result = deepfdr_pipeline_detailed(x, p, args.alpha, cfg)
    outdir = _ensure_outdir(args.out)
    _outcome_files(result.outcome, outdir,
                   flip_applied=result.flip.flipped,
                   alpha_q_used=(result.flip.reference_level
                                 if result.flip.reference == "qvalue" else None),
                   reference=result.flip.reference,
                   write_scores=True)
    log_lines = ["epoch,ncut_loss,recon_loss,wall_ms"]
    for rec in result.history:
        log_lines.append(f"{rec.epoch},{rec.ncut_loss:.10g},{rec.recon_loss:.10g},"
                         f"{rec.wall_ms:.3f}")
    (outdir / "training_log.csv").write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return 0


def cmd_baseline(args) -> int:
    if args.method == "localfdr":
        if not args.z:
            raise UsageError("localfdr needs --z (statistic volume)")
        _require_inputs(args.z)
        outcome = local_fdr(load_volume(args.z), args.alpha)
        write_scores = True
    elif args.method in ("bh", "qvalue"):
        if not args.p:
            raise UsageError(f"{args.method} needs --p (p-value volume)")
        _require_inputs(args.p)
        p = load_volume(args.p)
        outcome = bh(p, args.alpha) if args.method == "bh" else qvalue(p, args.alpha)
        write_scores = args.method == "qvalue"
    else:
        raise UsageError(f"unknown method {args.method!r}")
    outdir = _ensure_outdir(args.out)
    _outcome_files(outcome, outdir, write_scores=write_scores)
    return 0


_CONFIG_KEYS = {"setting", "methods", "alpha", "wnet"}
_SETTING_KEYS = {"dims", "target_p1", "mu1", "sigma1sq", "seed", "replications", "setting_id"}
_WNET_KEYS = {"channels", "dropout_rate", "lr", "momentum", "weight_decay",
              "max_epochs", "patience", "min_rel_improvement"}


def _load_bench_config(path: str) -> dict:
    _require_inputs(path)
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise UsageError(f"bad config JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise UsageError("config must be a JSON object")
    for key, allowed, where in ((cfg, _CONFIG_KEYS, "config"),
                                (cfg.get("setting", {}), _SETTING_KEYS, "setting"),
                                (cfg.get("wnet", {}), _WNET_KEYS, "wnet")):
        unknown = set(key) - allowed
        if unknown:
            raise UsageError(f"unknown {where} keys: {sorted(unknown)}")
    if "setting" not in cfg or "methods" not in cfg:
        raise UsageError("config needs 'setting' and 'methods'")
    return cfg


def cmd_bench(args) -> int:
    cfg = _load_bench_config(args.config)
    setting_kwargs = dict(cfg["setting"])
    if "dims" in setting_kwargs:
        setting_kwargs["dims"] = tuple(setting_kwargs["dims"])
    if args.seed is not None:
        setting_kwargs["seed"] = args.seed
    setting = SimSetting(**setting_kwargs)
    alpha = args.alpha if args.alpha is not None else cfg.get("alpha", 0.1)
    wnet_kwargs = dict(cfg.get("wnet", {}))
    if "channels" in wnet_kwargs:
        wnet_kwargs["channels"] = tuple(wnet_kwargs["channels"])
    template = WnetConfig(**wnet_kwargs) if wnet_kwargs else WnetConfig()
    study = run_replications(setting, cfg["methods"], alpha,
                             workers=args.workers, wnet_template=template)
    outdir = _ensure_outdir(args.out)
    write_rows_csv(study.rows, outdir / "rows.csv")
    write_aggregate_csv(study.aggregates, outdir / "aggregate.csv")
    write_timings_csv(study.rows, study.aggregates, outdir / "timings.csv")
    return 0


def cmd_metrics(args) -> int:
    _require_inputs(args.rejections, args.truth)
    rejections = load_volume(args.rejections)
    truth = load_volume(args.truth)
    outcome = TestOutcome(rejections=rejections, k=int(rejections.data.sum()),
                          alpha=args.alpha, method="external")
    rec = compute_metrics(outcome, truth)
    payload = {"N00": rec.n00, "N10": rec.n10, "N01": rec.n01, "N11": rec.n11,
               "A": rec.a, "R": rec.r, "m0": rec.m0, "m1": rec.m1,
               "FDP": rec.fdp, "FNP": rec.fnp, "TP": rec.tp}
    if args.out:
        outdir = _ensure_outdir(args.out)
        _write_json(outdir / "metrics.json", payload)
    else:
        print(json.dumps(payload, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepfdr",
                                     description="Spatial FDR control toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate truth and statistic volumes")
    sim.add_argument("--dims", default="30,30,30")
    sim.add_argument("--p1", type=float, default=0.2)
    sim.add_argument("--mu1", type=float, default=-2.0)
    sim.add_argument("--sigma1sq", type=float, default=1.0)
    sim.add_argument("--reps", type=int, default=50)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    dfr = sub.add_parser("deepfdr", help="segmentation-based FDR control on one volume")
    dfr.add_argument("--x", required=True, help="statistic volume (.vol)")
    dfr.add_argument("--p", required=True, help="p-value volume (.vol)")
    dfr.add_argument("--alpha", type=float, default=0.1)
    dfr.add_argument("--seed", type=int, default=0)
    dfr.add_argument("--channels", default="8,16,32")
    dfr.add_argument("--lr", type=float, default=0.05)
    dfr.add_argument("--max-epochs", type=int, default=25)
    dfr.add_argument("--paper-scale", action="store_true",
                     help="use (64,128,256) channels and 32^3 padding")
    dfr.add_argument("--out", required=True)
    dfr.set_defaults(func=cmd_deepfdr)

    base = sub.add_parser("baseline", help="classic FDR control methods")
    base.add_argument("--method", required=True, choices=["bh", "qvalue", "localfdr"])
    base.add_argument("--p", help="p-value volume (bh, qvalue)")
    base.add_argument("--z", help="statistic volume (localfdr)")
    base.add_argument("--alpha", type=float, default=0.1)
    base.add_argument("--out", required=True)
    base.set_defaults(func=cmd_baseline)

    ben = sub.add_parser("bench", help="replication study over methods")
    ben.add_argument("--config", required=True)
    ben.add_argument("--out", required=True)
    ben.add_argument("--workers", type=int, default=1)
    ben.add_argument("--seed", type=int, default=None)
    ben.add_argument("--alpha", type=float, default=None)
    ben.set_defaults(func=cmd_bench)

    met = sub.add_parser("metrics", help="confusion metrics against truth labels")
    met.add_argument("--rejections", required=True)
    met.add_argument("--truth", required=True)
    met.add_argument("--alpha", type=float, default=0.1)
    met.add_argument("--out", default=None)
    met.set_defaults(func=cmd_metrics)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failures (training divergence, etc.)
        print(f"failure: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
