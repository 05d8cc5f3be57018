"""Command line entry point: ``graphmoe <subcommand> [--config FILE] [key=value ...]``.

Exit codes: 0 success, 1 a check failed, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import balance_summary, compare_balance, load_run
from .checkpoint import adapter_summary, load_checkpoint, save_checkpoint, verify_checkpoint
from .config import RunConfig, expand_sweep, load_config, replace
from .errors import CheckpointError, ComparisonError, ConfigError, GraphMoeError, NonFiniteLossError
from .gradcheck import gradcheck_all, perturb_adapters
from .model import init_model, parameter_census
from .profiling import profile_rounds
from .routing import workload_records
from .tasks import generate
from .training import evaluate, train

log = logging.getLogger("graphmoe")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


class CheckFailed(Exception):
    pass


def _write_jsonl(path: Path, cfg: RunConfig, records) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"type": "config", "config": cfg.to_dict()}, sort_keys=True) + "\n")
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _write_json(path: Path, cfg: RunConfig, body: dict) -> None:
    path.write_text(json.dumps({"config": cfg.to_dict(), **body}, indent=2, sort_keys=True))


def _prepare_run_dir(run_dir: Path, cfg: RunConfig) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(cfg.to_json())
    return run_dir


def _eval_and_dump(model, cfg: RunConfig, ds, run_dir: Path) -> dict:
    res = evaluate(model, ds)
    ws = res["workload"]
    body = {"ce": res["ce"], "exact_match": res["exact_match"], "workload": ws.as_dict()}
    _write_json(run_dir / "eval.json", cfg, body)
    _write_jsonl(run_dir / "workload.jsonl", cfg, workload_records(res["ledger"], cfg.task.kind))
    return body


def run_training(cfg: RunConfig, run_dir: Path, metrics_path: Path | None = None) -> dict:
    """Train, checkpoint and evaluate one configuration under ``run_dir``."""
    _prepare_run_dir(run_dir, cfg)
    train_ds, eval_ds = generate(cfg.task)
    model = init_model(cfg.model)
    metrics_path = metrics_path or run_dir / "metrics.jsonl"
    with open(metrics_path, "w") as fh:
        fh.write(json.dumps({"type": "config", "config": cfg.to_dict()}, sort_keys=True) + "\n")
        try:
            for rec in train(model, train_ds, cfg.train):
                fh.write(json.dumps({"type": "step", **rec}, sort_keys=True) + "\n")
                if rec["step"] % max(cfg.train.log_every, 1) == 0:
                    log.info("step %d ce=%.4f lb=%.4f", rec["step"], rec["ce"], rec["lb"])
        except NonFiniteLossError as exc:
            fh.write(json.dumps({"type": "abort", "reason": str(exc)}) + "\n")
            raise
        save_checkpoint(model, run_dir / "ckpt")
        result = _eval_and_dump(model, cfg, eval_ds if len(eval_ds) else train_ds, run_dir)
        fh.write(json.dumps({"type": "eval", **result}, sort_keys=True) + "\n")
    return result


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_train(args, cfg: RunConfig) -> int:
    res = run_training(cfg, args.run_dir)
    print(json.dumps({"ce": res["ce"], "exact_match": res["exact_match"], "workload_std": res["workload"]["std"]}))
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = Path(args.ckpt) if args.ckpt else args.run_dir / "ckpt"
    model = load_checkpoint(ckpt)
    cfg.model = model.config
    _prepare_run_dir(args.run_dir, cfg)
    _, eval_ds = generate(cfg.task)
    res = _eval_and_dump(model, cfg, eval_ds, args.run_dir)
    print(json.dumps({"ce": res["ce"], "exact_match": res["exact_match"], "workload_std": res["workload"]["std"]}))
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    cfg.model.precision = "float64"
    cfg.validate()
    _prepare_run_dir(args.run_dir, cfg)
    model = init_model(cfg.model)
    if not args.at_init:
        perturb_adapters(model, seed=cfg.model.seed)
    rng = np.random.default_rng(cfg.model.seed)
    p = min(cfg.model.max_seq_len, 8)
    tokens = rng.integers(0, cfg.model.vocab_size, size=(2, p))
    targets = rng.integers(0, cfg.model.vocab_size, size=(2, p))
    report = gradcheck_all(model, tokens, targets, n_coords=args.coords, seed=cfg.model.seed)
    _write_json(args.run_dir / "gradcheck.json", cfg, report.as_dict())
    for name, g in report.groups.items():
        status = "no gradient" if not g.has_gradient else f"{g.max_rel_err:.3e}"
        print(f"{name:12s} {status}")
    print(f"max relative error: {report.worst:.3e} (tolerance {report.tol:.0e})")
    if not report.passed:
        for f in report.failures():
            print("FAIL", *f)
        raise CheckFailed("gradient check failed")
    return EXIT_OK


def cmd_profile(args, cfg: RunConfig) -> int:
    _prepare_run_dir(args.run_dir, cfg)
    model = init_model(cfg.model)
    pc = cfg.profile
    prof = profile_rounds(
        model, T_max=pc.T_max, gen_len=pc.gen_len, prompt_len=pc.prompt_len,
        batch_size=pc.batch_size, warmup=pc.warmup, repeats=pc.repeats, seed=cfg.model.seed,
    )
    _write_json(args.run_dir / "profile.json", cfg, prof.as_dict())
    print("T  total_s   attention  moe_ffn  gru     other")
    for T, tot in zip(prof.T_values, prof.totals):
        s = prof.shares[T]
        print(f"{T:<2d} {tot:8.4f}  {s['attention']:.3f}      {s['moe_ffn']:.3f}    {s['gru']:.3f}   {s['other']:.3f}")
    print(f"slope={prof.slope:.4g}s/round  R^2={prof.r2:.4f}  per-round increase={prof.per_round_increase:.3f}")
    return EXIT_OK


def cmd_sweep(args, cfg: RunConfig) -> int:
    key, values = expand_sweep(args.spec)
    args.run_dir.mkdir(parents=True, exist_ok=True)
    summary = []
    short = key.split(".", 1)[1]
    for v in values:
        sub_cfg = replace(cfg, **{key.replace(".", "__"): v}).validate()
        tag = f"{short}={v}"
        log.info("sweep %s", tag)
        res = run_training(sub_cfg, args.run_dir / tag, metrics_path=args.run_dir / f"metrics_{tag}.jsonl")
        summary.append({"key": key, "value": v, "ce": res["ce"], "exact_match": res["exact_match"],
                        "workload_std": res["workload"]["std"]})
    _write_json(args.run_dir / "sweep.json", cfg, {"key": key, "results": summary})
    for row in summary:
        print(json.dumps(row))
    return EXIT_OK


def cmd_analyze(args, cfg: RunConfig) -> int:
    runs = [load_run(r) for r in args.runs]
    if len(runs) == 1:
        report = balance_summary(runs[0])
    elif len(runs) == 2:
        report = compare_balance(runs[0], runs[1])
    else:
        raise ConfigError("analyze-workload takes one or two run directories")
    out = args.run_dir / "workload_report.json"
    args.run_dir.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, sort_keys=True))
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_inspect(args, cfg: RunConfig) -> int:
    ckpt = Path(args.ckpt) if args.ckpt else args.run_dir / "ckpt"
    try:
        manifest = verify_checkpoint(ckpt)
    except CheckpointError as exc:
        print(f"checksum verification failed: {exc}")
        raise CheckFailed(str(exc)) from exc
    for e in manifest["tensors"]:
        flag = "trainable" if e["trainable"] else "frozen"
        print(f"{e['name']:40s} {str(tuple(e['shape'])):14s} {e['dtype']} @{e['offset']:<10d} {flag}")
    summ = adapter_summary(manifest)
    model = load_checkpoint(ckpt)
    census = parameter_census(model)
    print(json.dumps({**summ, "trainable_ratio": census.trainable_ratio}, indent=2))
    if summ["lora_pairs"] != summ["expected_lora_pairs"] or summ["gru_linears"] != summ["expected_gru_linears"]:
        raise CheckFailed("adapter count does not match (3n+4)*L / 4*L")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "profile": cmd_profile,
    "sweep": cmd_sweep,
    "analyze-workload": cmd_analyze,
    "inspect-ckpt": cmd_inspect,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphmoe", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=Path, default=None, help="TOML config file")
        p.add_argument("--run-dir", type=Path, default=None, help="artifact directory")
        p.add_argument("-v", "--verbose", action="store_true")

    for name in ("train", "profile"):
        p = sub.add_parser(name)
        common(p)
        p.add_argument("overrides", nargs="*", metavar="key=value")
    p = sub.add_parser("eval")
    common(p)
    p.add_argument("--ckpt", default=None)
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p = sub.add_parser("gradcheck")
    common(p)
    p.add_argument("--coords", type=int, default=20, help="coordinates per parameter group")
    p.add_argument("--at-init", action="store_true", help="check at the zero-B initialisation instead of perturbed adapters")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p = sub.add_parser("sweep")
    common(p)
    p.add_argument("spec", help="key=lo..hi or key=a,b,c, e.g. T=1..5")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p = sub.add_parser("analyze-workload")
    common(p)
    p.add_argument("runs", nargs="+", type=Path, help="one or two run directories")
    p = sub.add_parser("inspect-ckpt")
    common(p)
    p.add_argument("--ckpt", default=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.run_dir is None:
        args.run_dir = Path("runs") / args.command
    try:
        cfg = load_config(args.config, getattr(args, "overrides", []) or [])
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ComparisonError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckFailed as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except (GraphMoeError, OSError, FloatingPointError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
