"""Command-line entry points: decompose, train, eval, export-attention.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import InvalidConfig, InvalidInput, NumericalError, ParseError, PetsError, ShapeError
from .sdaq import SdaqConfig, sdaq_decompose
from .train import RunConfig, Trainer, build_dataset, evaluate, load_frame, load_model, predict, write_report

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path: Path, obj):
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _write_matrix(path: Path, rows, header=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) for v in r])


def run_config(args) -> RunConfig:
    """Load ``--config`` (if any) and apply the command-line overrides."""
    base = RunConfig.load(args.config).to_dict() if getattr(args, "config", None) else {}
    if getattr(args, "task", None):
        base["task"] = args.task
    if getattr(args, "seed", None) is not None:
        base["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        base["epochs"] = args.epochs
    if getattr(args, "out", None):
        base["out"] = args.out
    if getattr(args, "data", None):
        base["data"] = args.data
    if getattr(args, "backend", None):
        sd = base.get("sdaq") or SdaqConfig().to_dict()
        sd = dict(sd.to_dict() if isinstance(sd, SdaqConfig) else sd, backend=args.backend)
        base["sdaq"] = sd
    return RunConfig.from_dict(base)


# ---------------------------------------------------------------- commands


def cmd_decompose(args) -> int:
    cfg = run_config(args)
    frame = load_frame(args.input or cfg.data)
    x = frame.values.T  # [d, T]
    dec = sdaq_decompose(x, cfg.sdaq)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    for k, pat in enumerate(dec.patterns, start=1):
        _write_matrix(out / f"pattern_{k}.csv", pat.T, frame.columns)
    recon = dec.patterns.sum(axis=0)
    err = float(np.linalg.norm(recon - x) / max(np.linalg.norm(x), np.finfo(float).tiny))
    total = dec.band_energy.sum(axis=1, keepdims=True)
    frac = np.divide(dec.band_energy, total, out=np.zeros_like(dec.band_energy), where=total > 0)
    report = {
        "backend": cfg.sdaq.backend,
        "K": cfg.sdaq.K,
        "channels": list(frame.columns),
        "boundaries": dec.partition.boundaries.tolist(),
        "energy_fraction": frac.tolist(),
        "reconstruction_error": err,
        "n_rejected_rows": frame.n_rejected,
    }
    _write_json(out / "energy_report.json", report)
    print(f"wrote {cfg.sdaq.K} patterns to {out} (reconstruction error {err:.3e})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = run_config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg)
    log, best, state = out / "train_log.jsonl", out / "best.json", out / "state.json"
    if args.resume:
        trainer.load_state(args.resume)
        remaining = max(cfg.epochs - trainer.epoch, 0)
    else:
        log.write_text("")
        remaining = cfg.epochs
    _write_json(out / "config.json", cfg.to_dict())
    try:
        trainer.fit(remaining, log_path=log, best_path=best, state_path=state, verbose=not args.quiet)
    except NumericalError as exc:
        _write_json(out / "grad_norms.json", exc.diagnostics)
        raise
    if not best.exists():
        trainer.save_checkpoint(best)
    model = load_model(best, cfg, trainer.data.n_channels)
    report = evaluate(model, cfg, trainer.data, "test")
    write_report(report, out / "report.json")
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def _checkpoint_path(args, cfg) -> Path:
    return Path(args.checkpoint or cfg.checkpoint or Path(cfg.out) / "best.json")


def cmd_eval(args) -> int:
    cfg = run_config(args)
    ckpt = _checkpoint_path(args, cfg)
    data = build_dataset(cfg)
    model = load_model(ckpt, cfg, data.n_channels)
    report = evaluate(model, cfg, data, args.split)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out / "metrics.json")
    if args.predictions and cfg.task in ("forecast", "classify"):
        ws = getattr(data, args.split)
        pred = predict(model, ws.inputs, cfg.batch_size)
        rows = pred.reshape(len(pred), -1)
        _write_matrix(out / "predictions.csv", rows)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK


def cmd_export_attention(args) -> int:
    cfg = run_config(args)
    data = build_dataset(cfg)
    model = load_model(_checkpoint_path(args, cfg), cfg, data.n_channels)
    ws = getattr(data, args.split)
    if not 0 <= args.sample < len(ws):
        raise InvalidInput(f"sample {args.sample} out of range [0, {len(ws)})")
    if not 0 <= args.channel < data.n_channels:
        raise InvalidInput(f"channel {args.channel} out of range [0, {data.n_channels})")
    x = ws.inputs[args.sample : args.sample + 1]
    with ad.no_grad():
        _, records = model.forward(x, record=True)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    K, P = cfg.sdaq.K, model.n_tokens
    for n, rec in enumerate(records, start=1):
        _write_matrix(out / f"attention_layer_{n}.csv", rec[args.block][args.channel])
    blocks = [{"pattern": k + 1, "start": k * P, "stop": (k + 1) * P} for k in range(K)]
    _write_json(out / "attention_meta.json", {
        "block": args.block, "sample": args.sample, "channel": args.channel, "split": args.split,
        "n_layers": len(records), "tokens_per_pattern": P, "patterns": blocks})
    print(f"wrote {len(records)} attention matrices to {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="pets", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--task", choices=("forecast", "impute", "classify", "anomaly"))
        sp.add_argument("--backend", choices=("cwt", "fft"))
        sp.add_argument("--seed", type=int)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--data", help="CSV path overriding the config's data source")

    sp = sub.add_parser("decompose", help="split a CSV into K fluctuation patterns")
    common(sp)
    sp.add_argument("--input", help="CSV file (defaults to the config's data)")
    sp.set_defaults(func=cmd_decompose)

    sp = sub.add_parser("train", help="train a model and evaluate its best checkpoint")
    common(sp)
    sp.add_argument("--resume", help="resumable state file written by an earlier run")
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--predictions", action="store_true", help="also write predictions.csv")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("export-attention", help="dump per-layer pattern attention for one sample")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--channel", type=int, default=0)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--block", default="ppa", choices=("ppa", "mpr", "mpm"))
    sp.set_defaults(func=cmd_export_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInput, ParseError, ShapeError, PetsError, OSError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
