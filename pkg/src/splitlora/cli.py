"""Command line: ``run``, ``report`` and ``compare``.

Exit codes: 0 success, 2 invalid input (config, run directory, arguments),
3 runtime failure during training.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

from .config import load_run_config, to_dict
from .errors import ConfigError, SplitLoraError
from .lora import save_checkpoint
from .protocol import RUNNERS, TrainingLog

log = logging.getLogger("splitlora")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3
CSV_COLUMNS = ("round", "mean_ce", "ppl", "cum_bytes", "sim_time_s")


class RunDirError(Exception):
    pass


def summarize(train_log: TrainingLog, seed: int) -> dict:
    last = train_log.records[-1] if train_log.records else None
    ledger = train_log.ledger
    eval_ce = train_log.final_eval_ce
    return {
        "mode": train_log.mode,
        "seed": seed,
        "rounds": len(train_log.records),
        "final_mean_ce": last["mean_ce"] if last else None,
        "final_ppl": last["ppl"] if last else None,
        "final_eval_ce": eval_ce,
        "final_eval_ppl": math.exp(eval_ce) if eval_ce is not None else None,
        "total_bytes": dict(last["cum_bytes"]) if last else dict(ledger.bytes),
        "total_flops": dict(last["cum_flops"]) if last else dict(ledger.flops),
        "sim_time_s": last["sim_time_s"] if last else ledger.sim_time_s,
        "aggregations": len(train_log.aggregation_rounds),
        "trainable_params": dict(train_log.trainable),
    }


def write_run(out_dir: Path, train_log: TrainingLog, summary: dict, resolved_config: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "log.jsonl", "w") as fh:
        for rec in train_log.records:
            fh.write(json.dumps(rec) + "\n")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    (out_dir / "config.json").write_text(json.dumps(resolved_config, indent=2) + "\n")
    ckpt = out_dir / "checkpoints"
    ckpt.mkdir(exist_ok=True)
    for t, name, adapters in train_log.checkpoints:
        save_checkpoint(ckpt / f"round{t:05d}_{name}.slra", adapters)
    for i, adapters in enumerate(train_log.client_adapters):
        save_checkpoint(ckpt / ("final_full.slra" if train_log.mode == "cenlora" else f"final_client{i}.slra"),
                        adapters)
    if train_log.server_adapters is not None:
        save_checkpoint(ckpt / "final_server.slra", train_log.server_adapters)
    if train_log.final_adapters is not None and train_log.mode != "cenlora":
        save_checkpoint(ckpt / "final_global.slra", train_log.final_adapters)


def cmd_run(config_path: str, seed: int | None = None, out_dir: str | None = None) -> int:
    try:
        run_cfg = load_run_config(config_path)
        training = run_cfg.training
        if seed is not None:
            training = dataclasses.replace(training, seed=seed).validate()
        target = out_dir or run_cfg.output_dir
        if not target:
            raise ConfigError("no output directory: set 'output_dir' in the config or pass --out")
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    log.info("running %s for %d rounds (seed %d)", run_cfg.mode, training.rounds, training.seed)
    try:
        train_log = RUNNERS[run_cfg.mode](training)
    except SplitLoraError as exc:
        print(f"error: training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    resolved = {"mode": run_cfg.mode, **to_dict(training)}
    write_run(Path(target), train_log, summarize(train_log, training.seed), resolved)
    log.info("wrote %s", target)
    return EXIT_OK


def load_run_dir(run_dir: str | Path) -> tuple[list[dict], dict]:
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise RunDirError(f"{run_dir}: not a directory")
    log_path, summary_path = run_dir / "log.jsonl", run_dir / "summary.json"
    try:
        lines = log_path.read_text().splitlines()
    except OSError as exc:
        raise RunDirError(f"{log_path}: {exc.strerror or exc}") from exc
    records = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("record is not an object")
            for key in ("round", "mean_ce", "ppl", "cum_bytes", "sim_time_s"):
                rec[key]
        except (json.JSONDecodeError, ValueError, KeyError) as exc:
            raise RunDirError(f"{log_path}: line {lineno}: corrupt record ({exc})") from exc
        records.append(rec)
    try:
        summary = json.loads(summary_path.read_text())
    except OSError as exc:
        raise RunDirError(f"{summary_path}: {exc.strerror or exc}") from exc
    except json.JSONDecodeError as exc:
        raise RunDirError(f"{summary_path}: corrupt JSON ({exc})") from exc
    return records, summary


def _total_bytes(rec: dict) -> int:
    return sum(rec["cum_bytes"].values())


def cmd_report(run_dir: str) -> int:
    try:
        records, summary = load_run_dir(run_dir)
    except RunDirError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    rows = [(r["round"], r["mean_ce"], r["ppl"], _total_bytes(r), r["sim_time_s"]) for r in records]
    with open(Path(run_dir) / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        writer.writerows(rows)
    print(f"{summary.get('mode', '?')}: {len(rows)} rounds")
    print(f"{'round':>6} {'loss':>10} {'ppl':>10} {'cum_bytes':>14} {'sim_time_s':>12}")
    for t, ce, ppl, nbytes, sim in rows:
        print(f"{t:>6} {ce:>10.4f} {ppl:>10.4f} {nbytes:>14} {sim:>12.6f}")
    return EXIT_OK


def first_reaching(records: list[dict], threshold: float):
    """(sim_time_s, cumulative bytes) of the first round with mean_ce <= threshold, else None."""
    for r in records:
        if r["mean_ce"] <= threshold:
            return r["sim_time_s"], _total_bytes(r)
    return None


def cmd_compare(run_dirs: list[str], threshold: float) -> int:
    if len(run_dirs) < 2:
        print("error: compare needs at least two run directories", file=sys.stderr)
        return EXIT_INVALID
    table = []
    for d in run_dirs:
        try:
            records, summary = load_run_dir(d)
        except RunDirError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_INVALID
        hit = first_reaching(records, threshold)
        last = records[-1] if records else None
        table.append((
            d,
            summary.get("mode", "?"),
            f"{last['mean_ce']:.4f}" if last else "-",
            f"{last['ppl']:.4f}" if last else "-",
            f"{summary['final_eval_ce']:.4f}" if summary.get("final_eval_ce") is not None else "-",
            f"{hit[0]:.6f}" if hit else "not reached",
            str(hit[1]) if hit else "not reached",
            f"{last['sim_time_s']:.6f}" if last else "0",
        ))
    header = ("run", "mode", "final_loss", "final_ppl", "eval_loss",
              f"time_to_{threshold:g}", f"bytes_to_{threshold:g}", "sim_time_s")
    widths = [max(len(str(row[i])) for row in (header, *table)) for i in range(len(header))]
    for row in (header, *table):
        print("  ".join(str(v).ljust(w) for v, w in zip(row, widths)).rstrip())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splitlora", description="Split federated LoRA simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="train one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    rep = sub.add_parser("report", help="tabulate a run and write summary.csv")
    rep.add_argument("--in", dest="run_dir", required=True)
    c = sub.add_parser("compare", help="compare runs side by side")
    c.add_argument("--in", dest="run_dirs", nargs="+", required=True)
    c.add_argument("--threshold", type=float, required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "run":
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            print("error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_INVALID
        return cmd_run(args.config, args.seed, args.out)
    if args.command == "report":
        return cmd_report(args.run_dir)
    return cmd_compare(args.run_dirs, args.threshold)


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
