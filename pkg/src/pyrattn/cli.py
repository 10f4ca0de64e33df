"""Command-line front end: gen / run / report / diag.

Exit codes: 0 success, 2 validation problem (bad flags, bad config, bad
shapes), 3 file problem (missing, malformed, unwritable), 4 numeric
degeneracy.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys

from .errors import NumericError, TensorFileError, ValidationError
from .pipeline import (PipelineResult, RunConfig, report_to_json,
                       run_pipeline, similarity_profile, synthesize)
from .tensorfile import read_tensor, write_tensor

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _cmd_gen(args) -> int:
    data = synthesize(
        kind=args.kind, n=args.n, d=args.d, seed=args.seed, heads=args.heads,
        grid=args.grid, dup_factor=args.dup_factor,
    )
    for name, path in (("q", args.out_q), ("k", args.out_k), ("v", args.out_v)):
        write_tensor(path, data[name])
    print(f"wrote {args.out_q} {args.out_k} {args.out_v} "
          f"(kind={args.kind}, n={args.n}, d={args.d}, heads={args.heads})")
    return EXIT_OK


def _cmd_run(args) -> int:
    cfg = RunConfig.from_json(args.config)
    overrides = {}
    if args.unpermute:
        overrides["unpermute"] = True
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = RunConfig.from_dict({**cfg.to_dict(), **overrides})
    q = read_tensor(args.q)
    k = read_tensor(args.k)
    v = read_tensor(args.v)
    result: PipelineResult = run_pipeline(cfg, q, k, v)
    text = report_to_json(result.report)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(f"report written to {args.out}")
    else:
        sys.stdout.write(text)
    if args.out_tensor:
        write_tensor(args.out_tensor, result.output)
        print(f"attention output written to {args.out_tensor}")
    return EXIT_OK


def _flatten(prefix: str, value, rows: list) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], rows)
    elif isinstance(value, list):
        rows.append((prefix, json.dumps(value)))
    else:
        rows.append((prefix, value))


def _cmd_report(args) -> int:
    with open(args.input, "r", encoding="utf-8") as fh:
        report = json.load(fh)
    if args.csv:
        rows: list = []
        _flatten("", report, rows)
        writer = csv.writer(sys.stdout)
        writer.writerow(["key", "value"])
        writer.writerows(rows)
        return EXIT_OK
    try:
        spars = report["sparsity"]
        util = report["utilization"]
        lines = [
            f"heads:                 {report['heads']}",
            f"relative error:        {report['relative_error']:.3e}",
            f"schedule rel. error:   {report['schedule_relative_error']:.3e}",
            f"effective budget rho:  {spars['rho_bar']:.4f}",
            f"sparsity:              {spars['sparsity']:.4f}",
            f"kv coverage:           {spars['kv_coverage']:.4f}",
            f"level histogram:       {spars['level_histogram']}",
            f"tiles / utilization:   {util['tiles']} / {util['utilization']:.4f}",
            f"skipped rows:          {report['skipped_rows']}",
            f"wall time (s):         {report['wall_time_s']:.3f}",
        ]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"not a run report: {exc}") from exc
    print("\n".join(lines))
    return EXIT_OK


def _cmd_diag(args) -> int:
    k = read_tensor(args.k)
    rows = similarity_profile(k, max_stride=args.max_stride)
    buf = io.StringIO()
    writer = csv.DictWriter(
        buf, fieldnames=["stride", "similarity", "used_pairs", "skipped_pairs"]
    )
    writer.writeheader()
    writer.writerows(rows)
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="") as fh:
            fh.write(buf.getvalue())
        print(f"similarity profile written to {args.out}")
    else:
        sys.stdout.write(buf.getvalue())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pyrattn",
        description="Multi-level pooled block-sparse attention toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic Q/K/V tensor files")
    gen.add_argument("--kind", required=True,
                     choices=["gaussian", "correlated", "duplicated"])
    gen.add_argument("--n", type=int, required=True, help="sequence length")
    gen.add_argument("--d", type=int, required=True, help="head dimension")
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--heads", type=int, default=1)
    gen.add_argument("--grid", type=int, nargs="+", default=None,
                     help="grid shape for the correlated field")
    gen.add_argument("--dup-factor", type=int, default=2,
                     help="duplication factor for kind=duplicated")
    gen.add_argument("--out-q", required=True)
    gen.add_argument("--out-k", required=True)
    gen.add_argument("--out-v", required=True)
    gen.set_defaults(func=_cmd_gen)

    run = sub.add_parser("run", help="run the pipeline and emit a JSON report")
    run.add_argument("--config", required=True, help="JSON config file")
    run.add_argument("--q", required=True)
    run.add_argument("--k", required=True)
    run.add_argument("--v", required=True)
    run.add_argument("--out", default=None, help="report path (default stdout)")
    run.add_argument("--out-tensor", default=None,
                     help="also write the streaming attention output")
    run.add_argument("--unpermute", action="store_true",
                     help="undo the curve permutation on the saved output")
    run.add_argument("--seed", type=int, default=None,
                     help="override the config seed")
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="pretty-print or CSV-dump a report")
    rep.add_argument("--in", dest="input", required=True)
    rep.add_argument("--csv", action="store_true")
    rep.set_defaults(func=_cmd_report)

    diag = sub.add_parser("diag", help="adjacent-key similarity curve as CSV")
    diag.add_argument("--k", required=True, help="key tensor file")
    diag.add_argument("--max-stride", type=int, default=8)
    diag.add_argument("--out", default=None, help="CSV path (default stdout)")
    diag.set_defaults(func=_cmd_diag)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except TensorFileError as exc:
        print(f"file error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except json.JSONDecodeError as exc:
        print(f"config parse error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    raise SystemExit(main())
