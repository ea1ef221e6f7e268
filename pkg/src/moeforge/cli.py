"""Command-line entry point: plan, shard, merge, simulate, schedule,
metrics, rank-metrics, reward, and cast subcommands over the library.

Exit codes: 0 success, 1 usage error, 2 format/validation error, 3 deadlock
detected by the simulator, 4 I/O failure.  ``--json`` switches stdout from
human-readable tables to machine-readable JSON.  File outputs are written
atomically (temp file, then rename).  ``MOEFORGE_THREADS`` caps internal
parallelism (0 = auto).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .collectives import Verdict, build_step_program, explain, simulate
from .convert import merge, read_shard_set, shard, write_shard_set
from .errors import InvalidInput, InvalidValue, MoeforgeError
from .layout import (
    ModelConfig,
    ParallelConfig,
    load_plan,
    plan_layout,
    plan_to_json,
    save_plan,
    validate_layout,
)
from .metrics import (
    RankedList,
    Shaping,
    auc,
    binary_metrics,
    confusion,
    ndcg_at_k,
    recall_at_k,
)
from .scheduler import (
    WeightingConfig,
    instance_weight,
    perplexity,
    progress,
    read_trace,
    task_weights,
)
from .tensor_store import Dtype, cast_tensor, read_checkpoint, write_checkpoint

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INVALID = 2
EXIT_DEADLOCK = 3
EXIT_IO = 4


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage failures exit 1 instead of 2."""

    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(payload: dict, human: str, as_json: bool) -> None:
    print(json.dumps(payload, indent=2) if as_json else human)


def _write_json_atomic(payload: dict, path: str) -> None:
    target = Path(path)
    fd, tmp = tempfile.mkstemp(dir=target.parent or ".", suffix=".tmp")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2)
        f.write("\n")
    os.replace(tmp, target)


def _parse_dtype(name: str) -> Dtype:
    try:
        return Dtype(name)
    except ValueError:
        raise InvalidValue(
            f"unknown dtype {name!r}; expected one of "
            f"{[d.value for d in Dtype]}"
        )


# ── subcommand implementations ──────────────────────────────────────────────

def _cmd_plan(args: argparse.Namespace) -> int:
    model = ModelConfig(
        num_layers=args.layers,
        num_dense_layers=args.dense_layers,
        num_routed_experts=args.experts,
        has_shared_expert=args.shared_expert,
    )
    plan = plan_layout(model, ParallelConfig(pp=args.pp, width=args.width))
    findings = validate_layout(plan)
    if findings:  # planner output is valid by construction; guard regressions
        raise InvalidValue("planned layout failed validation: " + "; ".join(findings))
    if args.output:
        save_plan(plan, args.output)
    if args.figure:
        from .report import layout_figure, save_figure

        save_figure(layout_figure(plan), args.figure)
    doc = plan_to_json(plan)
    lines = [
        f"{args.pp} stages x {args.width} local ranks = "
        f"{plan.parallel.total_ranks} ranks",
        f"stage layer ranges: {', '.join(f'[{a},{b})' for a, b in plan.stage_layers)}",
        f"expert ranges: {', '.join(f'[{a},{b})' for a, b in plan.expert_ranges)}",
        f"MoE stages: {sorted(plan.moe_stages)}",
    ]
    if args.output:
        lines.append(f"plan written to {args.output}")
    _emit(doc, "\n".join(lines), args.json)
    return EXIT_OK


def _cmd_shard(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    ckpt = read_checkpoint(args.checkpoint)
    shard_set = shard(ckpt, plan)
    manifest_path = write_shard_set(shard_set, args.output)
    payload = {
        "manifest": str(manifest_path),
        "ranks": len(shard_set.shards),
        "tensors": sum(len(s) for s in shard_set.shards.values()),
    }
    _emit(
        payload,
        f"wrote {payload['ranks']} shards ({payload['tensors']} tensor placements) "
        f"under {args.output}",
        args.json,
    )
    return EXIT_OK


def _cmd_merge(args: argparse.Namespace) -> int:
    shard_set = read_shard_set(args.manifest)
    merged = merge(shard_set, _parse_dtype(args.dtype))
    write_checkpoint(merged, args.output)
    payload = {"output": args.output, "tensors": len(merged), "dtype": args.dtype}
    _emit(
        payload,
        f"merged {len(merged)} tensors into {args.output} ({args.dtype})",
        args.json,
    )
    return EXIT_OK


def _cmd_cast(args: argparse.Namespace) -> int:
    ckpt = read_checkpoint(args.checkpoint)
    target = _parse_dtype(args.dtype)
    out = type(ckpt)(
        tensors=[cast_tensor(t, target) for t in ckpt.tensors],
        metadata=dict(ckpt.metadata),
    )
    write_checkpoint(out, args.output)
    payload = {"output": args.output, "tensors": len(out), "dtype": args.dtype}
    _emit(
        payload,
        f"cast {len(out)} tensors to {args.dtype} into {args.output}",
        args.json,
    )
    return EXIT_OK


def _cmd_simulate(args: argparse.Namespace) -> int:
    plan = load_plan(args.plan)
    groups, programs = build_step_program(plan, stub_enabled=args.stub)
    outcome = simulate(groups, programs)
    if args.json:
        payload = {
            "verdict": outcome.verdict.value,
            "steps": outcome.steps,
            "stub": args.stub,
            "blocked": [
                {"stage": r.stage, "local": r.local, "call": idx, "group": grp}
                for r, (idx, grp) in outcome.blocked.items()
            ],
            "stalls": [
                {
                    "group": s.group,
                    "index": s.index,
                    "arrived": len(s.arrived),
                    "missing": [{"stage": r.stage, "local": r.local} for r in s.missing],
                }
                for s in outcome.stalls
            ],
        }
        print(json.dumps(payload, indent=2))
    else:
        print(explain(outcome))
    return EXIT_OK if outcome.verdict is Verdict.COMPLETED else EXIT_DEADLOCK


def _cmd_schedule(args: argparse.Namespace) -> int:
    cfg = WeightingConfig(
        beta=args.beta, w_min=args.wmin, w_max=args.wmax, alpha=args.alpha
    )
    records = read_trace(args.trace)
    if not records:
        raise InvalidValue(f"{args.trace}: trace contains no sample records")

    samples = []
    for r in records:
        delta = progress(r, args.prev_tag, args.curr_tag)
        samples.append(
            {
                "task": r.task,
                "sample": r.sample,
                "ppl_prev": perplexity(r.nll_by_checkpoint[args.prev_tag]),
                "ppl_curr": perplexity(r.nll_by_checkpoint[args.curr_tag]),
                "progress": delta,
                "weight": instance_weight(delta, cfg),
            }
        )

    tasks = sorted({r.task for r in records})
    if args.metrics_file:
        with open(args.metrics_file, encoding="utf-8") as f:
            try:
                metric_map = {str(k): float(v) for k, v in json.load(f).items()}
            except (ValueError, AttributeError) as exc:
                raise InvalidValue(
                    f"{args.metrics_file}: expected a JSON object of task metrics: {exc}"
                ) from exc
        missing = [t for t in tasks if t not in metric_map]
        if missing:
            raise InvalidValue(f"{args.metrics_file}: no metric for tasks {missing}")
        lambdas = task_weights(metric_map, cfg.alpha)
        lambda_source = "metrics"
    else:
        # no validation metrics supplied: no difficulty signal, uniform weights
        lambdas = {t: 1.0 / len(tasks) for t in tasks}
        lambda_source = "uniform"

    payload = {
        "config": {
            "beta": cfg.beta,
            "w_min": cfg.w_min,
            "w_max": cfg.w_max,
            "alpha": cfg.alpha,
            "prev_tag": args.prev_tag,
            "curr_tag": args.curr_tag,
        },
        "samples": samples,
        "lambdas": lambdas,
        "lambda_source": lambda_source,
    }
    if args.output:
        _write_json_atomic(payload, args.output)
    if args.figure:
        from .report import save_figure, task_weight_figure

        weights = {f"{s['task']}/{s['sample']}": s["weight"] for s in samples}
        save_figure(task_weight_figure(lambdas, weights), args.figure)

    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        lines = [f"{len(samples)} samples, {len(tasks)} tasks ({lambda_source} lambdas)"]
        lines += [
            f"  {s['task']}/{s['sample']}: progress {s['progress']:+.4f} "
            f"-> weight {s['weight']:.4f}"
            for s in samples
        ]
        lines += [f"  lambda[{t}] = {lambdas[t]:.4f}" for t in sorted(lambdas)]
        print("\n".join(lines))
    return EXIT_OK


def _read_csv_rows(path: str, has_header: bool) -> list[list[str]]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = [row for row in csv.reader(f) if row]
    if has_header and rows:
        rows = rows[1:]
    if not rows:
        raise InvalidInput(f"{path}: no data rows")
    for i, row in enumerate(rows):
        if len(row) < 2:
            raise InvalidInput(f"{path}: row {i + 1} has fewer than two columns")
    return rows


def _cmd_metrics(args: argparse.Namespace) -> int:
    rows = _read_csv_rows(args.csv, args.has_header)
    if args.scored:
        scores = []
        for i, row in enumerate(rows):
            try:
                score = float(row[0])
            except ValueError as exc:
                raise InvalidInput(
                    f"{args.csv}: row {i + 1}: bad score {row[0]!r}"
                ) from exc
            label = row[1].strip()
            if label not in (args.positive_label, args.negative_label):
                raise InvalidInput(f"{args.csv}: row {i + 1}: bad label {label!r}")
            scores.append((score, label == args.positive_label))
        value = auc(scores)
        _emit({"auc": value}, f"auc: {value:.6f}", args.json)
        return EXIT_OK

    gold = [row[0].strip() for row in rows]
    pred = [row[1].strip() for row in rows]
    counts = confusion(
        gold, pred, positive=args.positive_label, negative=args.negative_label
    )
    result = binary_metrics(counts)
    payload = result.as_dict(rounded=True)
    payload["counts"] = {"tp": counts.tp, "fp": counts.fp, "tn": counts.tn, "fn": counts.fn}
    if args.figure:
        from .report import binary_metrics_figure, save_figure

        save_figure(binary_metrics_figure(result, title=Path(args.csv).name), args.figure)
    human = "\n".join(
        f"{name:>18}: {value:6.2f}"
        for name, value in result.as_dict(rounded=True).items()
    )
    _emit(payload, human, args.json)
    return EXIT_OK


def _cmd_rank_metrics(args: argparse.Namespace) -> int:
    with open(args.ranking, encoding="utf-8") as f:
        try:
            doc = json.load(f)
            ranked = RankedList(
                items=tuple(doc["items"]),
                judgments={str(k): float(v) for k, v in doc["judgments"].items()},
            )
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise InvalidValue(f"{args.ranking}: malformed ranked list: {exc}") from exc
    payload = {
        "k": args.k,
        "recall_at_k": recall_at_k(ranked, args.k),
        "ndcg_at_k": ndcg_at_k(ranked, args.k),
    }
    _emit(
        payload,
        f"recall@{args.k}: {payload['recall_at_k']:.6f}\n"
        f"ndcg@{args.k}:   {payload['ndcg_at_k']:.6f}",
        args.json,
    )
    return EXIT_OK


def _make_shaping(args: argparse.Namespace) -> Shaping:
    if args.shaping == "identity":
        return Shaping.identity()
    if args.shaping == "scale":
        return Shaping.scaled(args.scale)
    return Shaping.clipped(args.clip_lo, args.clip_hi, args.scale)


def _cmd_reward(args: argparse.Namespace) -> int:
    shaping = _make_shaping(args)
    value = shaping.apply(args.m_with - args.m_base)
    payload = {
        "m_with": args.m_with,
        "m_base": args.m_base,
        "shaping": args.shaping,
        "reward": value,
    }
    _emit(payload, f"reward: {value:+.6f}", args.json)
    return EXIT_OK


# ── argument wiring ─────────────────────────────────────────────────────────

def build_parser() -> _Parser:
    parser = _Parser(prog="moeforge", description=__doc__)
    parser.add_argument("--version", action="version", version=f"moeforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("plan", help="compute a pipeline x width layout plan")
    p.add_argument("--layers", type=int, required=True)
    p.add_argument("--dense-layers", type=int, default=0)
    p.add_argument("--experts", type=int, required=True)
    p.add_argument("--pp", type=int, required=True)
    p.add_argument("--width", type=int, required=True)
    p.add_argument(
        "--shared-expert",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="model has a shared expert on MoE layers",
    )
    p.add_argument("-o", "--output", help="write the plan JSON here")
    p.add_argument("--figure", help="render the layout grid to this image file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_plan)

    p = sub.add_parser("shard", help="split a release checkpoint into rank shards")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--plan", required=True)
    p.add_argument("-o", "--output", required=True, help="shard directory")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_shard)

    p = sub.add_parser("merge", help="merge rank shards back into one checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--dtype", default=Dtype.BF16.value,
                   choices=[d.value for d in Dtype])
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_merge)

    p = sub.add_parser("cast", help="cast every tensor of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dtype", required=True, choices=[d.value for d in Dtype])
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_cast)

    p = sub.add_parser("simulate", help="run the optimizer collective schedule")
    p.add_argument("--plan", required=True)
    p.add_argument("--stub", action="store_true",
                   help="give dense-only stages an empty-payload MoE call")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("schedule", help="instance and task weights from NLL traces")
    p.add_argument("--trace", required=True, help="line-delimited JSON NLL traces")
    p.add_argument("--metrics-file", help="JSON object of per-task validation metrics")
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--wmin", type=float, default=0.1)
    p.add_argument("--wmax", type=float, default=10.0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--prev-tag", default="k-1")
    p.add_argument("--curr-tag", default="k")
    p.add_argument("-o", "--output", help="also write the JSON result here")
    p.add_argument("--figure", help="render weight charts to this image file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_schedule)

    p = sub.add_parser("metrics", help="binary metrics from a two-column CSV")
    p.add_argument("--csv", required=True,
                   help="(gold, pred) labels, or (score, gold) with --scored")
    p.add_argument("--scored", action="store_true", help="compute AUC from scores")
    p.add_argument("--positive-label", default="non-defect")
    p.add_argument("--negative-label", default="defect")
    p.add_argument("--has-header", action="store_true")
    p.add_argument("--figure", help="render the metric bars to this image file")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_metrics)

    p = sub.add_parser("rank-metrics", help="recall@K and NDCG@K from a ranked list")
    p.add_argument("--ranking", required=True, help="JSON with items and judgments")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_rank_metrics)

    p = sub.add_parser("reward", help="shaped batch reward from a metric delta")
    p.add_argument("--m-with", type=float, required=True)
    p.add_argument("--m-base", type=float, required=True)
    p.add_argument("--shaping", default="identity", choices=["identity", "scale", "clip"])
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--clip-lo", type=float, default=-1.0)
    p.add_argument("--clip-hi", type=float, default=1.0)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=_cmd_reward)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except MoeforgeError as exc:
        print(f"moeforge: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"moeforge: i/o failure: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
