"""Command-line entry point: ``kgfollowup {kg-ingest,run,eval,pool}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from .config import ConfigError, RunConfig, build_gateway
from .consolidation import consolidate
from .data import Conversation, RecordError, dump_jsonl_record, read_jsonl
from .evaluation import (
    METHODS,
    Dependencies,
    EmbeddingJudge,
    EvalReport,
    LLMJudge,
    read_benchmark_file,
    resolve_method,
    run_benchmark,
    sweep_grid,
)
from .gateway import LLMGateway
from .icl import EmptyPoolError, ICLPool, build_pool, load_pool, save_pool, select_examples
from .kg import IngestionError, KnowledgeGraph, load_graph, read_graph_file
from .pipeline import CHANNELS, RunTrace, pmap, run_pipeline
from .prompts import PROMPT_VERSION, template_hashes
from .providers import GatewayError
from .report import plot_sweep, plot_themes, write_report, write_sweep_table

logger = logging.getLogger("kgfollowup")


class CLIError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


# -- shared helpers ------------------------------------------------------------


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a configuration value (repeatable)")
    p.add_argument("--provider", choices=("scripted", "http"), help="completion provider kind")
    p.add_argument("--script-dir", help="scripted provider directory (replay, or target for --record)")
    p.add_argument("--record", action="store_true", help="record live responses into --script-dir")
    p.add_argument("--jobs", type=int, default=1, help="max concurrent workers / in-flight requests")
    p.add_argument("--kg", help="compiled index or raw edge list")


def _load_config(args: argparse.Namespace, extra: Sequence[str] = ()) -> RunConfig:
    overrides = list(args.overrides)
    if args.provider:
        overrides.append(f"provider.kind={args.provider}")
    if args.script_dir:
        overrides.append(f"provider.script_dir={args.script_dir}")
    if args.record:
        overrides.append("provider.record=true")
    overrides.extend(extra)
    if args.jobs and args.jobs > 1:
        overrides.append(f"provider.max_in_flight={args.jobs}")
    try:
        return RunConfig.load(args.config, overrides)
    except (ConfigError, OSError) as exc:
        raise CLIError(f"configuration error: {exc}", 2) from exc


def _gateway(config: RunConfig) -> LLMGateway:
    try:
        return build_gateway(config)
    except GatewayError as exc:
        raise CLIError(f"provider misconfiguration: {exc}", 2) from exc


def _graph(args: argparse.Namespace, config: RunConfig, required: bool = True) -> KnowledgeGraph | None:
    if not args.kg:
        if required:
            raise CLIError("--kg is required", 2)
        return None
    try:
        return read_graph_file(args.kg, format=config.kg_format)
    except (IngestionError, OSError) as exc:
        raise CLIError(f"cannot load knowledge graph: {exc}") from exc


def _judge(kind: str, config: RunConfig, gateway: LLMGateway):
    if kind == "llm":
        return LLMJudge(gateway)
    return EmbeddingJudge(gateway.embed, float(config.judge.get("threshold", 0.85)))


def _run_metadata(config: RunConfig) -> dict[str, Any]:
    return {"run_config_hash": config.hash(), "prompt_version": PROMPT_VERSION, "templates": template_hashes()}


# -- commands -----------------------------------------------------------------


def cmd_kg_ingest(args: argparse.Namespace) -> int:
    try:
        with open(args.input, "rb") as fh:
            graph = load_graph(fh, format=args.format, delimiter=args.delimiter)
    except IngestionError as exc:
        raise CLIError(f"{args.input}: {exc}") from exc
    except OSError as exc:
        raise CLIError(str(exc)) from exc
    data = graph.to_index_bytes()
    if args.out:
        Path(args.out).write_bytes(data)
    s = graph.stats
    print(f"nodes={graph.node_count} edges={graph.edge_count}")
    if s.self_loops or s.duplicates:
        print(f"dropped self_loops={s.self_loops} duplicates={s.duplicates}", file=sys.stderr)
    return 0


def _read_conversations(path: str) -> list[Conversation]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, rec in read_jsonl(fh):
            rid = str(rec.get("instance_id", f"line{lineno}"))
            try:
                conv = Conversation.from_obj(rec.get("turns", rec.get("conversation")), rid)
            except RecordError as exc:
                raise CLIError(f"{path}: line {lineno}: {exc}") from exc
            out.append(Conversation(conv.turns, rid))
    return out


def _pool_examples(args: argparse.Namespace, config: RunConfig, graph, gateway, strategy: str | None):
    if getattr(args, "pool", None):
        if not args.dev:
            raise CLIError("--pool needs --dev to hydrate examples", 2)
        dev = read_benchmark_file(args.dev, config.benchmark_dialect)
        return load_pool(args.pool, dev)
    if strategy and getattr(args, "dev", None):
        dev = read_benchmark_file(args.dev, config.benchmark_dialect)
        try:
            return build_pool(dev, graph, gateway, config.linker, strategy, config.pipeline.icl_seed)
        except EmptyPoolError as exc:
            raise CLIError(str(exc)) from exc
    return None


def cmd_run(args: argparse.Namespace) -> int:
    extra = []
    if args.budget is not None:
        extra.append(f"pipeline.budget={args.budget}")
    for ch in args.channel:
        name, _, state = ch.partition("=")
        if name not in CHANNELS or state not in ("on", "off"):
            raise CLIError(f"--channel expects NAME=on|off with NAME in {CHANNELS}", 2)
        extra.append(f"pipeline.channels.{name}={'true' if state == 'on' else 'false'}")
    config = _load_config(args, extra)
    gateway = _gateway(config)
    graph = _graph(args, config, required=config.pipeline.mode in ("kg-followup",))
    conversations = _read_conversations(args.conversations)
    pool = _pool_examples(args, config, graph, gateway, args.pool_strategy)
    icl = select_examples(pool, config.pipeline.t, config.pipeline.icl_seed) if pool is not None else []
    cfg = config.pipeline
    run_meta = _run_metadata(config)
    inner = args.jobs if len(conversations) == 1 else 1

    def one(conv: Conversation) -> dict[str, Any]:
        examples = [e for e in icl if e.instance_id != conv.instance_id]
        try:
            trace = RunTrace()
            res = run_pipeline(conv, graph, gateway, config.linker, examples, cfg, jobs=inner, trace=trace)
            qs = res.questions
            meta = dict(res.metadata)
            meta["pre_consolidation_count"] = len(qs)
            if not args.no_consolidate:
                cons = consolidate(qs, gateway, cfg.budget, cfg.kmeans_seed, cfg.consolidation, jobs=inner)
                qs = cons.questions
                meta["consolidation"] = cons.flags
            meta["consolidated"] = not args.no_consolidate
            meta["run_config_hash"] = run_meta["run_config_hash"]
            return {"instance_id": conv.instance_id, "questions": [q.to_obj() for q in qs], "metadata": meta}
        except GatewayError as exc:
            return {"instance_id": conv.instance_id, "error": str(exc),
                    "metadata": {"run_config_hash": run_meta["run_config_hash"]}}

    records = pmap(one, conversations, args.jobs)
    lines = [dump_jsonl_record(r) for r in records]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        meta_path = Path(str(args.out) + ".meta.json")
        meta_path.write_text(json.dumps(run_meta | {"config": config.to_dict()}, indent=2, sort_keys=True) + "\n",
                             encoding="utf-8")
    else:
        sys.stdout.write(text)
    failures = sum("error" in r for r in records)
    if failures:
        print(f"{failures} instance(s) failed", file=sys.stderr)
    return 0


def _eval_one(method: str, instances, deps, judge, config, args, graph, gateway, k=None, t=None, seed=None
              ) -> EvalReport:
    spec = METHODS[method]
    pool = None
    if spec.pool_strategy is not None:
        pool = _pool_examples(args, config, graph, gateway, spec.pool_strategy)
        if pool is None:
            raise CLIError(f"method {method!r} needs --dev (or --pool with --dev)", 2)
    return run_benchmark(method, instances, deps, judge, config.pipeline, pool=pool, k=k, t=t, seed=seed,
                         jobs=args.jobs)


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args, [f"pipeline.budget={args.budget}"] if args.budget is not None else [])
    gateway = _gateway(config)
    dialect = args.dialect or config.benchmark_dialect
    try:
        instances = read_benchmark_file(args.benchmark, dialect)
    except (RecordError, OSError) as exc:
        raise CLIError(f"cannot load benchmark: {exc}") from exc
    needs_kg = any(METHODS[m].mode == "kg-followup" for m in _methods(args))
    graph = _graph(args, config, required=needs_kg)
    deps = Dependencies(graph, gateway, config.linker)
    judge = _judge(args.judge or config.judge.get("kind", "embedding"), config, gateway)
    run_hash = config.hash()

    if args.sweep:
        import yaml

        with open(args.sweep, encoding="utf-8") as fh:
            grid = sweep_grid(yaml.safe_load(fh) or {})
        out_dir = Path(args.out or "sweep")
        out_dir.mkdir(parents=True, exist_ok=True)
        reports = []
        for i, point in enumerate(grid):
            method = resolve_method(point["method"] or args.method)
            rep = _eval_one(method, instances, deps, judge, config, args, graph, gateway,
                            point["k"], point["t"], point["seed"])
            name = f"report_{i:03d}_{method}_k{point['k']}_t{point['t']}_s{point['seed']}.json"
            write_report(rep, out_dir / name, run_hash)
            reports.append(rep)
            print(f"{method}\tk={point['k']}\tt={point['t']}\tseed={point['seed']}\t{rep.summary()}")
        write_sweep_table(reports, out_dir / "sweep.tsv")
        if not args.no_figures:
            for path in plot_sweep(reports, out_dir):
                print(f"figure: {path}", file=sys.stderr)
        return 0

    method = _methods(args)[0]
    rep = _eval_one(method, instances, deps, judge, config, args, graph, gateway, args.k, args.t, args.seed)
    out = Path(args.out) if args.out else None
    if out:
        write_report(rep, out, run_hash)
        if not args.no_figures:
            plot_themes(rep, out.with_suffix(".themes.png"))
    else:
        print(json.dumps(rep.to_record() | {"run_config_hash": run_hash}, indent=2, sort_keys=True))
    print(f"{method}\t{rep.summary()}\tfailures={rep.failures}", file=sys.stderr)
    return 0


def _methods(args: argparse.Namespace) -> list[str]:
    if args.sweep:
        import yaml

        with open(args.sweep, encoding="utf-8") as fh:
            grid = sweep_grid(yaml.safe_load(fh) or {})
        return sorted({resolve_method(p["method"] or args.method) for p in grid})
    return [resolve_method(args.method)]


def cmd_pool(args: argparse.Namespace) -> int:
    config = _load_config(args)
    dev = read_benchmark_file(args.dev, config.benchmark_dialect)
    recalls = None
    graph = gateway = None
    if args.strategy == "supervised-hard":
        if not args.recall_report:
            raise CLIError("supervised-hard needs --recall-report (an evaluation report with per-instance recalls)")
        try:
            with open(args.recall_report, encoding="utf-8") as fh:
                rep = json.load(fh)
        except OSError as exc:
            raise CLIError(f"missing recall report {args.recall_report}: {exc}") from exc
        recalls = {r["instance_id"]: r["recall"] for r in rep.get("rows", []) if r.get("error") is None}
    elif args.strategy == "kg-hard":
        gateway = _gateway(config)
        graph = _graph(args, config)
    try:
        pool = build_pool(dev, graph, gateway, config.linker, args.strategy, args.seed, recalls)
    except EmptyPoolError as exc:
        raise CLIError(str(exc)) from exc
    if args.out:
        save_pool(pool, args.out)
    else:
        print(json.dumps(pool.to_record(), sort_keys=True))
    print(f"strategy={pool.strategy} size={len(pool)}", file=sys.stderr)
    return 0


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgfollowup", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("kg-ingest", help="validate an edge list and compile it to an index")
    p.add_argument("input")
    p.add_argument("--format", choices=("primekg", "compact"), default="primekg")
    p.add_argument("--delimiter", help="field delimiter (default: sniffed, comma or tab)")
    p.add_argument("--out", help="index output path")
    p.set_defaults(func=cmd_kg_ingest)

    p = sub.add_parser("run", help="generate follow-up questions for conversations")
    _add_config_args(p)
    p.add_argument("--conversations", required=True, help="line-delimited conversation records")
    p.add_argument("--out", help="output path (default: stdout)")
    p.add_argument("--budget", type=int)
    p.add_argument("--channel", action="append", default=[], metavar="NAME=on|off")
    p.add_argument("--no-consolidate", action="store_true")
    p.add_argument("--dev", help="dev benchmark for ICL examples")
    p.add_argument("--pool", help="persisted ICL pool (needs --dev)")
    p.add_argument("--pool-strategy", choices=("random", "kg-hard"), help="build a pool from --dev on the fly")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="evaluate a method on a benchmark")
    _add_config_args(p)
    p.add_argument("--benchmark", required=True)
    p.add_argument("--method", default="kg-followup")
    p.add_argument("--judge", choices=("embedding", "llm"))
    p.add_argument("--dialect", choices=("weighted", "unweighted"))
    p.add_argument("--sweep", help="grid spec: {method, k, t, seed} lists")
    p.add_argument("--out", help="report path (directory in sweep mode)")
    p.add_argument("--budget", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dev", help="dev benchmark for ICL pools")
    p.add_argument("--pool", help="persisted ICL pool (needs --dev)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pool", help="build an in-context example pool from a dev set")
    _add_config_args(p)
    p.add_argument("--dev", required=True)
    p.add_argument("--strategy", choices=("random", "kg-hard", "supervised-hard"), default="kg-hard")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recall-report", help="evaluation report with per-instance recalls (supervised-hard)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_pool)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "method", None) and args.command == "eval" and not args.sweep:
        try:
            resolve_method(args.method)
        except ValueError as exc:
            parser.error(str(exc))
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (RecordError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
