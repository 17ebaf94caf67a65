"""
表单结构解析器 - 命令行入口

子命令：gen / train / predict / eval / decode / inspect。
退出码：0 成功，1 运行错误，2 用法错误。
"""

import argparse
import json
import sys
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from loguru import logger

from . import __version__
from .app import Application
from .config import load_config, parse_assignments
from .export import format_table, report_table, stats_table
from .log import configure_logging
from .models import FormParserError

# 子命令参数 -> 配置键
FLAG_KEYS: Dict[str, Dict[str, str]] = {
    "gen": {"seed": "generator.seed", "n_docs": "generator.n_docs"},
    "train": {
        "seed": "train.seed",
        "epochs": "train.epochs",
        "max_steps": "train.max_steps",
        "k": "model.k",
    },
}


def _global_options(defaults: bool) -> argparse.ArgumentParser:
    """全局选项；子命令上重复声明时默认值为 SUPPRESS，不覆盖主解析器的值"""
    d = (lambda v: v) if defaults else (lambda v: argparse.SUPPRESS)
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument("--config", type=Path, default=d(None), help="TOML configuration file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=d([]), metavar="SECTION.KEY=VALUE",
        help="override one configuration key (repeatable)",
    )
    parser.add_argument("--jobs", type=int, default=d(None), help="parallel documents (runtime.jobs)")
    parser.add_argument("--json", action="store_true", default=d(False), help="machine-readable stdout")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", default=d(False))
    verbosity.add_argument("-q", "--quiet", action="store_true", default=d(False))
    return parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="form-structure-parser",
        description="Hierarchical key-value and choice-group extraction from form layouts",
        parents=[_global_options(defaults=True)],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    common = [_global_options(defaults=False)]

    p = sub.add_parser("gen", parents=common, help="generate a synthetic corpus")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-docs", type=int)

    p = sub.add_parser("train", parents=common, help="train a model on a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out-ckpt", type=Path, required=True)
    p.add_argument("--metrics", type=Path, help="JSON-lines metrics log")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--k", type=int)

    p = sub.add_parser("predict", parents=common, help="predict forests for a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--dot", type=Path, help="directory for Graphviz files")

    p = sub.add_parser("eval", parents=common, help="evaluate predictions against ground truth")
    p.add_argument("--gt", type=Path, required=True)
    source = p.add_mutually_exclusive_group(required=True)
    source.add_argument("--pred", type=Path, help="predictions file or corpus file")
    source.add_argument("--ckpt", type=Path, help="predict with this checkpoint, then evaluate")
    p.add_argument("--out", type=Path, help="write the JSON report here")

    p = sub.add_parser("decode", parents=common, help="decode forests from score matrices")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--out", type=Path)

    p = sub.add_parser("inspect", parents=common, help="dump intermediate outputs for one document")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--doc", required=True, help="document id")
    p.add_argument("--ckpt", type=Path, required=True)
    return parser


def _overrides(args: argparse.Namespace) -> Dict[str, Any]:
    overrides = parse_assignments(args.overrides)
    for flag, key in FLAG_KEYS.get(args.command, {}).items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    if args.jobs is not None:
        overrides["runtime.jobs"] = args.jobs
    if args.quiet or not sys.stderr.isatty():
        overrides["train.progress"] = False
    return overrides


def _emit(args: argparse.Namespace, data: Any, text: str) -> None:
    if args.json:
        print(json.dumps(data, ensure_ascii=False, indent=1))
    else:
        print(text, end="" if text.endswith("\n") else "\n")


def _write_json(path: Path, data: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, ensure_ascii=False, indent=1) + "\n", encoding="utf-8")


# ============== 子命令 ==============

def cmd_gen(app: Application, args: argparse.Namespace) -> None:
    _, stats = app.generate(args.out)
    _emit(args, stats, stats_table(stats))


def cmd_train(app: Application, args: argparse.Namespace) -> None:
    result = app.train(args.corpus, args.out_ckpt, args.metrics)
    last = result.history[-1] if result.history else {}
    summary = {"checkpoint": str(result.checkpoint_path), "steps": result.params.step, **last}
    _emit(args, summary, format_table(["key", "value"], list(summary.items())))


def cmd_predict(app: Application, args: argparse.Namespace) -> None:
    predictions = app.predict(args.corpus, args.ckpt, args.dot)
    app.save_predictions(predictions, args.ckpt, args.out)
    rows = [[p.doc_id, len(p.forest), len(p.proposal_forest)] for p in predictions]
    data = {"out": str(args.out), "documents": len(predictions)}
    _emit(args, data, format_table(["doc_id", "trees", "proposal_trees"], rows))


def cmd_eval(app: Application, args: argparse.Namespace) -> None:
    if args.ckpt is not None:
        report = app.evaluate_checkpoint(args.gt, args.ckpt)
    else:
        report = app.evaluate(args.pred, args.gt)
    if args.out is not None:
        _write_json(args.out, report.to_dict())
    _emit(args, report.to_dict(), report_table(report))


def cmd_decode(app: Application, args: argparse.Namespace) -> None:
    result, label_set = app.decode_scores(args.scores)
    data = {
        "schema": label_set.to_list(),
        "trees": result.forest.to_dict()["trees"],
        "labels": result.unified_labels(label_set).to_dict(),
        "score": result.score,
        "diagnostics": result.diagnostics,
    }
    if args.out is not None:
        _write_json(args.out, data)
    rows = [[t.root_head, t.kind, len(t.fields), t.depth] for t in result.forest]
    _emit(args, data, format_table(["root", "kind", "fields", "depth"], rows))


def cmd_inspect(app: Application, args: argparse.Namespace) -> None:
    data = app.inspect(args.corpus, args.doc, args.ckpt)
    rows = [[p["child"], p["parent"], p["rank"], p["score"]] for p in data["proposals"]]
    _emit(args, data, format_table(["child", "parent", "rank", "score"], rows))


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "decode": cmd_decode,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Main entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = load_config(args.config, _overrides(args))
        level = "DEBUG" if args.verbose else "WARNING" if args.quiet else config.runtime.log_level
        configure_logging(level)
        COMMANDS[args.command](Application(config), args)
    except (FormParserError, OSError) as e:
        logger.debug("{} failed: {!r}", args.command, e)
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
