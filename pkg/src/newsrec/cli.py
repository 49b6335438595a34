"""Command-line entry point.

Subcommands: ``synth`` (synthetic corpus), ``prepare`` (vocabulary +
validation), ``train``, ``eval``, ``ablate`` (all four variants, one
comparison CSV), ``rank`` (single-impression inspection).  Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .data import (
    SyntheticConfig,
    Vocabulary,
    build_vocabulary,
    generate_synthetic_corpus,
    parse_behaviors,
    split_impressions,
    validate_references,
)
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    NewsrecError,
    NumericError,
)
from .evaluation import (
    REPORT_HEADER,
    detail_csv_lines,
    evaluate,
    inspect_ranking,
    ranking_csv_lines,
    report_csv_lines,
    run_ablation,
)
from .training import (
    VARIANTS,
    TrainConfig,
    coerce_config_value,
    load_checkpoint,
    load_config_file,
    prepare_articles,
    resolve_config,
    save_checkpoint,
    train,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(message)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per config key, same names, overriding the config file."""
    for f in dataclasses.fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")

        def parse(raw: str, _name: str = f.name):
            return coerce_config_value(_name, raw)

        parser.add_argument(flag, type=parse, default=None, metavar="V")


def _resolved_config(args: argparse.Namespace) -> TrainConfig:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {
        f.name: getattr(args, f.name)
        for f in dataclasses.fields(TrainConfig)
        if getattr(args, f.name, None) is not None
    }
    return resolve_config(file_values, overrides)


def _print_config(pairs: dict) -> None:
    print("# resolved config")
    for key in sorted(pairs):
        print(f"{key}={pairs[key]}")


def _read_lines(path: str) -> list[str]:
    try:
        return Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _write_lines(path: str, lines: list[str]) -> None:
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _parse_flags(pairs: list[str]) -> dict[str, str]:
    flags: dict[str, str] = {}
    for pair in pairs:
        news_id, sep, kind = pair.partition("=")
        if not sep or kind not in ("clicked", "clickbait") or not news_id:
            raise UsageError(f"--flag expects NEWSID=clicked|clickbait, got {pair!r}")
        flags[news_id] = kind
    return flags


# -- subcommands -------------------------------------------------------------


def _cmd_synth(args: argparse.Namespace) -> int:
    file_values = load_config_file(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else int(file_values.get("seed", 0))
    cfg = SyntheticConfig(
        n_users=args.users,
        n_news=args.news_count,
        n_topics=args.topics,
        clickbait_rate=args.clickbait_rate,
        seed=seed,
        impressions_per_user=args.impressions_per_user,
        candidates_per_impression=args.candidates_per_impression,
    )
    _print_config(dataclasses.asdict(cfg))
    corpus = generate_synthetic_corpus(cfg)
    paths = corpus.write(args.out)
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return 0


def _cmd_prepare(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    _print_config(config.to_dict())
    news_lines = _read_lines(args.news)
    behavior_lines = _read_lines(args.behaviors)
    vocab = build_vocabulary(
        news_lines,
        config.vocab_min_freq,
        use_gen_column=config.use_gen_title_column,
        cap=config.vocab_cap,
    )
    index = prepare_articles(config, vocab, news_lines)
    impressions = parse_behaviors(behavior_lines, max_history=config.max_history)
    validate_references(impressions, index)
    positives = sum(label for imp in impressions for _, label in imp.candidates)
    print(f"news={len(index)} impressions={len(impressions)} "
          f"vocab={len(vocab)} positives={positives}")
    if args.out:
        _write_lines(args.out, vocab.tokens)
        print(f"wrote vocabulary: {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    _print_config(config.to_dict())
    news_lines = _read_lines(args.news)
    behavior_lines = _read_lines(args.behaviors)
    resume = load_checkpoint(args.resume) if args.resume else None
    result = train(config, news_lines, behavior_lines, resume=resume)
    for row in result.log:
        print(f"epoch={row.epoch} l_rec={row.l_rec:.6f} l_cl={row.l_cl:.6f} "
              f"l_total={row.l_total:.6f}")
    save_checkpoint(result.params, result.state, args.checkpoint)
    print(f"wrote checkpoint: {args.checkpoint}")
    if args.out:
        lines = ["epoch,l_rec,l_cl,l_total"] + [
            f"{r.epoch},{r.l_rec!r},{r.l_cl!r},{r.l_total!r}" for r in result.log
        ]
        _write_lines(args.out, lines)
        print(f"wrote training log: {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    params, state = load_checkpoint(args.checkpoint)
    config = state.config
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    _print_config(config.to_dict())
    vocab = Vocabulary(state.vocab_tokens)
    news_lines = _read_lines(args.news)
    index = prepare_articles(config, vocab, news_lines)
    impressions = parse_behaviors(_read_lines(args.behaviors), max_history=config.max_history)
    validate_references(impressions, index)
    report = evaluate(
        params, index, impressions, VARIANTS[config.variant], with_rows=bool(args.detail)
    )
    print(REPORT_HEADER)
    print(report.csv_row(config.variant))
    if args.out:
        _write_lines(args.out, report_csv_lines([(config.variant, report)]))
        print(f"wrote report: {args.out}")
    if args.detail:
        _write_lines(args.detail, detail_csv_lines(report))
        print(f"wrote per-impression detail: {args.detail}")
    return 0


ABLATION_ORDER = ("full", "no_mfke", "no_c2", "no_abs")


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _resolved_config(args)
    _print_config(config.to_dict())
    news_lines = _read_lines(args.news)
    behavior_lines = _read_lines(args.behaviors)
    if args.eval_behaviors:
        train_lines, eval_lines = behavior_lines, _read_lines(args.eval_behaviors)
    else:
        live = [line for line in behavior_lines if line.strip()]
        train_lines, eval_lines = split_impressions(live, args.eval_frac, config.seed)
    rows = []
    for name in ABLATION_ORDER:
        report, _ = run_ablation(name, config, news_lines, train_lines, eval_lines)
        print(report.csv_row(name))
        rows.append((name, report))
    _write_lines(args.out, report_csv_lines(rows))
    print(f"wrote comparison: {args.out}")
    return 0


def _cmd_rank(args: argparse.Namespace) -> int:
    params, state = load_checkpoint(args.checkpoint)
    config = state.config
    _print_config(config.to_dict())
    vocab = Vocabulary(state.vocab_tokens)
    index = prepare_articles(config, vocab, _read_lines(args.news))
    impressions = parse_behaviors(_read_lines(args.behaviors), max_history=config.max_history)
    matches = [imp for imp in impressions if imp.impression_id == args.impression]
    if not matches:
        raise DataError(f"impression id {args.impression!r} not found")
    validate_references(matches, index)
    flags = _parse_flags(args.flag or [])
    rows, missing = inspect_ranking(params, matches[0], index, VARIANTS[config.variant], flags)
    for nid in missing:
        print(f"warning: flagged news id not among candidates: {nid}", file=sys.stderr)
    lines = ranking_csv_lines(rows)
    for line in lines:
        print(line)
    if args.out:
        _write_lines(args.out, lines)
    return 0


# -- parser ------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="newsrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", metavar="PATH", default=None)

    p = sub.add_parser("synth", help="generate a synthetic clickbait corpus")
    common(p)
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--users", type=int, default=50)
    p.add_argument("--news-count", type=int, default=200)
    p.add_argument("--topics", type=int, default=4)
    p.add_argument("--clickbait-rate", type=float, default=0.0)
    p.add_argument("--impressions-per-user", type=int, default=4)
    p.add_argument("--candidates-per-impression", type=int, default=10)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("prepare", help="build the vocabulary and validate the tables")
    common(p)
    _add_config_flags(p)
    p.add_argument("--news", required=True, metavar="PATH")
    p.add_argument("--behaviors", required=True, metavar="PATH")
    p.add_argument("--out", default=None, metavar="PATH")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p)
    _add_config_flags(p)
    p.add_argument("--news", required=True, metavar="PATH")
    p.add_argument("--behaviors", required=True, metavar="PATH")
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--resume", default=None, metavar="PATH")
    p.add_argument("--out", default=None, metavar="PATH", help="training-log CSV")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a behaviors table")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--news", required=True, metavar="PATH")
    p.add_argument("--behaviors", required=True, metavar="PATH")
    p.add_argument("--out", default=None, metavar="PATH")
    p.add_argument("--detail", default=None, metavar="PATH")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate all four variants")
    common(p)
    _add_config_flags(p)
    p.add_argument("--news", required=True, metavar="PATH")
    p.add_argument("--behaviors", required=True, metavar="PATH")
    p.add_argument("--eval-behaviors", default=None, metavar="PATH")
    p.add_argument("--eval-frac", type=float, default=0.2)
    p.add_argument("--out", required=True, metavar="PATH")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("rank", help="inspect one impression's ranking with flags")
    common(p)
    p.add_argument("--checkpoint", required=True, metavar="PATH")
    p.add_argument("--news", required=True, metavar="PATH")
    p.add_argument("--behaviors", required=True, metavar="PATH")
    p.add_argument("--impression", required=True, metavar="ID")
    p.add_argument("--flag", action="append", metavar="NEWSID=clicked|clickbait")
    p.add_argument("--out", default=None, metavar="PATH")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_rank)

    return parser


def _fail(kind: str, message: str) -> None:
    flat = " ".join(str(message).split())
    print(f"error: {kind}: {flat}", file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        # Non-finite values are detected and reported explicitly; numpy's
        # warning chatter would break the single-line error contract.
        import numpy as np

        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        with np.errstate(all="ignore"):
            return args.func(args)
    except UsageError as exc:
        _fail("usage", str(exc))
        return 1
    except ConfigError as exc:
        _fail("config", str(exc))
        return 1
    except NumericError as exc:
        _fail("numeric", str(exc))
        return 3
    except (DataError, CheckpointError, ContractError) as exc:
        _fail("data", str(exc))
        return 2
    except NewsrecError as exc:  # any remaining package error is a data problem
        _fail("data", str(exc))
        return 2


if __name__ == "__main__":
    sys.exit(main())
