"""Agentic retrieval rollouts, evaluation and GRPO trace checks from the command line.

Exit codes: 0 success, 1 runtime failure, 2 missing or unreadable resource,
64 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as cfg
from .corpus import CorpusError, load_corpus
from .evalharness import FORMATS, MODES, DatasetError, aggregate, emit_report, load_dataset, run_examples
from .grpo import GrpoParams, TraceError, grpo_objective, group_advantages, kl_estimate, load_group_traces
from .policy import (
    CompletionClient,
    CompletionGenerator,
    ExtractiveGenerator,
    GenerationError,
    ScriptedGenerator,
    ScriptedPolicy,
)
from .protocol import parse_doc_set, validate_format
from .retriever import (
    Bm25Params,
    Bm25Retriever,
    IndexLoadError,
    RemoteRetriever,
    build_index,
    load_index,
    save_index,
)
from .rewards import GoldAnswerSet, score_trajectory
from .rollout import EpisodeError, Trajectory, dumps_record, finalize_with_generator, read_traces, run_episode

logger = logging.getLogger("agentrag")

EXIT_OK, EXIT_FAIL, EXIT_RESOURCE, EXIT_USAGE = 0, 1, 2, 64


class UsageError(Exception):
    pass


class ResourceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration overrides")
    g.add_argument("--config", help="JSON configuration file")
    g.add_argument("--corpus", help="corpus JSON-lines file")
    g.add_argument("--index", help="BM25 index file")
    g.add_argument("--retriever-url", help="remote retriever URL instead of the embedded index")
    g.add_argument("--policy-script", help="scripted policy file")
    g.add_argument("--policy-endpoint", help="OpenAI-compatible base URL for the policy")
    g.add_argument("--policy-model")
    g.add_argument("--generator-kind", choices=("scripted", "extractive", "remote"))
    g.add_argument("--generator-answers", help="answers file for scripted/extractive generators")
    g.add_argument("--generator-endpoint")
    g.add_argument("--generator-model")
    g.add_argument("--max-turns", type=int)
    g.add_argument("--passages-per-query", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="agentrag", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="build and save a BM25 index")
    _add_backend_flags(p)
    p.add_argument("--k1", type=float, default=1.2)
    p.add_argument("--b", type=float, default=0.75)

    p = sub.add_parser("run", help="run one episode")
    _add_backend_flags(p)
    p.add_argument("question")
    p.add_argument("--gold", action="append", help="gold answer (repeatable); prints rewards")
    p.add_argument("--trace-out", help="append the trace record to this file")

    p = sub.add_parser("eval", help="evaluate a dataset")
    _add_backend_flags(p)
    p.add_argument("dataset", nargs="+")
    p.add_argument("--mode", choices=MODES, default="end_to_end")
    p.add_argument("--format", dest="formats", action="append", choices=FORMATS)
    p.add_argument("--out-dir", help="write report.<ext> files here (stdout otherwise)")
    p.add_argument("--traces", help="write one trace record per example to this file")
    p.add_argument("--concurrency", type=int, default=8)
    p.add_argument("--fail-closed", action="store_true", help="drop failed episodes from means")

    p = sub.add_parser("grpo-check", help="evaluate GRPO math on group trace files")
    p.add_argument("traces")
    p.add_argument("--epsilon", type=float, default=0.2)
    p.add_argument("--beta", type=float, default=0.001)
    p.add_argument("--sigma-floor", type=float, default=1e-8)

    p = sub.add_parser("trace-validate", help="check trajectory trace records")
    p.add_argument("traces")
    return parser


def _config_from_args(args) -> cfg.AppConfig:
    try:
        conf = cfg.load_config(args.config)
    except FileNotFoundError as e:
        raise ResourceError(f"config file not found: {args.config}") from e
    except (json.JSONDecodeError, cfg.ConfigError) as e:
        raise UsageError(f"bad config: {e}") from e
    changes = {}
    if args.corpus:
        changes["corpus_path"] = args.corpus
    if args.index:
        changes["index_path"] = args.index
    if args.retriever_url:
        changes["retriever_url"] = args.retriever_url
    if args.policy_script:
        changes["policy"] = cfg.BackendConfig("scripted", path=args.policy_script)
    elif args.policy_endpoint:
        changes["policy"] = cfg.BackendConfig("remote", endpoint=args.policy_endpoint, model=args.policy_model)
    if args.generator_kind or args.generator_answers or args.generator_endpoint:
        base = conf.generator or cfg.BackendConfig()
        kind = args.generator_kind or ("remote" if args.generator_endpoint else base.kind)
        changes["generator"] = cfg.BackendConfig(
            kind,
            path=args.generator_answers or base.path,
            endpoint=args.generator_endpoint or base.endpoint,
            model=args.generator_model or base.model,
        )
    rollout = {}
    if args.max_turns is not None:
        rollout["max_turns"] = args.max_turns
    if args.passages_per_query is not None:
        rollout["passages_per_query"] = args.passages_per_query
    try:
        if rollout:
            changes["rollout"] = replace(conf.rollout, **rollout)
        conf = replace(conf, **changes)
        cfg.validate(conf)
    except (ValueError, cfg.ConfigError) as e:
        raise UsageError(str(e)) from e
    return conf


def _require_file(path: str | None, what: str) -> Path:
    if not path:
        raise UsageError(f"no {what} configured")
    p = Path(path)
    if not p.is_file():
        raise ResourceError(f"{what} not found: {path}")
    return p


def _read_json(path: Path, what: str):
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ResourceError(f"{what} {path} is not valid JSON: {e}") from e


def _make_retriever(conf: cfg.AppConfig):
    if conf.retriever_url:
        return RemoteRetriever(conf.retriever_url)
    corpus = load_corpus(_require_file(conf.corpus_path, "corpus file"))
    try:
        index = load_index(_require_file(conf.index_path, "index file"))
    except IndexLoadError as e:
        raise ResourceError(str(e)) from e
    try:
        return Bm25Retriever(index, corpus)
    except ValueError as e:
        raise ResourceError(f"index {conf.index_path} does not match corpus {conf.corpus_path}") from e


def _make_policy(conf: cfg.AppConfig):
    b = conf.policy
    if b.kind == "remote":
        return CompletionClient(b.endpoint, b.model, conf.api_key)
    path = _require_file(b.path, "policy script")
    try:
        return ScriptedPolicy.from_file(path)
    except json.JSONDecodeError as e:
        raise ResourceError(f"policy script {path} is not valid JSON: {e}") from e


def _make_generator(conf: cfg.AppConfig):
    b = conf.generator
    if b is None:
        return None
    if b.kind == "remote":
        return CompletionGenerator(CompletionClient(b.endpoint, b.model, conf.api_key))
    data = _read_json(_require_file(b.path, "generator answers file"), "generator answers file")
    if b.kind == "extractive":
        return ExtractiveGenerator({q: [a] if isinstance(a, str) else a for q, a in data.items()})
    return ScriptedGenerator(data)


def cmd_index(args) -> int:
    conf = _config_from_args(args)
    corpus = load_corpus(_require_file(conf.corpus_path, "corpus file"))
    if not conf.index_path:
        raise UsageError("no index path configured")
    try:
        params = Bm25Params(args.k1, args.b)
    except ValueError as e:
        raise UsageError(str(e)) from e
    index = build_index(corpus, params)
    try:
        save_index(index, conf.index_path)
    except OSError as e:
        raise ResourceError(f"cannot write index {conf.index_path}: {e.strerror or e}") from e
    print(f"indexed {index.doc_count} documents")
    print(f"avg_doc_length {index.avg_doc_length:.4f}")
    return EXIT_OK


def _print_trajectory(traj: Trajectory, generator_answer: str | None) -> None:
    print(traj.full_text)
    print("---")
    print(f"termination: {traj.termination}")
    print(f"agent answer: {traj.agent_answer if traj.agent_answer is not None else '(none)'}")
    if generator_answer is not None:
        print(f"generator answer: {generator_answer}")


def _write_trace(path: str | None, record: dict) -> None:
    if not path:
        return
    try:
        with open(path, "a", encoding="utf-8") as f:
            f.write(dumps_record(record) + "\n")
    except OSError as e:
        raise ResourceError(f"cannot write trace {path}: {e.strerror or e}") from e


def cmd_run(args) -> int:
    conf = _config_from_args(args)
    retriever = _make_retriever(conf)
    policy = _make_policy(conf)
    generator = _make_generator(conf)
    try:
        gold = GoldAnswerSet.of(args.gold) if args.gold else None
    except ValueError as e:
        raise UsageError(str(e)) from e
    try:
        traj = run_episode(args.question, policy, retriever, conf.rollout)
    except EpisodeError as e:
        _write_trace(args.trace_out, e.partial.to_record())
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    generator_answer = None
    if generator is not None:
        try:
            generator_answer = finalize_with_generator(traj, args.question, generator)
        except GenerationError as e:
            _write_trace(args.trace_out, traj.to_record())
            print(f"error: generator failed: {e}", file=sys.stderr)
            return EXIT_FAIL
    rewards = score_trajectory(traj, gold, generator_answer).to_record() if gold else None
    _print_trajectory(traj, generator_answer)
    if rewards is not None:
        for k, v in rewards.items():
            print(f"{k}: {v}")
    _write_trace(args.trace_out, traj.to_record(generator_answer, rewards))
    return EXIT_OK


def cmd_eval(args) -> int:
    conf = _config_from_args(args)
    examples = []
    for path in args.dataset:
        p = _require_file(path, "dataset")
        try:
            examples.extend(load_dataset(p))
        except DatasetError as e:
            raise ResourceError(str(e)) from e
    formats = args.formats or ["table"]
    if not examples:
        logger.warning("no examples to evaluate; emitting an empty report")
        results = []
    else:
        retriever = _make_retriever(conf)
        policy = _make_policy(conf)
        generator = _make_generator(conf)
        if args.mode == "submodule" and generator is None:
            raise UsageError("submodule mode needs a generator")
        results = run_examples(examples, policy, retriever, generator, conf.rollout, args.mode, args.concurrency)
    report = aggregate(results, args.mode, fail_open=not args.fail_closed)
    ext = {"table": "txt", "csv": "csv", "json": "json"}
    for fmt in formats:
        if args.out_dir:
            out = Path(args.out_dir)
            try:
                out.mkdir(parents=True, exist_ok=True)
                emit_report(report, fmt, out / f"report.{ext[fmt]}")
            except OSError as e:
                raise ResourceError(f"cannot write report to {out}: {e.strerror or e}") from e
        else:
            sys.stdout.write(emit_report(report, fmt))
    if args.traces:
        try:
            with open(args.traces, "w", encoding="utf-8") as f:
                for r in results:
                    if r.trajectory is None:
                        continue
                    rec = r.trajectory.to_record(r.prediction if args.mode == "submodule" else None)
                    rec["id"] = r.example.id
                    f.write(dumps_record(rec) + "\n")
        except OSError as e:
            raise ResourceError(f"cannot write traces {args.traces}: {e.strerror or e}") from e
    for err in report.errors:
        print(f"error: {err}", file=sys.stderr)
    return EXIT_FAIL if report.errors else EXIT_OK


def _fmt_list(xs) -> str:
    return "[" + ", ".join(f"{x:.4f}" for x in xs) + "]"


def cmd_grpo_check(args) -> int:
    path = _require_file(args.traces, "group trace file")
    try:
        params = GrpoParams(args.epsilon, args.beta, args.sigma_floor)
    except ValueError as e:
        raise UsageError(str(e)) from e
    try:
        groups = load_group_traces(path)
    except TraceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    for i, g in enumerate(groups):
        adv = group_advantages(g.rewards, params.sigma_floor)
        try:
            objective, diag = grpo_objective(g, adv, params)
        except TraceError as e:
            print(f"error: record {i}: {e}", file=sys.stderr)
            return EXIT_FAIL
        kls = [kl_estimate(t) for t in g.rollouts if t.logp_ref is not None]
        print(f"group {i} ({g.question_id or 'unnamed'})")
        print(f"  rewards: {_fmt_list(g.rewards)}")
        print(f"  advantages: {_fmt_list(adv)}")
        print(f"  objective: {objective:.6f}")
        print(f"  kl: {diag.kl:.6f}")
        if kls:
            print(f"  kl per rollout: {_fmt_list(kls)}")
        print(f"  clip_fraction: {diag.clip_fraction:.4f}")
        print(f"  mean_ratio: {diag.mean_ratio:.4f}")
        print(f"  tokens: {diag.n_tokens}")
    return EXIT_OK


def cmd_trace_validate(args) -> int:
    path = _require_file(args.traces, "trace file")
    try:
        records = read_traces(path)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL
    failures = 0
    for i, rec in enumerate(records):
        problems = []
        try:
            traj = Trajectory.from_record(rec)
        except (KeyError, TypeError, ValueError) as e:
            print(f"record {i}: unreadable ({e})")
            failures += 1
            continue
        report = validate_format(traj.full_text)
        problems += [f"{v.rule}@{v.position}" for v in report.violations]
        if [p.text for p in parse_doc_set(traj)] != [p.text for p in traj.info_set]:
            problems.append("info-set-mismatch")
        if (traj.termination == "answered") != (traj.agent_answer is not None):
            problems.append("termination-mismatch")
        if problems:
            failures += 1
            print(f"record {i}: invalid: {', '.join(problems)}")
        else:
            print(f"record {i}: ok")
    return EXIT_FAIL if failures else EXIT_OK


COMMANDS = {
    "index": cmd_index,
    "run": cmd_run,
    "eval": cmd_eval,
    "grpo-check": cmd_grpo_check,
    "trace-validate": cmd_trace_validate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:  # usage errors and --help
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ResourceError, FileNotFoundError, PermissionError, IsADirectoryError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    except CorpusError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RESOURCE
    except (EpisodeError, GenerationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
