"""Batch evaluation: run episodes over QA datasets and aggregate EM/F1.

EM here is the containment match (gold contained in the normalized
prediction). Scores are percentages; the average row is the unweighted mean
over datasets, whatever their sizes.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .policy import Generator, Policy
from .retriever import Retriever
from .rewards import GoldAnswerSet, em_contains, token_f1
from .rollout import EpisodeError, RolloutConfig, Trajectory, finalize_with_generator, run_episode

logger = logging.getLogger(__name__)

MODES = ("end_to_end", "submodule")
FORMATS = ("table", "csv", "json")


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class EvalExample:
    id: str
    question: str
    golden_answers: GoldAnswerSet
    dataset: str = "default"


@dataclass
class ExampleResult:
    example: EvalExample
    prediction: str | None
    em: float
    f1: float
    trajectory: Trajectory | None = None
    error: str | None = None


@dataclass
class MetricsReport:
    per_dataset: dict[str, dict]
    average: dict[str, float]
    mode: str
    errors: list[str] = field(default_factory=list)

    def to_record(self) -> dict:
        return {"mode": self.mode, "per_dataset": self.per_dataset, "average": self.average, "errors": self.errors}

    @classmethod
    def from_record(cls, rec: dict) -> "MetricsReport":
        return cls(rec["per_dataset"], rec["average"], rec["mode"], list(rec.get("errors", [])))


def load_dataset(path: str | Path, name: str | None = None) -> list[EvalExample]:
    """Read ``{"id", "question", "golden_answers": [...]}`` JSON lines.

    The dataset name comes from a record's ``dataset`` field, else *name*,
    else the file stem.
    """
    path = Path(path)
    default_name = name or path.stem
    examples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                question = rec["question"]
                if not isinstance(question, str) or not question.strip():
                    raise ValueError("empty question")
                answers = rec["golden_answers"]
                if isinstance(answers, str) or not isinstance(answers, list):
                    raise ValueError("golden_answers must be a list")
                gold = GoldAnswerSet(tuple(answers))
                examples.append(EvalExample(str(rec["id"]), question, gold, rec.get("dataset", default_name)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
                raise DatasetError(f"{path}: line {lineno}: {e}") from e
    if not examples:
        logger.warning("dataset %s is empty", path)
    return examples


def _run_one(example, policy, retriever, generator, config, mode) -> ExampleResult:
    try:
        traj = run_episode(example.question, policy, retriever, config)
        if mode == "submodule":
            prediction = finalize_with_generator(traj, example.question, generator)
        else:
            prediction = traj.agent_answer
    except EpisodeError as e:
        logger.warning("example %s failed: %s", example.id, e)
        return ExampleResult(example, None, 0.0, 0.0, e.partial, str(e))
    text = prediction or ""
    gold = example.golden_answers
    return ExampleResult(example, prediction, float(em_contains(text, gold)), token_f1(text, gold), traj)


def run_examples(
    examples: Sequence[EvalExample],
    policy: Policy,
    retriever: Retriever,
    generator: Generator | None = None,
    config: RolloutConfig | None = None,
    mode: str = "end_to_end",
    concurrency: int = 8,
) -> list[ExampleResult]:
    """Run every example, in parallel up to *concurrency*; results sorted by example id."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "submodule" and generator is None:
        raise ValueError("submodule mode needs a generator")
    config = config or RolloutConfig()
    with ThreadPoolExecutor(max_workers=max(1, concurrency)) as pool:
        results = list(pool.map(lambda ex: _run_one(ex, policy, retriever, generator, config, mode), examples))
    return sorted(results, key=lambda r: (r.example.dataset, r.example.id))


def aggregate(results: Sequence[ExampleResult], mode: str, fail_open: bool = True) -> MetricsReport:
    """Percent EM/F1 per dataset and their unweighted average.

    Failed episodes score zero when *fail_open*; otherwise they are dropped
    from the means (but still listed in ``errors``).
    """
    buckets: dict[str, list[ExampleResult]] = {}
    errors = []
    for r in results:
        if r.error is not None:
            errors.append(f"{r.example.id}: {r.error}")
            if not fail_open:
                continue
        buckets.setdefault(r.example.dataset, []).append(r)
    per_dataset = {}
    for name in sorted(buckets):
        rs = buckets[name]
        per_dataset[name] = {
            "em": 100.0 * sum(r.em for r in rs) / len(rs),
            "f1": 100.0 * sum(r.f1 for r in rs) / len(rs),
            "n": len(rs),
        }
    if per_dataset:
        average = {
            "em": sum(d["em"] for d in per_dataset.values()) / len(per_dataset),
            "f1": sum(d["f1"] for d in per_dataset.values()) / len(per_dataset),
        }
    else:
        average = {"em": 0.0, "f1": 0.0}
    return MetricsReport(per_dataset, average, mode, errors)


def evaluate(
    examples: Sequence[EvalExample],
    policy: Policy,
    retriever: Retriever,
    generator: Generator | None = None,
    config: RolloutConfig | None = None,
    mode: str = "end_to_end",
    concurrency: int = 8,
    fail_open: bool = True,
) -> MetricsReport:
    results = run_examples(examples, policy, retriever, generator, config, mode, concurrency)
    return aggregate(results, mode, fail_open)


def format_table(report: MetricsReport) -> str:
    names = list(report.per_dataset) + ["Average"]
    rows = [dict(report.per_dataset[n]) for n in report.per_dataset] + [report.average]
    width = max([10] + [len(n) for n in names])
    header1 = "Mode".ljust(12) + "".join(n.center(2 * width + 1) for n in names)
    header2 = report.mode.ljust(12) + "".join("EM".rjust(width) + " " + "F1".rjust(width) for _ in names)
    values = " " * 12 + "".join(f"{r['em']:.2f}".rjust(width) + " " + f"{r['f1']:.2f}".rjust(width) for r in rows)
    return "\n".join(line.rstrip() for line in (header1, header2, values)) + "\n"


def format_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dataset", "mode", "n", "em", "f1"])
    for name, d in report.per_dataset.items():
        w.writerow([name, report.mode, d["n"], f"{d['em']:.2f}", f"{d['f1']:.2f}"])
    n_total = sum(d["n"] for d in report.per_dataset.values())
    w.writerow(["Average", report.mode, n_total, f"{report.average['em']:.2f}", f"{report.average['f1']:.2f}"])
    return buf.getvalue()


def format_json(report: MetricsReport) -> str:
    return json.dumps(report.to_record(), indent=2, sort_keys=True) + "\n"


def emit_report(report: MetricsReport, fmt: str, path: str | Path | None = None) -> str:
    """Serialize *report* as ``table``, ``csv`` or ``json``; write to *path* when given."""
    formatters = {"table": format_table, "csv": format_csv, "json": format_json}
    if fmt not in formatters:
        raise ValueError(f"format must be one of {FORMATS}, got {fmt!r}")
    text = formatters[fmt](report)
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_report(path: str | Path) -> MetricsReport:
    return MetricsReport.from_record(json.loads(Path(path).read_text(encoding="utf-8")))
