import csv
import io
import json
import logging

import pytest

from agentrag.policy import ExtractiveGenerator, Generator, Policy, ScriptedGenerator, ScriptedPolicy, TransportError
from agentrag.rewards import GoldAnswerSet
from agentrag.evalharness import (
    DatasetError,
    EvalExample,
    MetricsReport,
    aggregate,
    emit_report,
    evaluate,
    load_dataset,
    read_report,
    run_examples,
)


def write_lines(path, recs):
    path.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")
    return path


def ex(i, question, gold, dataset="d"):
    return EvalExample(str(i), question, GoldAnswerSet.of(gold), dataset)


class TestLoadDataset:
    def test_two_lines(self, tmp_path):
        p = write_lines(
            tmp_path / "nq.jsonl",
            [{"id": 1, "question": "a?", "golden_answers": ["x"]}, {"id": "2", "question": "b?", "golden_answers": ["y", "z"]}],
        )
        got = load_dataset(p)
        assert [(e.id, e.dataset) for e in got] == [("1", "nq"), ("2", "nq")]
        assert got[1].golden_answers.answers == ("y", "z")

    def test_dataset_field_wins(self, tmp_path):
        p = write_lines(tmp_path / "x.jsonl", [{"id": 1, "question": "a?", "golden_answers": ["x"], "dataset": "hotpotqa"}])
        assert load_dataset(p)[0].dataset == "hotpotqa"

    @pytest.mark.parametrize(
        "rec",
        [
            {"id": 1, "question": "a?", "golden_answers": []},
            {"id": 1, "question": "a?", "golden_answers": "x"},
            {"id": 1, "question": "", "golden_answers": ["x"]},
            {"question": "a?", "golden_answers": ["x"]},
        ],
    )
    def test_bad_record_names_line(self, tmp_path, rec):
        p = write_lines(tmp_path / "x.jsonl", [{"id": 0, "question": "ok?", "golden_answers": ["y"]}, rec])
        with pytest.raises(DatasetError, match="line 2"):
            load_dataset(p)

    def test_empty_file_warns(self, tmp_path, caplog):
        p = tmp_path / "e.jsonl"
        p.write_text("")
        with caplog.at_level(logging.WARNING):
            assert load_dataset(p) == []
        assert "empty" in caplog.text


def answering(answers):
    return ScriptedPolicy([], episodes={q: [f"<answer>{a}</answer>"] for q, a in answers.items()})


def test_all_correct(fruit_retriever):
    exs = [ex(1, "a?", "x"), ex(2, "b?", "y")]
    report = evaluate(exs, answering({"a?": "x", "b?": "y"}), fruit_retriever)
    assert report.per_dataset == {"d": {"em": 100.0, "f1": 100.0, "n": 2}}
    assert report.average == {"em": 100.0, "f1": 100.0}


def test_one_right_one_empty(fruit_retriever):
    report = evaluate([ex(1, "a?", "x"), ex(2, "b?", "y")], answering({"a?": "x"}), fruit_retriever)
    assert report.per_dataset["d"]["em"] == 50.0


def test_average_is_unweighted_over_datasets(fruit_retriever):
    exs = [ex(1, "a?", "x", "big"), ex(2, "b?", "y", "big"), ex(3, "c?", "z", "big"), ex(4, "d?", "w", "small")]
    report = evaluate(exs, answering({"a?": "x", "d?": "w"}), fruit_retriever)
    assert report.per_dataset["big"]["em"] == pytest.approx(100 / 3, abs=1e-9)
    assert report.average["em"] == pytest.approx((100 / 3 + 100) / 2, abs=1e-9)


def test_toyqa_mixed_end_to_end(fixtures, toy_retriever):
    examples = load_dataset(fixtures / "toyqa.jsonl")
    policy = ScriptedPolicy.from_file(fixtures / "toyqa_mixed_policy.json")
    report = evaluate(examples, policy, toy_retriever)
    avg = report.average
    assert avg["em"] == pytest.approx(80.0, abs=0.01)
    assert avg["f1"] == pytest.approx(86.67, abs=0.01)


def test_toyqa_mixed_submodule(fixtures, toy_retriever):
    examples = load_dataset(fixtures / "toyqa.jsonl")
    policy = ScriptedPolicy.from_file(fixtures / "toyqa_perfect_policy.json")
    answers = json.loads((fixtures / "toyqa_mixed_generator.json").read_text())
    report = evaluate(examples, policy, toy_retriever, ScriptedGenerator(answers), mode="submodule")
    assert report.average["em"] == pytest.approx(80.0, abs=0.01)
    assert report.average["f1"] == pytest.approx(86.67, abs=0.01)


def test_end_to_end_never_calls_generator(fixtures, toy_retriever):
    class Exploding(Generator):
        def answer(self, question, passages):
            raise AssertionError("generator called")

    examples = load_dataset(fixtures / "toyqa.jsonl")
    policy = ScriptedPolicy.from_file(fixtures / "toyqa_perfect_policy.json")
    report = evaluate(examples, policy, toy_retriever, Exploding(), mode="end_to_end")
    assert report.average["em"] == 100.0


def test_deterministic_bytes(fixtures, toy_retriever):
    examples = load_dataset(fixtures / "toyqa.jsonl")
    gold = json.loads((fixtures / "toyqa_gold_answers.json").read_text())

    def once(concurrency):
        policy = ScriptedPolicy.from_file(fixtures / "toyqa_perfect_policy.json")
        report = evaluate(examples, policy, toy_retriever, ExtractiveGenerator(gold), mode="submodule", concurrency=concurrency)
        return emit_report(report, "json")

    assert once(1) == once(8)


class _Failing(Policy):
    def generate(self, request):
        raise TransportError("refused", 3)


def test_fail_open_scores_zero(fruit_retriever):
    exs = [ex(1, "a?", "x"), ex(2, "b?", "y")]
    results = run_examples(exs, _Failing(), fruit_retriever)
    assert all(r.error for r in results)
    open_report = aggregate(results, "end_to_end")
    assert open_report.per_dataset["d"] == {"em": 0.0, "f1": 0.0, "n": 2}
    assert len(open_report.errors) == 2
    closed = aggregate(results, "end_to_end", fail_open=False)
    assert closed.per_dataset == {} and len(closed.errors) == 2


def test_mode_validation(fruit_retriever):
    with pytest.raises(ValueError):
        run_examples([ex(1, "a?", "x")], ScriptedPolicy([]), fruit_retriever, mode="bogus")
    with pytest.raises(ValueError):
        run_examples([ex(1, "a?", "x")], ScriptedPolicy([]), fruit_retriever, mode="submodule")


REPORT = MetricsReport(
    {"nq": {"em": 40.0, "f1": 50.123, "n": 5}, "hotpotqa": {"em": 20.0, "f1": 30.0, "n": 3}},
    {"em": 30.0, "f1": 40.0615},
    "submodule",
)


def test_json_round_trip(tmp_path):
    emit_report(REPORT, "json", tmp_path / "r.json")
    assert read_report(tmp_path / "r.json") == REPORT


def test_table_layout():
    lines = emit_report(REPORT, "table").splitlines()
    assert "nq" in lines[0] and "hotpotqa" in lines[0] and "Average" in lines[0]
    assert lines[1].split() == ["submodule"] + ["EM", "F1"] * 3
    assert lines[2].split() == ["40.00", "50.12", "20.00", "30.00", "30.00", "40.06"]


def test_csv_rows():
    rows = list(csv.reader(io.StringIO(emit_report(REPORT, "csv"))))
    assert rows[0] == ["dataset", "mode", "n", "em", "f1"]
    assert [r[0] for r in rows[1:]] == ["nq", "hotpotqa", "Average"]
    assert rows[-1] == ["Average", "submodule", "8", "30.00", "40.06"]


def test_unknown_format():
    with pytest.raises(ValueError):
        emit_report(REPORT, "xml")


def test_unwritable_path(tmp_path):
    with pytest.raises(OSError):
        emit_report(REPORT, "json", tmp_path / "missing" / "r.json")
