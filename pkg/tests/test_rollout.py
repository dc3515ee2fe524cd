import io
import json
from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from agentrag.policy import ExtractiveGenerator, GenerationChunk, Policy, ScriptedGenerator, ScriptedPolicy, TransportError
from agentrag.protocol import parse_doc_set, validate_format
from agentrag.corpus import load_corpus
from agentrag.retriever import Bm25Retriever, RetrieverError
from agentrag.rollout import (
    RETRY_PROMPT,
    EpisodeError,
    RolloutConfig,
    Trajectory,
    aggregate_context,
    dumps_record,
    finalize_with_generator,
    read_traces,
    render_prompt,
    run_episode,
    write_traces,
)

GOLDEN = ["answer_path", "retry_path", "budget_exhausted", "multi_query_dedup", "empty_retrieval"]


def load_golden(fixtures, name):
    return json.loads((fixtures / "golden" / f"{name}.json").read_text(encoding="utf-8"))


def play(case, retriever):
    policy = ScriptedPolicy(case["segments"])
    return run_episode(case["question"], policy, retriever, RolloutConfig(max_turns=case["max_turns"]))


@pytest.mark.parametrize("name", GOLDEN)
def test_golden_trace(fixtures, fruit_retriever, name):
    case = load_golden(fixtures, name)
    traj = play(case, fruit_retriever)
    assert traj.full_text.encode() == case["full_text"].encode()
    assert [p.doc_id for p in traj.info_set] == case["K"]
    assert traj.termination == case["termination"]
    assert traj.agent_answer == case["agent_answer"]
    assert len(traj.turns) == case["n_turns"]


def test_retry_path_turn_kinds(fixtures, fruit_retriever):
    traj = play(load_golden(fixtures, "retry_path"), fruit_retriever)
    assert [t.kind for t in traj.turns] == ["retry", "answer"]
    assert RETRY_PROMPT in traj.full_text


def test_answer_path_turn_fields(fixtures, fruit_retriever):
    traj = play(load_golden(fixtures, "answer_path"), fruit_retriever)
    first = traj.turns[0]
    assert first.plan_text == "Find what an apple is."
    assert first.search.queries == ("apple",)
    assert [p.doc_id for p in first.information.passages] == ["d1"]
    assert first.reflection_text == "Apples are a fruit."
    assert validate_format(traj.full_text).valid


class TestAggregateContext:
    def test_single(self, fruit_retriever):
        assert [p.doc_id for p in aggregate_context(["apple"], fruit_retriever, 1).passages] == ["d1"]

    def test_repeated_query_once(self, fruit_retriever):
        assert [p.doc_id for p in aggregate_context(["apple", "apple"], fruit_retriever, 1).passages] == ["d1"]

    def test_no_hits(self, fruit_retriever):
        assert aggregate_context(["zzz"], fruit_retriever, 1).passages == ()

    def test_query_order_and_depth(self, fruit_retriever):
        block = aggregate_context(["cherry", "apple"], fruit_retriever, 2)
        assert [p.doc_id for p in block.passages] == ["d2", "d1", "d0"]

    def test_query_count_bounds(self, fruit_retriever):
        with pytest.raises(ValueError):
            aggregate_context([], fruit_retriever, 1)
        with pytest.raises(ValueError):
            aggregate_context(["a", "b", "c", "d"], fruit_retriever, 1)

    def test_failure_names_query(self):
        class Broken:
            def search(self, query, k):
                raise OSError("disk gone")

        with pytest.raises(RetrieverError) as err:
            aggregate_context(["apple"], Broken(), 1)
        assert err.value.query == "apple"


SEARCH = "<plan>p</plan>\n<search>\n<query>apple</query>\n</search>"


def test_budget_one_search_only(fruit_retriever):
    traj = run_episode("q?", ScriptedPolicy([SEARCH] * 3), fruit_retriever, RolloutConfig(max_turns=1))
    assert traj.termination == "budget_exhausted" and traj.agent_answer is None
    assert len(traj.turns) == 1


def test_retries_consume_turns(fruit_retriever):
    traj = run_episode("q?", ScriptedPolicy(["prose"] * 5), fruit_retriever, RolloutConfig(max_turns=3))
    assert [t.kind for t in traj.turns] == ["retry"] * 3
    assert traj.full_text == ("prose" + RETRY_PROMPT) * 3
    assert traj.termination == "budget_exhausted"


def test_policy_end(fruit_retriever):
    traj = run_episode("q?", ScriptedPolicy([SEARCH]), fruit_retriever)
    assert traj.termination == "policy_end" and len(traj.turns) == 1


def test_token_limit(fruit_retriever):
    config = RolloutConfig(max_total_tokens=len(render_prompt("q?").split()))
    traj = run_episode("q?", ScriptedPolicy([SEARCH]), fruit_retriever, config)
    assert traj.termination == "token_limit" and traj.turns == []


def test_reported_token_counts_are_used(fruit_retriever):
    class Counting(Policy):
        def generate(self, request):
            return GenerationChunk(SEARCH, "stop", tuple((str(i), -0.1) for i in range(8100)))

    traj = run_episode("q?", Counting(), fruit_retriever, RolloutConfig(max_total_tokens=8192))
    assert traj.termination == "token_limit" and len(traj.turns) == 1


def test_empty_question_rejected(fruit_retriever):
    with pytest.raises(ValueError):
        run_episode("  ", ScriptedPolicy([]), fruit_retriever)


def test_policy_failure_carries_partial(fruit_retriever):
    class Flaky(Policy):
        def __init__(self):
            self.calls = 0

        def generate(self, request):
            self.calls += 1
            if self.calls > 1:
                raise TransportError("connection reset", 3)
            return GenerationChunk(SEARCH, "stop")

    with pytest.raises(EpisodeError) as err:
        run_episode("q?", Flaky(), fruit_retriever)
    partial = err.value.partial
    assert len(partial.turns) == 1 and partial.info_set[0].doc_id == "d1"


def test_prompt_grows_with_context(fruit_retriever):
    seen = []

    class Recording(Policy):
        def __init__(self, steps):
            self.inner = ScriptedPolicy(steps)

        def generate(self, request):
            seen.append(request.prompt)
            return self.inner.generate(request)

    traj = run_episode("q?", Recording([SEARCH, "<answer>x</answer>"]), fruit_retriever)
    assert seen[0] == render_prompt("q?")
    assert seen[1] == render_prompt("q?") + traj.full_text[: len(seen[1]) - len(seen[0])]
    assert seen[1].endswith("</information>")


def test_finalize_with_generator(fixtures, fruit_retriever):
    traj = play(load_golden(fixtures, "answer_path"), fruit_retriever)
    gen = ExtractiveGenerator({traj.question: ["apple"]})
    first = finalize_with_generator(traj, traj.question, gen)
    assert first == "apple" == finalize_with_generator(traj, traj.question, gen)
    assert finalize_with_generator(Trajectory("q"), "q", ScriptedGenerator({})) == "unknown"


def test_trace_record_round_trip(fixtures, fruit_retriever, tmp_path):
    traj = play(load_golden(fixtures, "multi_query_dedup"), fruit_retriever)
    rec = traj.to_record(generator_answer="fruit")
    buf = io.StringIO()
    write_traces([rec], buf)
    path = tmp_path / "t.jsonl"
    path.write_text(buf.getvalue(), encoding="utf-8")
    [back] = read_traces(path)
    assert dumps_record(back) == dumps_record(rec)
    again = Trajectory.from_record(back)
    assert again.full_text == traj.full_text
    assert [p.doc_id for p in parse_doc_set(again)] == ["d1", "d0", "d2"]


def test_read_traces_bad_line(tmp_path):
    p = tmp_path / "t.jsonl"
    p.write_text('{"a": 1}\n{oops\n')
    with pytest.raises(ValueError, match="line 2"):
        read_traces(p)


FRUIT = Bm25Retriever.from_corpus(load_corpus(Path(__file__).parent / "fixtures" / "fruit_corpus.jsonl"))
_segment = st.sampled_from(
    [
        SEARCH,
        "<plan>p</plan><search><query>banana</query><query>cherry</query></search>",
        "<plan>p</plan><search><query>zzz</query></search>",
        "\n<reflection>r</reflection>\n<answer>fruit</answer>",
        "tagless prose",
        "<search>nothing here</search>",
    ]
)


@settings(max_examples=300, deadline=None)
@given(st.lists(_segment, max_size=8), st.integers(1, 6), st.integers(1, 3))
def test_trajectory_invariants(segments, budget, ppq):
    fruit_retriever = FRUIT
    config = RolloutConfig(max_turns=budget, passages_per_query=ppq)
    traj = run_episode("q?", ScriptedPolicy(segments), fruit_retriever, config)
    assert len(traj.turns) <= budget
    assert (traj.termination == "answered") == (traj.agent_answer is not None)
    assert traj.info_set == parse_doc_set(traj)
    rebuilt = ""
    for turn in traj.turns:
        rebuilt += turn.raw_segment
        if turn.search is not None:
            assert turn.information is not None
            expected = aggregate_context(turn.search.queries, fruit_retriever, ppq)
            assert turn.information.passages == expected.passages
            rebuilt += (
                "<information>\n"
                + ("\n\n".join(f'Doc {i} (Title: "{p.title}") {p.text}' for i, p in enumerate(turn.information.passages, 1)) or "No results found.")
                + "\n</information>"
            )
        elif turn.kind == "retry":
            rebuilt += RETRY_PROMPT
    assert rebuilt == traj.full_text
