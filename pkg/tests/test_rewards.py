import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metric_cases import CASES
from oracles import ref_em_contains, ref_em_strict, ref_f1, ref_hit, ref_normalize
from agentrag.rewards import (
    GoldAnswerSet,
    em_contains,
    em_strict,
    hit,
    normalize_answer,
    score_trajectory,
    stage1_reward,
    stage2_reward,
    token_f1,
)
from agentrag.rollout import Trajectory

VALID = "<plan>p</plan>\n<search>\n<query>q</query>\n</search><information>\nDoc 1 (Title: \"T\") {info}\n</information>\n<reflection>r</reflection>\n<answer>{ans}</answer>"


def traj(answer="Paris", info="Paris is in France.", valid=True):
    text = VALID.format(info=info, ans=answer)
    if not valid:
        text = text.replace("<plan>p</plan>\n", "")
    return Trajectory("q?", full_text=text, agent_answer=answer)


@pytest.mark.parametrize(
    "text, expected",
    [("The Eiffel Tower!", "eiffel tower"), ("a  b", "b"), ("Obama, Barack", "obama barack"), ("", "")],
)
def test_normalize(text, expected):
    assert normalize_answer(text) == expected


def test_em_strict_examples():
    assert em_strict("Paris", {"paris"}) == 1
    assert em_strict("in Paris, France", ["Paris"]) == 0
    assert em_strict("", ["x"]) == 0


def test_em_contains_examples():
    assert em_contains("in Paris, France", ["Paris"]) == 1
    assert em_contains("Parisian", ["Paris"]) == 1
    assert em_contains("Lyon", ["Paris"]) == 0


def test_token_f1_examples():
    assert token_f1("barack obama", ["obama"]) == pytest.approx(2 / 3, abs=1e-15)
    assert token_f1("Paris", ["Paris"]) == 1.0
    assert token_f1("x y", ["a b"]) == 0.0
    assert token_f1("", ["b"]) == 0.0


def test_f1_is_max_over_golds():
    assert token_f1("new york", ["york", "new york"]) == 1.0


def test_gold_set_validation():
    with pytest.raises(ValueError):
        GoldAnswerSet(())
    with pytest.raises(ValueError):
        GoldAnswerSet(("the",))
    assert GoldAnswerSet.of("x").answers == ("x",)


def test_hit_examples():
    assert hit(traj(answer="dunno", info="It is Paris."), ["Paris"]) == 1
    plan_only = Trajectory("q", full_text="<plan>maybe paris</plan><answer>no</answer>")
    assert hit(plan_only, ["Paris"]) == 1
    assert hit(traj(answer="Lyon", info="Lyon"), ["Paris"]) == 0


def test_stage1_examples():
    assert stage1_reward(traj("Paris"), ["Paris"]) == 1
    assert stage1_reward(traj("in Paris"), ["Paris"]) == 0
    assert stage1_reward(traj("Paris", valid=False), ["Paris"]) == 0
    assert stage1_reward(Trajectory("q", full_text="Paris"), ["Paris"]) == 0


def test_stage2_examples():
    assert stage2_reward(traj(), "Paris", ["Paris"]) == 1.5
    assert stage2_reward(traj(), "Lyon", ["Paris"]) == 0.5
    assert stage2_reward(traj("Lyon", info="Lyon"), "Lyon", ["Paris"]) == 0.0


def test_score_trajectory_breakdown():
    rb = score_trajectory(traj("Paris"), ["Paris"], generator_answer="the city of Paris")
    assert rb.to_record() == {
        "format_ok": True,
        "em_strict": 1,
        "em_contains": 1,
        "f1": 1.0,
        "hit": 1,
        "stage1": 1.0,
        "stage2": 1.5,
    }


def test_score_without_answer():
    rb = score_trajectory(Trajectory("q", full_text="Paris"), ["Paris"])
    assert (rb.em_strict, rb.em_contains, rb.stage1, rb.stage2) == (0, 0, 0.0, 0.5)


@pytest.mark.parametrize("pred, golds, text", CASES)
def test_matches_reference(pred, golds, text):
    assert normalize_answer(pred) == ref_normalize(pred)
    assert em_strict(pred, golds) == ref_em_strict(pred, golds)
    assert em_contains(pred, golds) == ref_em_contains(pred, golds)
    assert token_f1(pred, golds) == ref_f1(pred, golds)
    assert hit(Trajectory("q", full_text=text), golds) == ref_hit(text, golds)


_words = st.text(st.sampled_from("abcdefghtn .,!'-"), max_size=25)
_gold = _words.filter(lambda s: normalize_answer(s) != "")


@settings(max_examples=1000, deadline=None)
@given(_words, st.lists(_gold, min_size=1, max_size=3))
def test_strict_le_contains(pred, golds):
    assert em_strict(pred, golds) <= em_contains(pred, golds)


@settings(max_examples=1000, deadline=None)
@given(_words, st.lists(_gold, min_size=1, max_size=3))
def test_f1_bounds(pred, golds):
    f1 = token_f1(pred, golds)
    assert 0.0 <= f1 <= 1.0
    same = any(sorted(normalize_answer(pred).split()) == sorted(normalize_answer(g).split()) for g in golds)
    assert (f1 == 1.0) == same


@settings(max_examples=1000, deadline=None)
@given(st.text(max_size=40))
def test_normalize_idempotent(text):
    once = normalize_answer(text)
    assert normalize_answer(once) == once


@settings(max_examples=300, deadline=None)
@given(_gold, st.booleans(), st.booleans(), st.booleans())
def test_reward_ranges(gold, valid, correct, in_traj):
    ans = gold if correct else "zq"
    t = traj(ans, info=gold if in_traj else "nothing", valid=valid)
    s1 = stage1_reward(t, [gold])
    s2 = stage2_reward(t, ans, [gold])
    assert s1 in (0.0, 1.0)
    assert s2 in (0.0, 0.5, 1.0, 1.5)
    if t.agent_answer is not None and em_contains(t.agent_answer, [gold]):
        assert hit(t, [gold]) == 1
