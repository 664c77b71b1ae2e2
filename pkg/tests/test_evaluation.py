import json
import math

import pytest

from kgfollowup.data import RecordError
from kgfollowup.evaluation import (
    Dependencies,
    EmbeddingJudge,
    EvalReport,
    LLMJudge,
    MatchVerdict,
    load_benchmark,
    method_config,
    resolve_method,
    run_benchmark,
    sweep_grid,
    weighted_recall,
)
from kgfollowup.kg import normalize_name
from kgfollowup.linker import LinkerConfig
from kgfollowup.pipeline import PipelineConfig
from kgfollowup.providers import HashingEmbedder

from conftest import scripted_gateway
from oracles import bag_cosine


def _rec(**kw):
    base = {"instance_id": "r1", "conversation": "I feel unwell."}
    base.update(kw)
    return json.dumps(base)


def test_unweighted_dialect_nine_questions():
    rec = _rec(questions=[f"Question {i}?" for i in range(9)])
    [inst] = load_benchmark(rec, dialect="unweighted")
    assert len(inst.truth) == 9 and {w for _, w in inst.truth} == {1.0}


def test_weighted_record_preserved_and_zero_rejected():
    [inst] = load_benchmark(_rec(truth=[{"text": "A?", "weight": 3}, {"text": "B?", "weight": 1}]))
    assert inst.truth == (("A?", 3.0), ("B?", 1.0))
    with pytest.raises(RecordError) as exc:
        load_benchmark(_rec(truth=[{"text": "A?", "weight": 0}]))
    assert exc.value.record_id == "r1"
    with pytest.raises(RecordError):
        load_benchmark(_rec(truth=["A?"]))
    with pytest.raises(RecordError):
        load_benchmark(_rec(truth=[]))
    with pytest.raises(RecordError):
        load_benchmark('{"instance_id": "x", "truth": [{"text": "A?", "weight": 1}]}')
    with pytest.raises(RecordError) as exc:
        load_benchmark(_rec(truth=[{"text": "A?", "weight": 1}]) + "\n{broken")
    assert exc.value.line == 2


def test_conversation_turn_formats():
    rec = _rec(conversation=[{"role": "user", "content": "Hi"}, {"role": "assistant", "content": "Hello"}],
               truth=[{"text": "A?", "weight": 1}])
    [inst] = load_benchmark(rec)
    assert inst.conversation.render() == "Patient: Hi\nDoctor: Hello"


def test_embedding_judge_verbatim_and_empty():
    judge = EmbeddingJudge(HashingEmbedder().embed)
    truth = ["Any fever?", "Any rash?"]
    verdicts, _ = judge.judge(truth + ["Extra question here?"], truth)
    assert all(v.matched for v in verdicts)
    verdicts, _ = judge.judge([], truth)
    assert not any(v.matched for v in verdicts)


def test_embedding_judge_against_full_cosine_table():
    generated = ["How long have you had fever?", "Do you smoke?", "Is the pain sharp?", "Any allergies to drugs?"]
    truth = ["How long have you had the fever?", "Where do you live?", "Have you travelled recently?"]
    table = [[bag_cosine(normalize_name(t).split(), normalize_name(g).split()) for g in generated] for t in truth]
    expected = [max(row) >= 0.85 for row in table]
    assert expected == [True, False, False]
    verdicts, _ = EmbeddingJudge(HashingEmbedder().embed).judge(generated, truth)
    assert [v.matched for v in verdicts] == expected
    assert verdicts[0].matched_by == 0


def test_llm_judge_listwise():
    gw = scripted_gateway([{"role": "judge", "response": "T1: G2\nT2: none\nT3: G9"}])
    verdicts, _ = LLMJudge(gw).judge(["a?", "b?"], ["x?", "y?", "z?"])
    assert [(v.matched, v.matched_by) for v in verdicts] == [(True, 1), (False, None), (False, None)]
    bad = scripted_gateway([{"role": "judge", "response": "whatever"}])
    verdicts, flags = LLMJudge(bad).judge(["a?"], ["x?"])
    assert flags == {"judge_unparseable": True} and not verdicts[0].matched


def _verdicts(mask):
    return [MatchVerdict(i, m, i if m else None) for i, m in enumerate(mask)]


def test_weighted_recall_formula():
    truth = [("a", 3.0), ("b", 1.0)]
    assert weighted_recall(_verdicts([True, False]), truth) == 0.75
    assert weighted_recall(_verdicts([True, True]), truth) == 1.0
    nine = [(str(i), 1.0) for i in range(9)]
    assert weighted_recall(_verdicts([True] * 7 + [False] * 2), nine) == pytest.approx(7 / 9)
    with pytest.raises(ValueError):
        weighted_recall(_verdicts([True]), truth)
    with pytest.raises(ValueError):
        MatchVerdict(0, True)


def test_report_aggregates_and_failures():
    rows = [{"instance_id": "a", "recall": 1.0, "count": 20, "pre_count": 30, "error": None, "theme": "t1"},
            {"instance_id": "b", "recall": 0.5, "count": 20, "pre_count": 28, "error": None, "theme": "t2"},
            {"instance_id": "c", "recall": 0.75, "count": 20, "pre_count": 32, "error": None, "theme": "t1"},
            {"instance_id": "d", "error": "GatewayError: boom"}]
    rep = EvalReport("kg-followup", "embedding@0.85", "h", rows)
    assert rep.mean_recall == 0.75 and rep.mean_count == 20 and rep.mean_pre_count == 30
    assert rep.failures == 1
    assert rep.summary() == "0.75 / 20"
    assert rep.per_theme()["t1"]["recall"] == pytest.approx(0.875)
    rec = rep.to_record()
    assert rec["aggregates"]["n"] == 3 and "per_theme" in rec


def test_methods_and_aliases():
    assert resolve_method("+active-icl") == "active-icl"
    assert resolve_method("followupq-style") == "followupq"
    with pytest.raises(ValueError):
        resolve_method("magic")
    cfg = method_config("zero-shot-k", PipelineConfig(), k=40)
    assert cfg.mode == "zero-shot-k" and cfg.zero_shot_k == 40 and cfg.t == 0
    assert method_config("active-icl", PipelineConfig(), t=8).t == 8


def test_sweep_grid_shape():
    grid = sweep_grid({"method": "random-icl", "t": [0, 1, 2, 4, 8], "seed": [0, 1]})
    assert len(grid) == 10
    assert grid[0] == {"method": "random-icl", "k": None, "t": 0, "seed": 0}


def test_zero_shot_k_emits_exactly_k():
    bench = "\n".join(_rec(instance_id=f"r{i}", conversation=f"case {i}", truth=[{"text": "A?", "weight": 1}])
                      for i in range(3))
    instances = load_benchmark(bench)
    gw = scripted_gateway([{"role": "generate", "contains": "Ask exactly 20",
                            "response": "\n".join(f"{i}. Distinct question number {i}?" for i in range(1, 21))}])
    rep = run_benchmark("zero-shot-k", instances, Dependencies(None, gw, LinkerConfig()),
                        EmbeddingJudge(gw.embed), PipelineConfig(), k=20)
    assert rep.mean_count == 20 and rep.failures == 0
    assert len(gw.calls("generate")) == 3


def test_instance_failure_recorded_not_dropped():
    instances = load_benchmark(_rec(truth=[{"text": "A?", "weight": 1}]))
    gw = scripted_gateway()  # every call misses
    rep = run_benchmark("zero-shot-u", instances, Dependencies(None, gw), EmbeddingJudge(gw.embed), PipelineConfig())
    assert rep.failures == 1 and rep.mean_recall is None
    assert "ScriptMissError" in rep.rows[0]["error"]


def test_icl_method_needs_pool():
    instances = load_benchmark(_rec(truth=[{"text": "A?", "weight": 1}]))
    gw = scripted_gateway()
    with pytest.raises(ValueError, match="pool"):
        run_benchmark("active-icl", instances, Dependencies(None, gw), EmbeddingJudge(gw.embed), PipelineConfig())


def test_mean_of_hand_set_recalls():
    rows = [{"instance_id": str(i), "recall": r, "count": 1, "pre_count": 1, "error": None}
            for i, r in enumerate([1.0, 0.5, 0.75])]
    assert math.isclose(EvalReport("m", "j", "h", rows).mean_recall, 0.75)
