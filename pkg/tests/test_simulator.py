import random
from collections import Counter

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asklearn import simulator as S
from asklearn.kb import Tokenizer


def _gen(kb, task, regime, split="train", n=20, seed=0, **kw):
    return S.generate_dataset(S.DatasetSpec(task, regime, split, n, seed, **kw), kb)


def test_feedback_templates_six_and_six():
    assert len(set(S.POSITIVE_FEEDBACK)) == 6 and len(set(S.NEGATIVE_FEEDBACK)) == 6
    assert "That's correct." in S.POSITIVE_FEEDBACK
    assert "Sorry, that's not right." in S.NEGATIVE_FEEDBACK
    assert not set(S.POSITIVE_FEEDBACK) & set(S.NEGATIVE_FEEDBACK)


def test_feedback_line_uniform():
    rng = random.Random(0)
    for positive, pool in ((True, S.POSITIVE_FEEDBACK), (False, S.NEGATIVE_FEEDBACK)):
        counts = Counter(S.feedback_line(positive, rng) for _ in range(6000))
        assert set(counts) == set(pool)
        assert all(abs(c / 6000 - 1 / 6) < 0.02 for c in counts.values())


def test_history_pad(desk_kb):
    q = desk_kb.entities_of_kind("movie")[0]
    pad = S.history_pad(desk_kb, random.Random(3), {q})
    assert len(pad) == 5
    assert all(l.student is not None and l.reward is None for l in pad)
    tok = Tokenizer.for_kb(desk_kb)
    assert all(q.token not in tok(l.teacher) + tok(l.student) for l in pad)
    assert pad == S.history_pad(desk_kb, random.Random(3), {q})


def test_history_pad_rejects_empty_kb():
    from asklearn.kb import parse_kb
    with pytest.raises(S.SimulatorError):
        S.history_pad(parse_kb(""), random.Random(0))


def _non_kb(ep):
    return [l for l in ep.lines if not l.is_kb]


def test_task1_aq_layout(desk_kb):
    _, eps = _gen(desk_kb, 1, "AQ", "test", n=5)
    for ep in eps:
        lines = _non_kb(ep)
        assert len(lines) == 5 + 4
        q, reply, final, fb = lines[5], lines[6], lines[7], lines[8]
        assert q.student == S.ASK_PARAPHRASE
        assert reply.teacher.startswith("I mean ") and reply.teacher.endswith(".")
        assert final.teacher == q.teacher and final.reward == 1
        assert fb.teacher in S.POSITIVE_FEEDBACK


def test_task3_aq_hint(desk_kb):
    _, eps = _gen(desk_kb, 3, "AQ", n=5)
    for ep in eps:
        qi = ep.question_index
        assert ep.lines[qi].student == S.ASK_HINT
        assert ep.lines[qi + 1].teacher.startswith("It is related to the kb fact that ")


def test_task6_aq_reveal_precedes_history(desk_kb):
    _, eps = _gen(desk_kb, 6, "AQ", n=5)
    for ep in eps:
        lines = _non_kb(ep)
        assert lines[0].student == S.ASK_ANSWER
        assert lines[1].teacher == f"The answer is {', '.join(ep.answer_set)}."
        assert all(l.reward is None for l in lines[2:7])
        assert lines[7].teacher == lines[0].teacher and lines[7].reward is not None


def test_task5_qa_history_first(desk_kb):
    _, eps = _gen(desk_kb, 5, "QA", n=5)
    for ep in eps:
        lines = _non_kb(ep)
        assert len(lines) == 7 and lines[5].reward is not None
        assert ep.question_index is None


def test_task2_candidates_and_relevance(desk_kb):
    _, eps = _gen(desk_kb, 2, "AQ", n=40)
    for ep in eps:
        assert len(ep.candidates) == S.N_VERIFY_CANDIDATES and len(ep.gold_candidates) == 1
        asked = ep.lines[ep.question_index].student
        assert asked in ep.candidates
        assert (ep.candidates.index(asked) in ep.gold_candidates) == ep.asked_relevant
        reply = ep.lines[ep.question_index + 1].teacher
        pool = S.POSITIVE_FEEDBACK if ep.asked_relevant else S.NEGATIVE_FEEDBACK
        assert reply in pool


def test_structure_invariants_all_tasks(desk_kb):
    for task in S.TASKS:
        for regime in ("QA", "AQ"):
            _, eps = _gen(desk_kb, task, regime, n=10, seed=task)
            for ep in eps:
                assert sum(l.reward is not None for l in ep.lines) == 1
                assert all(l.student is None and l.reward is None for l in ep.lines if l.is_kb)
                if regime == "QA":
                    assert ep.question_index is None
                else:
                    asks = [l for l in ep.lines[:ep.answer_index]
                            if l.student and l.student.endswith("?")]
                    assert len(asks) == 1


def test_acquisition_aq_answer_shown_before_reward(desk_kb):
    tok = Tokenizer.for_kb(desk_kb)
    for task in S.ACQUISITION_TASKS:
        _, eps = _gen(desk_kb, task, "AQ", n=20)
        for ep in eps:
            before = {t for l in ep.lines[:ep.answer_index] if not l.is_kb
                      for t in tok(l.teacher)}
            assert all(tok(a)[0] in before for a in ep.answer_set)


def test_test_split_is_perfect(desk_kb):
    _, eps = _gen(desk_kb, 2, "AQ", "test", n=100)
    assert all(ep.reward == 1 and ep.asked_relevant for ep in eps)


def test_empty_dataset_has_header(desk_kb):
    text, eps = _gen(desk_kb, 4, "QA", n=0)
    assert not eps
    assert text.startswith("#corpus\t") and text.count("\n") == 1
    assert S.parse_corpus(text).header["n"] == "0"


def test_spec_validation():
    for bad in [dict(task=0), dict(regime="XY"), dict(split="val"), dict(n_episodes=-1)]:
        args = dict(task=1, regime="QA", split="train", n_episodes=1, seed=0) | bad
        with pytest.raises(S.SimulatorError):
            S.DatasetSpec(**args)
    with pytest.raises(S.SimulatorError):
        S.StudentScript(1.5, 0.5)


def test_episode_i_depends_only_on_seed_and_index(desk_kb):
    text_a, a = _gen(desk_kb, 7, "Mix", n=30, seed=4)
    _, b = _gen(desk_kb, 7, "Mix", n=10, seed=4)
    assert a[:10] == b
    assert _gen(desk_kb, 7, "Mix", n=30, seed=4)[0] == text_a
    assert _gen(desk_kb, 7, "Mix", n=30, seed=5)[0] != text_a


def test_corrupted_tasks_use_split_rules(desk_kb):
    for split, typo in (("train", "movvie"), ("dev", "omvie"), ("test", "mvie")):
        _, eps = _gen(desk_kb, 1, "QA", split, n=200)
        finals = [ep.answer_line.teacher for ep in eps]
        assert any(typo in q for q in finals), split
    _, eps = _gen(desk_kb, 3, "QA", n=50)
    assert not any("movvie" in ep.answer_line.teacher for ep in eps)


def test_hidden_symbols_absent(desk_kb):
    tok = Tokenizer.for_kb(desk_kb)
    for task in (5, 6, 9):
        _, eps = _gen(desk_kb, task, "AQ", n=50)
        for ep in eps:
            kb_toks = {t for l in ep.lines if l.is_kb for t in tok(l.teacher)}
            if task in (5, 9):
                assert tok(ep.question_entity)[0] not in kb_toks
            if task in (6, 9):
                assert not any(tok(a)[0] in kb_toks for a in ep.answer_set)


MINIMAL = "1 Who directed X ?\tBob\t1\n2 That's correct.\n"


def test_parse_minimal_episode():
    eps = S.parse_corpus(MINIMAL)
    assert len(eps) == 1 and eps[0].reward == 1
    assert S.write_corpus(eps) == MINIMAL


def test_parse_hand_encoded_aq_transcript():
    text = ("1 kb: Larry Crowne directed_by Tom Hanks\n"
            "2 kb: Forrest Gump starred_actors Tom Hanks, Robin Wright, Gary Sinise\n"
            "3 Which movvie did Tom Hanks sttar in ?\tWhat do you mean ?\n"
            "4 I mean which film did Tom Hanks appear in.\n"
            "5 Which movvie did Tom Hanks sttar in ?\tForrest Gump\t1\n"
            "6 That's correct.\n")
    ep = S.parse_corpus(text)[0]
    assert ep.question_index == 2 and ep.reward == 1
    assert ep.feedback_after_question() == "I mean which film did Tom Hanks appear in."
    assert S.write_corpus([ep]) == text


@pytest.mark.parametrize("text,msg", [
    ("1 Q\tA\t2\n2 ok\n", "reward must be 0 or 1"),
    ("1 Q\tA\t1\n3 ok\n", "bad numbering"),
    ("2 Q\tA\t1\n", "bad numbering"),
    ("hello\n", "malformed"),
    ("1 Q\tA\n2 ok\n", "exactly one reward"),
    ("#episode\ttask=1\n", "dangling"),
    ("1 Q\tA\t1\tx\n", "too many"),
])
def test_parse_errors(text, msg):
    with pytest.raises(S.CorpusError, match=msg):
        S.parse_corpus(text)


def test_writer_rejects_tabs():
    with pytest.raises(S.CorpusError):
        S.write_corpus([S.Episode([S.DialogueLine("a\tb", "c", 1)])])


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(S.TASKS), st.sampled_from(["QA", "AQ", "Mix"]),
       st.sampled_from(["train", "dev", "test"]), st.integers(0, 2 ** 32))
def test_corpus_round_trip_fuzz(small_kb, task, regime, split, seed):
    text, eps = _gen(small_kb, task, regime, split, n=5, seed=seed)
    parsed = S.parse_corpus(text)
    assert S.write_corpus(parsed) == text
    assert list(parsed) == list(eps)


def test_mix_fraction(desk_kb):
    _, eps = _gen(desk_kb, 3, "Mix", n=2000, decoys=0)
    assert abs(sum(ep.asked for ep in eps) / 2000 - 0.5) < 0.04


def test_link_split_shares(desk_kb):
    counts = Counter(S.link_split(f.head, f.relation, t) for f in desk_kb.facts for t in f.tails)
    total = sum(counts.values())
    assert abs(counts["train"] / total - 0.7) < 0.05
    _, eps = _gen(desk_kb, 6, "QA", "test", n=50)
    for ep in eps:
        q = desk_kb.entity(ep.question_entity)
        for a in ep.answer_set:
            a = desk_kb.entity(a)
            head, tail = (q, a) if q.kind == "movie" else (a, q)
            assert S.link_split(head, ep.relation, tail) == "test"
