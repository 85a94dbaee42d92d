import numpy as np
import pytest

from asklearn import memnet as M
from asklearn import train_offline as T
from asklearn.pipeline import asker_config, corpus, shared_vocabulary
from asklearn.simulator import POSITIVE_FEEDBACK, DatasetSpec, StudentScript, generate_dataset


def _cfg(**kw):
    base = dict(d=16, epochs=2, seed=0)
    base.update(kw)
    return M.MemN2NConfig(**base)


@pytest.fixture(scope="module")
def task3(small_kb):
    train = corpus(3, "AQ", "train", small_kb, 300)
    dev = corpus(3, "AQ", "dev", small_kb, 60)
    return train, dev, shared_vocabulary(small_kb, [train])


def test_all_reward_zero_corpus_is_rejected(small_kb):
    _, eps = generate_dataset(DatasetSpec(3, "QA", "train", 20, 0, StudentScript(0.0, 0.5)),
                              small_kb)
    with pytest.raises(T.TrainingError):
        T.train_rbi(eps, _cfg())


def test_rbi_ignores_reward_zero(task3):
    train, _, vocab = task3
    model = M.MemN2N(vocab, _cfg())
    zero = [ep for ep in train if ep.reward == 0]
    for ep in zero:
        assert T.rbi_target(M.encode_episode(model, ep)) is None
    ones = [ep for ep in train if ep.reward == 1][:5]
    a = T.train_rbi(ones, _cfg(epochs=1), vocab=vocab)
    b = T.train_rbi(ones + zero[:20], _cfg(epochs=1), vocab=vocab)
    for name in a.params.names():
        assert np.array_equal(a.params[name], b.params[name])


def test_lambda_zero_is_rbi(task3):
    train, dev, vocab = task3
    a = T.train_rbi(train[:80], _cfg(), dev=dev, vocab=vocab)
    b = T.train_rbi_fp(train[:80], _cfg(), 0.0, dev=dev, vocab=vocab)
    assert a.params.equal(b.params) and a.history == b.history
    with pytest.raises(T.TrainingError):
        T.train_rbi_fp(train, _cfg(), -1.0, vocab=vocab)


def test_loss_drops_over_first_epochs(small_kb):
    train = corpus(3, "AQ", "train", small_kb, 500)
    held = corpus(3, "AQ", "dev", small_kb, 100)
    vocab = shared_vocabulary(small_kb, [train])
    model = M.MemN2N(vocab, _cfg(epochs=1))
    items = [(e, e.gold[0]) for e in (M.encode_episode(model, ep) for ep in held) if e.gold]

    def held_loss():
        return sum(M.answer_loss(model, e, g, backward=False)[0] for e, g in items)

    losses = [held_loss()]
    for _ in range(3):
        T.train_rbi(train, _cfg(epochs=1), vocab=vocab, model=model)
        losses.append(held_loss())
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_training_is_deterministic_and_checkpoint_reproduces(task3, tmp_path):
    train, dev, vocab = task3
    a = T.train_rbi_fp(train[:100], _cfg(), 1.0, dev=dev, vocab=vocab)
    b = T.train_rbi_fp(train[:100], _cfg(), 1.0, dev=dev, vocab=vocab)
    assert a.params.equal(b.params)
    acc = T.accuracy_on(a, *T.encode_eval(a, dev))
    assert 0.0 <= acc <= 1.0
    a.save(tmp_path / "ck")
    back = M.MemN2N.load(tmp_path / "ck")
    assert T.accuracy_on(back, *T.encode_eval(back, dev)) == acc


def test_fp_needs_questions(small_kb):
    qa = corpus(3, "QA", "train", small_kb, 30)
    with pytest.raises(T.TrainingError):
        T.train_rbi_fp(qa, _cfg(), 1.0)


def test_feedback_prediction_beats_majority(desk_kb):
    train = corpus(2, "AQ", "train", desk_kb, 2000)
    dev = corpus(2, "AQ", "dev", desk_kb, 300)
    vocab = shared_vocabulary(desk_kb, [train])
    model = T.train_rbi_fp(train, _cfg(d=32, epochs=10), 1.0, vocab=vocab)
    # the six phrasings per polarity are drawn uniformly, so score the polarity
    hits, truth = 0, []
    for ep in dev:
        enc, asked, target = T.fp_item(model, ep, model.pool)
        t, _ = M.forward_feedback(model, enc, asked, model.pool)
        pred = model.pool.responses[int(np.argmax(t))]
        truth.append(model.pool.responses[target] in POSITIVE_FEEDBACK)
        hits += (pred in POSITIVE_FEEDBACK) == truth[-1]
    majority = max(sum(truth), len(truth) - sum(truth)) / len(truth)
    assert hits / len(truth) > majority
    assert 0.0 <= T.feedback_accuracy(model, dev) <= 1.0


def test_asker_rejects_fixed_question_tasks(small_kb):
    tr = corpus(1, "AQ", "train", small_kb, 10)
    with pytest.raises(T.TrainingError, match="fixed question form"):
        T.train_question_asker(tr, _cfg(), task=1)


def test_asker_learns_task4(desk_kb):
    train = corpus(4, "AQ", "train", desk_kb, 2000)
    dev = corpus(4, "AQ", "dev", desk_kb, 500)
    test = corpus(4, "AQ", "test", desk_kb, 1000)
    vocab = shared_vocabulary(desk_kb, [train])
    asker = T.train_question_asker(train, asker_config(epochs=10), dev=dev, vocab=vocab)
    items = T.asker_items(asker, test, require_relevant=False)
    assert T.asker_accuracy(asker, items) > 0.7
    picks = [M.predict_question(asker, enc) for enc, _ in items[:20]]
    assert picks == [M.predict_question(asker, enc) for enc, _ in items[:20]]


def test_select_best():
    runs = [T.TrainRun(1, "AQ", "context", s, a) for s, a in ((0, 0.3), (1, 0.7), (2, 0.5))]
    assert T.select_best(runs).seed == 1
    assert T.select_best(runs[:1]) is runs[0]
    tie = [T.TrainRun(1, "AQ", "context", 4, 0.7), T.TrainRun(1, "AQ", "context", 2, 0.7)]
    assert T.select_best(tie).seed == 2
    with pytest.raises(T.TrainingError):
        T.select_best([])


def test_select_best_at_least_median(small_kb):
    train = corpus(2, "AQ", "train", small_kb, 150)
    dev = corpus(2, "AQ", "dev", small_kb, 60)
    vocab = shared_vocabulary(small_kb, [train])
    runs = []
    for seed in range(4):
        m = T.train_rbi(train, _cfg(seed=seed, epochs=1), dev=dev, vocab=vocab)
        runs.append(T.TrainRun(2, "AQ", "vanilla", seed,
                                T.accuracy_on(m, *T.encode_eval(m, dev))))
    assert T.select_best(runs).dev_acc >= float(np.median([r.dev_acc for r in runs]))


def test_run_ledger(tmp_path):
    path = tmp_path / "ledger.csv"
    runs = [T.TrainRun(2, "AQ", "fp", 0, 0.5, "ck/a")]
    T.write_run_ledger(path, runs)
    T.write_run_ledger(path, runs, append=True)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(T.LEDGER_FIELDS)
    assert lines[1:] == ["2,AQ,fp,0,0.500000,ck/a"] * 2


def test_train_model_picks_best_weight_on_dev(task3, monkeypatch):
    from asklearn import pipeline as P
    train, dev, vocab = task3
    seen = []
    real = P.train_rbi_fp

    def spy(corpus, config, lam, **kw):
        seen.append(lam)
        return real(corpus, config, lam, **kw)

    monkeypatch.setattr(P, "train_rbi_fp", spy)
    accs = {}
    for lam in (0.5, 2.0):
        accs[lam] = P.train_model("fp", train[:80], dev, vocab, _cfg(), lam)[1]
    model, acc = P.train_model("fp", train[:80], dev, vocab, _cfg(), (0.5, 2.0))
    assert acc == max(accs.values())
    assert P.train_model("context", train[:80], dev, vocab, _cfg(), (0.5, 2.0))[0].fp is False
    assert seen[-1] == 0.0
