"""Accuracy, the train x test regime matrix, TestModelAQ routing and RL cost sweeps."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Optional

from .memnet import encode_choice, encode_episode, forward_answer
from .numerics import RngStream, argmax_first
from .simulator import VERIFICATION_TASKS, Corpus, DialogueLine, feedback_line
from .train_offline import question_position
from .train_rl import (RLConfig, build_pools, encode_rl, evaluate_policies, kb_surfaces,
                       pool_vocabulary, train_rl_grid, check_cost)

log = logging.getLogger(__name__)

TRAIN_REGIMES = ("QA", "AQ", "Mix")
TEST_REGIMES = ("QA", "AQ", "ModelAQ")
REPORT_FIELDS = ("task", "model_kind", "train_regime", "test_regime", "accuracy", "n_test",
                 "seed")


class EvalError(ValueError):
    pass


def model_kind(model):
    return model.config.kind + ("+FP" if model.fp else "")


def gold_tokens(model, ep):
    return {toks[0] for toks in (model.vocab.tokenize(a) for a in ep.answer_set) if toks}


def predicted_answer(model, ep):
    enc = encode_episode(model, ep)
    if enc.n_cand == 0:
        return None
    probs, _ = forward_answer(model, enc)
    return enc.cand_tokens[argmax_first(probs)]


def accuracy(model, corpus):
    """Fraction of episodes whose argmax answer is any member of the answer set."""
    if not len(corpus):
        raise EvalError("accuracy of an empty corpus")
    hits = sum(predicted_answer(model, ep) in gold_tokens(model, ep) for ep in corpus)
    return hits / len(corpus)


# ---------------------------------------------------------------- TestModelAQ

def ask_with_model(asker, ep, rng):
    """Episode where the asker picks the clarification question and the teacher
    answers with positive feedback iff the pick is relevant."""
    qi = question_position(ep)
    if qi is None or not ep.candidates:
        raise EvalError("TestModelAQ needs AQ episodes with candidate questions")
    enc = encode_choice(asker, ep.lines[qi].teacher, ep.lines[:qi], ep.candidates)
    probs, _ = forward_answer(asker, enc)
    pick = argmax_first(probs)
    relevant = pick in ep.gold_candidates
    lines = list(ep.lines)
    lines[qi] = DialogueLine(lines[qi].teacher, ep.candidates[pick])
    lines[qi + 1] = DialogueLine(feedback_line(relevant, rng))
    return replace(ep, lines=lines, asked_relevant=relevant)


def model_aq_corpus(asker, corpus, seed=0):
    stream = RngStream(seed, "model-aq")
    out = Corpus(ask_with_model(asker, ep, stream.python(i)) for i, ep in enumerate(corpus))
    out.header = dict(getattr(corpus, "header", {}) or {})
    return out


# ---------------------------------------------------------------- matrix

@dataclass
class EvalReport:
    task: int
    kind: str
    seed: int
    cells: dict = field(default_factory=dict)
    n_test: dict = field(default_factory=dict)

    def rows(self):
        for (train, test), acc in sorted(self.cells.items(),
                                         key=lambda kv: (TRAIN_REGIMES.index(kv[0][0]),
                                                         TEST_REGIMES.index(kv[0][1]))):
            yield {"task": self.task, "model_kind": self.kind, "train_regime": train,
                   "test_regime": test, "accuracy": acc, "n_test": self.n_test[test],
                   "seed": self.seed}

    def best_cell(self):
        return max(self.cells, key=lambda c: (self.cells[c], c == ("AQ", "AQ")))


def eval_matrix(task, models, tests, asker=None, seed=0):
    """models: train regime -> model; tests: {"QA": corpus, "AQ": corpus}."""
    if not models:
        raise EvalError("eval_matrix needs at least one trained model")
    vocabs = [m.vocab for m in models.values()]
    if any(v != vocabs[0] for v in vocabs[1:]):
        raise EvalError("models were trained with different vocabularies")
    kinds = {model_kind(m) for m in models.values()}
    report = EvalReport(task, "/".join(sorted(kinds)), seed)
    test_sets = dict(tests)
    if task in VERIFICATION_TASKS and asker is not None and "AQ" in tests:
        if asker.vocab != vocabs[0]:
            raise EvalError("asker vocabulary differs from the answer models'")
        test_sets["ModelAQ"] = model_aq_corpus(asker, tests["AQ"], seed)
    for train, model in models.items():
        for test, corpus in test_sets.items():
            report.cells[(train, test)] = accuracy(model, corpus)
            report.n_test[test] = len(corpus)
        if task not in VERIFICATION_TASKS and "AQ" in tests:
            # only one question form exists, so the model's choice is the scripted one
            report.cells[(train, "ModelAQ")] = report.cells[(train, "AQ")]
            report.n_test["ModelAQ"] = len(tests["AQ"])
    return report


def write_report(path, reports):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for rep in reports:
            for r in rep.rows():
                w.writerow([r["task"], r["model_kind"], r["train_regime"], r["test_regime"],
                            f"{r['accuracy']:.4f}", r["n_test"], r["seed"]])


def read_report(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return [dict(r, accuracy=float(r["accuracy"])) for r in csv.DictReader(fh)]


def render_table(reports):
    """Tasks down the side, one column per train+test cell."""
    cols = [(tr, te) for tr in TRAIN_REGIMES for te in TEST_REGIMES]
    present = [c for c in cols if any(c in r.cells for r in reports)]
    head = ["Task"] + [f"Train{tr}+Test{te}" for tr, te in present]
    rows = [head]
    for rep in reports:
        rows.append([str(rep.task)] + [f"{rep.cells[c]:.3f}" if c in rep.cells else "-"
                                       for c in present])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(cell.rjust(w) for cell, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- RL sweep

def rl_sweep(task, scenario, costs, kb, config: Optional[RLConfig] = None, pools=None):
    """Train one policy per cost and score it greedily on the fixed test pool."""
    costs = list(costs)
    if not costs:
        raise EvalError("cost grid is empty")
    config = config or RLConfig()
    if pools is None:
        pools = build_pools(task, scenario, kb, config)
    vocab = pool_vocabulary(pools["train"], kb_surfaces(kb))
    rows = []
    trained = train_rl_grid(task, scenario, costs, kb, config, pools, vocab)
    for cost in costs:
        policies, info = trained[check_cost(cost)]
        test = [encode_rl(policies.question, ep) for ep in pools["test"]]
        stats = evaluate_policies(policies, test, cost)
        log.info("task %s %s cost %.2f: %s", task, scenario, cost, stats)
        rows.append({"task": task, "scenario": scenario, "cost": cost, "seed": config.seed,
                     **stats})
    return rows
