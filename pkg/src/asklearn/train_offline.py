"""Offline trainers: reward-based imitation (RBI), joint RBI + forward prediction,
and the supervised question asker used for TestModelAQ."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .memnet import (MemN2N, MemN2NConfig, ResponsePool, Vocabulary,
                     answer_loss, encode_choice, encode_episode, feedback_loss,
                     flush_pool_grad, forward_answer, forward_feedback)
from .numerics import RngStream, argmax_first, sgd_step
from .simulator import NEGATIVE_FEEDBACK, POSITIVE_FEEDBACK, Episode

log = logging.getLogger(__name__)

QUESTION_TASKS = (2, 4)


class TrainingError(ValueError):
    pass


@dataclass
class TrainRun:
    task: Optional[int]
    regime: str
    kind: str
    seed: int
    dev_acc: float
    checkpoint: str = ""
    model: Optional[MemN2N] = field(default=None, repr=False, compare=False)
    history: list = field(default_factory=list, repr=False, compare=False)


# ---------------------------------------------------------------- example building

def rbi_target(enc):
    """Candidate index of the rewarded student answer, or None."""
    if enc.extra.get("reward") != 1:
        return None
    try:
        return enc.cand_tokens.index(enc.extra["student"])
    except ValueError:
        return None


def question_position(ep: Episode):
    """Index of the line carrying the student's clarification question, or None."""
    ai = ep.answer_index
    for i in range(ai):
        line = ep.lines[i]
        if (line.student is not None and not line.is_kb
                and line.student.rstrip().endswith("?") and i + 1 < ai):
            return i
    return None


def response_pool(corpora):
    seen = dict.fromkeys(POSITIVE_FEEDBACK + NEGATIVE_FEEDBACK)
    for corpus in corpora:
        for ep in corpus:
            qi = question_position(ep)
            if qi is not None:
                seen.setdefault(ep.lines[qi + 1].teacher)
    return list(seen)


def fp_item(model, ep, pool):
    qi = question_position(ep)
    if qi is None:
        return None
    reply = ep.lines[qi + 1]
    if reply.student is not None or reply.is_kb:
        raise TrainingError("episode asks a question but the teacher never replies")
    asked_text = ep.lines[qi].student
    questions = list(ep.candidates) or [asked_text]
    if asked_text not in questions:
        questions.append(asked_text)
    enc = encode_choice(model, ep.lines[qi].teacher, ep.lines[:qi], questions)
    target = pool.position.get(reply.teacher)
    if target is None:
        return None
    return enc, questions.index(asked_text), target


# ---------------------------------------------------------------- loops

def accuracy_on(model, encodings, answer_sets):
    if not encodings:
        raise TrainingError("accuracy of an empty corpus")
    hits = 0
    for enc, answers in zip(encodings, answer_sets):
        if enc.n_cand == 0:
            continue
        probs, _ = forward_answer(model, enc)
        hits += enc.cand_tokens[argmax_first(probs)] in answers
    return hits / len(encodings)


def encode_eval(model, corpus):
    encs, answers = [], []
    for ep in corpus:
        encs.append(encode_episode(model, ep))
        answers.append({t for a in ep.answer_set for t in model.vocab.tokenize(a)[:1]})
    return encs, answers


def _sgd_loop(model, examples, step_fn, config, dev_fn=None, stream="train"):
    """Shuffled minibatch SGD; returns per-epoch (train loss, dev score).  When dev_fn
    is given the parameters with the best dev score are restored at the end."""
    rng_stream = RngStream(config.seed, stream)
    best, best_score, history = None, -np.inf, []
    for epoch in range(config.epochs):
        order = rng_stream.numpy(epoch).permutation(len(examples))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            for i in order[start:start + config.batch_size]:
                total += step_fn(examples[i])
            flush_pool_grad(model)
            sgd_step(model.params, config.lr, config.clip)
            model.stepped()
        score = dev_fn() if dev_fn else -total
        history.append((total, score))
        log.debug("epoch %d loss %.4f dev %.4f", epoch + 1, total, score)
        if score > best_score:
            best_score, best = score, model.params.copy()
    if best is not None:
        model.params.load_from(best)
        model.stepped()
    return history


def _new_model(vocab, config, corpora, fp=False):
    if vocab is None:
        vocab = Vocabulary.from_corpora(corpora)
    return MemN2N(vocab, config, fp=fp)


def train_rbi(corpus, config: MemN2NConfig, dev=None, vocab=None, model=None):
    """Imitate rewarded answers only; reward-0 episodes contribute nothing."""
    return train_rbi_fp(corpus, config, 0.0, dev=dev, vocab=vocab, model=model)


def train_rbi_fp(corpus, config: MemN2NConfig, lam=1.0, dev=None, vocab=None, model=None):
    if lam < 0:
        raise TrainingError("lambda must be >= 0")
    use_fp = lam > 0
    if model is None:
        model = _new_model(vocab, config, [corpus], fp=use_fp)
    pool = ResponsePool(model, response_pool([corpus])) if use_fp else None

    examples = []
    n_fp = 0
    for ep in corpus:
        enc = encode_episode(model, ep)
        target = rbi_target(enc)
        fp = fp_item(model, ep, pool) if use_fp else None
        n_fp += fp is not None
        if target is None and fp is None:
            continue
        examples.append((enc if target is not None else None, target, fp))
    if not any(ep.reward == 1 for ep in corpus):
        raise TrainingError("corpus has no reward-1 episodes")
    if not any(e[0] is not None for e in examples):
        # rewarded answers exist but never appear in memory (e.g. hidden answers)
        log.warning("no rewarded answer is reachable among memory candidates")
    if use_fp and n_fp == 0:
        raise TrainingError("forward prediction needs episodes where the student asks a question")

    def step(example):
        enc, target, fp = example
        loss = 0.0
        if enc is not None:
            loss += answer_loss(model, enc, target)[0]
        if fp is not None:
            fenc, asked, resp = fp
            loss += feedback_loss(model, fenc, asked, pool, resp, weight=lam)[0]
        return loss

    dev_fn = None
    if dev is not None:
        dev_encs, dev_answers = encode_eval(model, dev)
        dev_fn = lambda: accuracy_on(model, dev_encs, dev_answers)
    model.history = _sgd_loop(model, examples, step, config, dev_fn)
    model.pool = pool
    return model


def feedback_accuracy(model, corpus, pool=None):
    pool = pool or model.pool
    hits = total = 0
    for ep in corpus:
        item = fp_item(model, ep, pool)
        if item is None:
            continue
        enc, asked, target = item
        t, _ = forward_feedback(model, enc, asked, pool)
        hits += argmax_first(t) == target
        total += 1
    if not total:
        raise TrainingError("no feedback targets in corpus")
    return hits / total


# ---------------------------------------------------------------- question asker

def asker_items(model, corpus, require_relevant=True):
    items = []
    for ep in corpus:
        qi = question_position(ep)
        if qi is None or not ep.candidates:
            continue
        if require_relevant and not ep.asked_relevant:
            continue
        asked = ep.lines[qi].student
        if asked not in ep.candidates:
            continue
        enc = encode_choice(model, ep.lines[qi].teacher, ep.lines[:qi], ep.candidates,
                            gold=ep.gold_candidates)
        items.append((enc, ep.candidates.index(asked)))
    return items


def train_question_asker(corpus, config: MemN2NConfig, dev=None, vocab=None, task=None):
    task = task if task is not None else (corpus[0].task if len(corpus) else None)
    if task not in QUESTION_TASKS:
        raise TrainingError(f"task {task} has a single fixed question form; "
                            "only tasks 2 and 4 need a question asker")
    model = _new_model(vocab, config, [corpus])
    items = asker_items(model, corpus)
    if not items:
        raise TrainingError("no relevant student questions with candidate lists in corpus")

    def step(item):
        enc, target = item
        return answer_loss(model, enc, target)[0]

    dev_fn = None
    if dev is not None:
        dev_items = asker_items(model, dev, require_relevant=False)
        if dev_items:
            dev_fn = lambda: asker_accuracy(model, dev_items)
    model.history = _sgd_loop(model, items, step, config, dev_fn, stream="asker")
    return model


def asker_accuracy(model, items):
    hits = 0
    for enc, _ in items:
        probs, _ = forward_answer(model, enc)
        hits += argmax_first(probs) in enc.gold
    return hits / len(items)


# ---------------------------------------------------------------- selection + ledger

def select_best(runs):
    if not runs:
        raise TrainingError("select_best needs at least one run")
    return max(runs, key=lambda r: (r.dev_acc, -r.seed))


LEDGER_FIELDS = ("task", "regime", "model_kind", "seed", "dev_acc", "checkpoint")


def write_run_ledger(path, runs, append=False):
    exists = append and os.path.exists(path)
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not exists:
            w.writerow(LEDGER_FIELDS)
        for r in runs:
            w.writerow([r.task, r.regime, r.kind, r.seed, f"{r.dev_acc:.6f}", r.checkpoint])
