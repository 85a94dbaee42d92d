"""Desk-scale orchestration shared by the command line and the acceptance suite."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .evaluation import eval_matrix
from .kb import generate_kb
from .memnet import MemN2NConfig, Vocabulary
from .simulator import VERIFICATION_TASKS, DatasetSpec, generate_dataset
from .train_offline import (TrainRun, accuracy_on, encode_eval, train_question_asker,
                            train_rbi_fp)

log = logging.getLogger(__name__)

MODEL_KINDS = ("vanilla", "context", "fp")
SPLITS = ("train", "dev", "test")
DEFAULT_WINDOW = 1
DEFAULT_LAMBDA = 1.0
LAMBDA_GRID = (0.5, 1.0, 2.0)


@dataclass
class Scale:
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 1000

    def size(self, split):
        return {"train": self.n_train, "dev": self.n_dev, "test": self.n_test}[split]


def split_seed(seed, split):
    # distinct streams per split so episode i of train and test are unrelated
    return seed * 10 + SPLITS.index(split)


def desk_kb(movies=200, people=150, seed=0):
    return generate_kb(n_movies=movies, n_people=people, seed=seed)


def corpus(task, regime, split, kb, n, seed=0):
    return generate_dataset(DatasetSpec(task, regime, split, n, split_seed(seed, split)), kb)[1]


def model_config(kind, window=DEFAULT_WINDOW, **overrides):
    if kind not in MODEL_KINDS:
        raise ValueError(f"model kind must be one of {MODEL_KINDS}, got {kind!r}")
    return MemN2NConfig(context_window=window if kind == "context" else 0, **overrides)


def asker_config(window=None, **overrides):
    # the asker scores whole candidate sentences against the question, so one shared
    # embedding lets entity overlap count without learning per-entity alignments
    overrides.setdefault("query_matrix", False)
    return MemN2NConfig(context_window=0, **overrides)


def shared_vocabulary(kb, train_corpora):
    return Vocabulary.from_corpora(train_corpora, [e.surface for e in kb.entities.values()])


def train_model(kind, train, dev, vocab, config, lam=DEFAULT_LAMBDA):
    """One model of the requested kind; returns (model, dev accuracy).

    For fp, `lam` may be a sequence: one model per weight, best dev accuracy kept
    (earlier weights win ties)."""
    lams = [0.0] if kind != "fp" else (list(lam) if isinstance(lam, (list, tuple)) else [lam])
    if not lams:
        raise ValueError("empty feedback weight grid")
    best = None
    for weight in lams:
        model = train_rbi_fp(train, config, weight, dev=dev, vocab=vocab)
        encs, answers = encode_eval(model, dev)
        acc = accuracy_on(model, encs, answers)
        if len(lams) > 1:
            log.info("fp lambda %g dev %.3f", weight, acc)
        if best is None or acc > best[1]:
            best = (model, acc)
    return best


def train_runs(task, regime, kind, train, dev, vocab, seeds, lam=DEFAULT_LAMBDA, **cfg):
    runs = []
    for seed in seeds:
        model, acc = train_model(kind, train, dev, vocab, model_config(kind, seed=seed, **cfg),
                                 lam)
        runs.append(TrainRun(task, regime, kind, seed, acc, model=model))
    return runs


@dataclass
class MatrixRun:
    report: object
    models: dict
    asker: object
    tests: dict


def regime_matrix(task, kb, kind="context", seed=0, scale=None, regimes=("QA", "AQ", "Mix"),
                  lam=DEFAULT_LAMBDA, **cfg):
    """Train one model per train regime and score it on TestQA / TestAQ / TestModelAQ."""
    scale = scale or Scale()
    train = {r: corpus(task, r, "train", kb, scale.n_train, seed) for r in regimes}
    dev = {r: corpus(task, r, "dev", kb, scale.n_dev, seed) for r in regimes}
    tests = {r: corpus(task, r, "test", kb, scale.n_test, seed) for r in ("QA", "AQ")}
    vocab = shared_vocabulary(kb, list(train.values()))
    models = {}
    for r in regimes:
        models[r], acc = train_model(kind, train[r], dev[r], vocab,
                                     model_config(kind, seed=seed, **cfg), lam)
        log.info("task %d %s %s dev %.3f", task, r, kind, acc)
    asker = None
    if task in VERIFICATION_TASKS and "AQ" in train:
        asker = train_question_asker(train["AQ"], asker_config(seed=seed, **cfg),
                                     dev=dev["AQ"], vocab=vocab, task=task)
    report = eval_matrix(task, models, tests, asker, seed)
    report.kind = kind
    return MatrixRun(report, models, asker, tests)
