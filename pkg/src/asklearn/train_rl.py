"""Online learning of when to ask: a binary ask/no-ask policy, one answer policy
per branch, REINFORCE with a learned baseline and the two-stage schedule."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .memnet import (ASK_TOKEN, NOASK_TOKEN, PROB_FLOOR, MemN2N, MemN2NConfig, Vocabulary,
                     answer_backward, baseline_loss, baseline_value, encode, encode_answer,
                     forward_answer, memory_texts)
from .numerics import RngStream, argmax_first, sgd_step
from .simulator import (NEGATIVE_FEEDBACK, POSITIVE_FEEDBACK, DialogueLine, ask_exchange,
                        default_decoys, draw_scene, kb_lines)

log = logging.getLogger(__name__)

SCENARIOS = ("Good", "Medium", "Poor")
COST_GRID = tuple(i * 0.25 for i in range(9))
MAX_COST = 2.0
# tasks whose poor-student flaw is a misspelt question; 5-9 hide facts instead
QUESTION_FLAW_TASKS = (1, 2, 3, 4)


class RLError(ValueError):
    pass


def check_cost(cost):
    if not 0.0 <= cost <= MAX_COST:
        raise RLError(f"cost_AQ must lie in [0, {MAX_COST}], got {cost}")
    return float(cost)


def reward(ask: bool, correct: bool, cost: float) -> float:
    check_cost(cost)
    base = 1.0 if correct else -1.0
    return base - cost if ask else base


@dataclass
class RLConfig:
    d: int = 32
    lr: float = 0.01
    clip: float = 40.0
    batch_size: int = 32
    init_scale: float = 0.3
    context_window: int = 0
    epochs: int = 16
    stage1_epochs: int = 8
    episodes_per_epoch: int = 2000
    dev_episodes: int = 500
    test_episodes: int = 1000
    repeats: int = 5
    decoys: Optional[int] = None
    seed: int = 0

    def decoys_for(self, task):
        return default_decoys(task) if self.decoys is None else self.decoys

    def model_config(self, seed):
        return MemN2NConfig(d=self.d, lr=self.lr, clip=self.clip, batch_size=self.batch_size,
                            init_scale=self.init_scale, context_window=self.context_window,
                            epochs=self.epochs, seed=seed)


# ---------------------------------------------------------------- episodes

@dataclass
class RLEpisode:
    """One question with both continuations prepared: answering straight away,
    or asking first and hearing the teacher's reply."""
    task: int
    flawed: bool
    prefix: list
    question: str
    exchange: list
    answers: tuple

    def dialogue(self, ask: bool):
        lines = list(self.prefix)
        if ask:
            lines += self.exchange
        return lines

    def memory_lines(self, ask: bool):
        return self.dialogue(ask)


def build_episode(task, scenario, kb, rng, split, decoys=None):
    if scenario not in SCENARIOS:
        raise RLError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    flawed = scenario == "Poor" or (scenario == "Medium" and rng.random() < 0.5)
    decoys = default_decoys(task) if decoys is None else decoys
    scene = draw_scene(task, kb, rng, split, flawed, decoys,
                       corrupt=flawed and task in QUESTION_FLAW_TASKS)
    student_q, reply = ask_exchange(scene, True, rng)
    prefix = kb_lines(scene.view) + scene.history
    exchange = [DialogueLine(scene.question, student_q), DialogueLine(reply)]
    return RLEpisode(task, flawed, prefix, scene.question, exchange,
                     tuple(a.surface for a in scene.answers))


def build_pool(task, scenario, kb, split, n, seed, decoys=None):
    stream = RngStream(seed, f"rl.{task}.{scenario}.{split}")
    return [build_episode(task, scenario, kb, stream.python(i), split, decoys) for i in range(n)]


def build_pools(task, scenario, kb, config: RLConfig):
    return {
        "train": build_pool(task, scenario, kb, "train", config.episodes_per_epoch, config.seed,
                            config.decoys_for(task)),
        "dev": build_pool(task, scenario, kb, "dev", config.dev_episodes, config.seed,
                          config.decoys_for(task)),
        "test": build_pool(task, scenario, kb, "test", config.test_episodes, config.seed,
                           config.decoys_for(task)),
    }


def kb_surfaces(kb):
    return [e.surface for e in kb.entities.values()]


def pool_vocabulary(pool, entities=()):
    texts = []
    for ep in pool:
        for line in ep.dialogue(True):
            texts.append(line.teacher)
            if line.student:
                texts.append(line.student)
    return Vocabulary.build(texts, entities, POSITIVE_FEEDBACK + NEGATIVE_FEEDBACK)


@dataclass
class Encoded3:
    question: object
    no_ask: object
    ask: object
    answers: frozenset


def encode_rl(model, ep: RLEpisode) -> Encoded3:
    tok = model.vocab.tokenize
    answers = frozenset(tok(a)[0] for a in ep.answers)
    no_ask = encode_answer(model, ep.question, ep.dialogue(False), answers)
    ask = encode_answer(model, ep.question, ep.dialogue(True), answers)
    # the ask/no-ask decision sees the same dialogue as the no-ask answer
    mems = [tok(t) for t in memory_texts(ep.dialogue(False))]
    q = encode(model, tok(ep.question), [m for m in mems if m], [[ASK_TOKEN], [NOASK_TOKEN]])
    q.cand_tokens = [ASK_TOKEN, NOASK_TOKEN]
    return Encoded3(q, no_ask, ask, answers)


# ---------------------------------------------------------------- policies

MODEL_NAMES = ("question", "answer_aq", "answer_qa", "baseline", "baseline_answer")


class PolicyPair:
    """P(question), the two branch answer policies and two reward baselines: one
    for the ask decision, one for the answer given the branch taken."""

    def __init__(self, vocab, config: RLConfig, seed=0):
        mk = lambda k, **kw: MemN2N(vocab, config.model_config(seed * 10 + k), **kw)
        self.question = mk(0)
        self.answer_aq = mk(1)
        self.answer_qa = mk(2)
        self.baseline = mk(3, readout=True)
        self.baseline_answer = mk(4, readout=True)
        self.vocab = vocab

    def answer_model(self, ask):
        return self.answer_aq if ask else self.answer_qa

    @property
    def models(self):
        return {name: getattr(self, name) for name in MODEL_NAMES}

    def snapshot(self, names=MODEL_NAMES):
        return {k: getattr(self, k).params.copy() for k in names}

    def restore(self, snap):
        for k, params in snap.items():
            m = getattr(self, k)
            m.params.load_from(params)
            m.stepped()

    def save(self, directory):
        for name, m in self.models.items():
            m.save(os.path.join(directory, name))

    @classmethod
    def load(cls, directory):
        pair = cls.__new__(cls)
        for name in MODEL_NAMES:
            setattr(pair, name, MemN2N.load(os.path.join(directory, name)))
        pair.vocab = pair.question.vocab
        return pair


@dataclass
class Trajectory:
    ask: bool
    answer: Optional[str]
    correct: bool
    r: float
    b: float
    b_answer: float = 0.0
    cost: float = 0.0
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def r_answer(self):
        """Reward with the known ask penalty added back: what the answer controls."""
        return self.r + self.cost if self.ask else self.r


def _choose(probs, rng, mode):
    if mode == "greedy":
        return argmax_first(probs)
    return int(rng.choice(len(probs), p=probs))


def run_rl_episode(policies: PolicyPair, enc: Encoded3, rng, mode="sample", cost=0.0,
                   force_ask: Optional[bool] = None) -> Trajectory:
    """Roll out a1 (ask or not) then a2 (answer) on a prepared episode."""
    if mode not in ("sample", "greedy"):
        raise RLError(f"mode must be sample or greedy, got {mode!r}")
    q_probs, q_state = forward_answer(policies.question, enc.question)
    if force_ask is None:
        ask = _choose(q_probs, rng, mode) == 0
    else:
        ask = bool(force_ask)
    a_enc = enc.ask if ask else enc.no_ask
    model = policies.answer_model(ask)
    if a_enc.n_cand == 0:
        a_probs = a_state = None
        a_idx, answer = None, None
    else:
        a_probs, a_state = forward_answer(model, a_enc)
        a_idx = _choose(a_probs, rng, mode)
        answer = a_enc.cand_tokens[a_idx]
    correct = answer is not None and answer in enc.answers
    r = reward(ask, correct, cost)
    b, _ = baseline_value(policies.baseline, enc.question)
    b_answer, _ = baseline_value(policies.baseline_answer, a_enc)
    return Trajectory(ask, answer, correct, r, b, b_answer, cost, {
        "enc": enc, "a_enc": a_enc, "q": (q_probs, q_state), "a": (a_probs, a_state, a_idx),
    })


def reinforce_update(traj: Trajectory, policies: PolicyPair, update_question=True):
    """Accumulate grad of -(r - b) log p(a1) p(a2); baselines are constants here.

    The answer term uses the branch baseline b_answer - cost * ask: the penalty is
    fixed once a1 is taken, so folding it into the baseline leaves the gradient
    unbiased and makes answer learning independent of the cost."""
    enc = traj.cache["enc"]
    a_probs, a_state, a_idx = traj.cache["a"]
    adv = traj.r_answer - traj.b_answer
    if a_probs is not None and a_probs[a_idx] >= PROB_FLOOR and adv != 0.0:
        answer_backward(policies.answer_model(traj.ask), traj.cache["a_enc"], a_state, a_probs,
                        a_idx, adv)
    adv = traj.r - traj.b
    if update_question and adv != 0.0:
        q_probs, q_state = traj.cache["q"]
        choice = 0 if traj.ask else 1
        if q_probs[choice] >= PROB_FLOOR:
            answer_backward(policies.question, enc.question, q_state, q_probs, choice, adv)


def baseline_update(traj: Trajectory, policies: PolicyPair, question=True):
    """Accumulate squared-error gradients: b toward r, b_answer toward r_answer."""
    loss = baseline_loss(policies.baseline_answer, traj.cache["a_enc"], traj.r_answer)[0]
    if question:
        loss += baseline_loss(policies.baseline, traj.cache["enc"].question, traj.r)[0]
    return loss


def _step(models, config):
    for m in models:
        sgd_step(m.params, config.lr, config.clip)
        m.stepped()


def evaluate_policies(policies, encs, cost, force_ask=None):
    """Greedy ask rate, accuracy and mean reward."""
    if not encs:
        raise RLError("empty evaluation pool")
    asks = hits = 0
    total = 0.0
    for enc in encs:
        t = run_rl_episode(policies, enc, None, "greedy", cost, force_ask)
        asks += t.ask
        hits += t.correct
        total += t.r
    n = len(encs)
    return {"ask_rate": asks / n, "accuracy": hits / n, "mean_reward": total / n}


def train_rl(task, scenario, cost, kb, config: RLConfig, pools=None, vocab=None):
    """Two-stage REINFORCE; returns (best PolicyPair, info dict)."""
    return train_rl_grid(task, scenario, [cost], kb, config, pools, vocab)[check_cost(cost)]


def train_rl_grid(task, scenario, costs, kb, config: RLConfig, pools=None, vocab=None):
    """train_rl for several costs at once.  Stage 1 never sees the cost, so it is run
    once per repeat and shared; returns {cost: (best PolicyPair, info)}."""
    costs = [check_cost(c) for c in costs]
    if scenario not in SCENARIOS:
        raise RLError(f"scenario must be one of {SCENARIOS}, got {scenario!r}")
    if config.stage1_epochs > config.epochs:
        raise RLError("stage1_epochs exceeds epochs")
    if pools is None:
        pools = build_pools(task, scenario, kb, config)
    if vocab is None:
        vocab = pool_vocabulary(pools["train"], kb_surfaces(kb))
    best = {c: (None, -np.inf, None) for c in costs}
    for rep in range(config.repeats):
        policies = PolicyPair(vocab, config, seed=config.seed * 100 + rep)
        train = [encode_rl(policies.question, ep) for ep in pools["train"]]
        dev = [encode_rl(policies.question, ep) for ep in pools["dev"]]
        start = policies.snapshot()
        mean_free = _stage1(policies, train, config, rep)
        after1 = policies.snapshot()
        for cost in costs:
            policies.restore(after1)
            # the ask-decision baseline starts from the reward seen under forced
            # alternation at this cost, half the episodes having paid the penalty
            policies.restore({"baseline": start["baseline"]})
            policies.baseline.params["bias"][0] = mean_free - cost / 2
            policies.baseline.stepped()
            snap, dev_reward, curve = _stage2(policies, train, dev, cost, config, rep)
            log.info("task %s %s cost %.2f repeat %d dev reward %.3f", task, scenario, cost,
                     rep, dev_reward)
            if dev_reward > best[cost][1]:
                keep = PolicyPair.__new__(PolicyPair)
                keep.vocab = vocab
                for name in MODEL_NAMES:
                    setattr(keep, name, getattr(policies, name).copy())
                keep.restore(snap)
                best[cost] = (keep, dev_reward, {"repeat": rep, "dev_reward": dev_reward,
                                                 "curve": curve})
    return {c: (b[0], b[2]) for c, b in best.items()}


def _stage1(policies, train, config, rep):
    """Forced alternating ask / no-ask; only the answer policies and their baseline
    learn.  Returns the mean answer reward of the last epoch."""
    stream = RngStream(config.seed, f"rl.run{rep}")
    models = [policies.answer_aq, policies.answer_qa, policies.baseline_answer]
    total = 0.0
    for epoch in range(config.stage1_epochs):
        rng = stream.numpy(epoch)
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            for pos in range(start, min(start + config.batch_size, len(order))):
                traj = run_rl_episode(policies, train[order[pos]], rng, "sample", 0.0,
                                      force_ask=pos % 2 == 0)
                reinforce_update(traj, policies, update_question=False)
                baseline_update(traj, policies, question=False)
                total += traj.r_answer
            _step(models, config)
    return total / len(train) if config.stage1_epochs else 0.0


def _stage2(policies, train, dev, cost, config, rep):
    stream = RngStream(config.seed, f"rl.run{rep}")
    models = [policies.models[k] for k in MODEL_NAMES]
    snap, best, curve = None, -np.inf, []
    for epoch in range(config.stage1_epochs, config.epochs):
        rng = stream.numpy(epoch)
        order = rng.permutation(len(train))
        for start in range(0, len(order), config.batch_size):
            for pos in range(start, min(start + config.batch_size, len(order))):
                traj = run_rl_episode(policies, train[order[pos]], rng, "sample", cost)
                reinforce_update(traj, policies)
                baseline_update(traj, policies)
            _step(models, config)
        stats = evaluate_policies(policies, dev, cost)
        curve.append(stats)
        if stats["mean_reward"] > best:
            best, snap = stats["mean_reward"], policies.snapshot()
    if snap is None:
        snap = policies.snapshot()
        best = evaluate_policies(policies, dev, cost)["mean_reward"]
    return snap, best, curve


SWEEP_FIELDS = ("task", "scenario", "cost", "ask_rate", "accuracy", "mean_reward", "seed")


def write_sweep(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_FIELDS)
        for r in rows:
            w.writerow([r["task"], r["scenario"], f"{r['cost']:.2f}", f"{r['ask_rate']:.4f}",
                        f"{r['accuracy']:.4f}", f"{r['mean_reward']:.4f}", r["seed"]])
