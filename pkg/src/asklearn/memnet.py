"""End-to-end memory network with answer, forward-prediction, binary-choice and
baseline heads.  Forward and backward passes are written out by hand.

Every utterance is a weighted bag of vocabulary tokens, so an episode is a
sparse matrix S (rows = query, memories, candidates) and its embeddings are
S @ A.T plus fixed vectors for tokens the vocabulary has never seen.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .kb import Tokenizer
from .numerics import (ParamStore, argmax_first, hashed_unit_vector, read_checkpoint,
                       softmax, write_checkpoint)
from .simulator import (NEGATIVE_FEEDBACK, POSITIVE_FEEDBACK, DialogueLine, Episode)

ASK_TOKEN = "<ask>"
NOASK_TOKEN = "<noask>"
SPECIAL_TOKENS = (ASK_TOKEN, NOASK_TOKEN)
PROB_FLOOR = 1e-8


class ModelError(ValueError):
    pass


# ---------------------------------------------------------------- vocabulary

class Vocabulary:
    """Token <-> index bijection plus the entity phrases the tokenizer must join."""

    def __init__(self, tokens, entities=()):
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise ModelError("duplicate tokens in vocabulary")
        self.entities = sorted(set(entities))
        self.tokenizer = Tokenizer(self.entities)
        self.entity_tokens = frozenset(e.replace(" ", "_") for e in self.entities)
        self.unseen_policy = "hashed-unit-vector scaled to mean column norm"

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def tokenize(self, text):
        return self.tokenizer(text)

    @classmethod
    def build(cls, texts, entities=(), extra=()):
        tok = Tokenizer(entities)
        seen = dict.fromkeys(SPECIAL_TOKENS)
        for t in extra:
            for w in tok(t):
                seen.setdefault(w)
        for t in texts:
            for w in tok(t):
                seen.setdefault(w)
        return cls(seen, entities)

    @classmethod
    def from_corpora(cls, corpora, entities=()):
        texts = []
        for corpus in corpora:
            for ep in corpus:
                for line in ep.lines:
                    texts.append(line.teacher)
                    if line.student is not None:
                        texts.append(line.student)
                texts.extend(ep.candidates)
        return cls.build(texts, entities, POSITIVE_FEEDBACK + NEGATIVE_FEEDBACK)

    def to_dict(self):
        return {"tokens": self.tokens, "entities": self.entities}

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"], d["entities"])

    def __eq__(self, other):
        return (isinstance(other, Vocabulary) and self.tokens == other.tokens
                and self.entities == other.entities)


# ---------------------------------------------------------------- config / model

@dataclass
class MemN2NConfig:
    d: int = 32
    hops: int = 3
    context_window: int = 0
    lr: float = 0.01
    epochs: int = 20
    clip: float = 40.0
    batch_size: int = 32
    init_scale: float = 0.3
    seed: int = 0
    query_matrix: bool = True

    def __post_init__(self):
        if self.d < 1:
            raise ModelError("d must be >= 1")
        if self.hops < 1:
            raise ModelError("hops must be >= 1")
        if self.context_window < 0:
            raise ModelError("context_window must be >= 0")

    @property
    def kind(self):
        return "context" if self.context_window > 0 else "vanilla"


class MemN2N:
    """Shared embedding A (d x V); optional FP vector beta; optional scalar readout."""

    def __init__(self, vocab: Vocabulary, config: MemN2NConfig, fp=False, readout=False,
                 params: Optional[ParamStore] = None):
        self.vocab = vocab
        self.config = config
        self.fp = fp
        self.readout = readout
        if params is None:
            rng = np.random.default_rng(config.seed)
            params = ParamStore()
            params.add("A", rng.normal(0.0, config.init_scale, size=(config.d, len(vocab))))
            if config.query_matrix:
                params.add("B", rng.normal(0.0, config.init_scale, size=(config.d, len(vocab))))
            if fp:
                params.add("beta", rng.normal(0.0, config.init_scale, size=config.d))
            if readout:
                params.add("w", np.zeros(config.d))
                params.add("bias", np.zeros(1))
        self.params = params
        self.version = 0
        self._pool_cache = None
        self._pool_grad = None
        self._unseen = {}

    # -- embedding helpers
    @property
    def A(self):
        return self.params["A"]

    def unseen_vector(self, token, matrix="A"):
        """Fixed random stand-in for an out-of-vocabulary token; the query side
        (B) draws its own vector just as known tokens have separate B columns."""
        key = (token, matrix)
        v = self._unseen.get(key)
        if v is None:
            salt = token if matrix == "A" else f"{token}\x00{matrix}"
            v = hashed_unit_vector(salt, self.config.seed, self.config.d)
            self._unseen[key] = v
        return v

    def unseen_scale(self):
        return float(np.mean(np.linalg.norm(self.A, axis=0)))

    def stepped(self):
        """Call after every parameter update so cached pool embeddings refresh."""
        self.version += 1

    def copy(self):
        out = MemN2N(self.vocab, self.config, self.fp, self.readout, self.params.copy())
        return out

    # -- persistence
    def save(self, directory, extra=None):
        os.makedirs(directory, exist_ok=True)
        meta = {"d": self.config.d, "V": len(self.vocab)}
        write_checkpoint(os.path.join(directory, "params.ckpt"), self.params, meta)
        manifest = {
            "config": asdict(self.config),
            "heads": {"fp": self.fp, "readout": self.readout},
            "context_window": self.config.context_window,
            "vocabulary": self.vocab.to_dict(),
        }
        if extra:
            manifest.update(extra)
        with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as fh:
            manifest = json.load(fh)
        params, meta = read_checkpoint(os.path.join(directory, "params.ckpt"))
        vocab = Vocabulary.from_dict(manifest["vocabulary"])
        if int(meta["V"]) != len(vocab):
            raise ModelError(f"{directory}: checkpoint V={meta['V']} but vocabulary has {len(vocab)}")
        config = MemN2NConfig(**manifest["config"])
        heads = manifest["heads"]
        model = cls(vocab, config, heads["fp"], heads["readout"], params)
        model.manifest = manifest
        return model


# ---------------------------------------------------------------- encoding

def bag_weights(tokens, window):
    """Per-position weights such that the bag equals the sum of windowed means."""
    n = len(tokens)
    if window == 0:
        return [1.0] * n
    w = [0.0] * n
    for j in range(n):
        lo, hi = max(0, j - window), min(n, j + window + 1)
        share = 1.0 / (hi - lo)
        for i in range(lo, hi):
            w[i] += share
    return w


@dataclass
class Encoded:
    """Sparse bag matrix plus unseen-token offsets for one forward pass."""
    S: sp.csr_matrix
    unseen: Optional[np.ndarray]
    n_mem: int
    n_cand: int
    cand_tokens: list = field(default_factory=list)
    gold: tuple = ()
    extra: dict = field(default_factory=dict)

    @cached_property
    def S_query(self):
        return self.S[:1]

    @cached_property
    def S_rest(self):
        return self.S[1:]

    @cached_property
    def S_rest_T(self):
        return self.S[1:].T.tocsr()

    @property
    def mem_slice(self):
        return slice(1, 1 + self.n_mem)

    @property
    def cand_slice(self):
        return slice(1 + self.n_mem, 1 + self.n_mem + self.n_cand)


def _bags_to_matrix(model, bags, query=False):
    """query=True marks row 0 as the question, embedded with B when the model has one."""
    vocab, d, window = model.vocab, model.config.d, model.config.context_window
    data, indices, indptr = [], [], [0]
    unseen = None
    q_matrix = "B" if query and "B" in model.params else "A"
    for r, tokens in enumerate(bags):
        row = {}
        for tok, w in zip(tokens, bag_weights(tokens, window)):
            idx = vocab.index.get(tok)
            if idx is None:
                if unseen is None:
                    unseen = np.zeros((len(bags), d))
                unseen[r] += w * model.unseen_vector(tok, q_matrix if r == 0 else "A")
            else:
                row[idx] = row.get(idx, 0.0) + w
        for idx in sorted(row):
            indices.append(idx)
            data.append(row[idx])
        indptr.append(len(indices))
    S = sp.csr_matrix((np.array(data, dtype=np.float64), np.array(indices, dtype=np.int64),
                       np.array(indptr, dtype=np.int64)), shape=(len(bags), len(vocab)))
    return S, unseen


def encode(model, query, memories, candidates, gold=()) -> Encoded:
    """query: token list; memories / candidates: lists of token lists."""
    if not query:
        raise ModelError("empty query")
    S, unseen = _bags_to_matrix(model, [query] + list(memories) + list(candidates), query=True)
    return Encoded(S, unseen, len(memories), len(candidates), gold=tuple(gold))


def encode_bow(model, tokens, matrix="A") -> np.ndarray:
    if not tokens:
        raise ModelError("encode_bow needs at least one token")
    S, unseen = _bags_to_matrix(model, [tokens], query=matrix == "B")
    E = np.asarray(S @ model.params[matrix].T)[0]
    if unseen is not None:
        E = E + model.unseen_scale() * unseen[0]
    return E


def embed(model, S, unseen):
    E = np.asarray(S @ model.A.T)
    if unseen is not None:
        E = E + model.unseen_scale() * unseen
    return E


def embed_episode(model, enc):
    """Rows of enc embedded with A, except the query row which uses B when present."""
    if "B" not in model.params:
        return embed(model, enc.S, enc.unseen)
    E = np.empty((enc.S.shape[0], model.config.d))
    E[0] = enc.S_query @ model.params["B"].T
    E[1:] = enc.S_rest @ model.A.T
    if enc.unseen is not None:
        E += model.unseen_scale() * enc.unseen
    return E


# ---------------------------------------------------------------- core passes

def attention_hop(u, m):
    if len(m) == 0:
        raise ModelError("attention over an empty memory set")
    p = softmax(m @ u)
    return m.T @ p, p


@dataclass
class HopState:
    u: list
    p: list
    E: np.ndarray

    @property
    def u_final(self):
        return self.u[-1]


def run_hops(model, enc: Encoded) -> HopState:
    E = embed_episode(model, enc)
    u = E[0]
    us, ps = [u], []
    if enc.n_mem:
        m = E[enc.mem_slice]
        for _ in range(model.config.hops):
            o, p = attention_hop(u, m)
            u = u + o
            us.append(u)
            ps.append(p)
    else:
        # no memories: every hop reads nothing and u stays put
        for _ in range(model.config.hops):
            us.append(u)
            ps.append(np.zeros(0))
    return HopState(us, ps, E)


def backprop_hops(model, enc: Encoded, state: HopState, du, dE):
    """Push d(loss)/d(u_N) back through the hops into dE (rows of the bag matrix)."""
    if enc.n_mem:
        m = state.E[enc.mem_slice]
        dm = dE[enc.mem_slice]
        for k in range(model.config.hops - 1, -1, -1):
            p, u_prev = state.p[k], state.u[k]
            dm += np.outer(p, du)
            dp = m @ du
            ds = p * (dp - p @ dp)
            dm += np.outer(ds, u_prev)
            du = du + m.T @ ds
    dE[0] += du


def unseen_scale_grad(model, unseen, dE):
    # unseen rows are scaled by mean_v |A[:, v]|, so they pull on every column of A
    g = float(np.sum(dE * unseen))
    if g:
        A = model.A
        norms = np.linalg.norm(A, axis=0)
        safe = np.where(norms > 0, norms, 1.0)
        model.params.grads["A"] += (g / A.shape[1]) * (A / safe)


def accumulate_embedding_grad(model, enc: Encoded, dE):
    # dA[:, v] += sum_r S[r, v] * dE[r]
    grads = model.params.grads
    if enc.unseen is not None:
        unseen_scale_grad(model, enc.unseen, dE)
    if "B" not in grads:
        grads["A"].T[...] += np.asarray(enc.S.T @ dE)
        return
    grads["B"].T[...] += np.asarray(enc.S_query.T @ dE[:1])
    grads["A"].T[...] += np.asarray(enc.S_rest_T @ dE[1:])


def forward_answer(model, enc: Encoded):
    if enc.n_cand < 1:
        raise ModelError("zero answer candidates")
    state = run_hops(model, enc)
    Y = state.E[enc.cand_slice]
    probs = softmax(Y @ state.u_final)
    return probs, state


def answer_backward(model, enc, state, probs, target, weight=1.0):
    """Accumulate weight * d(-log p[target]) into the gradient buffers."""
    dz = probs.copy()
    dz[target] -= 1.0
    dz *= weight
    dE = np.zeros_like(state.E)
    Y = state.E[enc.cand_slice]
    dE[enc.cand_slice] += np.outer(dz, state.u_final)
    backprop_hops(model, enc, state, Y.T @ dz, dE)
    accumulate_embedding_grad(model, enc, dE)


def answer_loss(model, enc, target, weight=1.0, backward=True):
    probs, state = forward_answer(model, enc)
    loss = -float(np.log(probs[target]))
    if backward:
        answer_backward(model, enc, state, probs, target, weight)
    return weight * loss, probs


def predict(model, enc) -> int:
    probs, _ = forward_answer(model, enc)
    return argmax_first(probs)


def predict_question(model, enc) -> int:
    """Argmax over candidate questions encoded as utterance rows."""
    if enc.n_cand < 1:
        raise ModelError("no candidate questions")
    return predict(model, enc)


# ---------------------------------------------------------------- forward prediction

class ResponsePool:
    """Fixed list of teacher responses the FP head chooses between."""

    def __init__(self, model, responses):
        self.responses = list(responses)
        if not self.responses:
            raise ModelError("empty response pool")
        self.position = {r: i for i, r in enumerate(self.responses)}
        bags = [model.vocab.tokenize(r) or ["."] for r in self.responses]
        self.S, self.unseen = _bags_to_matrix(model, bags)
        self.S_T = self.S.T.tocsr()

    def __len__(self):
        return len(self.responses)

    def embeddings(self, model):
        cache = model._pool_cache
        if cache is None or cache[0] is not self or cache[1] != model.version:
            R = embed(model, self.S, self.unseen)
            model._pool_cache = (self, model.version, R)
            return R
        return cache[2]

    def add_grad(self, model, dR):
        if model._pool_grad is None or model._pool_grad[0] is not self:
            flush_pool_grad(model)
            model._pool_grad = (self, np.zeros((len(self), model.config.d)))
        model._pool_grad[1][...] += dR


def flush_pool_grad(model):
    pending = model._pool_grad
    if pending is not None:
        pool, dR = pending
        model.params.grads["A"].T[...] += np.asarray(pool.S_T @ dR)
        if pool.unseen is not None:
            unseen_scale_grad(model, pool.unseen, dR)
        model._pool_grad = None


def forward_feedback(model, enc: Encoded, asked: int, pool: ResponsePool):
    """Distribution over teacher responses given the asked question index.

    enc candidates are the question set; the FP vector beta is added to the
    asked question's representation before the final readout.
    """
    if not model.fp:
        raise ModelError("model has no forward-prediction head")
    if not 0 <= asked < enc.n_cand:
        raise ModelError(f"asked question {asked} not among {enc.n_cand} candidates")
    state = run_hops(model, enc)
    uN = state.u_final
    Yq = state.E[enc.cand_slice]
    if enc.n_cand == 1:
        p = np.ones(1)
    else:
        p = softmax(Yq @ uN)
    beta = model.params["beta"]
    o = p @ Yq + p[asked] * beta
    u1 = o + uN
    R = pool.embeddings(model)
    t = softmax(R @ u1)
    return t, (state, p, o, u1, R)


def feedback_loss(model, enc, asked, pool, target, weight=1.0, backward=True):
    t, (state, p, o, u1, R) = forward_feedback(model, enc, asked, pool)
    loss = -float(np.log(t[target]))
    if not backward:
        return weight * loss, t
    dz = t.copy()
    dz[target] -= 1.0
    dz *= weight
    pool.add_grad(model, np.outer(dz, u1))
    du1 = R.T @ dz
    uN = state.u_final
    Yq = state.E[enc.cand_slice]
    beta = model.params["beta"]
    model.params.grads["beta"] += p[asked] * du1
    dE = np.zeros_like(state.E)
    dE[enc.cand_slice] += np.outer(p, du1)
    duN = du1.copy()
    if enc.n_cand > 1:
        dp = Yq @ du1
        dp[asked] += beta @ du1
        ds = p * (dp - p @ dp)
        dE[enc.cand_slice] += np.outer(ds, uN)
        duN += Yq.T @ ds
    backprop_hops(model, enc, state, duN, dE)
    accumulate_embedding_grad(model, enc, dE)
    return weight * loss, t


# ---------------------------------------------------------------- baseline head

def baseline_value(model, enc: Encoded):
    if not model.readout:
        raise ModelError("model has no scalar readout")
    state = run_hops(model, enc)
    b = float(model.params["w"] @ state.u_final + model.params["bias"][0])
    return b, state


def baseline_loss(model, enc, r, backward=True):
    b, state = baseline_value(model, enc)
    diff = b - r
    if backward:
        db = 2.0 * diff
        model.params.grads["w"] += db * state.u_final
        model.params.grads["bias"][0] += db
        dE = np.zeros_like(state.E)
        backprop_hops(model, enc, state, db * model.params["w"], dE)
        accumulate_embedding_grad(model, enc, dE)
    return diff * diff, b


def policy_gradient(model, enc, action, advantage):
    """Accumulate the gradient of -advantage * log max(p[action], floor)."""
    probs, state = forward_answer(model, enc)
    if probs[action] < PROB_FLOOR or advantage == 0.0:
        return probs
    answer_backward(model, enc, state, probs, action, advantage)
    return probs


# ---------------------------------------------------------------- episodes -> encodings

def line_utterances(line: DialogueLine):
    if line.is_kb:
        return [line.teacher]
    out = [line.teacher] if line.teacher else []
    if line.student is not None:
        out.append(line.student)
    return out


def memory_texts(lines):
    out = []
    for line in lines:
        out.extend(line_utterances(line))
    return out


def answer_candidates(memory_tokens):
    seen = {}
    for toks in memory_tokens:
        for t in toks:
            seen.setdefault(t)
    return list(seen)


def encode_answer(model, query_text, memory_lines, answer_tokens=()):
    tokenize = model.vocab.tokenize
    mems = [tokenize(t) for t in memory_texts(memory_lines)]
    mems = [m for m in mems if m]
    query = tokenize(query_text)
    # the shared embedding makes u_N always contain the query's own tokens, so
    # they would outscore every real answer; an answer never repeats the question
    asked = set(query)
    cands = [c for c in answer_candidates(mems) if c not in asked]
    entities = model.vocab.entity_tokens
    if entities:
        cands = [c for c in cands if c in entities] or cands
    answer_tokens = set(answer_tokens)
    gold = tuple(i for i, c in enumerate(cands) if c in answer_tokens)
    enc = encode(model, query, mems, [[c] for c in cands], gold)
    enc.cand_tokens = cands
    return enc


def encode_episode(model, ep: Episode):
    """Encoding of the final-answer step; gold = the student's rewarded answer when
    reward is 1, else the teacher-known answer set."""
    ai = ep.answer_index
    line = ep.lines[ai]
    answers = [model.vocab.tokenize(a)[0] for a in ep.answer_set if model.vocab.tokenize(a)]
    enc = encode_answer(model, line.teacher, ep.lines[:ai], answers)
    student = model.vocab.tokenize(line.student) if line.student else []
    enc.extra["student"] = student[0] if len(student) == 1 else " ".join(student)
    enc.extra["reward"] = line.reward
    return enc


def encode_choice(model, query_text, memory_lines, candidate_texts, gold=()):
    tokenize = model.vocab.tokenize
    mems = [m for m in (tokenize(t) for t in memory_texts(memory_lines)) if m]
    cands = [tokenize(c) for c in candidate_texts]
    enc = encode(model, tokenize(query_text), mems, cands, gold)
    enc.cand_tokens = list(candidate_texts)
    return enc
