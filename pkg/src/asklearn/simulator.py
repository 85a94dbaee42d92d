"""Teacher/student dialogue simulator for the nine asking-questions tasks and the
numbered, tab-separated corpus format."""

from __future__ import annotations

import hashlib
import random
import re
from dataclasses import dataclass, field, replace
from typing import Optional

from . import kb as kbmod
from .kb import (CorruptionScheme, KnowledgeBase, corrupt_question, hide_facts,
                 relevant_facts, render_question, templates_for)
from .numerics import RngStream

TASKS = tuple(range(1, 10))
TASK_NAMES = {
    1: "Question Paraphrase",
    2: "Question Verification",
    3: "Ask For Relevant Knowledge",
    4: "Knowledge Verification",
    5: "Missing Question Entity",
    6: "Missing Answer Entity",
    7: "Missing Relation Entity",
    8: "Missing Triple",
    9: "Missing Everything",
}
VERIFICATION_TASKS = (2, 4)
CORRUPTED_TASKS = (1, 2)
ACQUISITION_TASKS = (5, 6, 7, 8, 9)

POSITIVE_FEEDBACK = (
    "That's correct.",
    "Yes, that's right.",
    "That's right.",
    "Correct!",
    "Yes, that is correct.",
    "Well done, that's correct.",
)
NEGATIVE_FEEDBACK = (
    "Sorry, that's not right.",
    "No, that's incorrect.",
    "Wrong.",
    "No. That's wrong.",
    "That's not correct.",
    "Sorry, that's wrong.",
)
ASK_PARAPHRASE = "What do you mean ?"
ASK_HINT = "Can you give me a hint ?"
ASK_ANSWER = "I don't know. What's the answer?"

HISTORY_PAIRS = 5
# genre questions are only used for history padding: ten genres cannot supply
# enough distractors and each genre drags in a large share of the KB
ASKED_RELATIONS = ("directed_by", "written_by", "starred_actors", "release_year")
MAX_RETRIES = 20
N_VERIFY_CANDIDATES = 4
# distractor answers shown alongside the relevant facts when facts are hidden;
# without them the answer would be the only plausible entity left in view
ACQUISITION_DECOYS = 20


def default_decoys(task):
    return ACQUISITION_DECOYS if task in ACQUISITION_TASKS else 0


class SimulatorError(RuntimeError):
    pass


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DialogueLine:
    teacher: str
    student: Optional[str] = None
    reward: Optional[int] = None
    is_kb: bool = False


@dataclass
class Episode:
    lines: list
    task: Optional[int] = None
    regime: Optional[str] = None
    question_entity: Optional[str] = None
    relation: Optional[str] = None
    answer_set: tuple = ()
    asked: bool = False
    asked_relevant: Optional[bool] = None
    candidates: tuple = ()
    gold_candidates: tuple = ()

    @property
    def answer_index(self) -> int:
        for i, line in enumerate(self.lines):
            if line.reward is not None:
                return i
        raise CorpusError("episode has no answer line")

    @property
    def answer_line(self) -> DialogueLine:
        return self.lines[self.answer_index]

    @property
    def reward(self) -> int:
        return self.answer_line.reward

    @property
    def student_answer(self) -> str:
        return self.answer_line.student

    @property
    def question_index(self) -> Optional[int]:
        """Index of the exchange where the student asked its clarification question."""
        for i, line in enumerate(self.lines[:self.answer_index]):
            if line.student is not None and line.reward is None and self._is_ask(line):
                return i
        return None

    def _is_ask(self, line):
        # history answers are entity names; the student's own question is the
        # only student utterance ending in '?'
        return line.student.rstrip().endswith("?")

    def feedback_after_question(self) -> Optional[str]:
        qi = self.question_index
        if qi is None or qi + 1 >= len(self.lines):
            return None
        nxt = self.lines[qi + 1]
        if nxt.student is not None or nxt.is_kb:
            return None
        return nxt.teacher


@dataclass(frozen=True)
class StudentScript:
    p_correct_answer: float = 0.5
    p_relevant_question: float = 0.5

    def __post_init__(self):
        for p in (self.p_correct_answer, self.p_relevant_question):
            if not 0.0 <= p <= 1.0:
                raise SimulatorError("script probabilities must lie in [0, 1]")


PERFECT_SCRIPT = StudentScript(1.0, 1.0)


@dataclass(frozen=True)
class DatasetSpec:
    task: int
    regime: str
    split: str
    n_episodes: int
    seed: int
    script: StudentScript = field(default_factory=StudentScript)
    decoys: Optional[int] = None
    max_answers: int = 1

    def __post_init__(self):
        if self.task not in TASKS:
            raise SimulatorError(f"task must be 1..9, got {self.task}")
        if self.regime not in ("QA", "AQ", "Mix"):
            raise SimulatorError(f"regime must be QA, AQ or Mix, got {self.regime!r}")
        if self.split not in ("train", "dev", "test"):
            raise SimulatorError(f"unknown split {self.split!r}")
        if self.n_episodes < 0:
            raise SimulatorError("n_episodes must be >= 0")

    @property
    def effective_decoys(self) -> int:
        return default_decoys(self.task) if self.decoys is None else self.decoys

    @property
    def effective_script(self) -> StudentScript:
        return PERFECT_SCRIPT if self.split == "test" else self.script


# ---------------------------------------------------------------- small pieces

def feedback_line(positive: bool, rng: random.Random) -> str:
    return rng.choice(POSITIVE_FEEDBACK if positive else NEGATIVE_FEEDBACK)


def _lcfirst(text):
    return text[:1].lower() + text[1:]


def _without_qmark(text):
    return text[:-2] if text.endswith(" ?") else text


def _entities_by_kind(kb: KnowledgeBase):
    cache = getattr(kb, "_by_kind", None)
    if cache is None:
        cache = {k: sorted(kb.entities_of_kind(k), key=lambda e: e.id) for k in kbmod.KINDS}
        kb._by_kind = cache
    return cache


SPLIT_SHARES = (("train", 14), ("dev", 3), ("test", 3))


def link_split(head, relation, tail) -> str:
    """Split owning the (head, relation, tail) link.  Questions for a split only ask
    about its own links, so no test answer is ever a training target."""
    h = hashlib.sha256(f"{head.surface}|{relation}|{tail.surface}".encode()).digest()
    r = int.from_bytes(h[:4], "little") % sum(n for _, n in SPLIT_SHARES)
    for name, n in SPLIT_SHARES:
        if r < n:
            return name
        r -= n
    raise AssertionError("unreachable")


def _links_in(split, template, entity, answers):
    if template.direction == kbmod.HEAD_TO_TAIL:
        pairs = [(entity, a) for a in answers]
    else:
        pairs = [(a, entity) for a in answers]
    return all(link_split(h, template.relation, t) == split for h, t in pairs)


def _question_index(kb, relations, max_answers, split):
    """(template, [entities]) pairs whose questions are valid for the split."""
    cache = kb.__dict__.setdefault("_question_index", {})
    key = (tuple(relations), max_answers, split)
    if key not in cache:
        out = []
        for template in templates_for(relations):
            valid = []
            for e in _entities_by_kind(kb)[template.entity_kind]:
                answers = kb.answers(e, template.relation, template.direction)
                if (answers and len(answers) <= max_answers
                        and (split is None or _links_in(split, template, e, answers))):
                    valid.append(e)
            if valid:
                out.append((template, valid))
        cache[key] = out
    return cache[key]


def _sample_question(kb, rng, max_answers, exclude=frozenset(), relations=None, split=None):
    index = _question_index(kb, relations or kb.relations, max_answers, split)
    if not index:
        return None
    template, entities = rng.choice(index)
    entity = rng.choice(entities)
    if entity in exclude:
        return None
    answers = kb.answers(entity, template.relation, template.direction)
    if exclude.intersection(answers):
        return None
    return template, entity, answers


def history_pad(kb: KnowledgeBase, rng: random.Random, exclude=frozenset(),
                n_pairs=HISTORY_PAIRS, max_answers=3) -> list:
    """Unrelated teacher question / correct student answer exchanges."""
    if not kb.facts:
        raise SimulatorError("cannot pad history from an empty KB")
    exclude = frozenset(exclude)
    out = []
    for _ in range(n_pairs):
        for _attempt in range(50):
            drawn = _sample_question(kb, rng, max_answers, exclude)
            if drawn is not None:
                break
        else:
            raise SimulatorError("KB too small to find history entities disjoint from the episode")
        template, entity, answers = drawn
        text = render_question(template, entity, rng.randrange(len(template.surfaces)))
        out.append(DialogueLine(text, rng.choice(answers).surface))
    return out


def _decoy_pairs(kb, rng, template, exclude, k):
    """k distractor answers, each drawn as the answer to the same template about
    another random entity.  Drawing them like real answers keeps KB frequency
    from giving the true answer away."""
    pool = _entities_by_kind(kb)[template.entity_kind]
    chosen = {}
    for _ in range(20 * k):
        if len(chosen) >= k:
            break
        e = rng.choice(pool)
        if e in exclude:
            continue
        options = [a for a in kb.answers(e, template.relation, template.direction)
                   if a not in exclude and a not in chosen]
        if options:
            chosen[rng.choice(options)] = e
    return [(e, d) for d, e in chosen.items()]


# ---------------------------------------------------------------- scenes

@dataclass
class Scene:
    """Everything drawn for one episode before the student acts."""
    task: int
    template: object
    q_entity: object
    answers: list
    view: list
    question: str
    paraphrase: str
    history: list
    candidates: list
    gold: list
    hint: object
    linking: list


def _linking(facts, scene_q, relation, answers):
    return [f for f in facts if kbmod._links(f, scene_q, relation, set(answers))]


def draw_scene(task, kb, rng, split="train", flawed=True, decoys=20, max_answers=1,
               retries=MAX_RETRIES, corrupt=None) -> Scene:
    """Sample a question the KB supports plus everything the dialogue needs.

    `corrupt` overrides which flawed questions get misspelt (default: tasks 1-2).
    """
    if corrupt is None:
        corrupt = flawed and task in CORRUPTED_TASKS
    for _ in range(retries):
        scene = _try_scene(task, kb, rng, split, flawed, decoys, max_answers, corrupt)
        if scene is not None:
            return scene
    raise SimulatorError(f"could not draw a task {task} episode in {retries} attempts")


def _try_scene(task, kb, rng, split, flawed, decoys, max_answers, corrupt):
    relations = [r for r in ASKED_RELATIONS if r in kb.relations] or None
    drawn = _sample_question(kb, rng, max_answers, relations=relations, split=split)
    if drawn is None:
        return None
    template, q, answers = drawn
    relation = template.relation
    relevant = relevant_facts(kb, q, answers)
    linking = _linking(relevant, q, relation, answers)
    if not linking:
        return None
    facts = set(relevant)
    hiding = flawed and task in ACQUISITION_TASKS
    # each distractor is hidden exactly as the real answer would be for its own
    # question, so the answer is not the only entity missing a fact
    for e, d in _decoy_pairs(kb, rng, template, {q, *answers}, decoys * len(answers)):
        own = kb.by_entity[d]
        facts.update(hide_facts(own, task, e, relation, [d]) if hiding else own)
    view = sorted(facts, key=kb.position)
    if hiding:
        view = hide_facts(view, task, q, relation, answers)

    n_para = len(template.surfaces)
    idx = rng.randrange(n_para)
    other = (idx + 1 + rng.randrange(n_para - 1)) % n_para
    question = render_question(template, q, idx)
    if corrupt:
        question = corrupt_question(question, template, CorruptionScheme(split))
    paraphrase = render_question(template, q, other)

    try:
        history = history_pad(kb, rng, {q, *answers})
    except SimulatorError:
        return None

    candidates, gold = [], []
    if task == 2:
        pool = [e for e in _entities_by_kind(kb)[template.entity_kind] if e != q]
        if len(pool) < N_VERIFY_CANDIDATES - 1:
            return None
        others = rng.sample(pool, N_VERIFY_CANDIDATES - 1)
        texts = [paraphrase] + [render_question(template, e, other) for e in others]
        order = list(range(len(texts)))
        rng.shuffle(order)
        candidates = ["Do you mean " + _lcfirst(texts[i]) for i in order]
        gold = [order.index(0)]
    elif task == 4:
        candidates = [f"Does it have something to do with {f.text()} ?" for f in relevant]
        gold = [i for i, f in enumerate(relevant) if f in linking]
        if len(gold) == len(candidates):
            return None
    hint = rng.choice(linking)
    return Scene(task, template, q, list(answers), view, question, paraphrase, history,
                 candidates, gold, hint, linking)


def ask_exchange(scene: Scene, relevant: bool, rng: random.Random):
    """(student question, teacher reply) for the task's clarification question."""
    task = scene.task
    if task == 1:
        return ASK_PARAPHRASE, "I mean " + _lcfirst(_without_qmark(scene.paraphrase)) + "."
    if task == 3:
        return ASK_HINT, "It is related to the kb fact that " + scene.hint.text()
    if task in VERIFICATION_TASKS:
        if relevant:
            pick = rng.choice(scene.gold)
        else:
            pick = rng.choice([i for i in range(len(scene.candidates)) if i not in scene.gold])
        return scene.candidates[pick], feedback_line(relevant, rng)
    reveal = ", ".join(a.surface for a in scene.answers)
    return ASK_ANSWER, f"The answer is {reveal}."


def _wrong_answer(kb, scene, rng):
    kind = scene.template.answer_kind
    answers = set(scene.answers)
    seen = {}
    for f in scene.view:
        for e in f.entities():
            if e.kind == kind and e not in answers:
                seen[e] = None
    pool = list(seen) or [e for e in _entities_by_kind(kb)[kind] if e not in answers]
    return rng.choice(pool)


def kb_lines(view):
    return [DialogueLine(f.text(), is_kb=True) for f in view]


def generate_episode(task, regime, kb, script: StudentScript, rng: random.Random,
                     split="train", flawed=True, decoys=20, max_answers=1) -> Episode:
    if regime not in ("QA", "AQ"):
        raise SimulatorError(f"episode regime must be QA or AQ, got {regime!r}")
    scene = draw_scene(task, kb, rng, split, flawed, decoys, max_answers)
    correct = rng.random() < script.p_correct_answer
    answer = rng.choice(scene.answers) if correct else _wrong_answer(kb, scene, rng)
    final = DialogueLine(scene.question, answer.surface, int(correct))
    feedback = DialogueLine(feedback_line(correct, rng))

    lines = kb_lines(scene.view)
    asked_relevant = None
    if regime == "QA":
        lines += scene.history + [final, feedback]
    else:
        asked_relevant = rng.random() < script.p_relevant_question
        student_q, reply = ask_exchange(scene, asked_relevant, rng)
        exchange = [DialogueLine(scene.question, student_q), DialogueLine(reply)]
        if task in ACQUISITION_TASKS:
            lines += exchange + scene.history + [final, feedback]
        else:
            lines += scene.history + exchange + [final, feedback]
        if task not in VERIFICATION_TASKS:
            asked_relevant = None
    return Episode(
        lines=lines, task=task, regime=regime,
        question_entity=scene.q_entity.surface, relation=scene.template.relation,
        answer_set=tuple(a.surface for a in scene.answers), asked=regime == "AQ",
        asked_relevant=asked_relevant,
        candidates=tuple(scene.candidates), gold_candidates=tuple(scene.gold),
    )


def generate_dataset(spec: DatasetSpec, kb: KnowledgeBase):
    """Corpus text plus episodes; episode i depends only on (spec, seed, i)."""
    stream = RngStream(spec.seed, "episodes")
    script = spec.effective_script
    episodes = []
    for i in range(spec.n_episodes):
        rng = stream.python(i)
        regime = spec.regime
        if regime == "Mix":
            regime = "AQ" if rng.random() < 0.5 else "QA"
        episodes.append(generate_episode(spec.task, regime, kb, script, rng, spec.split,
                                         decoys=spec.effective_decoys,
                                         max_answers=spec.max_answers))
    header = {"version": "1", "task": str(spec.task), "regime": spec.regime,
              "split": spec.split, "seed": str(spec.seed), "n": str(spec.n_episodes)}
    corpus = Corpus(episodes, header)
    return write_corpus(corpus), corpus


# ---------------------------------------------------------------- corpus format

class Corpus(list):
    """Episode list with the optional file header."""

    def __init__(self, episodes=(), header=None):
        super().__init__(episodes)
        self.header = dict(header or {})


_NUMBERED = re.compile(r"^(\d+) (.*)$")
_META_KEYS = ("task", "regime", "entity", "relation", "answers", "asked", "relevant",
              "candidates", "gold")


def _check_field(text, what):
    if "\t" in text or "\n" in text:
        raise CorpusError(f"{what} may not contain tabs or newlines: {text!r}")
    return text


def _episode_meta(ep: Episode):
    if ep.task is None:
        return None
    items = [("task", str(ep.task)), ("regime", ep.regime or ""),
             ("entity", ep.question_entity or ""), ("relation", ep.relation or ""),
             ("answers", "|".join(ep.answer_set)), ("asked", str(int(ep.asked)))]
    if ep.asked_relevant is not None:
        items.append(("relevant", str(int(ep.asked_relevant))))
    if ep.candidates:
        items.append(("candidates", "|".join(ep.candidates)))
        items.append(("gold", ",".join(str(g) for g in ep.gold_candidates)))
    return "#episode\t" + "\t".join(f"{k}={_check_field(v, k)}" for k, v in items)


def format_line(n: int, line: DialogueLine) -> str:
    if line.is_kb:
        return f"{n} kb: {_check_field(line.teacher, 'kb line')}"
    parts = [_check_field(line.teacher, "teacher text")]
    if line.student is not None:
        parts.append(_check_field(line.student, "student text"))
        if line.reward is not None:
            if line.reward not in (0, 1):
                raise CorpusError(f"reward must be 0 or 1, got {line.reward!r}")
            parts.append(str(line.reward))
    return f"{n} " + "\t".join(parts)


def write_corpus(corpus) -> str:
    out = []
    header = getattr(corpus, "header", None)
    if header:
        out.append("#corpus\t" + "\t".join(f"{k}={v}" for k, v in header.items()))
    for ep in corpus:
        meta = _episode_meta(ep)
        if meta:
            out.append(meta)
        for n, line in enumerate(ep.lines, 1):
            out.append(format_line(n, line))
    return "".join(line + "\n" for line in out)


def _parse_meta(text, lineno):
    fields = {}
    for item in text.split("\t")[1:]:
        key, sep, value = item.partition("=")
        if not sep or key not in _META_KEYS:
            raise CorpusError(f"line {lineno}: bad episode metadata field {item!r}")
        fields[key] = value
    try:
        return dict(
            task=int(fields["task"]) if "task" in fields else None,
            regime=fields.get("regime") or None,
            question_entity=fields.get("entity") or None,
            relation=fields.get("relation") or None,
            answer_set=tuple(a for a in fields.get("answers", "").split("|") if a),
            asked=fields.get("asked", "0") == "1",
            asked_relevant=(fields["relevant"] == "1") if "relevant" in fields else None,
            candidates=tuple(fields["candidates"].split("|")) if "candidates" in fields else (),
            gold_candidates=tuple(int(g) for g in fields["gold"].split(",") if g)
            if "gold" in fields else (),
        )
    except ValueError as exc:
        raise CorpusError(f"line {lineno}: {exc}") from None


def _parse_body(body, lineno):
    if body.startswith("kb: "):
        if "\t" in body:
            raise CorpusError(f"line {lineno}: kb line may not contain tabs")
        return DialogueLine(body[4:], is_kb=True)
    parts = body.split("\t")
    if not parts[0]:
        raise CorpusError(f"line {lineno}: empty teacher text")
    if len(parts) == 1:
        return DialogueLine(parts[0])
    if len(parts) == 2:
        return DialogueLine(parts[0], parts[1])
    if len(parts) == 3:
        if parts[2] not in ("0", "1"):
            raise CorpusError(f"line {lineno}: reward must be 0 or 1, got {parts[2]!r}")
        return DialogueLine(parts[0], parts[1], int(parts[2]))
    raise CorpusError(f"line {lineno}: too many tab-separated fields")


def parse_corpus(source: str) -> Corpus:
    if source and not source.endswith("\n"):
        source += "\n"
    corpus = Corpus()
    current, meta, expected = None, None, 1

    def close(lineno):
        if current is None:
            return
        rewards = sum(1 for l in current.lines if l.reward is not None)
        if rewards != 1:
            raise CorpusError(f"line {lineno}: episode must carry exactly one reward line, "
                              f"found {rewards}")
        corpus.append(current)

    for lineno, text in enumerate(source.split("\n")[:-1], 1):
        if text.startswith("#corpus"):
            if lineno != 1:
                raise CorpusError(f"line {lineno}: corpus header must be the first line")
            for item in text.split("\t")[1:]:
                key, sep, value = item.partition("=")
                if not sep:
                    raise CorpusError(f"line {lineno}: bad header field {item!r}")
                corpus.header[key] = value
            continue
        if text.startswith("#episode"):
            if meta is not None:
                raise CorpusError(f"line {lineno}: dangling episode metadata")
            close(lineno)
            current, expected = None, 1
            meta = _parse_meta(text, lineno)
            continue
        m = _NUMBERED.match(text)
        if not m:
            raise CorpusError(f"line {lineno}: malformed line {text!r}")
        n = int(m.group(1))
        line = _parse_body(m.group(2), lineno)
        if n == 1:
            if meta is None:
                close(lineno)
            current = Episode(lines=[], **(meta or {}))
            meta, expected = None, 1
        elif current is None or n != expected:
            raise CorpusError(f"line {lineno}: bad numbering, expected {expected} got {n}")
        if meta is not None:
            raise CorpusError(f"line {lineno}: episode metadata must precede line 1")
        current.lines.append(line)
        expected = n + 1
    if meta is not None:
        raise CorpusError("dangling episode metadata at end of file")
    close(len(source.split("\n")))
    return corpus


def read_corpus(path) -> Corpus:
    with open(path, encoding="utf-8") as fh:
        return parse_corpus(fh.read())


def save_corpus(path, corpus):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(write_corpus(corpus))


def with_lines(ep: Episode, lines) -> Episode:
    return replace(ep, lines=list(lines))
