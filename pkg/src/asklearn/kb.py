"""Movie knowledge base: facts, question templates, fact hiding and typo corruption."""

from __future__ import annotations

import random
import re
from dataclasses import dataclass, field

RELATION_TAIL_KIND = {
    "directed_by": "person",
    "written_by": "person",
    "starred_actors": "person",
    "release_year": "year",
    "has_genre": "genre",
}
RELATIONS = tuple(RELATION_TAIL_KIND)
KINDS = ("movie", "person", "year", "genre")

HEAD_TO_TAIL = "head_to_tail"
TAIL_TO_HEAD = "tail_to_head"
SLOT = "{e}"

_TOKEN_RE = re.compile(r"[A-Za-z0-9_]+(?:['’][A-Za-z]+)*|[^\sA-Za-z0-9_]")


class KBError(ValueError):
    pass


@dataclass(frozen=True)
class Entity:
    id: int
    surface: str
    kind: str

    @property
    def token(self) -> str:
        return to_token(self.surface)


@dataclass(frozen=True)
class KBFact:
    head: Entity
    relation: str
    tails: tuple

    def mentions(self, entity: Entity) -> bool:
        return entity == self.head or entity in self.tails

    def entities(self):
        return (self.head,) + self.tails

    def text(self) -> str:
        """Memory rendering, e.g. 'Forrest Gump starred_actors Tom Hanks, Robin Wright'."""
        return f"{self.head.surface} {self.relation} " + ", ".join(t.surface for t in self.tails)


def to_token(surface: str) -> str:
    return "_".join(surface.split())


class KnowledgeBase:
    """Immutable fact store with entity and relation indices."""

    def __init__(self, facts, relations=RELATIONS):
        self.relations = tuple(relations)
        self.facts = list(facts)
        self._order = {}
        self.entities = {}
        for i, fact in enumerate(self.facts):
            if fact in self._order:
                raise KBError(f"duplicate fact: {fact.text()}")
            if fact.relation not in self.relations:
                raise KBError(f"unknown relation {fact.relation!r}")
            self._order[fact] = i
            for ent in fact.entities():
                known = self.entities.get(ent.surface)
                if known is not None and known != ent:
                    raise KBError(f"conflicting entity definitions for {ent.surface!r}")
                self.entities[ent.surface] = ent
        self.by_entity, self.by_relation = self._build_indices()

    def _build_indices(self):
        by_entity = {e: [] for e in self.entities.values()}
        by_relation = {r: [] for r in self.relations}
        for fact in self.facts:
            for ent in dict.fromkeys(fact.entities()):
                by_entity[ent].append(fact)
            by_relation[fact.relation].append(fact)
        return by_entity, by_relation

    def check_indices(self) -> bool:
        return (self.by_entity, self.by_relation) == self._build_indices()

    def entity(self, surface: str) -> Entity:
        try:
            return self.entities[surface]
        except KeyError:
            raise KBError(f"unknown entity {surface!r}") from None

    def entities_of_kind(self, kind: str):
        return [e for e in self.entities.values() if e.kind == kind]

    def position(self, fact: KBFact) -> int:
        return self._order[fact]

    def answers(self, entity: Entity, relation: str, direction: str):
        """Entities linked to `entity` through `relation`, in KB order."""
        out = {}
        for fact in self.by_entity.get(entity, ()):
            if fact.relation != relation:
                continue
            if direction == HEAD_TO_TAIL and fact.head == entity:
                out.update(dict.fromkeys(fact.tails))
            elif direction == TAIL_TO_HEAD and entity in fact.tails:
                out[fact.head] = None
        return list(out)

    def __len__(self):
        return len(self.facts)

    def __eq__(self, other):
        return (isinstance(other, KnowledgeBase) and self.relations == other.relations
                and self.facts == other.facts)


# ---------------------------------------------------------------- file format

def parse_kb(source: str) -> KnowledgeBase:
    relations = []
    raw = []
    for lineno, line in enumerate(source.split("\n"), 1):
        if not line.strip():
            continue
        if line.startswith("#relation "):
            name = line[len("#relation "):].strip()
            if name not in RELATION_TAIL_KIND:
                raise KBError(f"line {lineno}: unknown relation {name!r}")
            if name in relations:
                raise KBError(f"line {lineno}: relation {name!r} declared twice")
            relations.append(name)
            continue
        if line.startswith("#"):
            continue
        parts = line.split("|")
        if len(parts) != 3 or not all(p.strip() for p in parts):
            raise KBError(f"line {lineno}: expected '<head>|<relation>|<tails>'")
        head, rel, tails = (p.strip() for p in parts)
        if rel not in relations:
            raise KBError(f"line {lineno}: unknown relation {rel!r}")
        tail_list = [t.strip() for t in tails.split(",")]
        if not all(tail_list):
            raise KBError(f"line {lineno}: empty tail")
        if len(set(tail_list)) != len(tail_list):
            raise KBError(f"line {lineno}: duplicate tail")
        raw.append((lineno, head, rel, tail_list))

    entities = {}

    def intern(surface, kind, lineno):
        ent = entities.get(surface)
        if ent is None:
            ent = entities[surface] = Entity(len(entities), surface, kind)
        elif ent.kind != kind:
            raise KBError(f"line {lineno}: {surface!r} used as {kind} and {ent.kind}")
        return ent

    facts, seen = [], set()
    for lineno, head, rel, tail_list in raw:
        fact = KBFact(intern(head, "movie", lineno), rel,
                      tuple(intern(t, RELATION_TAIL_KIND[rel], lineno) for t in tail_list))
        if fact in seen:
            raise KBError(f"line {lineno}: duplicate fact")
        seen.add(fact)
        facts.append(fact)
    return KnowledgeBase(facts, relations)


def write_kb(kb: KnowledgeBase) -> str:
    lines = [f"#relation {r}" for r in kb.relations]
    for f in kb.facts:
        lines.append(f"{f.head.surface}|{f.relation}|" + ",".join(t.surface for t in f.tails))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- synthetic KB

_TITLE_ADJ = """Silent Broken Golden Hidden Crimson Frozen Burning Distant Lost Hollow
Wild Quiet Savage Secret Bitter Electric Midnight Northern Painted Restless
Scarlet Shattered Sleeping Stolen Summer Velvet Wandering Winter Iron Paper""".split()
_TITLE_NOUN = """Harbor River Empire Garden Horizon Kingdom Mirror Orchard Voyage Canyon
Lantern Meadow Fortress Island Compass Shadow Thunder Valley Citadel Harvest
Promise Station Tide Ember Signal Frontier Cathedral Letter Circus Labyrinth""".split()
_FIRST = """Alma Bruno Cecil Dora Edgar Flora Gideon Hazel Ingrid Jasper Klara Lionel
Mabel Nestor Olive Percy Quinn Rosalind Silas Tamsin Ulric Vera Wallace Xenia
Yorick Zelda Ansel Beatrix Cosmo Delphine Emrys Fenella Gustav Hester Ivo Juno""".split()
_LAST = """Abbott Barlow Corrigan Dunmore Ellery Fairweather Grimsby Holloway Inglis
Jessop Kettering Lockwood Marchbank Nettleton Ormsby Pemberton Quarrie Radcliffe
Stanhope Thackeray Underhill Vance Whitlock Yardley Ashdown Blackwood Calloway
Drummond Everly Fenwick""".split()
_GENRES = ["Drama", "Comedy", "Thriller", "Western", "Romance", "Horror",
           "Documentary", "Musical", "Animation", "Mystery"]
_YEARS = [str(y) for y in range(1970, 2010)]


def generate_kb(n_movies=200, n_people=150, seed=0, relations=RELATIONS,
                max_actors=3) -> KnowledgeBase:
    """Random movie KB with one (head, relation, tail) triple per fact.

    Titles and names come from fixed word lists so every surface is unique and
    no surface of one kind can be mistaken for another.
    """
    rng = random.Random(seed)
    titles = [f"{a} {n}" for a in _TITLE_ADJ for n in _TITLE_NOUN]
    names = [f"{f} {l}" for f in _FIRST for l in _LAST]
    if n_movies > len(titles) or n_people > len(names) or n_people < 1:
        raise KBError("requested more entities than the name lists provide")
    titles = rng.sample(titles, n_movies)
    names = rng.sample(names, n_people)

    entities = {}

    def ent(surface, kind):
        if surface not in entities:
            entities[surface] = Entity(len(entities), surface, kind)
        return entities[surface]

    facts = []
    for title in titles:
        movie = ent(title, "movie")
        for rel in relations:
            kind = RELATION_TAIL_KIND[rel]
            if rel == "starred_actors":
                tails = rng.sample(names, min(len(names), rng.randint(1, max_actors)))
            elif kind == "person":
                tails = [rng.choice(names)]
            elif kind == "year":
                tails = [rng.choice(_YEARS)]
            else:
                tails = [rng.choice(_GENRES)]
            for t in tails:
                facts.append(KBFact(movie, rel, (ent(t, kind),)))
    return KnowledgeBase(facts, relations)


# ---------------------------------------------------------------- retrieval / hiding

def relevant_facts(kb: KnowledgeBase, q_entity: Entity, answers) -> list:
    if q_entity not in kb.by_entity:
        raise KBError(f"unknown entity {q_entity.surface!r}")
    hits = set(kb.by_entity[q_entity])
    for a in answers:
        hits.update(kb.by_entity.get(a, ()))
    return sorted(hits, key=kb.position)


def _links(fact, q_entity, relation, answers):
    if fact.relation != relation:
        return False
    if fact.head == q_entity and any(t in answers for t in fact.tails):
        return True
    return fact.head in answers and q_entity in fact.tails


def hide_facts(view, task: int, q_entity: Entity, relation: str, answers) -> list:
    """Drop the facts a knowledge-acquisition task keeps from the student."""
    answers = set(answers)

    def hits_answer(f):
        return any(f.mentions(a) for a in answers)

    if task <= 4:
        return list(view)
    if task == 5:
        drop = lambda f: f.mentions(q_entity)
    elif task == 6:
        drop = hits_answer
    elif task == 7:
        drop = lambda f: f.relation == relation
    elif task == 8:
        drop = lambda f: _links(f, q_entity, relation, answers)
    elif task == 9:
        drop = lambda f: f.mentions(q_entity) or hits_answer(f) or f.relation == relation
    else:
        raise KBError(f"unknown task {task}")
    return [f for f in view if not drop(f)]


# ---------------------------------------------------------------- questions

@dataclass(frozen=True)
class QuestionTemplate:
    relation: str
    direction: str
    surfaces: tuple
    keywords: tuple

    def __post_init__(self):
        if len(self.surfaces) < 2 or len(set(self.surfaces)) != len(self.surfaces):
            raise KBError("a template needs at least two distinct paraphrases")
        for s in self.surfaces:
            if s.count(SLOT) != 1:
                raise KBError(f"paraphrase {s!r} must contain exactly one slot")

    @property
    def entity_kind(self) -> str:
        return "movie" if self.direction == HEAD_TO_TAIL else RELATION_TAIL_KIND[self.relation]

    @property
    def answer_kind(self) -> str:
        return RELATION_TAIL_KIND[self.relation] if self.direction == HEAD_TO_TAIL else "movie"


TEMPLATES = (
    QuestionTemplate("directed_by", HEAD_TO_TAIL,
                     ("Who directed {e} ?", "Who was the director of {e} ?"),
                     ("directed", "director")),
    QuestionTemplate("written_by", HEAD_TO_TAIL,
                     ("Who is the author of {e} ?", "Who was the writer of {e} ?"),
                     ("author", "writer")),
    QuestionTemplate("starred_actors", HEAD_TO_TAIL,
                     ("Who starred in {e} ?", "Who acted in {e} ?"),
                     ("starred", "acted")),
    QuestionTemplate("release_year", HEAD_TO_TAIL,
                     ("When was {e} released ?", "What year was {e} released in ?"),
                     ("released", "year")),
    QuestionTemplate("has_genre", HEAD_TO_TAIL,
                     ("What genre is {e} ?", "What kind of film is {e} ?"),
                     ("genre", "kind", "film")),
    QuestionTemplate("directed_by", TAIL_TO_HEAD,
                     ("Which movie did {e} direct ?", "Which film was directed by {e} ?"),
                     ("movie", "direct", "film", "directed")),
    QuestionTemplate("written_by", TAIL_TO_HEAD,
                     ("Which movie did {e} write ?", "Which film was written by {e} ?"),
                     ("movie", "write", "film", "written")),
    QuestionTemplate("starred_actors", TAIL_TO_HEAD,
                     ("Which movie did {e} star in ?", "Which film did {e} appear in ?"),
                     ("movie", "star", "film", "appear")),
)


def templates_for(relations=RELATIONS):
    return [t for t in TEMPLATES if t.relation in relations]


def all_keywords():
    return sorted({k for t in TEMPLATES for k in t.keywords})


def render_question(template: QuestionTemplate, entity: Entity, paraphrase_index: int) -> str:
    if not 0 <= paraphrase_index < len(template.surfaces):
        raise KBError(f"paraphrase index {paraphrase_index} out of range")
    return template.surfaces[paraphrase_index].replace(SLOT, entity.surface)


# ---------------------------------------------------------------- corruption

VOWELS = set("aeiou")


def _double_consonant(word):
    # 'movie' -> 'movvie', 'star' -> 'sttar': the last consonant that precedes a vowel
    idx = [i for i in range(len(word) - 1)
           if word[i].isalpha() and word[i] not in VOWELS and word[i + 1] in VOWELS]
    if not idx:
        idx = [i for i, ch in enumerate(word) if ch not in VOWELS] or [len(word) - 1]
    i = idx[-1]
    return word[:i + 1] + word[i] + word[i + 1:]


def _swap_letters(word):
    if len(word) >= 2 and word[0] != word[1]:
        return word[1] + word[0] + word[2:]
    if len(word) >= 2 and word[-1] != word[-2]:
        return word[:-2] + word[-1] + word[-2]
    return word + word[-1:] * 2


def _drop_vowel(word):
    for i, ch in enumerate(word):
        if ch in VOWELS:
            if len(word) > 1:
                return word[:i] + word[i + 1:]
            break
    return word[:-1] + word[-1:] * 3


_RULES = {"train": _double_consonant, "dev": _swap_letters, "test": _drop_vowel}


@dataclass(frozen=True)
class CorruptionScheme:
    split: str
    rule: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.split not in _RULES:
            raise KBError(f"unknown split {self.split!r}")
        object.__setattr__(self, "rule", _RULES[self.split])

    def __call__(self, word: str) -> str:
        return self.rule(word)


def _corrupt_words(text, keywords, scheme):
    if not keywords:
        return text
    pattern = re.compile(r"\b(" + "|".join(map(re.escape, keywords)) + r")\b")
    return pattern.sub(lambda m: scheme(m.group(1)), text)


def corrupt_question(question: str, template: QuestionTemplate, scheme: CorruptionScheme) -> str:
    """Misspell every template keyword; the entity surface is left untouched."""
    for surface in template.surfaces:
        prefix, suffix = surface.split(SLOT)
        if (question.startswith(prefix) and question.endswith(suffix)
                and len(question) > len(prefix) + len(suffix)):
            middle = question[len(prefix):len(question) - len(suffix)]
            return (_corrupt_words(prefix, template.keywords, scheme) + middle
                    + _corrupt_words(suffix, template.keywords, scheme))
    return _corrupt_words(question, template.keywords, scheme)


# ---------------------------------------------------------------- tokenization

class Tokenizer:
    """Word tokenizer that keeps multi-word entity surfaces as single tokens.

    Non-entity words are lower-cased; entities keep their case with spaces
    replaced by underscores.
    """

    def __init__(self, surfaces=()):
        self.phrases = {}
        for s in surfaces:
            self.add(s)

    def add(self, surface):
        words = tuple(_TOKEN_RE.findall(surface))
        if words:
            self.phrases.setdefault(words[0], set()).add(words)

    @classmethod
    def for_kb(cls, kb: KnowledgeBase):
        return cls(kb.entities)

    def surfaces(self):
        return sorted(" ".join(w) for group in self.phrases.values() for w in group)

    def __call__(self, text: str) -> list:
        words = _TOKEN_RE.findall(text)
        out, i = [], 0
        while i < len(words):
            match = None
            for cand in sorted(self.phrases.get(words[i], ()), key=len, reverse=True):
                if tuple(words[i:i + len(cand)]) == cand:
                    match = cand
                    break
            if match:
                out.append("_".join(match))
                i += len(match)
            else:
                out.append(words[i].lower())
                i += 1
        return out
