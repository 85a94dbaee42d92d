"""asklearn command line: gen, train, train-rl, eval, sweep, inspect, teach."""

from __future__ import annotations

import csv
import logging
import os
import sys
from dataclasses import dataclass, fields

import numpy as np

from . import kb as kbmod
from .evaluation import (EvalError, eval_matrix, render_table, rl_sweep, write_report)
from .memnet import (MemN2N, ModelError, encode_choice, encode_episode, forward_answer,
                     line_utterances)
from .numerics import RngStream, argmax_first
from .pipeline import (MODEL_KINDS, Scale, asker_config, corpus, model_config, regime_matrix,
                       shared_vocabulary, split_seed, train_model)
from .simulator import (ACQUISITION_TASKS, ASK_ANSWER, ASK_HINT, ASK_PARAPHRASE, TASKS,
                        VERIFICATION_TASKS, Corpus, CorpusError, DatasetSpec, DialogueLine,
                        Episode, SimulatorError, draw_scene, generate_dataset, kb_lines,
                        read_corpus, save_corpus)
from .train_offline import (TrainingError, TrainRun, asker_accuracy, asker_items, select_best,
                            train_question_asker, write_run_ledger)
from .train_rl import (COST_GRID, SCENARIOS, RLConfig, RLError, build_pools,
                       kb_surfaces, pool_vocabulary, train_rl_grid, write_sweep)

log = logging.getLogger("asklearn")

COMMANDS = ("gen", "train", "train-rl", "eval", "sweep", "inspect", "teach")
SEED_ENV = "ASKLEARN_SEED"


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    kb: str = ""
    movies: int = 200
    people: int = 150
    kb_seed: int = 0
    task: str = "1"
    regime: str = "AQ"
    split: str = "train"
    n: int = 0
    n_train: int = 2000
    n_dev: int = 500
    n_test: int = 1000
    model: str = "context"
    d: int = 32
    context_window: int = 1
    lr: float = 0.01
    epochs: int = 20
    lam: str = "1.0"
    batch_size: int = 32
    init_scale: float = 0.3
    clip: float = 40.0
    seed: int = 0
    seeds: int = 1
    scenario: str = "Poor"
    cost: float = 0.0
    costs: str = ",".join(f"{c:g}" for c in COST_GRID)
    rl_lr: float = 0.01
    rl_epochs: int = 32
    stage1_epochs: int = 24
    episodes_per_epoch: int = 2000
    rl_dev: int = 500
    rl_test: int = 1000
    repeats: int = 5
    corpus: str = ""
    dev_corpus: str = ""
    checkpoint: str = ""
    models: str = ""
    episode: int = -1
    limit: int = 3
    ask: bool = True
    out: str = "out"
    log_level: str = "warning"

    # ---- derived views
    @property
    def tasks(self):
        try:
            tasks = [int(t) for t in str(self.task).split(",") if t.strip()]
        except ValueError:
            raise UsageError(f"--task: expected task numbers, got {self.task!r}") from None
        bad = [t for t in tasks if t not in TASKS]
        if not tasks or bad:
            raise UsageError(f"--task: tasks must lie in 1..9, got {self.task!r}")
        return tasks

    @property
    def one_task(self):
        tasks = self.tasks
        if len(tasks) != 1:
            raise UsageError("--task: this command takes a single task")
        return tasks[0]

    @property
    def scenarios(self):
        out = [s.strip() for s in self.scenario.split(",") if s.strip()]
        bad = [s for s in out if s not in SCENARIOS]
        if not out or bad:
            raise UsageError(f"--scenario: expected a subset of {SCENARIOS}, got {self.scenario!r}")
        return out

    @property
    def cost_grid(self):
        try:
            return [float(c) for c in self.costs.split(",") if c.strip()]
        except ValueError:
            raise UsageError(f"--costs: expected comma-separated numbers, got {self.costs!r}") \
                from None

    @property
    def lams(self):
        try:
            out = [float(v) for v in str(self.lam).split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"--lam: expected comma-separated weights, got {self.lam!r}") \
                from None
        if not out or any(v < 0 for v in out):
            raise UsageError(f"--lam: weights must be >= 0, got {self.lam!r}")
        return out[0] if len(out) == 1 else tuple(out)

    def scale(self):
        return Scale(self.n_train, self.n_dev, self.n_test)

    def net_options(self):
        return dict(d=self.d, lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                    init_scale=self.init_scale, clip=self.clip)

    def rl_config(self):
        return RLConfig(d=self.d, lr=self.rl_lr, clip=self.clip, batch_size=self.batch_size,
                        init_scale=self.init_scale, epochs=self.rl_epochs,
                        stage1_epochs=self.stage1_epochs,
                        episodes_per_epoch=self.episodes_per_epoch, dev_episodes=self.rl_dev,
                        test_episodes=self.rl_test, repeats=self.repeats, seed=self.seed)

    def dump(self):
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))


CONFIG_FIELDS = {f.name: f for f in fields(RunConfig)}


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _coerce(key, text):
    f = CONFIG_FIELDS.get(key)
    if f is None:
        raise UsageError(f"unknown config key {key!r}")
    kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool,
                                                    "str": str}[f.type]
    try:
        if kind is bool:
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise UsageError(f"--{key}: expected {kind.__name__}, got {text!r}") from None


def read_config_file(path):
    """Flat key=value file; blank lines and # comments ignored."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"--config: cannot read {path}: {exc.strerror}") from None
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (p.strip() for p in line.split("=", 1))
        values[key] = _coerce(key, value)
    return values


def parse_args(argv):
    """(command, RunConfig): defaults < ASKLEARN_SEED < config file < flags."""
    if not argv or argv[0] in ("-h", "--help"):
        raise UsageError("usage: asklearn {" + ",".join(COMMANDS) + "} [--key value ...] "
                         "[--config file]")
    command, rest = argv[0], argv[1:]
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
    flags, config_path = {}, None
    i = 0
    while i < len(rest):
        tok = rest[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}; flags look like --key value")
        key = tok[2:].replace("-", "_")
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(rest):
                raise UsageError(f"--{key}: missing value")
            i += 1
            value = rest[i]
        if key == "config":
            config_path = value
        else:
            flags[key] = _coerce(key, value)
        i += 1
    values = {}
    env_seed = os.environ.get(SEED_ENV)
    if env_seed is not None:
        values["seed"] = _coerce("seed", env_seed)
    if config_path:
        values.update(read_config_file(config_path))
    values.update(flags)
    return command, RunConfig(**values)


# ---------------------------------------------------------------- shared helpers

def load_kb(cfg):
    if cfg.kb:
        try:
            with open(cfg.kb, encoding="utf-8") as fh:
                return kbmod.parse_kb(fh.read())
        except OSError as exc:
            raise RuntimeError(f"--kb: cannot read {cfg.kb}: {exc.strerror}") from None
    return kbmod.generate_kb(n_movies=cfg.movies, n_people=cfg.people, seed=cfg.kb_seed)


def _outdir(cfg, command):
    os.makedirs(cfg.out, exist_ok=True)
    with open(os.path.join(cfg.out, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# asklearn {command}\n")
        fh.write(cfg.dump())
    return cfg.out


def _read_corpus(path, flag):
    try:
        return read_corpus(path)
    except OSError as exc:
        raise RuntimeError(f"--{flag}: cannot read {path}: {exc.strerror}") from None


def corpus_name(task, regime, split):
    return f"task{task}_{regime}_{split}.txt"


# ---------------------------------------------------------------- commands

def cmd_gen(cfg):
    out = _outdir(cfg, "gen")
    kb = load_kb(cfg)
    with open(os.path.join(out, "kb.txt"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(kbmod.write_kb(kb))
    if cfg.split not in ("train", "dev", "test"):
        raise UsageError(f"--split: expected train, dev or test, got {cfg.split!r}")
    n = cfg.n or cfg.scale().size(cfg.split)
    for task in cfg.tasks:
        try:
            spec = DatasetSpec(task, cfg.regime, cfg.split, n, split_seed(cfg.seed, cfg.split))
        except SimulatorError as exc:
            raise UsageError(str(exc)) from None
        text, _ = generate_dataset(spec, kb)
        path = os.path.join(out, corpus_name(task, cfg.regime, cfg.split))
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        print(path)
    return 0


def _train_corpora(cfg, task, kb):
    if cfg.corpus:
        train = _read_corpus(cfg.corpus, "corpus")
    else:
        train = corpus(task, cfg.regime, "train", kb, cfg.n_train, cfg.seed)
    if cfg.dev_corpus:
        dev = _read_corpus(cfg.dev_corpus, "dev_corpus")
    else:
        dev = corpus(task, cfg.regime, "dev", kb, cfg.n_dev, cfg.seed)
    return train, dev


def cmd_train(cfg):
    if cfg.model not in MODEL_KINDS + ("asker",):
        raise UsageError(f"--model: expected one of {MODEL_KINDS + ('asker',)}, got {cfg.model!r}")
    if cfg.regime not in ("QA", "AQ", "Mix"):
        raise UsageError(f"--regime: expected QA, AQ or Mix, got {cfg.regime!r}")
    if cfg.seeds < 1:
        raise UsageError("--seeds: need at least one run")
    out = _outdir(cfg, "train")
    kb = load_kb(cfg)
    task = cfg.one_task
    train, dev = _train_corpora(cfg, task, kb)
    vocab = shared_vocabulary(kb, [train])
    runs = []
    for seed in range(cfg.seed, cfg.seed + cfg.seeds):
        name = f"task{task}_{cfg.regime}_{cfg.model}_seed{seed}"
        ckpt = os.path.join(out, "checkpoints", name)
        if cfg.model == "asker":
            model = train_question_asker(train, asker_config(seed=seed, **cfg.net_options()),
                                         dev=dev, vocab=vocab, task=task)
            items = asker_items(model, dev, require_relevant=False)
            acc = asker_accuracy(model, items) if items else 0.0
        else:
            model, acc = train_model(cfg.model, train, dev, vocab,
                                     model_config(cfg.model, window=cfg.context_window,
                                                  seed=seed, **cfg.net_options()), cfg.lams)
        model.save(ckpt, extra={"task": task, "regime": cfg.regime, "kind": cfg.model,
                                "dev_acc": round(acc, 6)})
        # ledger paths are relative to --out so the run directory can move
        runs.append(TrainRun(task, cfg.regime, cfg.model, seed, acc, os.path.relpath(ckpt, out)))
        print(f"{name} dev_acc={acc:.4f}")
    write_run_ledger(os.path.join(out, "ledger.csv"), runs)
    best = select_best(runs)
    with open(os.path.join(out, "best.txt"), "w", encoding="utf-8") as fh:
        fh.write(best.checkpoint + "\n")
    return 0


def cmd_train_rl(cfg):
    out = _outdir(cfg, "train-rl")
    kb = load_kb(cfg)
    task = cfg.one_task
    rl = cfg.rl_config()
    rows = []
    for scenario in cfg.scenarios:
        pools = build_pools(task, scenario, kb, rl)
        vocab = pool_vocabulary(pools["train"], kb_surfaces(kb))
        policies, info = train_rl_grid(task, scenario, [cfg.cost], kb, rl, pools,
                                       vocab)[cfg.cost]
        ckpt = os.path.join(out, "checkpoints", f"task{task}_{scenario}_cost{cfg.cost:g}")
        policies.save(ckpt)
        rows.append([task, scenario, f"{cfg.cost:.2f}", info["repeat"],
                     f"{info['dev_reward']:.6f}", os.path.relpath(ckpt, out)])
        print(f"task {task} {scenario} cost {cfg.cost:g} dev_reward={info['dev_reward']:.4f}")
    with open(os.path.join(out, "rl_ledger.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "scenario", "cost", "repeat", "dev_reward", "checkpoint"])
        w.writerows(rows)
    return 0


def _load_models(cfg, task):
    models = {}
    for regime in ("QA", "AQ", "Mix"):
        path = os.path.join(cfg.models, regime)
        if os.path.isdir(path):
            models[regime] = MemN2N.load(path)
    if not models:
        raise RuntimeError(f"--models: no QA/AQ/Mix checkpoints under {cfg.models}")
    asker_dir = os.path.join(cfg.models, "asker")
    asker = MemN2N.load(asker_dir) if os.path.isdir(asker_dir) else None
    return models, asker


def cmd_eval(cfg):
    from .plotting import plot_matrix
    if cfg.model not in MODEL_KINDS:
        raise UsageError(f"--model: expected one of {MODEL_KINDS}, got {cfg.model!r}")
    out = _outdir(cfg, "eval")
    kb = load_kb(cfg)
    reports = []
    for task in cfg.tasks:
        if cfg.models:
            models, asker = _load_models(cfg, task)
            tests = {r: corpus(task, r, "test", kb, cfg.n_test, cfg.seed) for r in ("QA", "AQ")}
            report = eval_matrix(task, models, tests, asker, cfg.seed)
        else:
            run = regime_matrix(task, kb, cfg.model, cfg.seed, cfg.scale(),
                                window=cfg.context_window, lam=cfg.lams, **cfg.net_options())
            report = run.report
            for regime, model in run.models.items():
                model.save(os.path.join(out, "models", f"task{task}", regime))
            if run.asker is not None:
                run.asker.save(os.path.join(out, "models", f"task{task}", "asker"))
        reports.append(report)
        plot_matrix(report, os.path.join(out, f"matrix_task{task}.png"))
    write_report(os.path.join(out, "report.csv"), reports)
    table = render_table(reports)
    with open(os.path.join(out, "table.txt"), "w", encoding="utf-8") as fh:
        fh.write(table)
    sys.stdout.write(table)
    return 0


def cmd_sweep(cfg):
    from .plotting import plot_sweep
    out = _outdir(cfg, "sweep")
    kb = load_kb(cfg)
    rows = []
    for task in cfg.tasks:
        for scenario in cfg.scenarios:
            rows.extend(rl_sweep(task, scenario, cfg.cost_grid, kb, cfg.rl_config()))
    write_sweep(os.path.join(out, "sweep.csv"), rows)
    plot_sweep(rows, os.path.join(out, "sweep.png"))
    for r in rows:
        print(f"task {r['task']} {r['scenario']:6s} cost {r['cost']:.2f} "
              f"ask {r['ask_rate']:.3f} acc {r['accuracy']:.3f}")
    return 0


# ---------------------------------------------------------------- inspect

def render_episode(ep: Episode, model=None, out=None):
    """Dialogue lines; with a model, per-hop attention on each memory and the answer."""
    out = out or sys.stdout
    out.write(f"== task {ep.task} {ep.regime} | {ep.question_entity} {ep.relation} -> "
              f"{', '.join(ep.answer_set)}\n")
    attention = None
    if model is not None:
        enc = encode_episode(model, ep)
        if enc.n_mem:
            probs, state = forward_answer(model, enc)
            attention = np.array(state.p)
            pred = enc.cand_tokens[argmax_first(probs)] if enc.n_cand else None
    mem = 0
    for i, line in enumerate(ep.lines):
        if i == ep.answer_index:
            break
        marks = []
        for utt in line_utterances(line):
            if model is None or not model.vocab.tokenize(utt):
                continue
            if attention is not None:
                marks.append(" ".join(f"{p:4.2f}" for p in attention[:, mem]))
            mem += 1
        bar = f"[{' | '.join(marks)}] " if marks else ""
        text = ("kb: " + line.teacher) if line.is_kb else line.teacher
        if line.student is not None:
            text += f"  >> {line.student}"
        out.write(f"{i + 1:3d} {bar}{text}\n")
    final = ep.lines[ep.answer_index]
    out.write(f"{ep.answer_index + 1:3d} {final.teacher}  >> {final.student} "
              f"(reward {final.reward})\n")
    if model is not None:
        out.write(f"    model answer: {pred}\n")


def cmd_inspect(cfg):
    if not cfg.corpus:
        raise UsageError("--corpus: inspect needs a corpus file")
    episodes = _read_corpus(cfg.corpus, "corpus")
    model = MemN2N.load(cfg.checkpoint) if cfg.checkpoint else None
    if cfg.episode >= 0:
        if cfg.episode >= len(episodes):
            raise UsageError(f"--episode: corpus has {len(episodes)} episodes")
        chosen = [episodes[cfg.episode]]
    else:
        chosen = episodes[:cfg.limit]
    if model is not None:
        print("attention per hop shown in brackets for each memory")
    for ep in chosen:
        render_episode(ep, model)
    return 0


# ---------------------------------------------------------------- teach

def _fixed_question(task):
    if task == 1:
        return ASK_PARAPHRASE
    if task == 3:
        return ASK_HINT
    if task in ACQUISITION_TASKS:
        return ASK_ANSWER
    return None


def teach_session(model, task, kb, stdin, stdout, asker=None, ask=True, seed=0):
    """Human plays the teacher; returns the recorded episodes."""
    stream = RngStream(seed, "teach")
    episodes = []

    def prompt(text):
        stdout.write(text)
        stdout.flush()
        line = stdin.readline()
        return None if line == "" else line.rstrip("\n")

    for i in range(10 ** 6):
        scene = draw_scene(task, kb, stream.python(i), "test", True)
        lines = kb_lines(scene.view) + list(scene.history)
        stdout.write("\n".join(("kb: " + l.teacher) if l.is_kb else
                               f"{l.teacher}  >> {l.student}" for l in lines) + "\n")
        question = prompt("teacher (blank to stop)> ")
        if not question:
            break
        student_q = _fixed_question(task)
        if task in VERIFICATION_TASKS and asker is not None:
            enc = encode_choice(asker, question, lines, scene.candidates)
            student_q = scene.candidates[argmax_first(forward_answer(asker, enc)[0])]
        asked = ask and student_q is not None
        if asked:
            stdout.write(f"student> {student_q}\n")
            reply = prompt("teacher reply> ")
            if reply is None:
                break
            lines += [DialogueLine(question, student_q), DialogueLine(reply)]
        probe = Episode(lines + [DialogueLine(question, "?", 0)], task, "AQ" if asked else "QA",
                        "", "", ())
        enc = encode_episode(model, probe)
        answer = enc.cand_tokens[argmax_first(forward_answer(model, enc)[0])] \
            if enc.n_cand else "?"
        answer = answer.replace("_", " ")
        stdout.write(f"student> {answer}\n")
        feedback = prompt("teacher feedback> ")
        reward = prompt("reward 1/0> ")
        if feedback is None or reward is None:
            break
        if reward.strip() not in ("0", "1"):
            stdout.write("reward must be 0 or 1; episode dropped\n")
            continue
        r = int(reward.strip())
        lines += [DialogueLine(question, answer, r), DialogueLine(feedback)]
        episodes.append(Episode(lines, task, "AQ" if asked else "QA", "", "",
                                (answer,) if r else (), asked))
    return episodes


def cmd_teach(cfg):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint: teach needs a trained answer model")
    if not cfg.corpus:
        raise UsageError("--corpus: teach appends its transcript to this corpus file")
    model = MemN2N.load(cfg.checkpoint)
    asker_dir = os.path.join(os.path.dirname(os.path.normpath(cfg.checkpoint)), "asker")
    asker = MemN2N.load(asker_dir) if os.path.isdir(asker_dir) else None
    kb = load_kb(cfg)
    episodes = teach_session(model, cfg.one_task, kb, sys.stdin, sys.stdout, asker, cfg.ask,
                             cfg.seed)
    existing = Corpus()
    if os.path.exists(cfg.corpus):
        existing = _read_corpus(cfg.corpus, "corpus")
    existing.extend(episodes)
    save_corpus(cfg.corpus, existing)
    print(f"{len(episodes)} episodes appended to {cfg.corpus}")
    return 0


HANDLERS = {"gen": cmd_gen, "train": cmd_train, "train-rl": cmd_train_rl, "eval": cmd_eval,
            "sweep": cmd_sweep, "inspect": cmd_inspect, "teach": cmd_teach}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        command, cfg = parse_args(argv)
        logging.basicConfig(level=getattr(logging, cfg.log_level.upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s")
        return HANDLERS[command](cfg)
    except UsageError as exc:
        print(f"asklearn: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, EvalError, ModelError, TrainingError, RLError, CorpusError,
            kbmod.KBError, OSError, ValueError) as exc:
        print(f"asklearn: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
