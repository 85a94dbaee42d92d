import itertools

import numpy as np
import pytest

from asklearn import memnet as M
from asklearn import train_rl as R
from asklearn.numerics import RngStream, sgd_step


def tiny_config(**kw):
    base = dict(d=12, epochs=3, stage1_epochs=2, episodes_per_epoch=60, dev_episodes=30,
                test_episodes=40, repeats=1, seed=0)
    base.update(kw)
    return R.RLConfig(**base)


@pytest.fixture(scope="module")
def setup(small_kb):
    cfg = tiny_config()
    pools = R.build_pools(6, "Medium", small_kb, cfg)
    vocab = R.pool_vocabulary(pools["train"], R.kb_surfaces(small_kb))
    pair = R.PolicyPair(vocab, cfg, seed=1)
    encs = [R.encode_rl(pair.question, ep) for ep in pools["train"]]
    return cfg, pools, vocab, pair, encs


def test_reward_table_exhaustive():
    for cost in R.COST_GRID:
        assert R.reward(True, True, cost) == 1 - cost
        assert R.reward(True, False, cost) == -1 - cost
        assert R.reward(False, True, cost) == 1
        assert R.reward(False, False, cost) == -1
    assert R.reward(True, True, 0.5) == 0.5
    for correct in (True, False):
        assert R.reward(True, correct, 0.0) == R.reward(False, correct, 0.0)


@pytest.mark.parametrize("cost", [-0.01, 2.01])
def test_cost_out_of_range(cost):
    with pytest.raises(R.RLError):
        R.reward(True, True, cost)


def test_branches_share_prefix(setup):
    _, pools, *_ = setup
    for ep in pools["train"][:20]:
        no, yes = ep.dialogue(False), ep.dialogue(True)
        assert yes[:len(no)] == no and len(yes) == len(no) + 2
        assert yes[len(no)].teacher == ep.question


def test_scenarios(small_kb):
    rng = RngStream(0, "t")
    good = [R.build_episode(5, "Good", small_kb, rng.python(i), "train") for i in range(30)]
    poor = [R.build_episode(5, "Poor", small_kb, rng.python(i), "train") for i in range(30)]
    assert not any(ep.flawed for ep in good) and all(ep.flawed for ep in poor)
    med = [R.build_episode(5, "Medium", small_kb, rng.python(i), "train") for i in range(400)]
    assert abs(np.mean([ep.flawed for ep in med]) - 0.5) < 0.08
    with pytest.raises(R.RLError):
        R.build_episode(5, "Average", small_kb, rng.python(0), "train")


def _grads_zero(model):
    return all(not g.any() for g in model.params.grads.values())


def test_centered_advantage_gives_zero_gradient(setup):
    _, _, _, pair, encs = setup
    traj = R.run_rl_episode(pair, encs[0], np.random.default_rng(0), cost=0.5)
    traj.b = traj.r
    traj.b_answer = traj.r_answer
    R.reinforce_update(traj, pair)
    assert all(_grads_zero(m) for m in pair.models.values())


def test_single_candidate_answer_only_moves_question(setup):
    _, _, _, pair, encs = setup
    enc = encs[1]
    one = M.encode(pair.question, [".", "?"], [["?"]], [[enc.no_ask.cand_tokens[0]]])
    one.cand_tokens = enc.no_ask.cand_tokens[:1]
    enc3 = R.Encoded3(enc.question, one, one, enc.answers)
    traj = R.run_rl_episode(pair, enc3, np.random.default_rng(0), cost=0.25)
    traj.b, traj.b_answer = traj.r - 0.7, traj.r_answer - 0.7
    R.reinforce_update(traj, pair)
    assert _grads_zero(pair.answer_model(traj.ask))
    assert not _grads_zero(pair.question)
    pair.question.params.zero_grad()
    for m in pair.models.values():
        m.params.zero_grad()


def test_baseline_update_never_touches_policies(setup):
    cfg, _, _, pair, encs = setup
    before = pair.snapshot(("question", "answer_aq", "answer_qa"))
    traj = R.run_rl_episode(pair, encs[2], np.random.default_rng(1), cost=1.0)
    R.baseline_update(traj, pair)
    for name in ("question", "answer_aq", "answer_qa"):
        assert _grads_zero(getattr(pair, name))
    R._step([pair.baseline, pair.baseline_answer], cfg)
    after = pair.snapshot(("question", "answer_aq", "answer_qa"))
    assert all(before[k].equal(after[k]) for k in before)


def test_policy_update_never_touches_baselines(setup):
    _, _, _, pair, encs = setup
    traj = R.run_rl_episode(pair, encs[3], np.random.default_rng(2), cost=1.0)
    traj.b, traj.b_answer = 5.0, 5.0
    R.reinforce_update(traj, pair)
    assert _grads_zero(pair.baseline) and _grads_zero(pair.baseline_answer)
    for m in pair.models.values():
        m.params.zero_grad()


def test_baseline_fits_constant_reward(setup):
    _, _, vocab, _, encs = setup
    pair = R.PolicyPair(vocab, tiny_config(), seed=7)
    rng = np.random.default_rng(0)
    for i in range(200):
        traj = R.run_rl_episode(pair, encs[i % 5], rng, force_ask=False)
        traj.r = 1.0
        M.baseline_loss(pair.baseline, encs[i % 5].question, 1.0)
        sgd_step(pair.baseline.params, 0.02, 40.0)
        pair.baseline.stepped()
    assert all(abs(M.baseline_value(pair.baseline, e.question)[0] - 1.0) < 0.05
               for e in encs[:5])


def test_bandit_learns_to_ask(setup):
    _, _, vocab, _, encs = setup
    model = R.PolicyPair(vocab, tiny_config(), seed=3).question
    enc = encs[0].question
    rng = np.random.default_rng(0)
    for _ in range(500):
        probs, _ = M.forward_answer(model, enc)
        a = int(rng.choice(2, p=probs))
        M.policy_gradient(model, enc, a, 1.0 if a == 0 else -1.0)
        sgd_step(model.params, 0.01, 40.0)
        model.stepped()
    assert M.forward_answer(model, enc)[0][0] > 0.95


def test_zero_cost_adds_nothing(setup):
    _, _, _, pair, encs = setup
    for enc, ask in itertools.product(encs[:5], (True, False)):
        t = R.run_rl_episode(pair, enc, np.random.default_rng(0), cost=0.0, force_ask=ask)
        assert t.r == (1.0 if t.correct else -1.0) and t.r_answer == t.r


def test_answer_model_matches_branch(setup):
    _, _, _, pair, encs = setup
    for ask in (True, False):
        t = R.run_rl_episode(pair, encs[4], None, "greedy", 0.5, force_ask=ask)
        a_probs, _, a_idx = t.cache["a"]
        want, _ = M.forward_answer(pair.answer_model(ask), encs[4].ask if ask else encs[4].no_ask)
        assert np.array_equal(a_probs, want) and t.ask == ask
    with pytest.raises(R.RLError):
        R.run_rl_episode(pair, encs[4], None, "argmax")


def test_poor_task5_without_asking_is_blind(small_kb):
    cfg = tiny_config(episodes_per_epoch=200, epochs=4, stage1_epochs=3, test_episodes=200)
    pools = R.build_pools(5, "Poor", small_kb, cfg)
    pair, _ = R.train_rl(5, "Poor", 0.0, small_kb, cfg, pools)
    test = [R.encode_rl(pair.question, ep) for ep in pools["test"]]
    assert R.evaluate_policies(pair, test, 0.0, force_ask=False)["accuracy"] < 0.05


def test_train_rl_deterministic_and_reloadable(small_kb, tmp_path):
    cfg = tiny_config()
    pools = R.build_pools(2, "Good", small_kb, cfg)
    a, info = R.train_rl(2, "Good", 0.5, small_kb, cfg, pools)
    b, _ = R.train_rl(2, "Good", 0.5, small_kb, cfg, pools)
    assert all(a.snapshot()[k].equal(b.snapshot()[k]) for k in R.MODEL_NAMES)
    assert len(info["curve"]) == cfg.epochs - cfg.stage1_epochs
    a.save(tmp_path / "p")
    back = R.PolicyPair.load(tmp_path / "p")
    test = [R.encode_rl(a.question, ep) for ep in pools["test"]]
    assert R.evaluate_policies(a, test, 0.5) == R.evaluate_policies(back, test, 0.5)


def test_grid_matches_single_cost_runs(small_kb):
    cfg = tiny_config()
    pools = R.build_pools(6, "Poor", small_kb, cfg)
    grid = R.train_rl_grid(6, "Poor", [0.0, 1.0], small_kb, cfg, pools)
    single, _ = R.train_rl(6, "Poor", 1.0, small_kb, cfg, pools)
    assert all(grid[1.0][0].snapshot()[k].equal(single.snapshot()[k]) for k in R.MODEL_NAMES)


def test_train_rl_validation(small_kb):
    with pytest.raises(R.RLError):
        R.train_rl(2, "Good", 3.0, small_kb, tiny_config())
    with pytest.raises(R.RLError):
        R.train_rl(2, "Good", 0.0, small_kb, tiny_config(stage1_epochs=9))


def test_write_sweep(tmp_path):
    rows = [{"task": 6, "scenario": "Poor", "cost": 0.25, "ask_rate": 1.0, "accuracy": 0.5,
             "mean_reward": 0.1, "seed": 0}]
    R.write_sweep(tmp_path / "s.csv", rows)
    assert (tmp_path / "s.csv").read_text().splitlines() == [
        ",".join(R.SWEEP_FIELDS), "6,Poor,0.25,1.0000,0.5000,0.1000,0"]
