import numpy as np
import pytest

from stripworld.agents import Action, AgentObservation
from stripworld.perception import UNKNOWN
from stripworld.propagation import PropagatedMask
from stripworld.render import render_view
from stripworld.rl import (Adam, PolicyMemory, PolicyModel, PPOConfig,
                           RewardConfig, RLAgent, annotate_reward,
                           collect_reward, discounted_returns,
                           exploration_reward, feature_block_dim, feature_dim,
                           featurize, init_policy, load_policy,
                           log_prob_and_grad, new_bundle, policy_forward,
                           ppo_loss_and_grad, ppo_surrogate_terms, ppo_train,
                           save_policy, value_and_grad)
from stripworld.world import Pose
from conftest import make_room_world

K = 13


def make_obs(view, unknown_frac=0.0, predicted=None, collision=False, step=0):
    W = view.width
    labels = view.gt_class.copy()
    labels[:int(round(unknown_frac * W))] = UNKNOWN
    if predicted is None:
        predicted = np.full((W, K), 1.0 / K)
    return AgentObservation(view=view, predicted=predicted,
                            prop_mask=PropagatedMask(labels=labels),
                            collision_flag=collision, step_index=step)


@pytest.fixture(scope="module")
def view():
    world = make_room_world(24, 24)
    return render_view(world, Pose(3.0, 3.0, 45))


# ---------------------------------------------------------------------------
# rewards (closed forms)

def test_exploration_reward_empty_trace():
    assert exploration_reward([], (1.0, 2.0), RewardConfig()) == 0.003


def test_exploration_reward_repeat_visit():
    assert exploration_reward([(1.0, 2.0)], (1.0, 2.0), RewardConfig()) == 0.0


def test_exploration_reward_single_visit_at_bandwidth():
    got = exploration_reward([(1.0, 2.0)], (1.0, 2.3), RewardConfig())
    want = 0.003 * (1.0 - np.exp(-0.5))
    assert abs(got - want) <= 1e-9
    assert abs(got - 0.001180) < 5e-7


def test_exploration_reward_mean_over_trace():
    cfg = RewardConfig()
    trace = [(0.0, 0.0), (10.0, 10.0)]  # one on top, one negligible
    got = exploration_reward(trace, (0.0, 0.0), cfg)
    want = cfg.a - cfg.b * 0.5 * (1.0 + np.exp(-200.0 / (2 * 0.09)))
    assert abs(got - want) < 1e-15


def test_exploration_reward_translation_invariant():
    cfg = RewardConfig()
    rng = np.random.default_rng(0)
    trace = rng.random((12, 2)) * 4
    x = np.array([1.7, 2.9])
    shift = np.array([123.456, -78.9])
    a = exploration_reward(list(trace), x, cfg)
    b = exploration_reward(list(trace + shift), x + shift, cfg)
    assert abs(a - b) < 1e-12


def test_annotate_and_collect_rewards():
    cfg = RewardConfig()
    assert annotate_reward(0.2, 0.2, cfg) == -0.01
    assert abs(annotate_reward(0.25, 0.20, cfg) - 0.04) < 1e-15
    assert abs(annotate_reward(0.21, 0.20, cfg)) < 1e-15
    assert collect_reward(0.2, 0.2) == 0.0
    assert abs(collect_reward(0.22, 0.20) - 0.02) < 1e-15
    assert abs(collect_reward(0.19, 0.20) + 0.01) < 1e-15


def test_discounted_returns():
    r = np.array([1.0, 0.0, 2.0])
    out = discounted_returns(r, 0.5)
    assert np.allclose(out, [1.0 + 0.25 * 2, 1.0, 2.0])


# ---------------------------------------------------------------------------
# featurization

def test_featurize_uniform_entropy_is_one(view):
    mem = PolicyMemory.fresh(feature_block_dim(K))
    feats, _ = featurize(make_obs(view), mem, K)
    assert abs(feats[0] - 1.0) < 1e-9
    assert len(feats) == feature_dim(K)


def test_featurize_all_unknown_disagreement_zero(view):
    mem = PolicyMemory.fresh(feature_block_dim(K))
    feats, _ = featurize(make_obs(view, unknown_frac=1.0), mem, K)
    assert feats[1] == 0.0   # disagreement
    assert feats[2] == 1.0   # unknown fraction


def test_featurize_ema_geometric_convergence(view):
    obs = make_obs(view, unknown_frac=0.25)
    mem = PolicyMemory.fresh(feature_block_dim(K))
    block = feature_block_dim(K)
    deltas = []
    for _ in range(20):
        feats, mem = featurize(obs, mem, K)
        inst = feats[:block]
        deltas.append(np.linalg.norm(mem.ema - inst))
    ratios = [d1 / d0 for d0, d1 in zip(deltas[:-1], deltas[1:])]
    assert np.allclose(ratios, 0.9, atol=1e-9)  # halves every log(.5)/log(.9)≈6.6 steps


def test_featurize_include_prop_false_zeroes_block(view):
    mem = PolicyMemory.fresh(feature_block_dim(K))
    feats, _ = featurize(make_obs(view, unknown_frac=0.5), mem, K,
                         include_prop=False)
    assert feats[1] == 0.0 and feats[2] == 0.0
    prop_block = feats[3 + 8 + K:3 + 8 + K + K + 1]
    assert (prop_block == 0).all()


def test_featurize_deterministic(view):
    obs = make_obs(view, unknown_frac=0.5)
    a, _ = featurize(obs, PolicyMemory.fresh(feature_block_dim(K)), K)
    b, _ = featurize(obs, PolicyMemory.fresh(feature_block_dim(K)), K)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------------------
# policy network

def test_policy_forward_distribution():
    model = init_policy(0, feature_dim(K))
    probs, value = policy_forward(model, np.random.default_rng(1).random(feature_dim(K)))
    assert abs(probs.sum() - 1.0) < 1e-9
    assert (probs > 0).all()
    assert np.isfinite(value)


def test_policy_forward_zero_weights_uniform():
    d = feature_dim(K)
    model = PolicyModel(feature_dim=d, n_actions=7,
                        W1=np.zeros((d, 4)), b1=np.zeros(4),
                        Wa=np.zeros((4, 7)), ba=np.zeros(7),
                        Wv=np.zeros((4, 1)), bv=np.zeros(1))
    probs, value = policy_forward(model, np.ones(d))
    assert np.allclose(probs, 1.0 / 7.0)
    assert value == 0.0


def test_policy_forward_rejects_nonfinite():
    model = init_policy(0, feature_dim(K))
    bad = np.full(feature_dim(K), np.nan)
    with pytest.raises(ValueError):
        policy_forward(model, bad)


def fd_check(f, params, grads, rel_tol=1e-5, h=1e-6, n_probe=6, rng=None):
    """Central finite differences against analytic grads on random coords."""
    rng = rng or np.random.default_rng(0)
    for k, g in grads.items():
        p = params[k]
        flat = p.reshape(-1)
        for _ in range(n_probe):
            i = int(rng.integers(0, flat.size))
            old = flat[i]
            flat[i] = old + h
            up = f()
            flat[i] = old - h
            dn = f()
            flat[i] = old
            num = (up - dn) / (2 * h)
            ana = g.reshape(-1)[i]
            denom = max(abs(num), abs(ana), 1e-8)
            assert abs(num - ana) / denom < rel_tol, (k, i, num, ana)


def test_log_prob_gradient_matches_fd():
    rng = np.random.default_rng(2)
    for trial in range(4):
        model = init_policy(trial, 10, hidden=8)
        x = rng.standard_normal(10)
        a = int(rng.integers(0, 7))
        _, grads = log_prob_and_grad(model, x, a)
        fd_check(lambda: log_prob_and_grad(model, x, a)[0],
                 model.params(), grads, rng=rng)


def test_value_gradient_matches_fd():
    rng = np.random.default_rng(3)
    for trial in range(4):
        model = init_policy(100 + trial, 10, hidden=8)
        x = rng.standard_normal(10)
        _, grads = value_and_grad(model, x)
        fd_check(lambda: value_and_grad(model, x)[0],
                 model.params(), grads, rng=rng)


def test_ppo_loss_gradient_matches_fd():
    rng = np.random.default_rng(4)
    for trial in range(3):
        model = init_policy(200 + trial, 10, hidden=8)
        N = 12
        X = rng.standard_normal((N, 10))
        acts = rng.integers(0, 7, size=N)
        adv = rng.standard_normal(N)
        rets = rng.standard_normal(N)
        probs0, _, _ = __import__("stripworld.rl", fromlist=["_forward_batch"])._forward_batch(model, X)
        logp_old = np.log(probs0[np.arange(N), acts]) + 0.05 * rng.standard_normal(N)
        _, grads, _ = ppo_loss_and_grad(model, X, acts, logp_old, adv, rets)
        fd_check(lambda: ppo_loss_and_grad(model, X, acts, logp_old, adv, rets)[0],
                 model.params(), grads, rng=rng, rel_tol=1e-4)


def test_ppo_surrogate_clip_formula():
    ratio = np.array([0.5, 0.9, 1.0, 1.1, 1.5, 0.5, 1.5])
    adv = np.array([1.0, 1.0, 1.0, 1.0, 1.0, -1.0, -1.0])
    got = ppo_surrogate_terms(ratio, adv, clip=0.2)
    want = np.minimum(ratio * adv, np.clip(ratio, 0.8, 1.2) * adv)
    assert np.array_equal(got, want)
    # hand values: gains cap at 1.2; the pessimistic min keeps the worse of
    # the two branches for negative advantages
    assert got[0] == 0.5 and got[4] == 1.2
    assert got[5] == -0.8 and got[6] == -1.5


def test_adam_moves_toward_minimum():
    params = {"w": np.array([5.0])}
    opt = Adam(params, lr=0.1)
    for _ in range(200):
        opt.step(params, {"w": 2 * params["w"]})  # d/dw of w^2
    assert abs(params["w"][0]) < 0.1


# ---------------------------------------------------------------------------
# bundle, checkpoints, agent behavior

def test_policy_checkpoint_roundtrip(tmp_path):
    bundle = new_bundle(7, K, mode="perception", include_prop=False,
                        base_movement="bounce", no_collect=True)
    path = str(tmp_path / "policy.npz")
    save_policy(bundle, path)
    loaded = load_policy(path)
    assert loaded.mode == "perception"
    assert loaded.base_movement == "bounce"
    assert loaded.include_prop is False
    assert np.array_equal(loaded.model.action_mask, bundle.model.action_mask)
    for k, v in bundle.model.params().items():
        assert np.array_equal(loaded.model.params()[k], v)


def test_no_collect_mask_blocks_collect(view):
    bundle = new_bundle(1, K, no_collect=True)
    assert bundle.model.action_mask is not None
    probs, _ = policy_forward(bundle.model, np.zeros(feature_dim(K)))
    assert probs[int(Action.COLLECT)] == 0.0


def test_rl_agent_collect_guard(view):
    bundle = new_bundle(2, K)
    agent = RLAgent(bundle)
    agent.reset(None, None, None, np.random.default_rng(0))
    obs = make_obs(view, unknown_frac=1.0)
    acts = {agent.act(obs, Pose(3.0, 3.0, 0)) for _ in range(300)}
    assert Action.COLLECT not in acts  # guarded into Annotate instead


def test_rl_agent_trajectory_recording(view):
    bundle = new_bundle(3, K)
    agent = RLAgent(bundle, collect=True)
    agent.reset(None, None, None, np.random.default_rng(1))
    for k in range(5):
        agent.act(make_obs(view, step=k), Pose(3.0, 3.0, 0))
    assert len(agent.trajectory) == 5
    assert {"features", "action", "logp", "value", "step"} <= agent.trajectory[0].keys()


class _FakeRecord:
    n_annotate = 1
    n_collect = 1
    final_miou = 0.5


def _fake_factory(view):
    """Episode stand-in: fixed-length synthetic rollouts, no simulator."""
    def factory(world_seed, start_seed, agent, reward_cfg, no_explore):
        rng = np.random.default_rng((world_seed, start_seed))
        agent.reset(None, None, None, np.random.default_rng(start_seed))
        rewards = []
        for k in range(16):
            agent.act(make_obs(view, unknown_frac=float(rng.random()), step=k),
                      Pose(3.0, 3.0, 0))
            rewards.append(float(rng.normal(0, 0.01)))
        rec = _FakeRecord()
        rec.final_miou = float(rng.random())
        return rewards, rec
    return factory


def test_ppo_train_deterministic_and_finite(view):
    cfg = PPOConfig(batch_size=32, val_interval=8, val_episodes=2)
    kw = dict(train_seeds=[1000, 1001], val_seeds=[2000], episodes=12,
              seed=5, class_count=K, ppo_cfg=cfg)
    b1 = ppo_train(_fake_factory(view), **kw)
    b2 = ppo_train(_fake_factory(view), **kw)
    assert np.array_equal(b1.model.W1, b2.model.W1)
    assert np.array_equal(b1.model.Wa, b2.model.Wa)
    assert all(np.isfinite(v).all() for v in b1.model.params().values())
