"""Learnt agent: featurization, stochastic policy, rewards, PPO training.

The policy is a 2-layer tanh perceptron over hand-built strip statistics
(entropy, disagreement, histograms, recency features) plus an exponential
moving-average memory, with a 7-way action head and a scalar value head.
All gradients are computed analytically in numpy; see tests for the
finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .agents import Action, AgentObservation, N_ACTIONS, ThresholdPerceptionConfig, threshold_perception
from .perception import UNKNOWN

EMA_DECAY = 0.9
DEPTH_BINS = 8
DEPTH_RANGE = 4.0
HIDDEN = 64
ENTROPY_COEF = 0.01
VALUE_COEF = 0.5


@dataclass
class RewardConfig:
    eps_ann: float = 0.01
    a: float = 0.003
    b: float = 0.003
    kde_bandwidth: float = 0.3  # meters
    discount: float = 0.99
    top_k: int = 10

    def __post_init__(self):
        if min(self.eps_ann, self.a, self.b, self.kde_bandwidth,
               self.discount, self.top_k) <= 0:
            raise ValueError("reward parameters must be positive")


# ---------------------------------------------------------------------------
# rewards

def exploration_reward(trace, x_t, cfg: RewardConfig) -> float:
    """Novelty bonus from a Gaussian KDE over previously visited positions.

    An empty trace (first step) has density zero by definition, so the
    reward is the full bonus `a`.
    """
    if len(trace) == 0:
        return cfg.a
    pts = np.asarray(trace, dtype=float)
    d2 = np.sum((pts - np.asarray(x_t, dtype=float)) ** 2, axis=1)
    density = float(np.mean(np.exp(-d2 / (2.0 * cfg.kde_bandwidth ** 2))))
    return cfg.a - cfg.b * density


def annotate_reward(miou_after: float, miou_before: float, cfg: RewardConfig) -> float:
    return (miou_after - miou_before) - cfg.eps_ann


def collect_reward(miou_after: float, miou_before: float) -> float:
    return miou_after - miou_before


def final_reward(model_final, model_initial, refset, cfg: RewardConfig) -> float:
    """End-of-episode improvement of the segmenter on the reference set,
    measured over its top-k most frequent classes."""
    from .perception import miou, top_k_classes
    subset = top_k_classes(refset, cfg.top_k)
    return miou(model_final, refset, subset) - miou(model_initial, refset, subset)


# ---------------------------------------------------------------------------
# featurization

@dataclass
class PolicyMemory:
    ema: np.ndarray
    steps_since_annotate: int = 0
    last_action: int = -1

    @classmethod
    def fresh(cls, block_dim: int) -> "PolicyMemory":
        return cls(ema=np.zeros(block_dim))


def feature_block_dim(class_count: int) -> int:
    # entropy, disagreement, unknown frac, depth hist, pred hist,
    # prop hist (+UNKNOWN bin), annotate recency, last-action one-hot, collision
    return 3 + DEPTH_BINS + class_count + (class_count + 1) + 1 + N_ACTIONS + 1


def feature_dim(class_count: int) -> int:
    return 2 * feature_block_dim(class_count)


def featurize(obs: AgentObservation, memory: PolicyMemory, class_count: int,
              include_prop: bool = True) -> tuple[np.ndarray, PolicyMemory]:
    """Fixed-length policy features plus updated EMA memory.

    With include_prop False the propagated-mask block (disagreement,
    unknown fraction, prop histogram) is zeroed.
    """
    W = obs.view.width
    K = class_count
    p = obs.predicted
    entropy = float(np.mean(-np.sum(p * np.log(p + 1e-12), axis=1))) / np.log(K)

    labels = obs.prop_mask.labels
    known = labels != UNKNOWN
    if known.any():
        disagree = float(np.mean(np.argmax(p[known], axis=1) != labels[known]))
    else:
        disagree = 0.0
    unknown_frac = obs.prop_mask.unknown_fraction

    depth = np.clip(obs.view.depth, 0.0, DEPTH_RANGE - 1e-9)
    depth_hist = np.bincount((depth / DEPTH_RANGE * DEPTH_BINS).astype(int),
                             minlength=DEPTH_BINS).astype(float) / W
    pred_hist = np.bincount(np.argmax(p, axis=1), minlength=K).astype(float) / W
    prop_hist = np.bincount(np.where(known, labels, K), minlength=K + 1).astype(float) / W

    if not include_prop:
        disagree = 0.0
        unknown_frac = 0.0
        prop_hist = np.zeros(K + 1)

    recency = min(memory.steps_since_annotate / 64.0, 1.0)
    last = np.zeros(N_ACTIONS)
    if memory.last_action >= 0:
        last[memory.last_action] = 1.0

    inst = np.concatenate([
        [entropy, disagree, unknown_frac],
        depth_hist, pred_hist, prop_hist,
        [recency], last, [float(obs.collision_flag)],
    ])
    ema = EMA_DECAY * memory.ema + (1.0 - EMA_DECAY) * inst
    new_mem = replace(memory, ema=ema)
    return np.concatenate([inst, ema]), new_mem


# ---------------------------------------------------------------------------
# policy network

@dataclass
class PolicyModel:
    feature_dim: int
    n_actions: int
    W1: np.ndarray
    b1: np.ndarray
    Wa: np.ndarray
    ba: np.ndarray
    Wv: np.ndarray
    bv: np.ndarray
    action_mask: np.ndarray | None = None  # boolean, False = action disabled

    def params(self) -> dict[str, np.ndarray]:
        return {"W1": self.W1, "b1": self.b1, "Wa": self.Wa, "ba": self.ba,
                "Wv": self.Wv, "bv": self.bv}

    def copy(self) -> "PolicyModel":
        return PolicyModel(self.feature_dim, self.n_actions,
                           self.W1.copy(), self.b1.copy(), self.Wa.copy(),
                           self.ba.copy(), self.Wv.copy(), self.bv.copy(),
                           None if self.action_mask is None else self.action_mask.copy())


def init_policy(seed: int, feat_dim: int, n_actions: int = N_ACTIONS,
                hidden: int = HIDDEN) -> PolicyModel:
    rng = np.random.default_rng(seed)
    return PolicyModel(
        feature_dim=feat_dim, n_actions=n_actions,
        W1=rng.normal(0, 1.0 / np.sqrt(feat_dim), size=(feat_dim, hidden)),
        b1=np.zeros(hidden),
        Wa=rng.normal(0, 1.0 / np.sqrt(hidden), size=(hidden, n_actions)),
        ba=np.zeros(n_actions),
        Wv=rng.normal(0, 1.0 / np.sqrt(hidden), size=(hidden, 1)),
        bv=np.zeros(1),
    )


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _forward_batch(model: PolicyModel, X: np.ndarray):
    H = np.tanh(X @ model.W1 + model.b1)
    logits = H @ model.Wa + model.ba
    if model.action_mask is not None:
        logits = np.where(model.action_mask, logits, -1e30)
    values = (H @ model.Wv + model.bv)[:, 0]
    return _softmax(logits), values, H


def policy_forward(model: PolicyModel, features: np.ndarray) -> tuple[np.ndarray, float]:
    """Action distribution and value estimate for one feature vector."""
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite policy features")
    probs, values, _ = _forward_batch(model, features[None, :])
    return probs[0], float(values[0])


def _backprop(model: PolicyModel, X, H, dlogits, dvalues):
    """Shared backward pass from head gradients to parameter gradients."""
    grads = {"Wa": H.T @ dlogits, "ba": dlogits.sum(axis=0),
             "Wv": H.T @ dvalues[:, None], "bv": dvalues.sum(keepdims=True)}
    dH = dlogits @ model.Wa.T + dvalues[:, None] @ model.Wv.T
    dpre = dH * (1.0 - H ** 2)
    grads["W1"] = X.T @ dpre
    grads["b1"] = dpre.sum(axis=0)
    return grads


def log_prob_and_grad(model: PolicyModel, features: np.ndarray, action: int):
    """log pi(action | features) and its parameter gradients."""
    X = features[None, :]
    probs, _, H = _forward_batch(model, X)
    logp = float(np.log(probs[0, action] + 1e-300))
    dlogits = -probs.copy()
    dlogits[0, action] += 1.0
    grads = _backprop(model, X, H, dlogits, np.zeros(1))
    return logp, grads


def value_and_grad(model: PolicyModel, features: np.ndarray):
    X = features[None, :]
    _, values, H = _forward_batch(model, X)
    grads = _backprop(model, X, H, np.zeros((1, model.n_actions)), np.ones(1))
    return float(values[0]), grads


def ppo_surrogate_terms(ratio: np.ndarray, adv: np.ndarray, clip: float) -> np.ndarray:
    """Per-sample clipped surrogate: min(ratio * A, clip(ratio) * A)."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip, 1.0 + clip) * adv)


def ppo_loss_and_grad(model: PolicyModel, X, actions, logp_old, adv, returns,
                      clip: float = 0.2, value_coef: float = VALUE_COEF,
                      entropy_coef: float = ENTROPY_COEF):
    """Clipped PPO objective (policy + value + entropy) and its gradients."""
    N = len(actions)
    probs, values, H = _forward_batch(model, X)
    idx = np.arange(N)
    logp = np.log(probs[idx, actions] + 1e-300)
    ratio = np.exp(logp - logp_old)

    surr = ppo_surrogate_terms(ratio, adv, clip)
    unclipped_active = ratio * adv <= np.clip(ratio, 1 - clip, 1 + clip) * adv
    logp_terms = -np.sum(np.where(probs > 0, probs * np.log(probs + 1e-300), 0.0), axis=1)
    loss = (-np.mean(surr)
            + value_coef * np.mean((values - returns) ** 2)
            - entropy_coef * np.mean(logp_terms))

    # policy head: d(-surr)/dlogp = -ratio * adv where the unclipped branch is
    # active, zero where the clipped (constant) branch dominates
    dlogp = np.where(unclipped_active, -ratio * adv, 0.0) / N
    dlogits = dlogp[:, None] * (-probs)
    dlogits[idx, actions] += dlogp
    # entropy bonus
    ent = logp_terms
    dlogits += entropy_coef / N * probs * (np.log(probs + 1e-300) + ent[:, None])
    if model.action_mask is not None:
        dlogits = np.where(model.action_mask, dlogits, 0.0)
    dvalues = 2.0 * value_coef * (values - returns) / N
    grads = _backprop(model, X, H, dlogits, dvalues)
    return float(loss), grads, {"surrogate": surr, "ratio": ratio,
                                "entropy": float(np.mean(ent))}


class Adam:
    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-4,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]):
        self.t += 1
        for k in params:
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * grads[k]
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * grads[k] ** 2
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ---------------------------------------------------------------------------
# the agent

AGENT_MODES = ("full", "movement", "perception")


@dataclass
class PolicyBundle:
    """A policy network plus the configuration needed to deploy it."""
    model: PolicyModel
    class_count: int
    mode: str = "full"                 # full | movement | perception
    include_prop: bool = True
    base_movement: str | None = None   # movement id for perception mode


class RLAgent:
    """Wraps a PolicyBundle as an episode agent; optionally records rollouts."""

    def __init__(self, bundle: PolicyBundle, collect: bool = False,
                 threshold_cfg: ThresholdPerceptionConfig | None = None):
        self.bundle = bundle
        self.collect = collect
        self.threshold_cfg = threshold_cfg or ThresholdPerceptionConfig()
        if bundle.mode == "perception":
            if bundle.base_movement is None:
                raise ValueError("perception mode needs a base movement policy")
            from .agents import MOVEMENT_POLICIES
            self.base = MOVEMENT_POLICIES[bundle.base_movement]()
        else:
            self.base = None

    def reset(self, world, start_pose, radius, rng):
        self.rng = rng
        self.memory = PolicyMemory.fresh(feature_block_dim(self.bundle.class_count))
        self._collected = False
        self.trajectory: list[dict] = []
        if self.base is not None:
            self.base.reset(world, start_pose, radius,
                            np.random.default_rng(rng.integers(0, 2 ** 63)))

    def _sample(self, features) -> tuple[int, float, float]:
        probs, value = policy_forward(self.bundle.model, features)
        a = int(self.rng.choice(len(probs), p=probs))
        return a, float(np.log(probs[a] + 1e-300)), value

    def act(self, obs: AgentObservation, pose) -> Action:
        features, self.memory = featurize(obs, self.memory, self.bundle.class_count,
                                          include_prop=self.bundle.include_prop)
        a, logp, value = self._sample(features)
        if self.collect:
            self.trajectory.append({"features": features, "action": a,
                                    "logp": logp, "value": value,
                                    "step": obs.step_index})
        mode = self.bundle.mode
        if mode == "full":
            action = Action(a)
        elif mode == "movement":
            overlay = threshold_perception(obs, self.threshold_cfg)
            if overlay == Action.ANNOTATE:
                self._collected = False
                action = Action.ANNOTATE
            elif overlay == Action.COLLECT and not self._collected:
                self._collected = True
                action = Action.COLLECT
            else:
                action = Action(a)
        else:  # perception: 0 = follow base, 1 = Annotate, 2 = Collect
            if a == 1:
                action = Action.ANNOTATE
            elif a == 2:
                action = Action.COLLECT
            else:
                action = self.base.act(obs, pose)
        if action == Action.COLLECT and obs.prop_mask.known_count == 0:
            action = Action.ANNOTATE  # collect precondition guard
        self._post_action(action)
        return action

    def _post_action(self, action: Action):
        if action == Action.ANNOTATE:
            self.memory.steps_since_annotate = 0
        else:
            self.memory.steps_since_annotate += 1
        self.memory.last_action = int(action)


def mode_n_actions(mode: str) -> int:
    return {"full": N_ACTIONS, "movement": 5, "perception": 3}[mode]


def new_bundle(seed: int, class_count: int, mode: str = "full",
               include_prop: bool = True, base_movement: str | None = None,
               no_collect: bool = False) -> PolicyBundle:
    model = init_policy(seed, feature_dim(class_count), mode_n_actions(mode))
    if no_collect:
        if mode == "movement":
            raise ValueError("movement mode has no Collect action to disable")
        collect_idx = int(Action.COLLECT) if mode == "full" else 2
        mask = np.ones(model.n_actions, dtype=bool)
        mask[collect_idx] = False
        model.action_mask = mask
    return PolicyBundle(model=model, class_count=class_count, mode=mode,
                        include_prop=include_prop, base_movement=base_movement)


# ---------------------------------------------------------------------------
# checkpoint format

def save_policy(bundle: PolicyBundle, path: str) -> None:
    model = bundle.model
    np.savez(path, version=1, feature_dim=model.feature_dim,
             n_actions=model.n_actions, class_count=bundle.class_count,
             mode=bundle.mode, include_prop=bundle.include_prop,
             base_movement=bundle.base_movement or "",
             action_mask=(model.action_mask if model.action_mask is not None
                          else np.ones(model.n_actions, dtype=bool)),
             **model.params())


def load_policy(path: str) -> PolicyBundle:
    z = np.load(path)
    if int(z["version"]) != 1:
        raise ValueError(f"unsupported policy checkpoint version {z['version']}")
    mask = z["action_mask"]
    model = PolicyModel(feature_dim=int(z["feature_dim"]), n_actions=int(z["n_actions"]),
                        W1=z["W1"], b1=z["b1"], Wa=z["Wa"], ba=z["ba"],
                        Wv=z["Wv"], bv=z["bv"],
                        action_mask=None if mask.all() else mask)
    base = str(z["base_movement"]) or None
    return PolicyBundle(model=model, class_count=int(z["class_count"]),
                        mode=str(z["mode"]), include_prop=bool(z["include_prop"]),
                        base_movement=base)


# ---------------------------------------------------------------------------
# PPO training

@dataclass
class PPOConfig:
    lr: float = 1e-4
    clip: float = 0.2
    batch_size: int = 512
    epochs: int = 4
    entropy_coef: float = ENTROPY_COEF
    value_coef: float = VALUE_COEF
    val_interval: int = 32     # episodes between validation evaluations
    val_episodes: int = 6
    normalize_adv: bool = True


def discounted_returns(rewards: np.ndarray, gamma: float) -> np.ndarray:
    out = np.empty_like(rewards)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def ppo_train(episode_factory, train_seeds, val_seeds, episodes: int, seed: int,
              bundle: PolicyBundle | None = None, class_count: int = 13,
              reward_cfg: RewardConfig | None = None,
              ppo_cfg: PPOConfig | None = None,
              log_path: str | None = None, mode: str = "full",
              include_prop: bool = True, base_movement: str | None = None,
              no_collect: bool = False, no_explore_reward: bool = False,
              workers: int = 1, progress=None):
    """Train a policy with clipped PPO over full-episode rollouts.

    `episode_factory(world_seed, start_seed, agent, reward_cfg,
    no_explore_reward)` must run one episode and return (rewards, record);
    the harness provides this to avoid a circular dependency. Keeps the
    parameters that scored the best validation mIoU.
    """
    reward_cfg = reward_cfg or RewardConfig()
    cfg = ppo_cfg or PPOConfig()
    rng = np.random.default_rng(seed)
    if bundle is None:
        bundle = new_bundle(int(rng.integers(0, 2 ** 63)), class_count, mode=mode,
                            include_prop=include_prop, base_movement=base_movement,
                            no_collect=no_collect)
    model = bundle.model
    opt = Adam(model.params(), lr=cfg.lr)

    log_rows = []
    best = {"miou": -np.inf, "model": model.copy()}
    ep_done = 0
    while ep_done < episodes:
        # -- collect a batch of rollouts
        X, acts, logps, values, advs, rets = [], [], [], [], [], []
        batch_eps = 0
        while sum(len(x) for x in X) < cfg.batch_size and ep_done + batch_eps < episodes + 1:
            ws = int(train_seeds[rng.integers(0, len(train_seeds))])
            ss = int(rng.integers(0, 2 ** 31))
            agent = RLAgent(bundle, collect=True)
            rewards, record = episode_factory(ws, ss, agent, reward_cfg,
                                              no_explore_reward)
            traj = agent.trajectory
            if len(traj) != len(rewards):
                raise RuntimeError("trajectory/reward length mismatch")
            ret = discounted_returns(np.asarray(rewards, dtype=float),
                                     reward_cfg.discount)
            vals = np.array([t["value"] for t in traj])
            X.append(np.array([t["features"] for t in traj]))
            acts.append(np.array([t["action"] for t in traj]))
            logps.append(np.array([t["logp"] for t in traj]))
            values.append(vals)
            rets.append(ret)
            advs.append(ret - vals)
            batch_eps += 1
            log_rows.append({"episode": ep_done + batch_eps,
                             "return": float(np.sum(rewards)),
                             "n_annotate": record.n_annotate,
                             "n_collect": record.n_collect,
                             "val_miou": ""})
        ep_done += batch_eps
        Xb = np.concatenate(X)
        ab = np.concatenate(acts)
        lb = np.concatenate(logps)
        adv = np.concatenate(advs)
        rb = np.concatenate(rets)
        if cfg.normalize_adv and len(adv) > 1 and adv.std() > 1e-8:
            adv = (adv - adv.mean()) / adv.std()

        for _ in range(cfg.epochs):
            loss, grads, _ = ppo_loss_and_grad(model, Xb, ab, lb, adv, rb,
                                               clip=cfg.clip,
                                               value_coef=cfg.value_coef,
                                               entropy_coef=cfg.entropy_coef)
            if not np.isfinite(loss):
                raise RuntimeError(f"PPO diverged: non-finite loss at episode {ep_done}")
            opt.step(model.params(), grads)
        # params() returns live references, but Adam writes in place via -=,
        # so re-sync the dataclass fields explicitly for clarity
        for k, v in model.params().items():
            setattr(model, k, v)

        if (ep_done // cfg.val_interval) != ((ep_done - batch_eps) // cfg.val_interval):
            val = _validate(episode_factory, bundle, val_seeds, cfg.val_episodes,
                            reward_cfg, seed=seed + ep_done)
            log_rows[-1]["val_miou"] = float(val)
            if val > best["miou"]:
                best = {"miou": val, "model": model.copy()}
            if progress is not None:
                progress(ep_done, val)

    final_val = _validate(episode_factory, bundle, val_seeds, cfg.val_episodes,
                          reward_cfg, seed=seed + episodes + 1)
    if final_val > best["miou"]:
        best = {"miou": final_val, "model": model.copy()}
    if log_path:
        with open(log_path, "w") as f:
            f.write("episode,return,n_annotate,n_collect,val_miou\n")
            for r in log_rows:
                f.write(f"{r['episode']},{r['return']!r},{r['n_annotate']},"
                        f"{r['n_collect']},{r['val_miou']}\n")
    bundle.model = best["model"]
    return bundle


def _validate(episode_factory, bundle: PolicyBundle, val_seeds, n_episodes: int,
              reward_cfg: RewardConfig, seed: int) -> float:
    rng = np.random.default_rng(seed)
    mious = []
    for i in range(n_episodes):
        ws = int(val_seeds[i % len(val_seeds)])
        ss = int(rng.integers(0, 2 ** 31))
        agent = RLAgent(bundle, collect=False)
        _, record = episode_factory(ws, ss, agent, reward_cfg, False)
        mious.append(record.final_miou)
    return float(np.mean(mious))
