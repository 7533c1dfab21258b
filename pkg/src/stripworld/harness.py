"""Episode execution, reference-view evaluation, benchmarks and experiments.

An episode couples one agent, one world and one online segmentation model.
The agent alternates movement and perception actions; metrics are measured
on a fixed reference set of views near the start, which every agent sees
identically for a given (world, start, sampling seed).
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import perception, propagation, rl
from .agents import Action, AgentObservation, make_agent, to_movement
from .perception import SegModel, TrainConfig, init_model, mean_accuracy, miou, top_k_classes
from .render import View, correspondence, render_view
from .rl import RewardConfig, annotate_reward, collect_reward, exploration_reward, final_reward
from .world import GenerationParams, GridWorld, HEADINGS, Pose, distance_field, generate_world, step_pose

# disjoint generator-seed ranges standing in for a 61/11/18 scene split
SPLIT_SEEDS = {
    "train": list(range(1000, 1061)),
    "val": list(range(2000, 2011)),
    "test": list(range(3000, 3018)),
}

CURVE_INTERVAL = 32
RECORD_VERSION = 1


@dataclass
class EpisodeConfig:
    world_seed: int
    start_seed: int = 0
    agent_id: str = "random"
    perception_id: str = "threshold"
    regime: str = "steps"          # "steps" | "budget"
    max_steps: int = 256
    annotation_budget: int = 100
    safety_cap: int = 8192         # step cap in the budget regime
    radius: float = 5.0
    reference_count: int = 32
    sample_seed: int = 0
    policy_seed: int = 0
    train_seed: int = 0
    model_seed: int = 0
    policy_path: str | None = None

    def __post_init__(self):
        if self.regime not in ("steps", "budget"):
            raise ValueError(f"regime must be 'steps' or 'budget': {self.regime}")


@dataclass
class ReferenceSet:
    views: list[View]
    poses: list[Pose]


@dataclass
class EpisodeRecord:
    version: int
    config: dict
    steps: list[dict]
    curves: list[dict]
    n_annotate: int
    n_collect: int
    n_steps: int
    final_miou: float
    final_acc: float
    final_reward: float
    collect_conversions: int      # Collects converted to Annotate (empty mask)
    stationary_collects: int      # Collects issued with no motion since the last one

    def episode_return(self) -> float:
        return self.final_reward + sum(s["reward"] for s in self.steps)

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, text: str) -> "EpisodeRecord":
        d = json.loads(text)
        if d["version"] != RECORD_VERSION:
            raise ValueError(f"unsupported record version {d['version']}")
        return cls(**d)


def sample_start(world: GridWorld, seed: int) -> Pose:
    """Uniform free-cell center and a uniform heading."""
    rng = np.random.default_rng(np.random.SeedSequence((world.seed, seed, 17)))
    cells = world.free_cells()
    ix, iy = cells[rng.integers(0, len(cells))]
    x, y = world.cell_center(ix, iy)
    return Pose(x=x, y=y, heading=int(HEADINGS[rng.integers(0, len(HEADINGS))]))


def sample_reference_set(world: GridWorld, start: tuple[float, float], radius: float,
                         n: int, seed: int) -> ReferenceSet:
    """n random views within geodesic `radius` of start; deterministic in seed."""
    dist = distance_field(world, world.cell_of(*start))
    ys, xs = np.nonzero(dist <= radius)
    if len(ys) == 0:
        raise ValueError("no free cells within radius of start")
    rng = np.random.default_rng(np.random.SeedSequence((world.seed, seed, 23)))
    views, poses = [], []
    for _ in range(n):
        k = rng.integers(0, len(ys))
        x, y = world.cell_center(int(xs[k]), int(ys[k]))
        pose = Pose(x=x, y=y, heading=int(HEADINGS[rng.integers(0, len(HEADINGS))]))
        poses.append(pose)
        views.append(render_view(world, pose))
    return ReferenceSet(views=views, poses=poses)


def _reward_miou(model: SegModel, refset: ReferenceSet, subset: set[int]) -> float:
    return miou(model, refset.views, subset)


def run_episode(cfg: EpisodeConfig, agent=None, world: GridWorld | None = None,
                refset: ReferenceSet | None = None,
                seg_init: SegModel | None = None,
                reward_cfg: RewardConfig | None = None,
                train_cfg: TrainConfig | None = None,
                no_explore_reward: bool = False) -> EpisodeRecord:
    """Run one full episode. Deterministic given the config's seeds.

    The model starts fresh (or from seg_init), is trained on the given
    first view, then refined at every perception action. The reference set
    is evaluation-only and never enters the training pool.
    """
    reward_cfg = reward_cfg or RewardConfig()
    train_cfg = train_cfg or TrainConfig()
    world = world if world is not None else generate_world(cfg.world_seed)
    pose = sample_start(world, cfg.start_seed)
    if refset is None:
        refset = sample_reference_set(world, (pose.x, pose.y), cfg.radius,
                                      cfg.reference_count, cfg.sample_seed)
    reward_classes = top_k_classes(refset.views, reward_cfg.top_k)

    if agent is None:
        agent = make_agent(cfg.agent_id, cfg.perception_id, policy_path=cfg.policy_path)
    agent.reset(world, pose, cfg.radius, np.random.default_rng(cfg.policy_seed))

    if seg_init is None:
        model = init_model(cfg.model_seed, width=refset.views[0].width,
                           d_app=world.d_app, class_count=world.class_count)
    else:
        model = copy.deepcopy(seg_init)
    train_rng = np.random.default_rng(cfg.train_seed)

    view = render_view(world, pose)
    trainset: list[perception.LabeledView] = []
    mask = propagation.do_annotate(trainset, view)  # the given first annotation
    perception.refine(model, trainset, train_cfg, train_rng)
    model_initial = copy.deepcopy(model)

    rm = _reward_miou(model, refset, reward_classes)
    steps: list[dict] = []
    curves: list[dict] = []
    trace: list[tuple[float, float]] = []
    n_annotate = n_collect = 0
    collision = False
    collect_conversions = 0
    stationary_collects = 0
    moved_since_collect = True

    def checkpoint(step):
        curves.append({"step": step, "n_annotate": n_annotate,
                       "miou": miou(model, refset.views),
                       "acc": mean_accuracy(model, refset.views)})

    checkpoint(0)
    step_cap = cfg.max_steps if cfg.regime == "steps" else cfg.safety_cap
    t = 0
    while t < step_cap:
        obs = AgentObservation(view=view, predicted=perception.predict(model, view),
                               prop_mask=mask, collision_flag=collision, step_index=t)
        action = agent.act(obs, pose)
        reward = 0.0
        if action == Action.COLLECT and mask.known_count == 0:
            action = Action.ANNOTATE
            collect_conversions += 1
        if action < Action.ANNOTATE:
            new_pose, collision = step_pose(world, pose, to_movement(action))
            reward = 0.0 if no_explore_reward else exploration_reward(
                trace, (new_pose.x, new_pose.y), reward_cfg)
            if new_pose != pose:  # blocked translations leave the view as is
                new_view = render_view(world, new_pose)
                mask = propagation.propagate(mask, correspondence(view, new_view))
                view = new_view
                pose = new_pose
                moved_since_collect = True
        elif action == Action.ANNOTATE:
            collision = False
            mask = propagation.do_annotate(trainset, view)
            perception.refine(model, trainset, train_cfg, train_rng)
            new_rm = _reward_miou(model, refset, reward_classes)
            reward = annotate_reward(new_rm, rm, reward_cfg)
            rm = new_rm
            n_annotate += 1
            moved_since_collect = True
        else:  # Collect
            collision = False
            if not moved_since_collect:
                stationary_collects += 1
            propagation.do_collect(trainset, view, mask)
            perception.refine(model, trainset, train_cfg, train_rng)
            new_rm = _reward_miou(model, refset, reward_classes)
            reward = collect_reward(new_rm, rm)
            rm = new_rm
            n_collect += 1
            moved_since_collect = False

        trace.append((pose.x, pose.y))
        steps.append({"action": int(action), "x": pose.x, "y": pose.y,
                      "heading": pose.heading,
                      "unknown_fraction": mask.unknown_fraction,
                      "reward": reward, "collision": bool(collision)})
        t += 1
        if action >= Action.ANNOTATE or t % CURVE_INTERVAL == 0:
            checkpoint(t)
        if cfg.regime == "budget" and n_annotate >= cfg.annotation_budget:
            break

    if curves[-1]["step"] != t:
        checkpoint(t)
    r_final = final_reward(model, model_initial, refset.views, reward_cfg)
    return EpisodeRecord(
        version=RECORD_VERSION, config=asdict(cfg), steps=steps, curves=curves,
        n_annotate=n_annotate, n_collect=n_collect, n_steps=t,
        final_miou=miou(model, refset.views),
        final_acc=mean_accuracy(model, refset.views),
        final_reward=r_final,
        collect_conversions=collect_conversions,
        stationary_collects=stationary_collects,
    )


# ---------------------------------------------------------------------------
# benchmark runner

@dataclass
class AgentSpec:
    agent_id: str
    perception_id: str = "threshold"
    policy_path: str | None = None

    @property
    def label(self) -> str:
        if self.perception_id == "threshold":
            return self.agent_id
        return f"{self.agent_id}+{self.perception_id}"


def _episode_job(args):
    spec, world_seed, start_index, regime, kwargs = args
    cfg = EpisodeConfig(
        world_seed=world_seed, start_seed=start_index, agent_id=spec.agent_id,
        perception_id=spec.perception_id, policy_path=spec.policy_path,
        regime=regime, sample_seed=start_index,
        policy_seed=start_index * 7919 + world_seed,
        train_seed=start_index * 104729 + world_seed,
        model_seed=start_index * 1299709 + world_seed,
        **kwargs,
    )
    record = run_episode(cfg)
    return spec.label, world_seed, start_index, record


def benchmark(specs: list[AgentSpec], split: str = "test", starts_per_world: int = 4,
              regime: str = "steps", out_csv: str | None = None,
              curves_csv: str | None = None, n_jobs: int = 1,
              world_seeds: list[int] | None = None, **episode_kwargs):
    """Run every (agent, world, start) episode and aggregate the results.

    All agents share identical (world, start, reference set) tuples. Returns
    (rows, aggregate) where rows hold one dict per episode and aggregate one
    dict per agent with mean mIoU / accuracy / action counts.
    """
    seeds = world_seeds if world_seeds is not None else SPLIT_SEEDS[split]
    jobs = [(spec, ws, si, regime, episode_kwargs)
            for ws in seeds for si in range(starts_per_world) for spec in specs]
    if n_jobs > 1:
        import multiprocessing as mp
        with mp.Pool(n_jobs) as pool:
            results = pool.map(_episode_job, jobs)
    else:
        results = [_episode_job(j) for j in jobs]

    rows = []
    curve_rows = []
    for label, ws, si, record in results:
        rows.append({"method": label, "world_seed": ws, "start_seed": si,
                     "miou": record.final_miou, "acc": record.final_acc,
                     "n_ann": record.n_annotate, "n_coll": record.n_collect,
                     "n_steps": record.n_steps})
        for c in record.curves:
            curve_rows.append({"method": label, "world_seed": ws, "start_seed": si,
                               **c})
    agg = aggregate_rows(rows)
    if out_csv:
        write_csv(out_csv, rows,
                  ["method", "world_seed", "start_seed", "miou", "acc",
                   "n_ann", "n_coll", "n_steps"])
    if curves_csv:
        write_csv(curves_csv, curve_rows,
                  ["method", "world_seed", "start_seed", "step", "n_annotate",
                   "miou", "acc"])
    return rows, agg


def aggregate_rows(rows: list[dict]) -> list[dict]:
    methods = sorted({r["method"] for r in rows})
    agg = []
    for m in methods:
        sel = [r for r in rows if r["method"] == m]
        agg.append({"method": m,
                    "miou": float(np.mean([r["miou"] for r in sel])),
                    "acc": float(np.mean([r["acc"] for r in sel])),
                    "n_ann": float(np.mean([r["n_ann"] for r in sel])),
                    "n_coll": float(np.mean([r["n_coll"] for r in sel])),
                    "n_steps": float(np.mean([r["n_steps"] for r in sel]))})
    agg.sort(key=lambda r: -r["miou"])
    return agg


def write_csv(path: str, rows: list[dict], columns: list[str]) -> None:
    import csv
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: r.get(k, "") for k in columns})


# ---------------------------------------------------------------------------
# RL training glue

class EpisodeFactory:
    """Callable handed to rl.ppo_train; caches generated worlds."""

    def __init__(self, regime: str = "steps", max_steps: int = 256,
                 radius: float = 5.0, reference_count: int = 32):
        self.regime = regime
        self.max_steps = max_steps
        self.radius = radius
        self.reference_count = reference_count
        self._worlds: dict[int, GridWorld] = {}

    def world(self, seed: int) -> GridWorld:
        if seed not in self._worlds:
            self._worlds[seed] = generate_world(seed)
        return self._worlds[seed]

    def __call__(self, world_seed: int, start_seed: int, agent,
                 reward_cfg: RewardConfig, no_explore_reward: bool):
        cfg = EpisodeConfig(world_seed=world_seed, start_seed=start_seed,
                            agent_id="rl", regime=self.regime,
                            max_steps=self.max_steps, radius=self.radius,
                            reference_count=self.reference_count,
                            sample_seed=start_seed, policy_seed=start_seed + 1,
                            train_seed=start_seed + 2, model_seed=start_seed + 3)
        record = run_episode(cfg, agent=agent, world=self.world(world_seed),
                             reward_cfg=reward_cfg,
                             no_explore_reward=no_explore_reward)
        rewards = [s["reward"] for s in record.steps]
        rewards[-1] += record.final_reward
        return rewards, record


def train_rl_policy(episodes: int, seed: int = 0, out_path: str | None = None,
                    log_path: str | None = None, mode: str = "full",
                    include_prop: bool = True, base_movement: str | None = None,
                    no_collect: bool = False, no_explore_reward: bool = False,
                    train_seeds: list[int] | None = None,
                    val_seeds: list[int] | None = None,
                    ppo_cfg: rl.PPOConfig | None = None,
                    max_steps: int = 256, class_count: int = 13, progress=None):
    """Train a PPO policy on the training split; checkpoint best validation."""
    factory = EpisodeFactory(max_steps=max_steps)
    bundle = rl.ppo_train(
        factory,
        train_seeds if train_seeds is not None else SPLIT_SEEDS["train"],
        val_seeds if val_seeds is not None else SPLIT_SEEDS["val"],
        episodes=episodes, seed=seed, class_count=class_count, mode=mode,
        include_prop=include_prop, base_movement=base_movement,
        no_collect=no_collect, no_explore_reward=no_explore_reward,
        ppo_cfg=ppo_cfg, log_path=log_path, progress=progress)
    if out_path:
        rl.save_policy(bundle, out_path)
    return bundle


# ---------------------------------------------------------------------------
# experiments

def sample_training_views(world_seeds: list[int], n_views: int, seed: int,
                          width: int = 64):
    """Random annotated views from the given worlds, for offline pre-training."""
    rng = np.random.default_rng(seed)
    worlds = {s: generate_world(s) for s in world_seeds}
    out = []
    for _ in range(n_views):
        ws = int(world_seeds[rng.integers(0, len(world_seeds))])
        world = worlds[ws]
        pose = sample_start(world, int(rng.integers(0, 2 ** 31)))
        view = render_view(world, pose, width=width)
        out.append(perception.LabeledView(view=view, labels=view.gt_class.copy()))
    return out


def pretrain_model(views, seed: int = 0, iters: int = 4000,
                   class_count: int = 13, d_app: int = 8) -> SegModel:
    """Offline SGD on a pool of fully annotated views (no early stopping).

    Uses a much stronger weight decay than episode refinement: appearance
    codes are world-specific, so only the world-agnostic structure (class
    priors, suppression of the shared texture direction) transfers, and
    heavy regularization keeps the model from baking in per-world weights
    that a fresh episode would have to unlearn.
    """
    model = init_model(seed, width=views[0].view.width, d_app=d_app,
                       class_count=class_count)
    cfg = TrainConfig(max_iters=iters, early_stop_acc=1.0, weight_decay=0.05)
    perception.refine(model, list(views), cfg, np.random.default_rng(seed + 1))
    return model


def pretrain_experiment(n_views: int = 2000, agent_id: str = "spacefill",
                        train_seeds: list[int] | None = None,
                        test_seeds: list[int] | None = None,
                        starts_per_world: int = 2, seed: int = 0,
                        pretrain_iters: int = 4000, episodes_kwargs=None):
    """Three-row comparison: frozen pre-trained model, per-episode active
    learning from scratch, and pre-trained initialization plus episodes."""
    train_seeds = train_seeds if train_seeds is not None else SPLIT_SEEDS["train"]
    test_seeds = test_seeds if test_seeds is not None else SPLIT_SEEDS["test"]
    episodes_kwargs = episodes_kwargs or {}
    views = sample_training_views(train_seeds, n_views, seed)
    pre = pretrain_model(views, seed=seed, iters=pretrain_iters)

    frozen_mious, frozen_accs = [], []
    scratch_rows, warm_rows = [], []
    for ws in test_seeds:
        world = generate_world(ws)
        for si in range(starts_per_world):
            pose = sample_start(world, si)
            refset = sample_reference_set(world, (pose.x, pose.y), 5.0, 32, si)
            frozen_mious.append(miou(pre, refset.views))
            frozen_accs.append(mean_accuracy(pre, refset.views))
            cfg = EpisodeConfig(world_seed=ws, start_seed=si, agent_id=agent_id,
                                sample_seed=si, policy_seed=si + ws,
                                train_seed=si + ws, model_seed=si + ws,
                                **episodes_kwargs)
            rec = run_episode(cfg, world=world, refset=refset)
            scratch_rows.append(rec)
            rec_w = run_episode(cfg, world=world, refset=refset, seg_init=pre)
            warm_rows.append(rec_w)

    # generalization gap: frozen model on (a subset of) its own training views
    train_mious = []
    for ws in train_seeds[:min(6, len(train_seeds))]:
        world = generate_world(ws)
        pose = sample_start(world, 0)
        refset = sample_reference_set(world, (pose.x, pose.y), 5.0, 32, 0)
        train_mious.append(miou(pre, refset.views))

    table = [
        {"variant": "pretrain-frozen", "miou": float(np.mean(frozen_mious)),
         "acc": float(np.mean(frozen_accs)), "n_ann": float(n_views), "n_coll": 0.0},
        {"variant": "scratch-active", "miou": float(np.mean([r.final_miou for r in scratch_rows])),
         "acc": float(np.mean([r.final_acc for r in scratch_rows])),
         "n_ann": float(np.mean([r.n_annotate for r in scratch_rows])),
         "n_coll": float(np.mean([r.n_collect for r in scratch_rows]))},
        {"variant": "pretrain-active", "miou": float(np.mean([r.final_miou for r in warm_rows])),
         "acc": float(np.mean([r.final_acc for r in warm_rows])),
         "n_ann": float(n_views) + float(np.mean([r.n_annotate for r in warm_rows])),
         "n_coll": float(np.mean([r.n_collect for r in warm_rows]))},
    ]
    extras = {"train_miou_frozen": float(np.mean(train_mious))}
    return table, extras


ABLATION_FLAGS = ("no_prop_features", "no_explore_reward", "no_collect",
                  "heuristic_perception_only")


def ablation_suite(flags: set[str], episodes: int, seed: int = 0,
                   eval_split: str = "val", starts_per_world: int = 2,
                   train_seeds=None, val_seeds=None, eval_seeds=None,
                   ppo_cfg=None, out_dir: str | None = None):
    """Train and evaluate the RL variant selected by `flags`.

    An empty flag set reproduces the full pipeline. Returns one table row
    with the evaluation-split means.
    """
    unknown = set(flags) - set(ABLATION_FLAGS)
    if unknown:
        raise ValueError(f"unknown ablation flags: {sorted(unknown)}")
    bundle = train_rl_policy(
        episodes=episodes, seed=seed,
        mode="movement" if "heuristic_perception_only" in flags else "full",
        include_prop="no_prop_features" not in flags,
        no_collect="no_collect" in flags,
        no_explore_reward="no_explore_reward" in flags,
        train_seeds=train_seeds, val_seeds=val_seeds, ppo_cfg=ppo_cfg)
    import tempfile, os
    path = os.path.join(out_dir, "policy.npz") if out_dir else \
        tempfile.NamedTemporaryFile(suffix=".npz", delete=False).name
    rl.save_policy(bundle, path)
    spec = AgentSpec(agent_id="rl", policy_path=path)
    seeds = eval_seeds if eval_seeds is not None else SPLIT_SEEDS[eval_split]
    rows, agg = benchmark([spec], world_seeds=seeds,
                          starts_per_world=starts_per_world)
    row = dict(agg[0])
    row["variant"] = "+".join(sorted(flags)) if flags else "full"
    return row, rows
