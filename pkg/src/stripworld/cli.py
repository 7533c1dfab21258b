"""Command-line entry points: world generation, episodes, benchmarks,
policy training, ablations, pre-training, and curve plotting."""

from __future__ import annotations

import argparse
import sys

import numpy as np


def _parse_regime(text: str) -> tuple[str, int]:
    kind, _, value = text.partition(":")
    if kind == "steps":
        return "steps", int(value or 256)
    if kind == "budget":
        return "budget", int(value or 100)
    raise argparse.ArgumentTypeError(f"regime must be steps:N or budget:N, got {text!r}")


def cmd_gen_world(args):
    from .world import generate_world, save_world
    world = generate_world(args.seed)
    save_world(world, args.out)
    n_free = int((world.occupancy == 0).sum())
    print(f"world seed={args.seed}: {world.width}x{world.height} cells, "
          f"{n_free} free, K={world.class_count} -> {args.out}")


def cmd_run(args):
    from .harness import EpisodeConfig, run_episode
    regime, n = _parse_regime(args.regime)
    cfg = EpisodeConfig(
        world_seed=args.world, start_seed=args.start_seed,
        agent_id=args.agent, perception_id=args.perception,
        policy_path=args.policy, regime=regime,
        max_steps=n if regime == "steps" else 256,
        annotation_budget=n if regime == "budget" else 100,
        sample_seed=args.start_seed, policy_seed=args.start_seed,
        train_seed=args.start_seed, model_seed=args.start_seed)
    record = run_episode(cfg)
    if args.record:
        with open(args.record, "w") as f:
            f.write(record.to_json())
    print(f"{args.agent}: mIoU={record.final_miou:.3f} acc={record.final_acc:.3f} "
          f"#ann={record.n_annotate} #coll={record.n_collect} steps={record.n_steps}")


def cmd_benchmark(args):
    from .harness import AgentSpec, benchmark
    regime, n = _parse_regime(args.regime)
    specs = [AgentSpec(agent_id=a, perception_id=args.perception,
                       policy_path=args.policy if a == "rl" else None)
             for a in args.agents]
    kwargs = {"max_steps": n} if regime == "steps" else {"annotation_budget": n}
    rows, agg = benchmark(specs, split=args.split, starts_per_world=args.starts,
                          regime=regime, out_csv=args.out,
                          curves_csv=args.curves, n_jobs=args.jobs, **kwargs)
    print(f"{'Method':<22} {'mIoU':>6} {'Acc':>6} {'#Ann':>7} {'#Coll':>7} {'#Steps':>7}")
    for r in agg:
        print(f"{r['method']:<22} {r['miou']:>6.3f} {r['acc']:>6.3f} "
              f"{r['n_ann']:>7.1f} {r['n_coll']:>7.1f} {r['n_steps']:>7.1f}")


def cmd_train(args):
    from .harness import train_rl_policy
    from .rl import PPOConfig
    cfg = PPOConfig(val_interval=args.val_interval)
    bundle = train_rl_policy(
        episodes=args.episodes, seed=args.seed, out_path=args.out,
        log_path=args.log, ppo_cfg=cfg,
        mode="perception" if args.base_movement else "full",
        base_movement=args.base_movement,
        progress=lambda ep, v: print(f"episode {ep}: val mIoU {v:.3f}", flush=True))
    print(f"saved policy to {args.out}")


def cmd_ablate(args):
    from .harness import ablation_suite
    row, _ = ablation_suite(set(args.flags), episodes=args.episodes,
                            seed=args.seed, out_dir=args.out_dir)
    print(row)


def cmd_pretrain(args):
    from .harness import pretrain_experiment
    table, extras = pretrain_experiment(n_views=args.views, agent_id=args.agent,
                                        seed=args.seed)
    print(f"{'Variant':<18} {'mIoU':>6} {'Acc':>6} {'#Ann':>9} {'#Coll':>7}")
    for r in table:
        print(f"{r['variant']:<18} {r['miou']:>6.3f} {r['acc']:>6.3f} "
              f"{r['n_ann']:>9.1f} {r['n_coll']:>7.1f}")
    print(f"frozen model on training worlds: mIoU {extras['train_miou_frozen']:.3f}")


def cmd_plot(args):
    import csv
    from collections import defaultdict
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = defaultdict(lambda: defaultdict(list))  # method -> step -> values
    with open(args.curves) as f:
        for row in csv.DictReader(f):
            series[row["method"]][int(row["step"])].append(float(row[args.metric]))
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for method, by_step in sorted(series.items()):
        steps = sorted(by_step)
        ax.plot(steps, [np.mean(by_step[s]) for s in steps], label=method)
    ax.set_xlabel("step")
    ax.set_ylabel(args.metric)
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stripworld")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-world", help="generate and save a world")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_world)

    r = sub.add_parser("run", help="run a single episode")
    r.add_argument("--agent", required=True,
                   choices=["random", "rotate", "bounce", "frontier", "spacefill", "rl"])
    r.add_argument("--perception", default="threshold", choices=["threshold", "random"])
    r.add_argument("--world", type=int, required=True)
    r.add_argument("--start-seed", type=int, default=0)
    r.add_argument("--regime", default="steps:256")
    r.add_argument("--policy", default=None)
    r.add_argument("--record", default=None)
    r.set_defaults(func=cmd_run)

    b = sub.add_parser("benchmark", help="run the multi-agent benchmark")
    b.add_argument("--agents", nargs="+", required=True)
    b.add_argument("--perception", default="threshold")
    b.add_argument("--split", default="test", choices=["train", "val", "test"])
    b.add_argument("--starts", type=int, default=4)
    b.add_argument("--regime", default="steps:256")
    b.add_argument("--policy", default=None)
    b.add_argument("--out", default=None)
    b.add_argument("--curves", default=None)
    b.add_argument("--jobs", type=int, default=1)
    b.set_defaults(func=cmd_benchmark)

    t = sub.add_parser("train", help="train the RL policy with PPO")
    t.add_argument("--episodes", type=int, required=True)
    t.add_argument("--workers", type=int, default=1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.add_argument("--log", default=None)
    t.add_argument("--val-interval", type=int, default=32)
    t.add_argument("--base-movement", default=None,
                   help="train a 3-action annotation policy over this movement baseline")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("ablate", help="train and evaluate an ablated RL variant")
    a.add_argument("--flags", nargs="*", default=[])
    a.add_argument("--episodes", type=int, required=True)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out-dir", default=None)
    a.set_defaults(func=cmd_ablate)

    q = sub.add_parser("pretrain", help="segmentation pre-training experiment")
    q.add_argument("--views", type=int, default=2000)
    q.add_argument("--agent", default="spacefill")
    q.add_argument("--seed", type=int, default=0)
    q.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("plot", help="plot metric curves from a benchmark run")
    f.add_argument("--curves", required=True)
    f.add_argument("--metric", default="miou", choices=["miou", "acc"])
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
