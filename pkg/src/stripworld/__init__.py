"""stripworld: a desk-scale testbed for embodied visual active learning.

Agents explore procedurally generated 2D indoor worlds, request per-view
semantic annotations, propagate labels through exact geometric pixel
correspondence, and refine an online per-pixel segmentation model. The
harness measures how well each exploration/annotation policy trains the
perception model.
"""

from .world import (GenerationParams, GridWorld, MovementAction, Pose,
                    generate_world, geodesic_distance, load_world, save_world,
                    step_pose)
from .render import View, correspondence, render_view
from .perception import (LabeledView, SegModel, TrainConfig, UNKNOWN,
                         init_model, load_model, mean_accuracy, miou, predict,
                         refine, save_model, top_k_classes)
from .propagation import PropagatedMask, do_annotate, do_collect, init_from_gt, propagate
from .agents import (Action, AgentObservation, ThresholdPerceptionConfig,
                     build_space_filling_tour, make_agent, threshold_perception,
                     update_occupancy)
from .rl import (PolicyBundle, RewardConfig, RLAgent, annotate_reward,
                 collect_reward, exploration_reward, featurize, final_reward,
                 load_policy, policy_forward, save_policy)
from .harness import (AgentSpec, EpisodeConfig, EpisodeRecord, SPLIT_SEEDS,
                      ablation_suite, benchmark, pretrain_experiment,
                      run_episode, sample_reference_set, train_rl_policy)

__version__ = "0.1.0"
