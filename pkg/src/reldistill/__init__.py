"""Relation-contrastive knowledge distillation.

A teacher network supervises a student by aligning cross-space
anchor-student relation vectors with the teacher's own anchor
relations, contrastively against a replay buffer of negatives, over two
complementary per-sample elements: the l2-normalized penultimate
feature and the gradient of the task loss with respect to it.
"""

from .config import DistillConfig, OptimizerConfig, load_config
from .elements import RepresentationBatch, feature_element, gradient_element
from .engine import (Distiller, RunResult, StepMetrics, build_pair_index,
                     evaluate, train)
from .losses import (LossBreakdown, baseline_contrastive_loss, kd_loss,
                     relation_contrastive_loss, total_objective)
from .mi import SyntheticJointSpec, fit_and_bound, sample_pairs, true_mi
from .models import ModelSpec, build_model, train_teacher
from .relations import Critic, RelationNet, critic_score, cross_relation, teacher_relation
from .replay import QueueEntry, ReplayQueue

__version__ = "0.1.0"

__all__ = [
    "Critic", "Distiller", "DistillConfig", "LossBreakdown", "ModelSpec",
    "OptimizerConfig", "QueueEntry", "RelationNet", "ReplayQueue",
    "RepresentationBatch", "RunResult", "StepMetrics", "SyntheticJointSpec",
    "baseline_contrastive_loss", "build_model", "build_pair_index",
    "critic_score", "cross_relation", "evaluate", "feature_element",
    "fit_and_bound", "gradient_element", "kd_loss", "load_config",
    "relation_contrastive_loss", "sample_pairs", "teacher_relation",
    "total_objective", "train", "train_teacher", "true_mi",
]
