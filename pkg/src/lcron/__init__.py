"""Joint training of multi-stage cascade rankers through differentiable top-k selection."""

from .diffsort import hard_sort_desc, neural_sort, pullback, soft_permutation, soft_sort
from .evaluation import CascadeConfig, bound_gap, cascade_filter, exact_survival, ndcg_at, recall_at
from .losses import (
    FusionWeights,
    LossOutput,
    joint_survival,
    loss_bce,
    loss_e2e,
    loss_ranknet,
    loss_single,
    loss_uwl,
    topk_select_prob,
)
from .numerics import GradCheckError, InvalidArgument, grad_check
from .sampling import SynthConfig, assign_labels, generate_dataset, read_dataset, write_dataset

__version__ = "0.1.0"
