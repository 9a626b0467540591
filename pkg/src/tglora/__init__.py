"""Progressive task-grouped low-rank adaptation for multi-task networks, on a small numpy autodiff."""

from .autodiff import AdamW, AdamWConfig, ParamStore, Tensor, backward, flatten_gradients
from .cost import CostReport, cost_report, count_macs, count_trainable
from .grouping import best_partition, compute_tree, merge_task_groups, partition_score
from .layer import TGLoRALayer, allocate_ranks
from .network import BranchedNetwork, NetworkConfig, build_network
from .similarity import SimilarityMatrix, similarity_matrix, tune_heads
from .synthetic import Dataset, TaskGenerator, generate
from .tasks import TaskSpec
from .trainer import RunRecord, TrainConfig, delta_m, mtl_loss, train, train_mode
from .tree import TaskTree, schedule_groups, validate_tree

__version__ = "0.1.0"
