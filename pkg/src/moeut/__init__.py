"""Shared-layer mixture-of-experts transformer on a small numpy autograd engine."""

from .accounting import (DenseSpec, build_config_from_dense, count_macs, count_params, mac_breakdown,
                         param_breakdown)
from .analysis import (SelectionTrace, column_selection_iou, expert_layer_histogram,
                       layer_position_score, residual_update_norms, token_expert_diversity,
                       token_layer_specialization)
from .attention import AttentionHeadBank, attention_core, output_moe, switchhead, value_moe
from .config import TABLE3, ConfigError, ModelConfig, preset
from .model import MoEUT, build_schedule, lm_loss, model_forward
from .moe_ffn import FfnExpertBank, balancing_loss, ffn_forward, select_experts
from .tensor import Graph, GraphLifecycleError, NumericError, ShapeError, Tensor
from .training import (TrainConfig, TrainState, evaluate_perplexity, load_checkpoint, lr_schedule,
                       save_checkpoint, train, train_step)

__version__ = "0.1.0"
