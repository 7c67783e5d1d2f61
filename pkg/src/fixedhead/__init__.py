"""Numerical lab for standard vs fixed-head-size multi-head attention."""

from .attention import (HeadParams, LayerNormParams, Mode, MultiHeadParams, attention_block_forward,
                        embed_multihead_as_fixed, init_multihead, multi_head_backward, multi_head_forward,
                        single_head_forward)
from .experiments import ExperimentConfig, OptimizerConfig, Task, TrainReport, make_dataset, sweep, train
from .realization import (ContextMatrix, RealizationResult, low_rank_residual_search, realize_context,
                          scalar_bottleneck_witness, verify_fixed_point)
from .separation import (Case, SeparationTarget, WitnessReport, build_target, case1_witness, case2_witness,
                         case3_witness, classify_case, verify_separation)

__version__ = "0.1.0"

__all__ = [
    "HeadParams", "LayerNormParams", "Mode", "MultiHeadParams", "attention_block_forward",
    "embed_multihead_as_fixed", "init_multihead", "multi_head_backward", "multi_head_forward",
    "single_head_forward",
    "ExperimentConfig", "OptimizerConfig", "Task", "TrainReport", "make_dataset", "sweep", "train",
    "ContextMatrix", "RealizationResult", "low_rank_residual_search", "realize_context",
    "scalar_bottleneck_witness", "verify_fixed_point",
    "Case", "SeparationTarget", "WitnessReport", "build_target", "case1_witness", "case2_witness",
    "case3_witness", "classify_case", "verify_separation",
]
