"""Block-sparse attention over hierarchically pooled KV representations.

Instead of a binary keep/drop block mask, every (query block, KV block)
pair is assigned a pooling level: 1 keeps the raw block, level h uses a
2^(h-1)-fold mean-pooled stand-in at 2^(1-h) of the cost, 0 skips it.
The package covers the whole loop: importance estimation, level
assignment, a streaming executor with the pooled-mass logit bias, a tile
scheduler, and file/CLI plumbing, all testable against a dense oracle.
"""

from .attention import (AttentionOutput, causal_full_attention,
                        full_attention, level_bias, psa_reference,
                        psa_streaming)
from .blocks import BlockLayout, PyramidKV, build_pyramid, make_layout
from .errors import NumericError, TensorFileError, ValidationError
from .importance import (AdjacentSimilarity, SamplerConfig,
                         adjacent_key_similarity, antidiagonal_selection,
                         importance_antidiagonal, importance_sampled)
from .linalg import (as_matrix, matmul, mean_pool_rows, relative_error,
                     row_softmax)
from .mask import (PRESET_CUTPOINTS, LevelThresholds, QuantileCutpoints,
                   SimThresholds, SparsityReport, assign_quantile,
                   assign_threshold, binary_mask, causal_premask,
                   combine_mask, level_cap_from_similarity,
                   report_from_counts, sparsity_report)
from .permute import (Permutation, apply_permutation, hilbert_order,
                      invert_permutation)
from .pipeline import (PipelineResult, RunConfig, report_to_json,
                       run_pipeline, similarity_profile, synthesize)
from .scheduler import (ExecutionTile, Segment, TileSchedule,
                        UtilizationStats, build_schedule, execute_schedule,
                        utilization)
from .tensorfile import read_tensor, write_tensor

__version__ = "0.1.0"

__all__ = [
    "AdjacentSimilarity", "AttentionOutput", "BlockLayout", "ExecutionTile",
    "LevelThresholds", "NumericError", "PRESET_CUTPOINTS", "Permutation",
    "PipelineResult", "PyramidKV", "QuantileCutpoints", "RunConfig",
    "SamplerConfig", "Segment", "SimThresholds", "SparsityReport",
    "TensorFileError", "TileSchedule", "UtilizationStats", "ValidationError",
    "adjacent_key_similarity", "antidiagonal_selection", "apply_permutation",
    "as_matrix", "assign_quantile", "assign_threshold", "binary_mask",
    "build_pyramid", "build_schedule", "causal_full_attention",
    "causal_premask", "combine_mask", "execute_schedule", "full_attention",
    "hilbert_order", "importance_antidiagonal", "importance_sampled",
    "invert_permutation", "level_bias", "level_cap_from_similarity",
    "make_layout", "matmul", "mean_pool_rows", "psa_reference",
    "psa_streaming", "read_tensor", "relative_error", "report_from_counts",
    "report_to_json", "row_softmax", "run_pipeline", "similarity_profile",
    "sparsity_report", "synthesize", "utilization", "write_tensor",
]
