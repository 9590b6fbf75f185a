"""Compress CNNs with a handful of training images.

Blocks or filters are removed, a 1x1 adaptor is spliced in behind each pruned
site and trained to mimic the original features, then merged back into a
neighbouring convolution so the compressed net carries no extra layers.
"""

__version__ = "0.1.0"

from .ir import BlockTag, CostReport, GraphError, ModelGraph, count_cost, infer_shapes, validate_graph
from .zoo import ARCHITECTURES, ArchitectureError, build_architecture
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .surgery import (
    CompressionPlan,
    PlanError,
    SiteNotPrunable,
    SurgeryError,
    drop_block,
    fold_bn,
    insert_block_adaptors,
    insert_channel_adaptors,
    merge_adaptor,
    merge_adaptors,
)
from .tinyset import DataError, Recipe, TinySet, sample_tinyset, synth_gaussian
from .recovery import (
    FinetuneConfig,
    MimicConfig,
    MimicJob,
    RecoveryError,
    evaluate,
    finetune_kd,
    run_practise,
    train_adaptors,
)
from .bench import LatencyReport, MeasurementError, measure_latency

__all__ = [name for name in dir() if not name.startswith("_")]
