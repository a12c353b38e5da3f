"""stripereid: multi-granularity global/stripe embeddings for person re-id.

Library layout:
    configs     declarative model/sampler/loss/train/run configuration
    data        dataset parsing, synthetic generation, PK batch sampling
    layers      numpy layers with explicit forward/backward
    model       the multi-branch embedding network
    losses      softmax + batch-hard triplet losses and their routing
    train       SGD loop, LR schedule, checkpoints, ablation variants
    infer       deterministic feature extraction and response maps
    evaluation  distance matrices, CMC/mAP protocol, re-ranking
    cli         command-line entry point (train/extract/eval/heatmap/synth)
"""

__version__ = "0.1.0"

from .configs import (BranchConfig, LossConfig, ModelConfig, RunConfig,
                      SamplerConfig, TrainConfig, canonical_branches)
from .data import (Batch, DatasetMeta, ImageRecord, PKSampler, augment_train,
                   generate_synthetic, load_market_layout)
from .losses import (LossReport, batch_hard_triplet, route_losses, routing_plan,
                     softmax_loss)
from .model import EmbeddingBundle, MultiBranchNet, build_model, partition_stripes

__all__ = [
    "__version__",
    "BranchConfig", "LossConfig", "ModelConfig", "RunConfig", "SamplerConfig",
    "TrainConfig", "canonical_branches",
    "Batch", "DatasetMeta", "ImageRecord", "PKSampler", "augment_train",
    "generate_synthetic", "load_market_layout",
    "LossReport", "batch_hard_triplet", "route_losses", "routing_plan",
    "softmax_loss",
    "EmbeddingBundle", "MultiBranchNet", "build_model", "partition_stripes",
]
