"""relt: relation-transition classification over frozen embedding features.

The library adapts a frozen zero-shot classifier by routing predictions
through an auxiliary set of anchor vectors: an anchor-target relation matrix
is built from text-side features, image-anchor similarities are transitioned
into image-target scores (training-free or through a small trainable
cross-attention block), and the result is fused with the frozen classifier.
"""

from relt.embed_io import (
    DatasetBundle,
    DatasetManifest,
    EmbeddingMatrix,
    LabeledImageSet,
    l2_normalize,
    load_class_names,
    load_embeddings,
    load_labels,
    load_manifest,
    save_embeddings,
    validate_manifest,
)
from relt.relations import (
    OVER_ANCHORS,
    OVER_TARGETS,
    RelationMatrix,
    anchor_target_relation,
    cosine_matrix,
    image_anchor_relation,
    marginal_balance,
    relation_pair,
    relation_to_csv,
    softmax,
    target_normalized_relation,
)
from relt.transition import (
    PredictionBundle,
    ZeroShotConfig,
    clip_scores,
    consistency_transition,
    fuse,
    image_image_transition,
    total_probability_transition,
    zero_shot_predict,
)
from relt.rtm import (
    LossConfig,
    RtmParams,
    load_checkpoint,
    rtm_forward,
    rtm_gradients,
    rtm_init,
    save_checkpoint,
)
from relt.losses import KmeansResult, PpLossReport, cross_entropy, kmeans_1d, pp_loss
from relt.train import TrainConfig, cosine_lr, optimizer_step, train_few_shot
from relt.evaluate import EvalReport, evaluate, inspect_relations, top1_accuracy

__all__ = [
    "DatasetBundle",
    "DatasetManifest",
    "EmbeddingMatrix",
    "EvalReport",
    "KmeansResult",
    "LabeledImageSet",
    "LossConfig",
    "OVER_ANCHORS",
    "OVER_TARGETS",
    "PpLossReport",
    "PredictionBundle",
    "RelationMatrix",
    "RtmParams",
    "TrainConfig",
    "ZeroShotConfig",
    "anchor_target_relation",
    "clip_scores",
    "consistency_transition",
    "cosine_lr",
    "cosine_matrix",
    "cross_entropy",
    "evaluate",
    "fuse",
    "image_anchor_relation",
    "image_image_transition",
    "inspect_relations",
    "kmeans_1d",
    "l2_normalize",
    "load_checkpoint",
    "load_class_names",
    "load_embeddings",
    "load_labels",
    "load_manifest",
    "marginal_balance",
    "optimizer_step",
    "pp_loss",
    "relation_pair",
    "relation_to_csv",
    "rtm_forward",
    "rtm_gradients",
    "rtm_init",
    "save_checkpoint",
    "save_embeddings",
    "softmax",
    "target_normalized_relation",
    "top1_accuracy",
    "total_probability_transition",
    "train_few_shot",
    "validate_manifest",
    "zero_shot_predict",
]

__version__ = "0.1.0"
