"""Scene-aware adaptive vocabularies for remote sensing segmentation.

The package splits into an offline half that distills per-category
interpretation standards from a multimodal model, and an online half that
reasons over a single image (scene anchoring, attribute decoupling,
knowledge-driven synthesis) to produce a restricted vocabulary, then labels
dense visual features against text embeddings of that vocabulary.
"""

from __future__ import annotations

__version__ = "0.1.0"

# Domain model
from .model import (
    ATTRIBUTE_KINDS,
    IGNORE_LABEL,
    AdaptiveVocabulary,
    Category,
    CategoryPool,
    CategoryVerdict,
    DenseFeatureMap,
    DiscriminationRule,
    ImageRef,
    InterpretationStandard,
    LabelRaster,
    SceneContext,
    StandardsStore,
    TextEmbeddingSet,
    VisualAttribute,
    VisualAttributeSet,
    builtin_pool,
    full_pool_vocabulary,
    l2_normalize_rows,
    load_category_pool,
    save_category_pool,
    validate_pool,
)

# Tensor and store serialization
from .tensorio import (
    load_array,
    load_feature_map,
    load_label_raster,
    load_standards,
    load_text_embeddings,
    read_npy,
    save_label_raster,
    save_standards,
    write_npy,
    write_npy_file,
)

# Model gateway
from .gateway import (
    ChatRequest,
    ChatResponse,
    Gateway,
    GatewayConfig,
    ImagePart,
    TextPart,
    complete,
    complete_checked,
    extract_json,
    fixture_key,
    with_correction,
)

# Offline distillation
from .distill import (
    DistillConfig,
    build_standards,
    discriminate_pair,
    enhance_category,
    propose_ambiguous_pairs,
    synthesize_standard,
)

# Online reasoning chain
from .reason import (
    ReasonConfig,
    ReasoningTrace,
    load_trace,
    rule_fallback_verify,
    run_chain,
    save_trace,
    synthesize_vocabulary,
)

# Vocabulary-restricted alignment
from .align import (
    AlignmentConfig,
    candidate_indices,
    score_pixel,
    segment,
    upsample_nearest,
)

# Evaluation
from .metrics import (
    ConfusionMatrix,
    EvalReport,
    accumulate,
    build_report,
    category_accuracy,
    empty_matrix,
    merge,
    overall,
    per_class_acc,
    per_class_iou,
    render_report,
)

from . import errors

__all__ = [
    "__version__",
    "errors",
    # model
    "ATTRIBUTE_KINDS",
    "IGNORE_LABEL",
    "AdaptiveVocabulary",
    "Category",
    "CategoryPool",
    "CategoryVerdict",
    "DenseFeatureMap",
    "DiscriminationRule",
    "ImageRef",
    "InterpretationStandard",
    "LabelRaster",
    "SceneContext",
    "StandardsStore",
    "TextEmbeddingSet",
    "VisualAttribute",
    "VisualAttributeSet",
    "builtin_pool",
    "full_pool_vocabulary",
    "l2_normalize_rows",
    "load_category_pool",
    "save_category_pool",
    "validate_pool",
    # tensorio
    "load_array",
    "load_feature_map",
    "load_label_raster",
    "load_standards",
    "load_text_embeddings",
    "read_npy",
    "save_label_raster",
    "save_standards",
    "write_npy",
    "write_npy_file",
    # gateway
    "ChatRequest",
    "ChatResponse",
    "Gateway",
    "GatewayConfig",
    "ImagePart",
    "TextPart",
    "complete",
    "complete_checked",
    "extract_json",
    "fixture_key",
    "with_correction",
    # distill
    "DistillConfig",
    "build_standards",
    "discriminate_pair",
    "enhance_category",
    "propose_ambiguous_pairs",
    "synthesize_standard",
    # reason
    "ReasonConfig",
    "ReasoningTrace",
    "load_trace",
    "rule_fallback_verify",
    "run_chain",
    "save_trace",
    "synthesize_vocabulary",
    # align
    "AlignmentConfig",
    "candidate_indices",
    "score_pixel",
    "segment",
    "upsample_nearest",
    # metrics
    "ConfusionMatrix",
    "EvalReport",
    "accumulate",
    "build_report",
    "category_accuracy",
    "empty_matrix",
    "merge",
    "overall",
    "per_class_acc",
    "per_class_iou",
    "render_report",
]
