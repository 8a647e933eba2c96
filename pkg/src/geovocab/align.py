"""Vocabulary-restricted pixel-to-text alignment.

Every pixel's feature vector is scored against the embeddings of the
candidate categories only, and labeled with the best-scoring category's
pool index.  Scoring runs in float64 with a fixed reduction order, so a
restricted run is exactly consistent with a full-pool run: restricting the
candidates never changes the score a surviving category receives.

Ties break toward the lowest pool index, always.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimMismatch, EmptyCandidates, ShrinkUnsupported
from .model import (
    AdaptiveVocabulary,
    CategoryPool,
    DenseFeatureMap,
    LabelRaster,
    TextEmbeddingSet,
)

_EPS = 1e-12

SIMILARITIES = ("cosine", "dot")


@dataclass(frozen=True)
class AlignmentConfig:
    """Scoring and output settings for the segmentation head.

    ``always_include`` names categories added to every candidate set no
    matter what the vocabulary says (e.g. an unrestricted background
    class).  ``upsample_to`` optionally grows the output raster by
    nearest-neighbor replication.
    """

    similarity: str = "cosine"
    always_include: tuple[str, ...] = ()
    upsample_to: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.similarity not in SIMILARITIES:
            raise ValueError(f"unknown similarity {self.similarity!r}")
        if self.upsample_to is not None:
            th, tw = self.upsample_to
            if th < 1 or tw < 1:
                raise ValueError("upsample target must be positive")


def candidate_indices(
    vocabulary: AdaptiveVocabulary, pool: CategoryPool, config: AlignmentConfig
) -> list[int]:
    """Sorted pool indices to score: the vocabulary plus always-included names."""
    names = set(vocabulary.selected)
    for name in config.always_include:
        if name.strip().lower() not in pool.names:
            raise ValueError(f"always_include names unknown category {name!r}")
        names.add(name.strip().lower())
    return sorted(pool.index_of(name) for name in names)


def _normalized64(mat: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm in float64; zero rows are left at zero."""
    mat64 = mat.astype(np.float64)
    norms = np.sqrt(np.sum(mat64 * mat64, axis=1))
    return mat64 / np.maximum(norms, _EPS)[:, None]


def _score_matrix(
    flat_features: np.ndarray, embeddings: np.ndarray, similarity: str
) -> np.ndarray:
    """Scores of shape (pixels, candidates) with a deterministic reduction.

    Each column is computed as an elementwise product followed by a row
    sum, which keeps per-pair results independent of how many candidates
    are scored together.
    """
    if similarity == "cosine":
        feats = _normalized64(flat_features)
        embs = _normalized64(embeddings)
    else:
        feats = flat_features.astype(np.float64)
        embs = embeddings.astype(np.float64)
    scores = np.empty((feats.shape[0], embs.shape[0]), dtype=np.float64)
    for column, row in enumerate(embs):
        scores[:, column] = (feats * row).sum(axis=1)
    return scores


def score_pixel(
    feature_vector: np.ndarray,
    embeddings: TextEmbeddingSet,
    candidate_indices: list[int] | tuple[int, ...],
    similarity: str = "cosine",
) -> list[tuple[int, float]]:
    """Score one pixel against the candidate categories.

    Returns (pool_index, score) pairs in candidate order.
    """
    feature_vector = np.asarray(feature_vector)
    if feature_vector.ndim != 1 or feature_vector.shape[0] != embeddings.dim:
        raise DimMismatch(
            f"feature vector of shape {feature_vector.shape} does not match "
            f"embedding dim {embeddings.dim}"
        )
    if len(candidate_indices) == 0:
        raise EmptyCandidates("no candidate categories to score")
    rows = embeddings.data[np.asarray(candidate_indices, dtype=np.intp)]
    scores = _score_matrix(feature_vector[None, :], rows, similarity)[0]
    return [(int(idx), float(s)) for idx, s in zip(candidate_indices, scores)]


def segment(
    features: DenseFeatureMap,
    embeddings: TextEmbeddingSet,
    vocabulary: AdaptiveVocabulary,
    config: AlignmentConfig,
) -> LabelRaster:
    """Label every pixel with its best-scoring candidate category.

    Candidates are the vocabulary's selected categories plus any
    always-included ones; labels in the output are global pool indices.
    """
    if features.dim != embeddings.dim:
        raise DimMismatch(
            f"feature dim {features.dim} does not match embedding dim {embeddings.dim}"
        )
    candidates = candidate_indices(vocabulary, embeddings.pool, config)
    if not candidates:
        raise EmptyCandidates("no candidate categories to score")

    flat = features.data.reshape(-1, features.dim)
    rows = embeddings.data[np.asarray(candidates, dtype=np.intp)]
    scores = _score_matrix(flat, rows, config.similarity)
    # argmax returns the first maximum; candidates are sorted, so ties
    # resolve to the lowest pool index
    winners = np.argmax(scores, axis=1)
    labels = np.asarray(candidates, dtype=np.uint16)[winners]
    raster = LabelRaster.from_array(labels.reshape(features.height, features.width))
    if config.upsample_to is not None:
        raster = upsample_nearest(raster, *config.upsample_to)
    return raster


def upsample_nearest(raster: LabelRaster, target_height: int, target_width: int) -> LabelRaster:
    """Grow a raster by nearest-neighbor lookup; shrinking is not supported.

    Output pixel (y, x) copies source pixel (floor(y*h/th), floor(x*w/tw)).
    """
    if target_height < raster.height or target_width < raster.width:
        raise ShrinkUnsupported(
            f"target {target_height}x{target_width} is smaller than "
            f"source {raster.height}x{raster.width}"
        )
    ys = (np.arange(target_height, dtype=np.int64) * raster.height) // target_height
    xs = (np.arange(target_width, dtype=np.int64) * raster.width) // target_width
    grown = raster.labels[np.ix_(ys, xs)]
    return LabelRaster.from_array(np.ascontiguousarray(grown))
