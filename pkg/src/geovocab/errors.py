"""Exception types raised across the package.

Everything derives from :class:`GeovocabError` so callers can catch the
package's failures with a single except clause.  Transport and fixture
problems live under :class:`GatewayError`; reasoning-stage failures carry
the stage name and the subject (category, pair, or image) that failed.
"""

from __future__ import annotations


class GeovocabError(Exception):
    """Base class for all errors raised by this package."""


# ---------------------------------------------------------------------------
# Core model


class ZeroVectorRow(GeovocabError):
    """An embedding row has (near) zero norm and cannot be normalized."""

    def __init__(self, row_index: int) -> None:
        super().__init__(f"embedding row {row_index} has zero norm")
        self.row_index = row_index


# ---------------------------------------------------------------------------
# Tensor and standards I/O


class NpyFormatError(GeovocabError):
    """A tensor file violates the supported array-file subset."""


class BadMagic(NpyFormatError):
    pass


class UnsupportedVersion(NpyFormatError):
    pass


class UnsupportedDtype(NpyFormatError):
    pass


class FortranOrderUnsupported(NpyFormatError):
    pass


class TruncatedPayload(NpyFormatError):
    pass


class ShapeMismatch(GeovocabError):
    pass


class RankMismatch(GeovocabError):
    pass


class NonFiniteValue(GeovocabError):
    """A feature tensor contains NaN or infinity."""

    def __init__(self, flat_index: int, position: tuple[int, ...]) -> None:
        super().__init__(f"non-finite value at position {position}")
        self.flat_index = flat_index
        self.position = position


class SidecarError(GeovocabError):
    """An embedding sidecar does not line up with the category pool."""


class MissingCategoryRow(SidecarError):
    def __init__(self, category: str) -> None:
        super().__init__(f"sidecar has no embedding row for category {category!r}")
        self.category = category


class UnknownSidecarCategory(SidecarError):
    def __init__(self, category: str) -> None:
        super().__init__(f"sidecar names category {category!r} which is not in the pool")
        self.category = category


class LabelOutOfRange(GeovocabError):
    def __init__(self, value: int, position: tuple[int, ...]) -> None:
        super().__init__(f"label value {value} at {position} is outside the pool")
        self.value = value
        self.position = position


class StandardsSchemaError(GeovocabError):
    """A standards store file does not match the expected schema."""


class SchemaVersionMismatch(StandardsSchemaError):
    def __init__(self, found: object) -> None:
        super().__init__(f"unsupported standards schema_version: {found!r}")
        self.found = found


class MissingStandard(GeovocabError):
    def __init__(self, category: str) -> None:
        super().__init__(f"no interpretation standard for category {category!r}")
        self.category = category


# ---------------------------------------------------------------------------
# Gateway


class GatewayError(GeovocabError):
    """Base class for transport, auth, and fixture failures."""


class AuthError(GatewayError):
    def __init__(self, status_code: int) -> None:
        super().__init__(f"authentication rejected (HTTP {status_code})")
        self.status_code = status_code


class RateLimited(GatewayError):
    def __init__(self, attempts: int) -> None:
        super().__init__(f"rate limited after {attempts} attempts")
        self.attempts = attempts


class TransportError(GatewayError):
    pass


class FixtureMissing(GatewayError):
    def __init__(self, key: str) -> None:
        super().__init__(f"no mock fixture for key {key!r}")
        self.key = key


class EmptyCompletion(GatewayError):
    pass


class ExtractionError(GeovocabError):
    """JSON could not be extracted from model output."""


class NoJsonFound(ExtractionError):
    pass


class UnbalancedJson(ExtractionError):
    pass


# ---------------------------------------------------------------------------
# Reasoning stages (offline and online)


class StageError(GeovocabError):
    """A reasoning stage failed; carries the stage name and its subject."""

    stage = "unknown"

    def __init__(self, subject: str, detail: str = "") -> None:
        message = f"stage {self.stage} failed for {subject}"
        if detail:
            message += f": {detail}"
        super().__init__(message)
        self.subject = subject
        self.detail = detail


class MalformedEnhancement(StageError):
    stage = "enhance"


class MalformedPairs(StageError):
    stage = "propose_pairs"


class MalformedRule(StageError):
    stage = "discriminate"


class MalformedStandard(StageError):
    stage = "synthesize_standard"


class MalformedScene(StageError):
    stage = "anchor"


class MalformedAttributes(StageError):
    stage = "decouple"


class EmptyAttributeSet(StageError):
    stage = "decouple"


class MalformedVerdicts(StageError):
    stage = "synthesize"


class ChainStageError(GeovocabError):
    """Wraps the first failing stage of the online reasoning chain."""

    def __init__(self, stage: str, subject: str) -> None:
        super().__init__(f"reasoning chain aborted at stage {stage!r} for {subject}")
        self.stage = stage
        self.subject = subject


class DistillStageError(GeovocabError):
    """Wraps the first fatal failure of the offline distillation run."""

    def __init__(self, stage: str, subject: str) -> None:
        super().__init__(f"distillation failed at stage {stage!r} for {subject}")
        self.stage = stage
        self.subject = subject


# ---------------------------------------------------------------------------
# Alignment


class DimMismatch(GeovocabError):
    pass


class EmptyCandidates(GeovocabError):
    pass


class ShrinkUnsupported(GeovocabError):
    pass


# ---------------------------------------------------------------------------
# Metrics


class SentinelInPrediction(GeovocabError):
    def __init__(self, position: tuple[int, ...]) -> None:
        super().__init__(f"prediction contains the ignore sentinel at {position}")
        self.position = position


class NoDefinedClasses(GeovocabError):
    pass


class EmptyGroundTruthSet(GeovocabError):
    def __init__(self, image_id: str) -> None:
        super().__init__(f"ground-truth category set for {image_id} is empty")
        self.image_id = image_id


# ---------------------------------------------------------------------------
# CLI


class ConfigError(GeovocabError):
    """Invalid or incomplete run configuration."""


class UnmatchedPair(GeovocabError):
    def __init__(self, missing_gt: list[str], missing_pred: list[str]) -> None:
        parts = []
        if missing_gt:
            parts.append(f"predictions without ground truth: {', '.join(missing_gt)}")
        if missing_pred:
            parts.append(f"ground truth without predictions: {', '.join(missing_pred)}")
        super().__init__("; ".join(parts) or "unmatched evaluation pairs")
        self.missing_gt = missing_gt
        self.missing_pred = missing_pred
