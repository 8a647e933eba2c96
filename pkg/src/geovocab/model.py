"""Core domain types: category pools, interpretation standards, reasoning
artifacts, and the tensor wrappers shared by every stage of the pipeline.

All types are plain frozen dataclasses.  Array-backed wrappers mark their
buffers read-only at construction; anything that needs a modified tensor
builds a new wrapper.
"""

from __future__ import annotations

import hashlib
import json
import mimetypes
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import MissingStandard, ZeroVectorRow

IGNORE_LABEL = 65535
"""Sentinel value in label rasters for pixels excluded from evaluation."""

ATTRIBUTE_KINDS = ("geometry", "texture", "spectral", "object")
DECIDED_BY_VALUES = ("mllm", "rule_engine", "fallback")
STANDARD_SOURCES = ("mllm", "fixture", "manual")

_NORM_EPS = 1e-12


# ---------------------------------------------------------------------------
# Categories and pools


@dataclass(frozen=True)
class Category:
    """A single land-cover category.

    Names are case-normalized to lowercase at construction; ``display`` is
    the human-facing label used in rendered reports.
    """

    name: str
    display: str = ""
    index: int = 0

    def __post_init__(self) -> None:
        normalized = self.name.strip().lower()
        object.__setattr__(self, "name", normalized)
        if not self.display:
            object.__setattr__(self, "display", normalized.capitalize())


@dataclass(frozen=True)
class CategoryPool:
    """Ordered collection of categories for one dataset."""

    categories: tuple[Category, ...]
    dataset_tag: str | None = None

    def __len__(self) -> int:
        return len(self.categories)

    def __iter__(self):
        return iter(self.categories)

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.categories)

    def index_of(self, name: str) -> int:
        key = name.strip().lower()
        for category in self.categories:
            if category.name == key:
                return category.index
        raise KeyError(f"category {name!r} not in pool")

    def __contains__(self, name: str) -> bool:
        return name.strip().lower() in self.names

    def get(self, name: str) -> Category:
        return self.categories[self.index_of(name)]

    @classmethod
    def from_names(
        cls,
        names: list[str] | tuple[str, ...],
        dataset_tag: str | None = None,
        displays: dict[str, str] | None = None,
    ) -> "CategoryPool":
        displays = displays or {}
        categories = tuple(
            Category(name=n, display=displays.get(n, ""), index=i)
            for i, n in enumerate(names)
        )
        return cls(categories=categories, dataset_tag=dataset_tag)


def validate_pool(pool: CategoryPool) -> list[str]:
    """Return human-readable invariant violations, empty when the pool is valid."""
    violations: list[str] = []
    if len(pool.categories) == 0:
        violations.append("pool has no categories")
    seen: dict[str, int] = {}
    for position, category in enumerate(pool.categories):
        if not category.name:
            violations.append(f"category at position {position} has an empty name")
        elif category.name in seen:
            violations.append(f"duplicate category name {category.name!r}")
        else:
            seen[category.name] = position
        if category.index != position:
            violations.append(
                f"category {category.name!r} has index {category.index}, "
                f"expected {position}"
            )
    return violations


def pool_to_json_dict(pool: CategoryPool) -> dict:
    out: dict = {
        "categories": [{"name": c.name, "display": c.display} for c in pool.categories]
    }
    if pool.dataset_tag is not None:
        out["dataset_tag"] = pool.dataset_tag
    return out


def pool_from_json_dict(payload: dict) -> CategoryPool:
    if not isinstance(payload, dict) or "categories" not in payload:
        raise ValueError("pool JSON must be an object with a 'categories' list")
    categories = []
    for i, entry in enumerate(payload["categories"]):
        categories.append(
            Category(name=entry["name"], display=entry.get("display", ""), index=i)
        )
    return CategoryPool(
        categories=tuple(categories), dataset_tag=payload.get("dataset_tag")
    )


def load_category_pool(path: str | Path) -> CategoryPool:
    with open(path, encoding="utf-8") as fh:
        return pool_from_json_dict(json.load(fh))


def save_category_pool(pool: CategoryPool, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(pool_to_json_dict(pool), indent=2) + "\n", encoding="utf-8"
    )


def builtin_pool(tag: str) -> CategoryPool:
    """Load one of the category pools shipped with the package.

    Currently ``loveda`` (7 classes) and ``gid5`` (6 classes).
    """
    resource = resources.files("geovocab").joinpath(f"data/{tag}.json")
    try:
        text = resource.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise KeyError(f"no builtin pool named {tag!r}") from None
    return pool_from_json_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Knowledge artifacts


@dataclass(frozen=True)
class InterpretationStandard:
    """Per-category interpretation standard distilled from expert priors.

    ``morphology`` covers shape and layout cues, ``spectral_spatial`` covers
    tone and texture, ``exclusivity`` states what the category must not be
    confused with.
    """

    category: str
    morphology: str
    spectral_spatial: str
    exclusivity: str
    sub_classes: tuple[str, ...] = ()
    source: str = "mllm"

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", self.category.strip().lower())
        for fieldname in ("morphology", "spectral_spatial", "exclusivity"):
            if not getattr(self, fieldname).strip():
                raise ValueError(f"standard for {self.category!r}: {fieldname} is empty")
        if self.source not in STANDARD_SOURCES:
            raise ValueError(f"unknown standard source {self.source!r}")


@dataclass(frozen=True)
class DiscriminationRule:
    """A rule separating two categories that are easily confused."""

    category_a: str
    category_b: str
    rule: str
    decides_for: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "category_a", self.category_a.strip().lower())
        object.__setattr__(self, "category_b", self.category_b.strip().lower())
        object.__setattr__(self, "decides_for", self.decides_for.strip().lower())
        if self.category_a == self.category_b:
            raise ValueError("discrimination rule needs two distinct categories")
        if not self.rule.strip():
            raise ValueError("discrimination rule text is empty")
        if self.decides_for not in (self.category_a, self.category_b):
            raise ValueError(
                f"decides_for {self.decides_for!r} is neither "
                f"{self.category_a!r} nor {self.category_b!r}"
            )

    def mentions(self, category: str) -> bool:
        return category in (self.category_a, self.category_b)


@dataclass(frozen=True)
class StandardsStore:
    """Complete set of standards and rules for one category pool."""

    pool: CategoryPool
    standards: tuple[InterpretationStandard, ...]
    rules: tuple[DiscriminationRule, ...] = ()
    created_at: str = ""

    def __post_init__(self) -> None:
        by_name = {s.category: s for s in self.standards}
        if len(by_name) != len(self.standards):
            raise ValueError("duplicate standards for the same category")
        for name in self.pool.names:
            if name not in by_name:
                raise MissingStandard(name)
        for extra in set(by_name) - set(self.pool.names):
            raise ValueError(f"standard for {extra!r} has no pool category")
        # keep standards in pool order regardless of input order
        object.__setattr__(
            self, "standards", tuple(by_name[n] for n in self.pool.names)
        )
        for rule in self.rules:
            for name in (rule.category_a, rule.category_b):
                if name not in self.pool.names:
                    raise ValueError(f"rule references unknown category {name!r}")

    def standard_for(self, category: str) -> InterpretationStandard:
        key = category.strip().lower()
        for standard in self.standards:
            if standard.category == key:
                return standard
        raise MissingStandard(key)

    def rules_for(self, category: str) -> tuple[DiscriminationRule, ...]:
        key = category.strip().lower()
        return tuple(r for r in self.rules if r.mentions(key))


# ---------------------------------------------------------------------------
# Online reasoning artifacts


@dataclass(frozen=True)
class SceneContext:
    """Macro scene judgment for one image."""

    label: str
    confidence: float
    rationale: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "label", self.label.strip().lower())
        if not self.label:
            raise ValueError("scene label is empty")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"scene confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class VisualAttribute:
    """One decoupled visual observation about an image."""

    description: str
    kind: str
    region_hint: str | None = None

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise ValueError("attribute description is empty")
        if self.kind not in ATTRIBUTE_KINDS:
            raise ValueError(f"unknown attribute kind {self.kind!r}")


@dataclass(frozen=True)
class VisualAttributeSet:
    scene: SceneContext
    attributes: tuple[VisualAttribute, ...]

    def __post_init__(self) -> None:
        if not self.attributes:
            raise ValueError("attribute set is empty")


@dataclass(frozen=True)
class CategoryVerdict:
    """Presence decision for one category on one image."""

    category: str
    present: bool
    justification: str
    decided_by: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "category", self.category.strip().lower())
        if self.decided_by not in DECIDED_BY_VALUES:
            raise ValueError(f"unknown decided_by {self.decided_by!r}")
        if self.present and not self.justification.strip():
            raise ValueError(
                f"verdict marks {self.category!r} present without justification"
            )


@dataclass(frozen=True)
class AdaptiveVocabulary:
    """Image-specific vocabulary: one verdict per pool category.

    ``selected`` lists the present categories in pool index order and is
    never empty; an upstream fallback guarantees that.
    """

    verdicts: tuple[CategoryVerdict, ...]
    selected: tuple[str, ...]
    fallback_used: bool = False

    def __post_init__(self) -> None:
        derived = tuple(v.category for v in self.verdicts if v.present)
        if self.selected != derived:
            raise ValueError("selected does not match the present verdicts")
        if not self.selected:
            raise ValueError("adaptive vocabulary is empty")

    @classmethod
    def from_verdicts(
        cls,
        verdicts: list[CategoryVerdict] | tuple[CategoryVerdict, ...],
        pool: CategoryPool,
        fallback_used: bool = False,
    ) -> "AdaptiveVocabulary":
        by_name: dict[str, CategoryVerdict] = {}
        for verdict in verdicts:
            if verdict.category not in pool.names:
                raise ValueError(f"verdict for unknown category {verdict.category!r}")
            if verdict.category in by_name:
                raise ValueError(f"duplicate verdict for {verdict.category!r}")
            by_name[verdict.category] = verdict
        missing = [n for n in pool.names if n not in by_name]
        if missing:
            raise ValueError(f"missing verdicts for: {', '.join(missing)}")
        ordered = tuple(by_name[n] for n in pool.names)
        selected = tuple(v.category for v in ordered if v.present)
        return cls(verdicts=ordered, selected=selected, fallback_used=fallback_used)


def full_pool_vocabulary(
    pool: CategoryPool, justification: str = "full pool, no restriction applied"
) -> AdaptiveVocabulary:
    """Vocabulary that admits every pool category (baseline behaviour)."""
    verdicts = tuple(
        CategoryVerdict(
            category=name,
            present=True,
            justification=justification,
            decided_by="fallback",
        )
        for name in pool.names
    )
    return AdaptiveVocabulary(
        verdicts=verdicts, selected=pool.names, fallback_used=False
    )


# ---------------------------------------------------------------------------
# Tensor wrappers


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class DenseFeatureMap:
    """Per-pixel feature tensor of shape (height, width, dim), float32."""

    height: int
    width: int
    dim: int
    data: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.data.shape != (self.height, self.width, self.dim):
            raise ValueError(
                f"feature data shape {self.data.shape} does not match "
                f"({self.height}, {self.width}, {self.dim})"
            )
        if self.data.dtype != np.float32:
            raise ValueError(f"feature dtype must be float32, got {self.data.dtype}")
        _freeze(self.data)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "DenseFeatureMap":
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        if arr.ndim != 3:
            raise ValueError(f"feature array must be rank 3, got rank {arr.ndim}")
        h, w, d = arr.shape
        return cls(height=h, width=w, dim=d, data=arr)


@dataclass(frozen=True, eq=False)
class TextEmbeddingSet:
    """One embedding row per pool category, aligned to pool index order."""

    pool: CategoryPool
    dim: int
    data: np.ndarray = field(repr=False)
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.data.shape != (len(self.pool), self.dim):
            raise ValueError(
                f"embedding shape {self.data.shape} does not match "
                f"({len(self.pool)}, {self.dim})"
            )
        if self.data.dtype != np.float32:
            raise ValueError(f"embedding dtype must be float32, got {self.data.dtype}")
        _freeze(self.data)

    def row_for(self, name: str) -> np.ndarray:
        return self.data[self.pool.index_of(name)]


def l2_normalize_rows(embeddings: TextEmbeddingSet) -> TextEmbeddingSet:
    """Return a copy with every row scaled to unit L2 norm.

    Raises ZeroVectorRow for any row whose norm is below 1e-12.
    """
    data = embeddings.data.astype(np.float64)
    norms = np.sqrt(np.sum(data * data, axis=1))
    for row_index in np.flatnonzero(norms < _NORM_EPS):
        raise ZeroVectorRow(int(row_index))
    normalized = (data / norms[:, None]).astype(np.float32)
    return TextEmbeddingSet(
        pool=embeddings.pool, dim=embeddings.dim, data=normalized, normalized=True
    )


@dataclass(frozen=True, eq=False)
class LabelRaster:
    """Dense uint16 label map; IGNORE_LABEL marks excluded pixels."""

    height: int
    width: int
    labels: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        if self.labels.shape != (self.height, self.width):
            raise ValueError(
                f"label shape {self.labels.shape} does not match "
                f"({self.height}, {self.width})"
            )
        if self.labels.dtype != np.uint16:
            raise ValueError(f"label dtype must be uint16, got {self.labels.dtype}")
        _freeze(self.labels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "LabelRaster":
        arr = np.asarray(arr)
        if arr.ndim != 2:
            raise ValueError(f"label array must be rank 2, got rank {arr.ndim}")
        if arr.dtype != np.uint16:
            if np.any((arr < 0) | (arr > IGNORE_LABEL)):
                raise ValueError("label values do not fit in uint16")
            arr = arr.astype(np.uint16)
        arr = np.ascontiguousarray(arr)
        return cls(height=arr.shape[0], width=arr.shape[1], labels=arr)


# ---------------------------------------------------------------------------
# Images


@dataclass(frozen=True, eq=False)
class ImageRef:
    """Reference to an image payload plus its content digest.

    The payload itself is opaque to this package; it is forwarded to the
    vision model as-is.  ``content_hash`` is the SHA-256 hex digest of the
    bytes when they are present.
    """

    path: str
    mime: str
    content_hash: str
    data: bytes | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.data is not None:
            digest = hashlib.sha256(self.data).hexdigest()
            if self.content_hash and self.content_hash != digest:
                raise ValueError("content_hash does not match payload digest")
            object.__setattr__(self, "content_hash", digest)
        elif not self.content_hash:
            raise ValueError("image without payload needs an explicit content_hash")

    @classmethod
    def from_bytes(
        cls, path: str, data: bytes, mime: str = "image/png"
    ) -> "ImageRef":
        return cls(
            path=path,
            mime=mime,
            content_hash=hashlib.sha256(data).hexdigest(),
            data=data,
        )

    @classmethod
    def from_path(cls, path: str | Path, mime: str | None = None) -> "ImageRef":
        path = Path(path)
        data = path.read_bytes()
        if mime is None:
            mime = mimetypes.guess_type(path.name)[0] or "application/octet-stream"
        return cls.from_bytes(path=str(path), data=data, mime=mime)

    def load_bytes(self) -> bytes:
        if self.data is not None:
            return self.data
        return Path(self.path).read_bytes()
