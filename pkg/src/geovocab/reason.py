"""Online per-image reasoning: scene anchoring, attribute decoupling, and
vocabulary synthesis, composed into a strictly ordered chain.

Each stage consumes the previous stage's output.  The synthesis stage gets
the serialized standards store, so its decisions are grounded in the same
knowledge the offline stream distilled.  When the model's verdict list has
gaps they are filled by a deterministic keyword rule engine; when nothing
at all is judged present the chain falls back to the full pool and flags
the trace.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from pathlib import Path

from .errors import (
    ChainStageError,
    EmptyAttributeSet,
    GeovocabError,
    MalformedAttributes,
    MalformedScene,
    MalformedVerdicts,
)
from .gateway import (
    ChatRequest,
    CheckedCompletion,
    Gateway,
    ImagePart,
    TextPart,
    complete_checked,
)
from .model import (
    ATTRIBUTE_KINDS,
    AdaptiveVocabulary,
    CategoryVerdict,
    ImageRef,
    SceneContext,
    StandardsStore,
    VisualAttribute,
    VisualAttributeSet,
)
from .prompts import load_template, render_template
from .tensorio import atomic_write_text

logger = logging.getLogger(__name__)

_SCENE_SCHEMA = '{"scene": str, "confidence": number, "rationale": str}'
_ATTRS_SCHEMA = (
    '{"attributes": [{"description": str, "kind": '
    '"geometry|texture|spectral|object", "region_hint": str|null}]}'
)
_VERDICTS_SCHEMA = '{"verdicts": [{"category": str, "present": bool, "justification": str}]}'

DEFAULT_SCENE_LABELS = (
    "urban",
    "rural",
    "industrial",
    "agricultural",
    "forest",
    "water",
    "mixed",
)


@dataclass(frozen=True)
class ReasonConfig:
    prompt_dir: Path | None = None
    scene_labels: tuple[str, ...] = DEFAULT_SCENE_LABELS
    max_tokens: int = 1024


@dataclass(frozen=True)
class ReasoningTrace:
    """Complete record of one image's pass through the chain."""

    image: ImageRef
    scene: SceneContext
    attributes: VisualAttributeSet
    vocabulary: AdaptiveVocabulary
    stage_timings_ms: dict[str, int]
    raw_responses: dict[str, str]
    stage_prompts: dict[str, str]


def _template(config: ReasonConfig, name: str) -> str:
    return load_template("reason", name, config.prompt_dir)


# ---------------------------------------------------------------------------
# Stage 1: macro-scenario anchoring


def build_anchor_request(image: ImageRef, config: ReasonConfig) -> ChatRequest:
    text = render_template(
        _template(config, "anchor"), {"scene_labels": ", ".join(config.scene_labels)}
    )
    return ChatRequest(
        user_parts=(TextPart(text), ImagePart(image)),
        response_schema_id="scene_anchor",
        max_tokens=config.max_tokens,
    )


def _parse_scene(obj: object) -> SceneContext:
    if not isinstance(obj, dict):
        raise ValueError("scene response is not a JSON object")
    scene = obj.get("scene")
    if not isinstance(scene, str) or not scene.strip():
        raise ValueError("scene response needs a non-empty 'scene' label")
    confidence = obj.get("confidence")
    if not isinstance(confidence, (int, float)) or isinstance(confidence, bool):
        raise ValueError("scene response needs a numeric 'confidence'")
    confidence = float(confidence)
    if confidence < 0.0 or confidence > 1.0:
        clamped = min(max(confidence, 0.0), 1.0)
        logger.warning("clamping scene confidence %s to %s", confidence, clamped)
        confidence = clamped
    rationale = obj.get("rationale", "")
    if not isinstance(rationale, str):
        raise ValueError("'rationale' must be text")
    return SceneContext(label=scene, confidence=confidence, rationale=rationale)


def _anchor(image: ImageRef, gateway: Gateway, config: ReasonConfig) -> CheckedCompletion:
    return complete_checked(
        gateway,
        build_anchor_request(image, config),
        _parse_scene,
        _SCENE_SCHEMA,
        lambda exc: MalformedScene(image.path, str(exc)),
    )


def anchor_scene(image: ImageRef, gateway: Gateway, config: ReasonConfig) -> SceneContext:
    """Judge the macro scene type of the whole image."""
    return _anchor(image, gateway, config).value


# ---------------------------------------------------------------------------
# Stage 2: visual feature decoupling


def build_decouple_request(
    image: ImageRef, scene: SceneContext, config: ReasonConfig
) -> ChatRequest:
    text = render_template(_template(config, "decouple"), {"scene": scene.label})
    return ChatRequest(
        user_parts=(TextPart(text), ImagePart(image)),
        response_schema_id="decouple",
        max_tokens=config.max_tokens,
    )


class _NoAttributes(ValueError):
    pass


def _make_attrs_parser(scene: SceneContext):
    def _parse(obj: object) -> VisualAttributeSet:
        if not isinstance(obj, dict) or not isinstance(obj.get("attributes"), list):
            raise ValueError("attribute response needs an 'attributes' list")
        parsed: list[VisualAttribute] = []
        for entry in obj["attributes"]:
            if not isinstance(entry, dict):
                raise ValueError(f"attribute entry {entry!r} is not an object")
            description = entry.get("description")
            if not isinstance(description, str) or not description.strip():
                raise ValueError("attribute entry needs a non-empty 'description'")
            kind = entry.get("kind")
            if not isinstance(kind, str) or kind.strip().lower() not in ATTRIBUTE_KINDS:
                logger.warning(
                    "unknown attribute kind %r, mapping to 'object'", kind
                )
                kind = "object"
            else:
                kind = kind.strip().lower()
            region = entry.get("region_hint")
            if region is not None and not isinstance(region, str):
                raise ValueError("'region_hint' must be text or null")
            parsed.append(
                VisualAttribute(
                    description=description.strip(), kind=kind, region_hint=region
                )
            )
        if not parsed:
            raise _NoAttributes("attribute list is empty")
        return VisualAttributeSet(scene=scene, attributes=tuple(parsed))

    return _parse


def _decouple(
    image: ImageRef, scene: SceneContext, gateway: Gateway, config: ReasonConfig
) -> CheckedCompletion:
    def _fail(exc: Exception) -> Exception:
        if isinstance(exc, _NoAttributes):
            return EmptyAttributeSet(image.path, str(exc))
        return MalformedAttributes(image.path, str(exc))

    return complete_checked(
        gateway,
        build_decouple_request(image, scene, config),
        _make_attrs_parser(scene),
        _ATTRS_SCHEMA,
        _fail,
    )


def decouple_attributes(
    image: ImageRef, scene: SceneContext, gateway: Gateway, config: ReasonConfig
) -> VisualAttributeSet:
    """Extract concrete visual observations, conditioned on the scene."""
    return _decouple(image, scene, gateway, config).value


# ---------------------------------------------------------------------------
# Stage 3: knowledge-driven decision synthesis


def serialize_standards_for_prompt(store: StandardsStore) -> str:
    """Render the store as prompt text, categories in pool order."""
    blocks: list[str] = []
    for standard in store.standards:
        lines = [
            f"### {standard.category}",
            f"Morphology: {standard.morphology}",
            f"Appearance: {standard.spectral_spatial}",
            f"Exclusivity: {standard.exclusivity}",
        ]
        if standard.sub_classes:
            lines.append("Variants: " + ", ".join(standard.sub_classes))
        blocks.append("\n".join(lines))
    if store.rules:
        lines = ["### discrimination rules"]
        for rule in store.rules:
            lines.append(
                f"- {rule.category_a} vs {rule.category_b}: {rule.rule} "
                f"(decides for {rule.decides_for})"
            )
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)


def _serialize_attributes(attributes: VisualAttributeSet) -> str:
    lines = []
    for attr in attributes.attributes:
        line = f"- [{attr.kind}] {attr.description}"
        if attr.region_hint:
            line += f" (at {attr.region_hint})"
        lines.append(line)
    return "\n".join(lines)


def build_synthesize_request(
    scene: SceneContext,
    attributes: VisualAttributeSet,
    store: StandardsStore,
    config: ReasonConfig,
) -> ChatRequest:
    text = render_template(
        _template(config, "synthesize"),
        {
            "scene": scene.label,
            "attributes": _serialize_attributes(attributes),
            "standards": serialize_standards_for_prompt(store),
        },
    )
    return ChatRequest(
        user_parts=(TextPart(text),),
        response_schema_id="synthesize",
        max_tokens=config.max_tokens,
    )


def _parse_raw_verdicts(obj: object) -> list[dict]:
    if not isinstance(obj, dict) or not isinstance(obj.get("verdicts"), list):
        raise ValueError("verdict response needs a 'verdicts' list")
    out = []
    for entry in obj["verdicts"]:
        if not isinstance(entry, dict):
            raise ValueError(f"verdict entry {entry!r} is not an object")
        category = entry.get("category")
        present = entry.get("present")
        if not isinstance(category, str) or not category.strip():
            raise ValueError("verdict entry needs a 'category' name")
        if not isinstance(present, bool):
            raise ValueError(f"verdict for {category!r} needs a boolean 'present'")
        justification = entry.get("justification", "")
        if not isinstance(justification, str):
            raise ValueError("'justification' must be text")
        if present and not justification.strip():
            raise ValueError(f"verdict marks {category!r} present without justification")
        out.append(
            {
                "category": category.strip().lower(),
                "present": present,
                "justification": justification,
            }
        )
    return out


# small english stop list; tokens this common carry no category signal
_STOP_WORDS = frozenset(
    """the a an and or of in on at to with is are as by for from its it this
    that these those their be been being when where which while into over
    under between can may must not no often usually typically against other
    than such but they them there toward towards across along also has have
    very more most some any each one two like around near within without
    seen visible looks appear appears""".split()
)
_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _tokens(text: str) -> set[str]:
    found = _TOKEN_RE.findall(text.lower())
    return {t for t in found if len(t) > 2 and t not in _STOP_WORDS}


def rule_fallback_verify(
    category: str,
    scene: SceneContext,
    attributes: VisualAttributeSet,
    store: StandardsStore,
) -> CategoryVerdict:
    """Deterministic presence check used when the model omits a category.

    A category counts as present when some attribute shares a keyword with
    its standard (morphology, appearance, or variant names) and no
    discrimination rule deciding against the category is triggered by that
    same attribute.
    """
    category = category.strip().lower()
    standard = store.standard_for(category)
    keywords = (
        _tokens(standard.morphology)
        | _tokens(standard.spectral_spatial)
        | _tokens(" ".join(standard.sub_classes))
    )
    opposing = [r for r in store.rules_for(category) if r.decides_for != category]
    for attr in attributes.attributes:
        attr_tokens = _tokens(attr.description)
        overlap = attr_tokens & keywords
        if not overlap:
            continue
        if any(_tokens(rule.rule) & attr_tokens for rule in opposing):
            continue
        return CategoryVerdict(
            category=category,
            present=True,
            justification=(
                f"keyword match on {attr.description!r}: "
                + ", ".join(sorted(overlap))
            ),
            decided_by="rule_engine",
        )
    return CategoryVerdict(
        category=category,
        present=False,
        justification="no attribute matches the interpretation standard",
        decided_by="rule_engine",
    )


def _assemble_vocabulary(
    raw: list[dict],
    scene: SceneContext,
    attributes: VisualAttributeSet,
    store: StandardsStore,
) -> AdaptiveVocabulary:
    pool = store.pool
    by_name: dict[str, CategoryVerdict] = {}
    for entry in raw:
        name = entry["category"]
        if name not in pool.names:
            logger.warning("dropping verdict for unknown category %r", name)
            continue
        if name in by_name:
            logger.warning("duplicate verdict for %r, keeping the first", name)
            continue
        by_name[name] = CategoryVerdict(
            category=name,
            present=entry["present"],
            justification=entry["justification"],
            decided_by="mllm",
        )
    for name in pool.names:
        if name not in by_name:
            logger.warning("no verdict for %r, falling back to the rule engine", name)
            by_name[name] = rule_fallback_verify(name, scene, attributes, store)

    ordered = tuple(by_name[name] for name in pool.names)
    if not any(v.present for v in ordered):
        logger.warning("every category judged absent; retaining the full pool")
        fallback = tuple(
            CategoryVerdict(
                category=name,
                present=True,
                justification="all categories judged absent; full pool retained",
                decided_by="fallback",
            )
            for name in pool.names
        )
        return AdaptiveVocabulary(
            verdicts=fallback, selected=pool.names, fallback_used=True
        )
    return AdaptiveVocabulary.from_verdicts(ordered, pool, fallback_used=False)


def _synthesize(
    scene: SceneContext,
    attributes: VisualAttributeSet,
    store: StandardsStore,
    gateway: Gateway,
    config: ReasonConfig,
) -> tuple[AdaptiveVocabulary, CheckedCompletion]:
    completion = complete_checked(
        gateway,
        build_synthesize_request(scene, attributes, store, config),
        _parse_raw_verdicts,
        _VERDICTS_SCHEMA,
        lambda exc: MalformedVerdicts(scene.label, str(exc)),
    )
    vocabulary = _assemble_vocabulary(completion.value, scene, attributes, store)
    return vocabulary, completion


def synthesize_vocabulary(
    scene: SceneContext,
    attributes: VisualAttributeSet,
    store: StandardsStore,
    gateway: Gateway,
    config: ReasonConfig,
) -> AdaptiveVocabulary:
    """Decide category presence against the standards; one verdict per category."""
    return _synthesize(scene, attributes, store, gateway, config)[0]


# ---------------------------------------------------------------------------
# Chain


def run_chain(
    image: ImageRef, store: StandardsStore, gateway: Gateway, config: ReasonConfig
) -> ReasoningTrace:
    """Run anchor, decouple, and synthesize strictly in order for one image.

    The first failing stage aborts the chain with that stage's name.  Stage
    timings reflect gateway latency, so mock-backed runs are reproducible
    byte for byte.
    """
    try:
        anchored = _anchor(image, gateway, config)
    except GeovocabError as exc:
        raise ChainStageError("anchor", image.path) from exc
    scene: SceneContext = anchored.value

    try:
        decoupled = _decouple(image, scene, gateway, config)
    except GeovocabError as exc:
        raise ChainStageError("decouple", image.path) from exc
    attributes: VisualAttributeSet = decoupled.value

    try:
        vocabulary, synthesized = _synthesize(scene, attributes, store, gateway, config)
    except GeovocabError as exc:
        raise ChainStageError("synthesize", image.path) from exc

    def _prompt(completion: CheckedCompletion) -> str:
        return "\n".join(completion.request.text_parts())

    return ReasoningTrace(
        image=image,
        scene=scene,
        attributes=attributes,
        vocabulary=vocabulary,
        stage_timings_ms={
            "anchor": anchored.response.latency_ms,
            "decouple": decoupled.response.latency_ms,
            "synthesize": synthesized.response.latency_ms,
        },
        raw_responses={
            "anchor": anchored.response.text,
            "decouple": decoupled.response.text,
            "synthesize": synthesized.response.text,
        },
        stage_prompts={
            "anchor": _prompt(anchored),
            "decouple": _prompt(decoupled),
            "synthesize": _prompt(synthesized),
        },
    )


# ---------------------------------------------------------------------------
# Trace files


def trace_to_json_dict(trace: ReasoningTrace) -> dict:
    return {
        "image": {
            "path": trace.image.path,
            "mime": trace.image.mime,
            "content_hash": trace.image.content_hash,
        },
        "scene": {
            "label": trace.scene.label,
            "confidence": trace.scene.confidence,
            "rationale": trace.scene.rationale,
        },
        "attributes": [
            {
                "description": a.description,
                "kind": a.kind,
                "region_hint": a.region_hint,
            }
            for a in trace.attributes.attributes
        ],
        "vocabulary": {
            "verdicts": [
                {
                    "category": v.category,
                    "present": v.present,
                    "justification": v.justification,
                    "decided_by": v.decided_by,
                }
                for v in trace.vocabulary.verdicts
            ],
            "selected": list(trace.vocabulary.selected),
            "fallback_used": trace.vocabulary.fallback_used,
        },
        "stage_timings_ms": dict(trace.stage_timings_ms),
        "raw_responses": dict(trace.raw_responses),
        "stage_prompts": dict(trace.stage_prompts),
    }


def trace_from_json_dict(payload: dict) -> ReasoningTrace:
    image = ImageRef(
        path=payload["image"]["path"],
        mime=payload["image"]["mime"],
        content_hash=payload["image"]["content_hash"],
    )
    scene = SceneContext(
        label=payload["scene"]["label"],
        confidence=float(payload["scene"]["confidence"]),
        rationale=payload["scene"].get("rationale", ""),
    )
    attributes = VisualAttributeSet(
        scene=scene,
        attributes=tuple(
            VisualAttribute(
                description=a["description"],
                kind=a["kind"],
                region_hint=a.get("region_hint"),
            )
            for a in payload["attributes"]
        ),
    )
    voc = payload["vocabulary"]
    vocabulary = AdaptiveVocabulary(
        verdicts=tuple(
            CategoryVerdict(
                category=v["category"],
                present=v["present"],
                justification=v["justification"],
                decided_by=v["decided_by"],
            )
            for v in voc["verdicts"]
        ),
        selected=tuple(voc["selected"]),
        fallback_used=bool(voc["fallback_used"]),
    )
    return ReasoningTrace(
        image=image,
        scene=scene,
        attributes=attributes,
        vocabulary=vocabulary,
        stage_timings_ms={k: int(v) for k, v in payload["stage_timings_ms"].items()},
        raw_responses=dict(payload["raw_responses"]),
        stage_prompts=dict(payload.get("stage_prompts", {})),
    )


def trace_filename(trace: ReasoningTrace) -> str:
    return f"{trace.image.content_hash}.trace.json"


def save_trace(trace: ReasoningTrace, out_dir: str | Path) -> Path:
    """Write the trace as {image_hash}.trace.json under out_dir."""
    path = Path(out_dir) / trace_filename(trace)
    text = json.dumps(trace_to_json_dict(trace), indent=2, ensure_ascii=False)
    atomic_write_text(path, text + "\n")
    return path


def load_trace(path: str | Path) -> ReasoningTrace:
    with open(path, encoding="utf-8") as fh:
        return trace_from_json_dict(json.load(fh))
