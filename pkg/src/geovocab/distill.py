"""Offline knowledge distillation: build a StandardsStore for a pool.

Three model-driven stages run in sequence.  Enhancement expands each
category into interpretation notes, discrimination writes a decision rule
for every ambiguous category pair, and synthesis condenses both into the
final per-category standard.  Every stage goes through the gateway, so the
whole stream runs hermetically against mock fixtures.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .errors import (
    DistillStageError,
    GeovocabError,
    MalformedEnhancement,
    MalformedPairs,
    MalformedRule,
    MalformedStandard,
)
from .gateway import ChatRequest, Gateway, TextPart, complete_checked
from .model import (
    Category,
    CategoryPool,
    DiscriminationRule,
    InterpretationStandard,
    StandardsStore,
    validate_pool,
)
from .prompts import load_template, render_template

logger = logging.getLogger(__name__)

_ENHANCE_SCHEMA = '{"geometry": str, "boundaries": str, "sub_classes": [str], "spectra": str}'
_PAIRS_SCHEMA = '{"pairs": [[str, str]]}'
_RULE_SCHEMA = '{"rule": str, "decides_for": str, "cue": str}'
_STANDARD_SCHEMA = (
    '{"morphology": str, "spectral_spatial": str, "exclusivity": str, "sub_classes": [str]}'
)


@dataclass(frozen=True)
class DistillConfig:
    """Settings for the distillation stream.

    ``prompt_dir`` overrides the packaged templates; ``override_pairs``
    skips the pair-proposal model call entirely.
    """

    prompt_dir: Path | None = None
    override_pairs: tuple[tuple[str, str], ...] | None = None
    max_tokens: int = 1024


@dataclass(frozen=True)
class DistillContext:
    """Everything the synthesis stage is allowed to see."""

    enhanced_descriptions: dict[str, str]
    rules: tuple[DiscriminationRule, ...]
    ambiguous_pairs: tuple[tuple[str, str], ...]


def _template(config: DistillConfig, name: str) -> str:
    return load_template("distill", name, config.prompt_dir)


# ---------------------------------------------------------------------------
# Stage 1: category knowledge enhancement


def build_enhance_request(category: Category, config: DistillConfig) -> ChatRequest:
    text = render_template(
        _template(config, "enhance"),
        {"category": category.name, "display": category.display},
    )
    return ChatRequest(
        user_parts=(TextPart(text),),
        response_schema_id="enhance",
        max_tokens=config.max_tokens,
    )


def _parse_enhancement(obj: object) -> str:
    if not isinstance(obj, dict):
        raise ValueError("enhancement response is not a JSON object")
    for key in ("geometry", "boundaries", "sub_classes", "spectra"):
        if key not in obj:
            raise ValueError(f"enhancement response missing field {key!r}")
    for key in ("geometry", "boundaries", "spectra"):
        if not isinstance(obj[key], str) or not obj[key].strip():
            raise ValueError(f"enhancement field {key!r} must be non-empty text")
    subs = obj["sub_classes"]
    if not isinstance(subs, list) or not all(isinstance(s, str) for s in subs):
        raise ValueError("enhancement field 'sub_classes' must be a list of strings")
    lines = [
        f"Geometry: {obj['geometry'].strip()}",
        f"Boundaries: {obj['boundaries'].strip()}",
        f"Appearance: {obj['spectra'].strip()}",
    ]
    cleaned = [s.strip() for s in subs if s.strip()]
    if cleaned:
        lines.append("Also counts as this category: " + ", ".join(cleaned))
    return "\n".join(lines)


def enhance_category(category: Category, gateway: Gateway, config: DistillConfig) -> str:
    """Expand one category into interpretation notes via the model."""
    completion = complete_checked(
        gateway,
        build_enhance_request(category, config),
        _parse_enhancement,
        _ENHANCE_SCHEMA,
        lambda exc: MalformedEnhancement(category.name, str(exc)),
    )
    return completion.value


# ---------------------------------------------------------------------------
# Stage 2a: ambiguous pair proposal


def build_pairs_request(pool: CategoryPool, config: DistillConfig) -> ChatRequest:
    listing = "\n".join(f"- {name}" for name in pool.names)
    text = render_template(_template(config, "propose_pairs"), {"categories": listing})
    return ChatRequest(
        user_parts=(TextPart(text),),
        response_schema_id="propose_pairs",
        max_tokens=config.max_tokens,
    )


def _canonical_pairs(
    raw_pairs: list[tuple[str, str]], pool: CategoryPool, strict: bool
) -> list[tuple[str, str]]:
    """Normalize, orient by pool index, and dedupe unordered pairs.

    In strict mode (operator-supplied overrides) bad names raise; otherwise
    they are dropped with a warning, matching how model output is treated.
    """
    kept: list[tuple[str, str]] = []
    seen: set[frozenset[str]] = set()
    for a, b in raw_pairs:
        a = a.strip().lower()
        b = b.strip().lower()
        if a not in pool.names or b not in pool.names:
            if strict:
                raise ValueError(f"pair ({a!r}, {b!r}) references unknown categories")
            logger.warning("dropping pair (%s, %s): not in the pool", a, b)
            continue
        if a == b:
            if strict:
                raise ValueError(f"pair ({a!r}, {b!r}) repeats one category")
            logger.warning("dropping degenerate pair (%s, %s)", a, b)
            continue
        if pool.index_of(a) > pool.index_of(b):
            a, b = b, a
        key = frozenset((a, b))
        if key in seen:
            continue
        seen.add(key)
        kept.append((a, b))
    return kept


def _parse_pairs(obj: object) -> list[tuple[str, str]]:
    if not isinstance(obj, dict) or "pairs" not in obj:
        raise ValueError("pair response must be an object with a 'pairs' list")
    pairs = obj["pairs"]
    if not isinstance(pairs, list):
        raise ValueError("'pairs' must be a list")
    out = []
    for entry in pairs:
        if (
            not isinstance(entry, (list, tuple))
            or len(entry) != 2
            or not all(isinstance(x, str) for x in entry)
        ):
            raise ValueError(f"pair entry {entry!r} is not a two-name list")
        out.append((entry[0], entry[1]))
    return out


def propose_ambiguous_pairs(
    pool: CategoryPool, gateway: Gateway, config: DistillConfig
) -> list[tuple[str, str]]:
    """Ask the model which category pairs are easily confused.

    Honors ``config.override_pairs`` without any model call.  Pairs naming
    categories outside the pool are dropped with a warning.
    """
    if len(pool) < 2:
        raise ValueError("pair proposal needs a pool with at least two categories")
    if config.override_pairs is not None:
        return _canonical_pairs(list(config.override_pairs), pool, strict=True)
    completion = complete_checked(
        gateway,
        build_pairs_request(pool, config),
        _parse_pairs,
        _PAIRS_SCHEMA,
        lambda exc: MalformedPairs(pool.dataset_tag or "pool", str(exc)),
    )
    return _canonical_pairs(completion.value, pool, strict=False)


# ---------------------------------------------------------------------------
# Stage 2b: pairwise discrimination


def build_discriminate_request(
    pair: tuple[str, str],
    description_a: str,
    description_b: str,
    config: DistillConfig,
) -> ChatRequest:
    text = render_template(
        _template(config, "discriminate"),
        {
            "category_a": pair[0],
            "category_b": pair[1],
            "description_a": description_a,
            "description_b": description_b,
        },
    )
    return ChatRequest(
        user_parts=(TextPart(text),),
        response_schema_id="discriminate",
        max_tokens=config.max_tokens,
    )


def _make_rule_parser(pair: tuple[str, str]):
    def _parse(obj: object) -> DiscriminationRule:
        if not isinstance(obj, dict):
            raise ValueError("rule response is not a JSON object")
        rule = obj.get("rule")
        decides_for = obj.get("decides_for")
        if not isinstance(rule, str) or not rule.strip():
            raise ValueError("rule response needs non-empty 'rule' text")
        if not isinstance(decides_for, str):
            raise ValueError("rule response needs a 'decides_for' category")
        cue = obj.get("cue", "")
        text = rule.strip()
        if isinstance(cue, str) and cue.strip():
            text = f"{text} Cue: {cue.strip()}"
        # the dataclass re-checks decides_for against the pair and raises
        # ValueError itself, which flows into the same repair path
        return DiscriminationRule(
            category_a=pair[0], category_b=pair[1], rule=text, decides_for=decides_for
        )

    return _parse


def discriminate_pair(
    pair: tuple[str, str],
    enhanced_descriptions: dict[str, str],
    gateway: Gateway,
    config: DistillConfig,
) -> DiscriminationRule:
    """Write the decision rule separating one ambiguous pair."""
    for name in pair:
        if not enhanced_descriptions.get(name, "").strip():
            raise ValueError(f"no enhanced description for {name!r}")
    completion = complete_checked(
        gateway,
        build_discriminate_request(
            pair, enhanced_descriptions[pair[0]], enhanced_descriptions[pair[1]], config
        ),
        _make_rule_parser(pair),
        _RULE_SCHEMA,
        lambda exc: MalformedRule(f"{pair[0]}/{pair[1]}", str(exc)),
    )
    return completion.value


# ---------------------------------------------------------------------------
# Stage 3: standard synthesis


def build_standard_request(
    category: Category, context: DistillContext, config: DistillConfig
) -> ChatRequest:
    relevant = [r for r in context.rules if r.mentions(category.name)]
    if relevant:
        rules_text = "\n".join(
            f"- {r.rule} (decides for {r.decides_for})" for r in relevant
        )
    else:
        rules_text = "(no discrimination rules recorded for this category)"
    text = render_template(
        _template(config, "synthesize"),
        {
            "category": category.name,
            "description": context.enhanced_descriptions[category.name],
            "rules": rules_text,
        },
    )
    return ChatRequest(
        user_parts=(TextPart(text),),
        response_schema_id="synthesize_standard",
        max_tokens=config.max_tokens,
    )


def _make_standard_parser(category: Category, source: str):
    def _parse(obj: object) -> InterpretationStandard:
        if not isinstance(obj, dict):
            raise ValueError("standard response is not a JSON object")
        for key in ("morphology", "spectral_spatial", "exclusivity"):
            if not isinstance(obj.get(key), str) or not obj[key].strip():
                raise ValueError(f"standard response needs non-empty {key!r}")
        subs = obj.get("sub_classes", [])
        if not isinstance(subs, list) or not all(isinstance(s, str) for s in subs):
            raise ValueError("'sub_classes' must be a list of strings")
        return InterpretationStandard(
            category=category.name,
            morphology=obj["morphology"].strip(),
            spectral_spatial=obj["spectral_spatial"].strip(),
            exclusivity=obj["exclusivity"].strip(),
            sub_classes=tuple(s.strip() for s in subs if s.strip()),
            source=source,
        )

    return _parse


def synthesize_standard(
    category: Category,
    context: DistillContext,
    gateway: Gateway,
    config: DistillConfig,
) -> InterpretationStandard:
    """Condense notes and rules into the final standard for one category."""
    if not context.enhanced_descriptions.get(category.name, "").strip():
        raise ValueError(f"no enhanced description for {category.name!r}")
    source = "fixture" if gateway.config.mock_fixture_dir is not None else "mllm"
    completion = complete_checked(
        gateway,
        build_standard_request(category, context, config),
        _make_standard_parser(category, source),
        _STANDARD_SCHEMA,
        lambda exc: MalformedStandard(category.name, str(exc)),
    )
    return completion.value


# ---------------------------------------------------------------------------
# Orchestration


def build_standards(
    pool: CategoryPool, gateway: Gateway, config: DistillConfig
) -> StandardsStore:
    """Run the full distillation stream and return the populated store.

    Stages run in a fixed order with deterministic iteration, so two runs
    against the same fixtures differ only in the created_at timestamp.
    The first fatal stage error is wrapped with its stage and subject.
    """
    violations = validate_pool(pool)
    if violations:
        raise ValueError("invalid pool: " + "; ".join(violations))

    enhanced: dict[str, str] = {}
    for category in pool:
        try:
            enhanced[category.name] = enhance_category(category, gateway, config)
        except GeovocabError as exc:
            raise DistillStageError("enhance", category.name) from exc

    subject = pool.dataset_tag or "pool"
    try:
        pairs = propose_ambiguous_pairs(pool, gateway, config)
    except GeovocabError as exc:
        raise DistillStageError("propose_pairs", subject) from exc

    rules: list[DiscriminationRule] = []
    for pair in pairs:
        try:
            rules.append(discriminate_pair(pair, enhanced, gateway, config))
        except GeovocabError as exc:
            raise DistillStageError("discriminate", f"{pair[0]}/{pair[1]}") from exc

    context = DistillContext(
        enhanced_descriptions=enhanced,
        rules=tuple(rules),
        ambiguous_pairs=tuple(pairs),
    )
    standards: list[InterpretationStandard] = []
    for category in pool:
        try:
            standards.append(synthesize_standard(category, context, gateway, config))
        except GeovocabError as exc:
            raise DistillStageError("synthesize_standard", category.name) from exc

    return StandardsStore(
        pool=pool,
        standards=tuple(standards),
        rules=tuple(rules),
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
