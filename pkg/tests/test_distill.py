import json

import pytest

from geovocab.distill import (
    DistillConfig,
    DistillContext,
    build_discriminate_request,
    build_enhance_request,
    build_pairs_request,
    build_standard_request,
    build_standards,
    discriminate_pair,
    enhance_category,
    propose_ambiguous_pairs,
    synthesize_standard,
)
from geovocab.errors import DistillStageError, MalformedEnhancement, MalformedRule
from geovocab.gateway import Gateway, GatewayConfig, fixture_key, with_correction
from geovocab.model import Category, CategoryPool
from geovocab.prompts import load_template, render_template

POOL = CategoryPool.from_names(
    ["farmland", "built-up", "water"], dataset_tag="toy"
)
CONFIG = DistillConfig()

ENHANCE_SCHEMA = '{"geometry": str, "boundaries": str, "sub_classes": [str], "spectra": str}'


def mock_gateway(tmp_path):
    return Gateway(GatewayConfig(mock_fixture_dir=tmp_path))


def write_fixture(tmp_path, request, payload):
    text = payload if isinstance(payload, str) else json.dumps(payload)
    (tmp_path / f"{fixture_key(request)}.json").write_text(text)


def enhancement_payload(name="farmland"):
    return {
        "geometry": f"{name} has regular parcels",
        "boundaries": "straight plot edges",
        "sub_classes": ["paddies"],
        "spectra": "green and yellow tones",
    }


class TestPromptTemplates:
    @pytest.mark.parametrize(
        "stream,name",
        [
            ("distill", "enhance"),
            ("distill", "propose_pairs"),
            ("distill", "discriminate"),
            ("distill", "synthesize"),
            ("reason", "anchor"),
            ("reason", "decouple"),
            ("reason", "synthesize"),
        ],
    )
    def test_packaged_templates_load(self, stream, name):
        assert load_template(stream, name).strip()

    def test_render_substitutes(self):
        assert render_template("hello {{who}}", {"who": "world"}) == "hello world"

    def test_render_missing_placeholder_raises(self):
        with pytest.raises(KeyError):
            render_template("hello {{who}}", {})

    def test_override_dir_wins(self, tmp_path):
        (tmp_path / "enhance.txt").write_text("override {{category}}")
        assert load_template("distill", "enhance", tmp_path) == "override {{category}}"


class TestEnhance:
    def test_happy_path_composes_description(self, tmp_path):
        category = POOL.categories[0]
        write_fixture(
            tmp_path, build_enhance_request(category, CONFIG), enhancement_payload()
        )
        text = enhance_category(category, mock_gateway(tmp_path), CONFIG)
        assert "Geometry: farmland has regular parcels" in text
        assert "Boundaries: straight plot edges" in text
        assert "Appearance: green and yellow tones" in text
        assert "Also counts as this category: paddies" in text

    def test_empty_sub_classes_omits_line(self, tmp_path):
        category = POOL.categories[2]
        payload = enhancement_payload("water")
        payload["sub_classes"] = []
        write_fixture(tmp_path, build_enhance_request(category, CONFIG), payload)
        text = enhance_category(category, mock_gateway(tmp_path), CONFIG)
        assert "Also counts" not in text

    def test_repair_after_malformed_response(self, tmp_path):
        category = POOL.categories[0]
        request = build_enhance_request(category, CONFIG)
        write_fixture(tmp_path, request, "no structure here whatsoever")
        repaired = with_correction(
            request, "no JSON object in model output", ENHANCE_SCHEMA
        )
        write_fixture(tmp_path, repaired, enhancement_payload())
        text = enhance_category(category, mock_gateway(tmp_path), CONFIG)
        assert "Geometry:" in text

    def test_double_failure_names_category(self, tmp_path):
        category = POOL.categories[0]
        request = build_enhance_request(category, CONFIG)
        write_fixture(tmp_path, request, '{"geometry": ""}')
        repaired = with_correction(
            request, "enhancement response missing field 'boundaries'", ENHANCE_SCHEMA
        )
        write_fixture(tmp_path, repaired, '{"still": "wrong"}')
        with pytest.raises(MalformedEnhancement) as info:
            enhance_category(category, mock_gateway(tmp_path), CONFIG)
        assert "farmland" in str(info.value)


class TestProposePairs:
    def test_override_skips_model(self, tmp_path):
        config = DistillConfig(override_pairs=(("water", "farmland"),))
        pairs = propose_ambiguous_pairs(POOL, mock_gateway(tmp_path), config)
        # oriented by pool index and no fixture was needed
        assert pairs == [("farmland", "water")]

    def test_override_with_unknown_name_raises(self, tmp_path):
        config = DistillConfig(override_pairs=(("water", "lava"),))
        with pytest.raises(ValueError):
            propose_ambiguous_pairs(POOL, mock_gateway(tmp_path), config)

    def test_model_pairs_filtered_and_deduped(self, tmp_path):
        payload = {
            "pairs": [
                ["built-up", "farmland"],
                ["farmland", "built-up"],
                ["farmland", "farmland"],
                ["water", "lava"],
            ]
        }
        write_fixture(tmp_path, build_pairs_request(POOL, CONFIG), payload)
        pairs = propose_ambiguous_pairs(POOL, mock_gateway(tmp_path), CONFIG)
        assert pairs == [("farmland", "built-up")]

    def test_single_category_pool_rejected(self, tmp_path):
        pool = CategoryPool.from_names(["water"])
        with pytest.raises(ValueError):
            propose_ambiguous_pairs(pool, mock_gateway(tmp_path), CONFIG)


class TestDiscriminate:
    DESCRIPTIONS = {
        "farmland": "Geometry: parcels",
        "built-up": "Geometry: blocks",
    }

    def test_rule_built_with_cue(self, tmp_path):
        pair = ("farmland", "built-up")
        request = build_discriminate_request(
            pair, self.DESCRIPTIONS["farmland"], self.DESCRIPTIONS["built-up"], CONFIG
        )
        write_fixture(
            tmp_path,
            request,
            {
                "rule": "Greenhouses belong to farmland.",
                "decides_for": "farmland",
                "cue": "translucent roofs",
            },
        )
        rule = discriminate_pair(pair, self.DESCRIPTIONS, mock_gateway(tmp_path), CONFIG)
        assert rule.decides_for == "farmland"
        assert "Cue: translucent roofs" in rule.rule

    def test_decides_for_outside_pair_is_malformed(self, tmp_path):
        pair = ("farmland", "built-up")
        request = build_discriminate_request(
            pair, self.DESCRIPTIONS["farmland"], self.DESCRIPTIONS["built-up"], CONFIG
        )
        bad = {"rule": "something", "decides_for": "water", "cue": ""}
        write_fixture(tmp_path, request, bad)
        repaired = with_correction(
            request,
            "decides_for 'water' is neither 'farmland' nor 'built-up'",
            '{"rule": str, "decides_for": str, "cue": str}',
        )
        write_fixture(tmp_path, repaired, bad)
        with pytest.raises(MalformedRule):
            discriminate_pair(pair, self.DESCRIPTIONS, mock_gateway(tmp_path), CONFIG)

    def test_missing_description_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            discriminate_pair(
                ("farmland", "water"),
                self.DESCRIPTIONS,
                mock_gateway(tmp_path),
                CONFIG,
            )


class TestSynthesize:
    def test_standard_source_reflects_backend(self, tmp_path):
        category = POOL.categories[0]
        context = DistillContext(
            enhanced_descriptions={"farmland": "Geometry: parcels"},
            rules=(),
            ambiguous_pairs=(),
        )
        request = build_standard_request(category, context, CONFIG)
        write_fixture(
            tmp_path,
            request,
            {
                "morphology": "regular parcels",
                "spectral_spatial": "green tones",
                "exclusivity": "never confuse with built-up",
                "sub_classes": ["paddies"],
            },
        )
        standard = synthesize_standard(category, context, mock_gateway(tmp_path), CONFIG)
        assert standard.category == "farmland"
        assert standard.source == "fixture"
        assert standard.sub_classes == ("paddies",)

    def test_rules_for_category_reach_the_prompt(self):
        from geovocab.model import DiscriminationRule

        rule = DiscriminationRule(
            category_a="farmland",
            category_b="built-up",
            rule="Greenhouses belong to farmland.",
            decides_for="farmland",
        )
        context = DistillContext(
            enhanced_descriptions={"farmland": "Geometry: parcels"},
            rules=(rule,),
            ambiguous_pairs=(("farmland", "built-up"),),
        )
        request = build_standard_request(POOL.categories[0], context, CONFIG)
        assert "Greenhouses belong to farmland." in request.user_parts[0].text


class TestBuildStandards:
    def test_full_stream_from_corpus_fixtures(self, corpus):
        gateway = Gateway(GatewayConfig(mock_fixture_dir=corpus.fixtures_dir))
        store = build_standards(corpus.pool, gateway, DistillConfig())
        assert [s.category for s in store.standards] == list(corpus.pool.names)
        assert len(store.rules) == 5
        assert all(s.source == "fixture" for s in store.standards)
        assert store.created_at  # stamped at build time

    def test_rerun_identical_except_timestamp(self, corpus):
        from geovocab.tensorio import standards_to_json_dict

        gateway = Gateway(GatewayConfig(mock_fixture_dir=corpus.fixtures_dir))
        first = standards_to_json_dict(
            build_standards(corpus.pool, gateway, DistillConfig())
        )
        second = standards_to_json_dict(
            build_standards(corpus.pool, gateway, DistillConfig())
        )
        first.pop("created_at")
        second.pop("created_at")
        assert first == second

    def test_stage_failure_is_wrapped_with_subject(self, tmp_path):
        pool = CategoryPool.from_names(["farmland", "water"])
        # only farmland's enhancement fixture exists
        write_fixture(
            tmp_path,
            build_enhance_request(pool.categories[0], CONFIG),
            enhancement_payload(),
        )
        with pytest.raises(DistillStageError) as info:
            build_standards(pool, mock_gateway(tmp_path), CONFIG)
        assert info.value.stage == "enhance"
        assert "water" in str(info.value)

    def test_invalid_pool_rejected(self, tmp_path):
        pool = CategoryPool(
            categories=(
                Category(name="water", index=0),
                Category(name="water", index=1),
            )
        )
        with pytest.raises(ValueError):
            build_standards(pool, mock_gateway(tmp_path), CONFIG)
