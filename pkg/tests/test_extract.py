import pytest

from vqarephrase.extract import (
    EntityDetail,
    ExtractConfig,
    StageError,
    VisualDetails,
    assemble_details_block,
    collect_visual_details,
    generate_caption,
    generate_rationale_and_entities,
    parse_entity_list,
    query_entity_details,
    truncate_sentences,
)

from conftest import make_client

CAPTION = "a tall stone building with a clock tower on a cloudy day"

TABLE = {
    "rules": [
        {"match": "Which all entities", "responses": ["1. clock 2. building"]},
        {"match": "Explanation:", "responses": ["clocks can tell time, so read the clock"]},
        {"match": "What can you tell me about clock", "responses": ["it is at the top of the building"]},
        {"match": "What can you tell me about", "responses": ["it is large. it is grey. it is old."]},
        {"match": "^$", "requires_image": True, "responses": [CAPTION]},
    ],
    "scores": [],
}


class TestCaption:
    def test_fixed_caption_from_table(self, registry, image):
        client, _ = make_client(TABLE)
        assert generate_caption(client, registry, image) == CAPTION

    def test_empty_caption_is_stage_error(self, registry, image):
        client, _ = make_client({"rules": [{"match": "", "responses": ["   "]}]})
        with pytest.raises(StageError, match="caption"):
            generate_caption(client, registry, image)

    def test_trailing_whitespace_trimmed(self, registry, image):
        client, _ = make_client({"rules": [{"match": "", "requires_image": True,
                                            "responses": ["a boat  "]}]})
        assert generate_caption(client, registry, image) == "a boat"


class TestEntityParsing:
    def test_enumerated_list(self):
        assert parse_entity_list("1. net 2. players", cap=3) == ["net", "players"]

    def test_prose_sentence_is_no_list(self):
        assert parse_entity_list("I cannot tell.", cap=3) == []

    def test_single_bare_entity(self):
        assert parse_entity_list("clock", cap=3) == ["clock"]

    def test_newlines_commas_semicolons(self):
        assert parse_entity_list("net,\nplayers; court", cap=5) == ["net", "players", "court"]

    def test_bullets_and_case_and_dedupe(self):
        got = parse_entity_list("- Clock\n- clock\n- Building", cap=5)
        assert got == ["clock", "building"]

    def test_cap_applies(self):
        assert parse_entity_list("a1, a2, a3, a4", cap=2) == ["a1", "a2"]

    def test_overlong_items_dropped(self):
        got = parse_entity_list("the very long description of a thing, net", cap=5, max_words=3)
        assert got == ["net"]

    def test_empty_response(self):
        assert parse_entity_list("", cap=3) == []


class TestRationale:
    def test_two_step_extraction(self, registry, image):
        client, _ = make_client(TABLE)
        rationale, entities = generate_rationale_and_entities(
            client, registry, image, "What time of day is it?")
        assert rationale.startswith("clocks can tell time")
        assert entities == ["clock", "building"]

    def test_unparseable_entities_degrade_to_empty(self, registry, image):
        table = {
            "rules": [
                {"match": "Which all entities", "responses": ["I cannot tell."]},
                {"match": "Explanation:", "responses": ["because reasons"]},
            ]
        }
        client, _ = make_client(table)
        rationale, entities = generate_rationale_and_entities(
            client, registry, image, "What time of day is it?")
        assert rationale == "because reasons"
        assert entities == []

    def test_rationale_uses_beam_sampling(self, registry, image):
        client, backend = make_client(TABLE)
        generate_rationale_and_entities(client, registry, image, "What time of day is it?")
        rationale_calls = [c for c in backend.requests if c.purpose == "rationale"]
        assert len(rationale_calls) == 1


class TestEntityDetails:
    def test_detail_query(self, registry, image):
        client, _ = make_client(TABLE)
        detail = query_entity_details(client, registry, image, "clock")
        assert detail == "it is at the top of the building"

    def test_empty_entity_rejected(self, registry, image):
        client, _ = make_client(TABLE)
        with pytest.raises(ValueError):
            query_entity_details(client, registry, image, "  ")


class TestTruncation:
    def test_two_sentences_kept(self):
        assert truncate_sentences("one. two! three.", 2) == "one. two!"

    def test_short_text_unchanged(self):
        assert truncate_sentences("only one.", 2) == "only one."


class TestCollect:
    def test_full_collection_order_and_sources(self, registry, image):
        client, _ = make_client(TABLE)
        details = collect_visual_details(client, registry, image,
                                         "What time of day is it?", ExtractConfig())
        names = [(e.name, e.source) for e in details.entities]
        # question entities first (RAKE: time, day), then rationale entities
        assert names == [("time", "question"), ("day", "question"),
                         ("clock", "rationale"), ("building", "rationale")]
        assert details.caption == CAPTION
        assert details.rationale_text

    def test_details_truncated_to_config(self, registry, image):
        client, _ = make_client(TABLE)
        details = collect_visual_details(client, registry, image,
                                         "What time of day is it?",
                                         ExtractConfig(detail_max_sentences=2))
        day = next(e for e in details.entities if e.name == "day")
        assert day.detail == "it is large. it is grey."

    def test_dedupes_question_and_rationale_entities(self, registry, image):
        table = dict(TABLE)
        table = {**TABLE, "rules": [
            {"match": "Which all entities", "responses": ["1. Time 2. clock"]},
            *TABLE["rules"][1:],
        ]}
        client, _ = make_client(table)
        details = collect_visual_details(client, registry, image,
                                         "What time of day is it?", ExtractConfig())
        names = [e.name for e in details.entities]
        assert names == ["time", "day", "clock"]

    def test_ablations_remove_exactly_their_contribution(self, registry, image):
        client, _ = make_client(TABLE)
        question = "What time of day is it?"
        full = collect_visual_details(client, registry, image, question, ExtractConfig())

        no_caption = collect_visual_details(client, registry, image, question,
                                            ExtractConfig(use_caption=False))
        assert no_caption.caption == ""
        assert [e.name for e in no_caption.entities] == [e.name for e in full.entities]
        assert no_caption.rationale_text == full.rationale_text

        no_rationale = collect_visual_details(client, registry, image, question,
                                              ExtractConfig(use_rationale=False))
        assert no_rationale.rationale_text == ""
        assert [e.name for e in no_rationale.entities] == ["time", "day"]
        assert no_rationale.caption == full.caption

        no_qe = collect_visual_details(client, registry, image, question,
                                       ExtractConfig(use_question_entities=False))
        assert [e.name for e in no_qe.entities] == ["clock", "building"]
        assert no_qe.caption == full.caption
        assert no_qe.rationale_text == full.rationale_text

    def test_ablation_flags_compose(self, registry, image):
        client, _ = make_client(TABLE)
        details = collect_visual_details(
            client, registry, image, "What time of day is it?",
            ExtractConfig(use_caption=False, use_rationale=False))
        assert details.caption == ""
        assert details.rationale_text == ""
        assert [e.name for e in details.entities] == ["time", "day"]
        assert assemble_details_block(details).splitlines() == [
            f"time: {details.entities[0].detail}",
            f"day: {details.entities[1].detail}",
        ]

    def test_failed_detail_query_skips_entity(self, registry, image):
        from vqarephrase.model_client import MockBackend, ModelClient, TransportError

        class FailingBackend(MockBackend):
            def generate(self, request):
                if "about clock" in request.text:
                    raise TransportError("endpoint down")
                return super().generate(request)

        client = ModelClient(FailingBackend(TABLE), max_attempts=1, backoff_base=0.0)
        details = collect_visual_details(client, registry, image,
                                         "What time of day is it?", ExtractConfig())
        names = [e.name for e in details.entities]
        assert "clock" not in names
        assert names == ["time", "day", "building"]


class TestAssembleBlock:
    def test_entities_then_image_line(self):
        details = VisualDetails(
            caption="C",
            entities=[EntityDetail("day", "question", "d1"),
                      EntityDetail("clock", "rationale", "d2")],
        )
        assert assemble_details_block(details) == "day: d1\nclock: d2\nimage: C"

    def test_no_entities_single_image_line(self):
        assert assemble_details_block(VisualDetails(caption="C")) == "image: C"

    def test_duplicate_entities_keep_first(self):
        details = VisualDetails(
            caption="C",
            entities=[EntityDetail("day", "question", "first"),
                      EntityDetail("Day", "rationale", "second")],
        )
        assert assemble_details_block(details) == "day: first\nimage: C"

    def test_no_caption_no_image_line(self):
        details = VisualDetails(entities=[EntityDetail("day", "question", "d")])
        assert assemble_details_block(details) == "day: d"
