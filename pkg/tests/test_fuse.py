import pytest

from vqarephrase.model_client import MockBackend, ModelClient, StubNliProvider, TransportError
from vqarephrase.fuse import (
    FuseConfig,
    _clean_sample,
    generate_candidates,
    generate_candidates_with_image,
    paraphrase_candidates,
)

from conftest import make_client

ORIGINAL = "What time does the clock say?"
DETAILS = "clock: it is at the top of the building\nimage: a tall stone building"

GOOD_TABLE = {
    "rules": [
        {"match": "Modified Question:", "requires_image": True, "responses": [
            "What time does the clock tower say in the building?",
        ]},
        {"match": "Modified Question:", "responses": [
            "What time is on the clock at the top of building?",
            "What time does the big clock say?",
            "What time is shown on the clock tower?",
            "What time does the clock on the building say?",
        ]},
        {"match": "Paraphrase:", "responses": [
            "What time is displayed on the clock?",
            "this is a statement not a question",
            "Which time does the clock show?",
            "What hour does the clock indicate?",
        ]},
    ],
    "scores": [
        {"match": "^entailment$", "logprobs": [-0.1]},
        {"match": "^neutral$", "logprobs": [-2.0]},
        {"match": "^contradiction$", "logprobs": [-3.0]},
    ],
}


def _contract(cands, n, original=ORIGINAL):
    assert len(cands.candidates) == n
    assert cands.candidates[0] == original
    assert cands.provenance[0] == "original"
    assert all(c.endswith("?") for c in cands.candidates)
    assert len(cands.provenance) == len(cands.candidates)


class TestGenerateCandidates:
    def test_happy_path(self, registry):
        client, _ = make_client(GOOD_TABLE)
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1)
        _contract(cands, 3)
        assert cands.provenance.count("fusion_sample") == 2
        assert "What time is on the clock at the top of building?" in cands.candidates

    def test_fusion_request_is_text_only(self, registry, image):
        client, backend = make_client(GOOD_TABLE)
        generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1)
        fusion_calls = [c for c in backend.requests if c.purpose == "fusion"]
        assert fusion_calls and all(not c.has_image for c in fusion_calls)

    def test_precondition_n(self, registry):
        client, _ = make_client(GOOD_TABLE)
        with pytest.raises(ValueError):
            generate_candidates(client, registry, ORIGINAL, DETAILS, n=1, seed=1)

    def test_precondition_question_mark(self, registry):
        client, _ = make_client(GOOD_TABLE)
        with pytest.raises(ValueError):
            generate_candidates(client, registry, "No question mark", DETAILS, n=3, seed=1)

    def test_all_invalid_pads_with_original(self, registry):
        table = {"rules": [{"match": "Modified Question:",
                            "responses": ["statement one", "statement two"]}],
                 "scores": GOOD_TABLE["scores"]}
        client, _ = make_client(table)
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=4, seed=1)
        _contract(cands, 4)
        assert cands.provenance == ["original", "original_pad", "original_pad", "original_pad"]

    def test_duplicates_collapse(self, registry):
        table = {"rules": [{"match": "Modified Question:", "responses": [
            "What time is it exactly?",
            "what   TIME is it exactly?",         # same after normalization
            ORIGINAL,                             # verbatim original dropped
        ]}], "scores": GOOD_TABLE["scores"]}
        client, _ = make_client(table)
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=4, seed=1)
        _contract(cands, 4)
        assert cands.provenance.count("fusion_sample") == 1

    def test_nli_contradiction_dropped(self, registry):
        client, _ = make_client(GOOD_TABLE)
        client.nli_provider = StubNliProvider("contradiction")
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1)
        _contract(cands, 3)
        assert cands.provenance == ["original", "original_pad", "original_pad"]
        assert all(entry["label"] == "contradiction" and not entry["kept"]
                   for entry in cands.nli_log)

    def test_nli_verdicts_recorded_for_kept_candidates(self, registry):
        client, _ = make_client(GOOD_TABLE)
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1)
        kept_labels = [e["label"] for e in cands.nli_log if e["kept"]]
        assert kept_labels and all(label != "contradiction" for label in kept_labels)

    def test_nli_failure_fail_open_and_closed(self, registry):
        class BrokenNli:
            def classify(self, premise, hypothesis):
                raise TransportError("nli down")

        client, _ = make_client(GOOD_TABLE)
        client.nli_provider = BrokenNli()
        open_cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1,
                                         cfg=FuseConfig(nli_fail_open=True))
        assert open_cands.provenance.count("fusion_sample") == 2

        closed = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1,
                                     cfg=FuseConfig(nli_fail_open=False))
        assert closed.provenance == ["original", "original_pad", "original_pad"]

    def test_model_failure_degrades_to_originals(self, registry):
        class DownBackend(MockBackend):
            def generate(self, request):
                raise TransportError("down")

        client = ModelClient(DownBackend(GOOD_TABLE), max_attempts=1, backoff_base=0.0)
        cands = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=1)
        _contract(cands, 3)
        assert cands.provenance == ["original", "original_pad", "original_pad"]

    def test_determinism_under_fixed_seed(self, registry):
        client, _ = make_client(GOOD_TABLE)
        a = generate_candidates(client, registry, ORIGINAL, DETAILS, n=4, seed=9)
        b = generate_candidates(client, registry, ORIGINAL, DETAILS, n=4, seed=9)
        assert a == b


class TestWithImage:
    def test_image_branch_changes_candidates(self, registry, image):
        client, _ = make_client(GOOD_TABLE)
        plain = generate_candidates(client, registry, ORIGINAL, DETAILS, n=2, seed=1)
        with_img = generate_candidates_with_image(client, registry, ORIGINAL, DETAILS,
                                                  n=2, image=image, seed=1)
        assert with_img.candidates[1] == "What time does the clock tower say in the building?"
        assert plain.candidates[1] != with_img.candidates[1]

    def test_flag_off_is_byte_identical(self, registry):
        client, _ = make_client(GOOD_TABLE)
        a = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=5)
        b = generate_candidates(client, registry, ORIGINAL, DETAILS, n=3, seed=5, image=None)
        assert a == b


class TestParaphrase:
    def test_statements_filtered_and_padded(self, registry):
        client, _ = make_client(GOOD_TABLE)
        cands = paraphrase_candidates(client, registry, ORIGINAL, n=5, seed=1)
        _contract(cands, 5)
        assert "this is a statement not a question" not in cands.candidates
        assert cands.provenance.count("paraphrase_sample") == 3
        assert cands.provenance.count("original_pad") == 1

    def test_no_nli_calls_by_default(self, registry):
        client, backend = make_client(GOOD_TABLE)
        paraphrase_candidates(client, registry, ORIGINAL, n=3, seed=1)
        assert not [c for c in backend.requests if c.purpose == "nli"]

    def test_n_two_yields_one_paraphrase(self, registry):
        client, _ = make_client(GOOD_TABLE)
        cands = paraphrase_candidates(client, registry, ORIGINAL, n=2, seed=1)
        assert len(cands.candidates) == 2
        assert cands.provenance[1] in ("paraphrase_sample", "original_pad")


class TestCleanSample:
    @pytest.mark.parametrize("raw,expected", [
        ("Modified Question: What is it?", "What is it?"),
        ("What is it? Because reasons.", "What is it?"),
        ('"What is it?"', "What is it?"),
        ("What   is\tit?", "What is it?"),
        ("What is it?\nMore text", "What is it?"),
        ("no question here", "no question here"),
    ])
    def test_cleaning(self, raw, expected):
        assert _clean_sample(raw) == expected
