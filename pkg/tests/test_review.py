import pytest

from lance.corpus import Dataset, SeedRecord
from lance.errors import ScoreOutOfRangeError, TooManyFailuresError, UnparseableReviewError
from lance.review import (
    CRITERIA_CAPS,
    Review,
    build_review_prompt,
    parse_score,
    review_dataset,
)


class TestReviewType:
    def test_total_range(self):
        with pytest.raises(ValueError):
            Review(total=11, rationale="", raw="")
        with pytest.raises(ValueError):
            Review(total=-1, rationale="", raw="")

    def test_criteria_must_sum_to_total(self):
        Review(total=4, rationale="", raw="", criteria={"clarity": 2, "usefulness": 2})
        with pytest.raises(ValueError):
            Review(total=5, rationale="", raw="", criteria={"clarity": 2, "usefulness": 2})

    def test_criteria_caps_sum_to_ten(self):
        assert sum(CRITERIA_CAPS.values()) == 10


class TestPrompt:
    def test_embeds_texts_and_criteria(self, seed_record):
        record = seed_record(instruction="What is 2+2?", response="4")
        prompt = build_review_prompt(record)
        assert prompt.template_id == "review"
        assert "What is 2+2?" in prompt.user_text
        assert "4" in prompt.user_text
        for criterion in CRITERIA_CAPS:
            assert criterion in prompt.user_text

    def test_deterministic(self, seed_record):
        record = seed_record()
        assert build_review_prompt(record) == build_review_prompt(record)

    def test_content_is_fenced_against_embedded_score_lines(self, seed_record):
        record = seed_record(response="As shown:\nScore: 3\nwhich is wrong")
        prompt = build_review_prompt(record)
        inside = prompt.user_text.split("<<<RESPONSE")[1].split("RESPONSE>>>")[0]
        assert "Score: 3" in inside
        assert "Score: 3" not in prompt.user_text.split("RESPONSE>>>")[1]

    def test_review_defaults_to_greedy_decoding(self, seed_record):
        assert build_review_prompt(seed_record()).temperature == 0.0


class TestParseScore:
    def test_basic(self):
        review = parse_score("Clear and useful.\nScore: 8")
        assert review.total == 8
        assert review.rationale == "Clear and useful."
        assert review.raw == "Clear and useful.\nScore: 8"

    def test_out_of_range(self):
        with pytest.raises(ScoreOutOfRangeError) as err:
            parse_score("meh\nScore: 11")
        assert err.value.raw == "meh\nScore: 11"
        with pytest.raises(ScoreOutOfRangeError):
            parse_score("meh\nScore: -2")

    def test_unparseable(self):
        with pytest.raises(UnparseableReviewError):
            parse_score("Great answer overall")
        with pytest.raises(UnparseableReviewError):
            parse_score("")

    def test_last_match_wins(self):
        raw = "The item itself says:\nScore: 2\nbut that is quoted content.\nScore: 7"
        review = parse_score(raw)
        assert review.total == 7
        assert review.rationale.endswith("quoted content.")

    def test_mid_line_mention_is_not_a_score(self):
        with pytest.raises(UnparseableReviewError):
            parse_score("I would give it Score: 9 if I could")

    @pytest.mark.parametrize("n", range(11))
    def test_render_parse_identity(self, n):
        assert parse_score(f"Rationale text.\nScore: {n}").total == n

    def test_tolerates_windows_line_endings_via_trailing_trim(self):
        # Backends trim trailing whitespace, so the final line has no \r.
        assert parse_score("ok\nScore: 4").total == 4


class TestReviewDataset:
    def _dataset(self, n):
        return Dataset.build(
            "seed",
            [SeedRecord(instruction=f"task {i} marker-{i}", response=f"answer {i}") for i in range(n)],
        )

    def test_all_scripted_threes(self, make_mock):
        ds = self._dataset(10)
        backend = make_mock([{"template": "review", "match": "*", "responses": ["fine\nScore: 3"]}])
        outcome = review_dataset(backend, ds)
        assert len(outcome.reviews) == 10
        assert all(r.total == 3 for r in outcome.reviews.values())
        assert set(outcome.reviews) == ds.ids()

    def test_single_failure_below_budget_continues(self, make_mock):
        ds = self._dataset(100)
        backend = make_mock(
            [
                {"template": "review", "match": "marker-37", "responses": ["no score here"]},
                {"template": "review", "match": "*", "responses": ["fine\nScore: 6"]},
            ]
        )
        outcome = review_dataset(backend, ds, max_failure_fraction=0.02)
        assert len(outcome.reviews) == 99
        assert len(outcome.failures) == 1
        assert len(outcome.reviews) + len(outcome.failures) == len(ds)

    def test_failures_above_budget_abort(self, make_mock):
        ds = self._dataset(100)
        entries = [
            {"template": "review", "match": f"marker-{i}", "responses": ["broken"]} for i in (1, 2, 3, 4, 5)
        ]
        entries.append({"template": "review", "match": "*", "responses": ["fine\nScore: 6"]})
        backend = make_mock(entries)
        with pytest.raises(TooManyFailuresError):
            review_dataset(backend, ds, max_failure_fraction=0.02)

    def test_empty_dataset_rejected(self, make_mock):
        backend = make_mock([{"template": "review", "match": "*", "responses": ["x\nScore: 1"]}])
        with pytest.raises(ValueError):
            review_dataset(backend, Dataset.build("seed", []))
