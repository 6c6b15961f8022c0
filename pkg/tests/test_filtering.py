import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lance.corpus import SeedRecord
from lance.errors import MissingReviewError
from lance.filtering import (
    FilterReport,
    PairCandidate,
    build_preference_pairs,
    length_filter,
    reward_gate_sft,
    rouge_l,
    similarity_filter,
    tokenize,
)
from lance.generate import Candidate
from lance.review import Review


def lcs_oracle(a, b):
    """Independent full-matrix LCS dynamic program."""
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[len(a)][len(b)]


def rouge_oracle(a, b):
    ta, tb = a.lower().split(), b.lower().split()
    if not ta or not tb:
        return 0.0
    lcs = lcs_oracle(ta, tb)
    if lcs == 0:
        return 0.0
    precision = lcs / len(tb)
    recall = lcs / len(ta)
    return 2.0 * precision * recall / (precision + recall)


def candidate(text, kind="new_instruction", parent="p", index=0):
    return Candidate(kind=kind, text=text, parent_id=parent, candidate_index=index, prompt_fingerprint="f")


def review(total):
    return Review(total=total, rationale="", raw=f"\nScore: {total}")


class TestRougeL:
    def test_identical(self):
        assert rouge_l("a b c", "a b c") == 1.0

    def test_disjoint(self):
        assert rouge_l("a b", "c d") == 0.0

    def test_partial_overlap_matches_oracle_value(self):
        # LCS("the cat sat", "the dog sat") = 2 tokens, so P = R = 2/3.
        expected = rouge_oracle("the cat sat", "the dog sat")
        assert expected == pytest.approx(2 / 3)
        assert rouge_l("the cat sat", "the dog sat") == expected

    def test_empty_inputs(self):
        assert rouge_l("", "a") == 0.0
        assert rouge_l("a", "") == 0.0
        assert rouge_l("", "") == 0.0

    def test_case_folding(self):
        assert rouge_l("The Cat", "the cat") == 1.0


token_texts = st.lists(st.sampled_from(["v0", "v1", "v2", "v3", "v4"]), max_size=20).map(" ".join)


@settings(max_examples=300, deadline=None)
@given(token_texts, token_texts)
def test_rouge_properties_against_oracle(a, b):
    score = rouge_l(a, b)
    assert score == rouge_oracle(a, b)
    assert score == rouge_l(b, a)
    assert 0.0 <= score <= 1.0
    if tokenize(a):
        assert rouge_l(a, a) == 1.0


class TestLengthFilter:
    def test_too_short_dropped(self):
        assert not length_filter(candidate("two tokens"), (8, 2048))

    def test_lower_boundary_inclusive(self):
        assert length_filter(candidate("exactly three tokens"), (3, 512))

    def test_upper_boundary(self):
        long_text = " ".join(["tok"] * 2049)
        assert not length_filter(candidate(long_text), (8, 2048))
        assert length_filter(candidate(" ".join(["tok"] * 2048)), (8, 2048))

    def test_invalid_bounds(self):
        with pytest.raises(ValueError):
            length_filter(candidate("x y z"), (5, 5))


class TestSimilarityFilter:
    def test_identical_to_pool_dropped(self):
        kept, report = similarity_filter([candidate("the same text")], ["the same text"], 0.7)
        assert not kept
        assert report.dropped_similarity == 1

    def test_empty_pool_keeps_everything(self):
        cands = [candidate("alpha beta"), candidate("gamma delta")]
        kept, report = similarity_filter(cands, [], 0.7)
        assert kept == cands
        assert report.kept_count == 2

    def test_near_duplicate_pair_first_kept_second_dropped(self):
        first = candidate("list the steps to bake sourdough bread at home")
        second = candidate("list the steps to bake sourdough bread at home today")
        assert rouge_oracle(first.text, second.text) >= 0.7
        kept, report = similarity_filter([first, second], [], 0.7)
        assert kept == [first]
        assert report.reasons[second.cid] == "similarity"

    def test_scan_order_is_deterministic(self):
        texts = [
            "bake rye bread with a slow cold proof",
            "tune a ukulele using harmonic intervals",
            "plan a three day alpine hiking route",
            "debug a flaky integration test suite",
            "sketch a perspective grid for interiors",
        ]
        cands = [candidate(text) for text in texts]
        kept1, _ = similarity_filter(cands, [], 0.7)
        kept2, _ = similarity_filter(list(cands), [], 0.7)
        assert kept1 == kept2 == cands

    def test_threshold_validation(self):
        with pytest.raises(ValueError):
            similarity_filter([], [], 0.0)

    def test_report_reconciles(self):
        cands = [candidate("a b c d e f g h"), candidate("a b c d e f g h"), candidate("z y x w v u t s")]
        kept, report = similarity_filter(cands, [], 0.7)
        assert report.input_count == 3
        assert report.kept_count + report.dropped_similarity == 3


class TestRewardGate:
    def _pair(self, idx=0, text="resp"):
        return PairCandidate(instruction=f"instruction {idx}", response=text, parent_id="p", candidate_index=idx)

    def test_strictly_above_kept(self):
        pair = self._pair()
        kept = reward_gate_sft([pair], {pair.id: review(7)}, 6, iteration=0)
        assert len(kept) == 1
        assert kept[0].reward == 7

    def test_equal_to_threshold_dropped(self):
        pair = self._pair()
        assert reward_gate_sft([pair], {pair.id: review(6)}, 6, iteration=0) == []

    def test_enumerated_scores(self):
        pairs = [self._pair(i, f"resp {i}") for i in range(10)]
        reviews = {p.id: review(i) for i, p in enumerate(pairs)}
        kept = reward_gate_sft(pairs, reviews, 6, iteration=1)
        assert sorted(e.reward for e in kept) == [7, 8, 9]
        assert all(e.iteration == 1 for e in kept)

    def test_missing_review(self):
        with pytest.raises(MissingReviewError):
            reward_gate_sft([self._pair()], {}, 6, iteration=0)


class TestPreferencePairs:
    def _record(self):
        return SeedRecord(instruction="inst text", response="original good response text")

    def test_original_preferred(self):
        record = self._record()
        flawed = candidate("a clearly flawed response", kind="flawed_response", parent=record.id)
        pairs = build_preference_pairs((record, review(8)), [(flawed, review(3))], 1, iteration=0)
        assert len(pairs) == 1
        pair = pairs[0]
        assert pair.preferred == record.response
        assert (pair.reward_w, pair.reward_l) == (8, 3)
        assert pair.parent_id == record.id

    def test_flawed_preferred_when_rewards_say_so(self):
        record = self._record()
        flawed = candidate("surprisingly better response", kind="flawed_response", parent=record.id)
        pairs = build_preference_pairs((record, review(4)), [(flawed, review(6))], 1, iteration=0)
        assert pairs[0].preferred == flawed.text
        assert pairs[0].dispreferred == record.response
        assert (pairs[0].reward_w, pairs[0].reward_l) == (6, 4)

    def test_tie_emits_nothing(self):
        record = self._record()
        flawed = candidate("tied response", kind="flawed_response", parent=record.id)
        assert build_preference_pairs((record, review(5)), [(flawed, review(5))], 1, iteration=0) == []

    def test_min_margin_respected(self):
        record = self._record()
        flawed = candidate("close response", kind="flawed_response", parent=record.id)
        assert build_preference_pairs((record, review(6)), [(flawed, review(5))], 2, iteration=0) == []
        assert len(build_preference_pairs((record, review(7)), [(flawed, review(5))], 2, iteration=0)) == 1

    def test_min_margin_validation(self):
        with pytest.raises(ValueError):
            build_preference_pairs((self._record(), review(5)), [], 0, iteration=0)


class TestFilterReport:
    def test_validate_catches_mismatch(self):
        report = FilterReport(input_count=3, kept_count=1)
        with pytest.raises(ValueError):
            report.validate()
        report.dropped_length = 2
        report.validate()
