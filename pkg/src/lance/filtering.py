"""Candidate filtering and training-set assembly.

The filter pipeline is order-fixed: length, then similarity, then reward.
A candidate dropped at one stage is never scored at a later one.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import TYPE_CHECKING, Iterable, Mapping, Sequence

from .corpus import PreferenceExample, SeedRecord, SftExample, record_id
from .errors import MissingReviewError

if TYPE_CHECKING:
    from .generate import Candidate
    from .review import Review


def tokenize(text: str) -> list[str]:
    """Lowercased Unicode-whitespace split; shared by all text metrics."""
    return text.lower().split()


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    """Length of the longest common subsequence, two-row dynamic program."""
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        cur = [0] * (len(b) + 1)
        for j, tok_b in enumerate(b, start=1):
            if tok_a == tok_b:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(a: str, b: str) -> float:
    """LCS-based F-measure between two texts, in [0, 1].

    With L the LCS length over whitespace tokens, precision is L/|b|,
    recall is L/|a|, and the score is their harmonic mean.  Empty inputs
    and disjoint vocabularies score 0.  Symmetric in (a, b).
    """
    ta, tb = tokenize(a), tokenize(b)
    if not ta or not tb:
        return 0.0
    lcs = lcs_length(ta, tb)
    if lcs == 0:
        return 0.0
    precision = lcs / len(tb)
    recall = lcs / len(ta)
    return 2.0 * precision * recall / (precision + recall)


def token_count(text: str) -> int:
    return len(tokenize(text))


def length_filter(candidate: "Candidate", bounds: tuple[int, int]) -> bool:
    """Keep iff the candidate's token count lies within [min, max] inclusive."""
    lo, hi = bounds
    if lo >= hi:
        raise ValueError(f"length bounds must satisfy min < max, got {bounds}")
    return lo <= token_count(candidate.text) <= hi


@dataclass
class FilterReport:
    """Audit of one filter pass; kept plus all drops reconciles to the input."""

    input_count: int = 0
    dropped_length: int = 0
    dropped_similarity: int = 0
    dropped_reward: int = 0
    dropped_tie_or_margin: int = 0
    kept_count: int = 0
    reasons: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        total = (
            self.kept_count
            + self.dropped_length
            + self.dropped_similarity
            + self.dropped_reward
            + self.dropped_tie_or_margin
        )
        if total != self.input_count:
            raise ValueError(f"filter report does not reconcile: {total} != {self.input_count}")

    @property
    def total_dropped(self) -> int:
        return self.input_count - self.kept_count

    def to_json_dict(self) -> dict:
        return {
            "input_count": self.input_count,
            "dropped_length": self.dropped_length,
            "dropped_similarity": self.dropped_similarity,
            "dropped_reward": self.dropped_reward,
            "dropped_tie_or_margin": self.dropped_tie_or_margin,
            "kept_count": self.kept_count,
            "reasons": dict(sorted(self.reasons.items())),
        }


def _similar(a_text: str, b_text: str, a_counts: Counter, b_counts: Counter, threshold: float) -> bool:
    # Cheap exact upper bound first: LCS length cannot exceed the token
    # multiset overlap, so F <= 2*overlap/(|a|+|b|).
    overlap = sum((a_counts & b_counts).values())
    la, lb = sum(a_counts.values()), sum(b_counts.values())
    if la == 0 or lb == 0 or 2.0 * overlap / (la + lb) < threshold:
        return False
    return rouge_l(a_text, b_text) >= threshold


def similarity_filter(
    candidates: Sequence["Candidate"],
    pool: Iterable[str],
    threshold: float,
) -> tuple[list["Candidate"], FilterReport]:
    """Drop candidates too similar to the pool or to an earlier kept candidate.

    Candidates are scanned in the given order; a candidate is dropped iff
    its maximum ROUGE-L against the pool and the already-kept candidates
    is at or above the threshold.  Deterministic for a fixed scan order.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError("similarity threshold must be in (0, 1]")
    report = FilterReport(input_count=len(candidates))
    kept: list[Candidate] = []
    reference: list[tuple[str, Counter]] = [(text, Counter(tokenize(text))) for text in pool]
    for cand in candidates:
        counts = Counter(tokenize(cand.text))
        if any(_similar(cand.text, text, counts, other, threshold) for text, other in reference):
            report.dropped_similarity += 1
            report.reasons[cand.cid] = "similarity"
            continue
        kept.append(cand)
        reference.append((cand.text, counts))
    report.kept_count = len(kept)
    report.validate()
    return kept, report


@dataclass(frozen=True)
class PairCandidate:
    """A generated (instruction, response) pair awaiting the reward gate."""

    instruction: str
    response: str
    parent_id: str
    candidate_index: int

    @cached_property
    def id(self) -> str:
        return record_id(self.instruction, self.response)


def reward_gate_sft(
    candidates: Sequence[PairCandidate],
    reviews: Mapping[str, "Review"],
    threshold: int,
    iteration: int,
) -> list[SftExample]:
    """Admit pairs whose re-review total strictly exceeds the threshold.

    Note the asymmetry with branching: routing a record to the preference
    arm uses total >= threshold, but admission to the SFT dataset requires
    total > threshold.
    """
    kept: list[SftExample] = []
    for cand in candidates:
        review = reviews.get(cand.id)
        if review is None:
            raise MissingReviewError(f"no review for candidate pair {cand.id}")
        if review.total > threshold:
            kept.append(
                SftExample(
                    instruction=cand.instruction,
                    response=cand.response,
                    reward=review.total,
                    iteration=iteration,
                    parent_id=cand.parent_id,
                    candidate_index=cand.candidate_index,
                )
            )
    return kept


def build_preference_pairs(
    original: tuple[SeedRecord, "Review"],
    flawed: Sequence[tuple["Candidate", "Review"]],
    min_margin: int,
    iteration: int,
) -> list[PreferenceExample]:
    """Pair each flawed candidate against the original by reward.

    The higher-rewarded text becomes the preferred side regardless of
    which one was generated.  Pairs closer than ``min_margin`` (including
    exact ties) emit nothing.
    """
    if min_margin < 1:
        raise ValueError("min_margin must be >= 1")
    record, original_review = original
    pairs: list[PreferenceExample] = []
    for cand, cand_review in flawed:
        margin = original_review.total - cand_review.total
        if abs(margin) < min_margin:
            continue
        if margin > 0:
            preferred, dispreferred = record.response, cand.text
            reward_w, reward_l = original_review.total, cand_review.total
        else:
            preferred, dispreferred = cand.text, record.response
            reward_w, reward_l = cand_review.total, original_review.total
        pairs.append(
            PreferenceExample(
                instruction=record.instruction,
                preferred=preferred,
                dispreferred=dispreferred,
                reward_w=reward_w,
                reward_l=reward_l,
                iteration=iteration,
                parent_id=record.id,
            )
        )
    return pairs
