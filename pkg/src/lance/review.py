"""Model-as-judge scoring: rubric prompts, score parsing, dataset review."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from importlib import resources
from typing import Iterable

from .backend import Backend, PromptSpec
from .corpus import Dataset, SeedRecord
from .errors import (
    LanceError,
    ScoreOutOfRangeError,
    TooManyFailuresError,
    UnparseableReviewError,
)

log = logging.getLogger(__name__)

CRITERIA_CAPS = {
    "clarity": 2,
    "usefulness": 2,
    "challenge": 2,
    "safety": 1,
    "professionalism": 2,
    "guidance": 1,
}

TEMPLATE_VERSIONS = {
    "review": "v1",
    "better_instruction": "v1",
    "worse_response": "v1",
    "response": "v1",
}

REVIEW_SYSTEM_TEXT = "You are a strict, consistent reviewer of training data."
DEFAULT_MAX_FAILURE_FRACTION = 0.02
DEFAULT_REVIEW_TEMPERATURE = 0.0
DEFAULT_MAX_TOKENS = 1024

# A score line stands alone; `Score:` strings embedded mid-sentence never count.
_SCORE_LINE = re.compile(r"^[ \t]*Score:[ \t]*(-?\d+)[ \t]*$", re.MULTILINE)


def load_template(name: str) -> str:
    version = TEMPLATE_VERSIONS[name]
    return resources.files("lance.templates").joinpath(f"{name}.{version}.txt").read_text("utf-8")


@dataclass(frozen=True)
class Review:
    """A 0..10 judgement with its rationale and the verbatim model output."""

    total: int
    rationale: str
    raw: str
    criteria: dict[str, int] | None = None

    def __post_init__(self):
        if not 0 <= self.total <= 10:
            raise ValueError(f"total must be in 0..10, got {self.total}")
        if self.criteria is not None:
            if any(v < 0 for v in self.criteria.values()):
                raise ValueError("criterion scores must be >= 0")
            if sum(self.criteria.values()) != self.total:
                raise ValueError("criterion scores must sum to the total")


def build_pair_review_prompt(
    instruction: str,
    response: str,
    *,
    temperature: float = DEFAULT_REVIEW_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> PromptSpec:
    """Render the rubric prompt for an arbitrary instruction/response pair."""
    user_text = load_template("review").format(instruction=instruction, response=response)
    return PromptSpec(
        template_id="review",
        system_text=REVIEW_SYSTEM_TEXT,
        user_text=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )


def build_review_prompt(record: SeedRecord, **kwargs) -> PromptSpec:
    """Render the rubric prompt for a seed record."""
    return build_pair_review_prompt(record.instruction, record.response, **kwargs)


def parse_score(raw: str) -> Review:
    """Extract the total from the last standalone score line.

    The rationale is everything before that line; the raw output is kept
    verbatim for audit.  Models that restate the rubric mid-answer are
    tolerated because only the last match counts.
    """
    if not raw:
        raise UnparseableReviewError(raw)
    matches = list(_SCORE_LINE.finditer(raw))
    if not matches:
        raise UnparseableReviewError(raw)
    last = matches[-1]
    total = int(last.group(1))
    if not 0 <= total <= 10:
        raise ScoreOutOfRangeError(total, raw)
    rationale = raw[: last.start()].rstrip("\n")
    return Review(total=total, rationale=rationale, raw=raw)


@dataclass
class ReviewOutcome:
    """Per-key reviews plus the failures that were skipped, not retried."""

    reviews: dict[str, Review]
    failures: dict[str, str]


def review_pairs(
    backend: Backend,
    items: Iterable[tuple[str, str, str]],
    *,
    max_failure_fraction: float = 1.0,
    temperature: float = DEFAULT_REVIEW_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ReviewOutcome:
    """Review (key, instruction, response) items, one judgement per key.

    Duplicate keys are reviewed once.  Failures (backend or parse) are
    recorded and skipped; the run aborts only when their fraction of the
    unique items exceeds ``max_failure_fraction``.
    """
    reviews: dict[str, Review] = {}
    failures: dict[str, str] = {}
    seen: set[str] = set()
    total = 0
    for key, instruction, response in items:
        if key in seen:
            continue
        seen.add(key)
        total += 1
        spec = build_pair_review_prompt(
            instruction, response, temperature=temperature, max_tokens=max_tokens
        )
        try:
            reviews[key] = parse_score(backend.complete(spec))
        except LanceError as exc:
            failures[key] = f"{type(exc).__name__}: {exc}"
    if total and failures and len(failures) / total > max_failure_fraction:
        raise TooManyFailuresError(
            f"{len(failures)}/{total} reviews failed, above the {max_failure_fraction:.0%} budget"
        )
    return ReviewOutcome(reviews=reviews, failures=failures)


def review_dataset(
    backend: Backend,
    dataset: Dataset,
    *,
    max_failure_fraction: float = DEFAULT_MAX_FAILURE_FRACTION,
    temperature: float = DEFAULT_REVIEW_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> ReviewOutcome:
    """Review every seed record; failed records are excluded from branching."""
    if not len(dataset):
        raise ValueError("cannot review an empty dataset")
    outcome = review_pairs(
        backend,
        ((rec.id, rec.instruction, rec.response) for rec in dataset),
        max_failure_fraction=max_failure_fraction,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    if outcome.failures:
        log.warning("review skipped %d/%d records", len(outcome.failures), len(dataset))
    return outcome
