"""Reward-based branching and few-shot candidate generation."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

from .backend import Backend, PromptSpec
from .corpus import SeedRecord, record_id
from .errors import AllEmptyError, LanceError
from .review import Review, load_template

log = logging.getLogger(__name__)

ARM_HIGH = "high"
ARM_LOW = "low"

KIND_NEW_INSTRUCTION = "new_instruction"
KIND_NEW_RESPONSE = "new_response"
KIND_FLAWED_RESPONSE = "flawed_response"
CANDIDATE_KINDS = (KIND_NEW_INSTRUCTION, KIND_NEW_RESPONSE, KIND_FLAWED_RESPONSE)

DEFAULT_GENERATE_TEMPERATURE = 1.0
DEFAULT_MAX_TOKENS = 1024
GENERATE_SYSTEM_TEXT = "You write training data for language models."


@dataclass(frozen=True)
class BranchDecision:
    """Which arm a reviewed record feeds: preference (high) or instruction (low)."""

    record_id: str
    review_total: int
    threshold: int
    arm: str

    def __post_init__(self):
        expected = ARM_HIGH if self.review_total >= self.threshold else ARM_LOW
        if self.arm != expected:
            raise ValueError(f"arm {self.arm!r} inconsistent with total/threshold")


def branch(review: Review, threshold: int, record_id: str = "") -> BranchDecision:
    """Route by the inclusive rule: total >= threshold goes to the high arm."""
    if not 0 <= threshold <= 10:
        raise ValueError("threshold must be in 0..10")
    arm = ARM_HIGH if review.total >= threshold else ARM_LOW
    return BranchDecision(record_id=record_id, review_total=review.total, threshold=threshold, arm=arm)


@dataclass(frozen=True)
class Candidate:
    """One generated text with its provenance."""

    kind: str
    text: str
    parent_id: str
    candidate_index: int
    prompt_fingerprint: str

    def __post_init__(self):
        if self.kind not in CANDIDATE_KINDS:
            raise ValueError(f"unknown candidate kind {self.kind!r}")
        if not self.text:
            raise ValueError("candidate text must be non-empty")
        if self.candidate_index < 0:
            raise ValueError("candidate_index must be >= 0")

    @cached_property
    def cid(self) -> str:
        """Content id; stable across runs for identical provenance and text."""
        return record_id(self.kind, self.parent_id, self.text)

    def to_json_dict(self) -> dict:
        return {
            "id": self.cid,
            "kind": self.kind,
            "text": self.text,
            "parent_id": self.parent_id,
            "candidate_index": self.candidate_index,
            "prompt_fingerprint": self.prompt_fingerprint,
        }


def _prompt_fingerprint(spec: PromptSpec) -> str:
    blob = f"{spec.template_id}\x1f{spec.system_text}\x1f{spec.user_text}"
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def _render_exemplars(exemplars: Sequence[SeedRecord]) -> str:
    blocks = []
    for rec in exemplars:
        blocks.append(
            "<<<EXAMPLE\n"
            f"Instruction: {rec.instruction}\n"
            f"Response: {rec.response}\n"
            "EXAMPLE>>>\n"
        )
    return "\n".join(blocks)


def _collect(spec: PromptSpec, samples: Sequence[str], kind: str, parent_id: str) -> list[Candidate]:
    fingerprint = _prompt_fingerprint(spec)
    candidates = []
    for index, sample in enumerate(samples):
        text = sample.strip()
        if not text:
            continue
        candidates.append(
            Candidate(
                kind=kind,
                text=text,
                parent_id=parent_id,
                candidate_index=index,
                prompt_fingerprint=fingerprint,
            )
        )
    return candidates


def generate_better_instructions(
    backend: Backend,
    record: SeedRecord,
    k: int,
    exemplars: Sequence[SeedRecord],
    *,
    temperature: float = DEFAULT_GENERATE_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[Candidate]:
    """Sample k replacement instructions for a low-scoring record.

    Exemplars (high-scoring seeds, excluding the record itself) are shown
    few-shot before the weak item.  Whitespace-only samples are dropped;
    candidate indices keep their pre-dispatch positions.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    user_text = load_template("better_instruction").format(
        exemplars=_render_exemplars(exemplars),
        instruction=record.instruction,
        response=record.response,
    )
    spec = PromptSpec(
        template_id="better_instruction",
        system_text=GENERATE_SYSTEM_TEXT,
        user_text=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    candidates = _collect(spec, backend.sample_k(spec, k), KIND_NEW_INSTRUCTION, record.id)
    if not candidates:
        raise AllEmptyError(f"all {k} instruction samples for {record.id} were empty")
    return candidates


@dataclass
class SampleResponsesResult:
    candidates: list[Candidate] = field(default_factory=list)
    failures: list[tuple[str, str]] = field(default_factory=list)  # (instruction cid, error)


def sample_responses(
    backend: Backend,
    instructions: Sequence[Candidate],
    k: int,
    *,
    temperature: float = DEFAULT_GENERATE_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> SampleResponsesResult:
    """Sample k responses per new instruction.

    Each response candidate's parent is the instruction candidate that
    produced it, keeping the seed -> instruction -> response provenance
    chain walkable.  A failed instruction is recorded and skipped; the
    others proceed.
    """
    if not instructions:
        raise ValueError("instructions must be non-empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    result = SampleResponsesResult()
    for instruction in instructions:
        user_text = load_template("response").format(instruction=instruction.text)
        spec = PromptSpec(
            template_id="response",
            system_text=GENERATE_SYSTEM_TEXT,
            user_text=user_text,
            temperature=temperature,
            max_tokens=max_tokens,
        )
        try:
            samples = backend.sample_k(spec, k)
        except LanceError as exc:
            log.warning("response sampling failed for %s: %s", instruction.cid, exc)
            result.failures.append((instruction.cid, f"{type(exc).__name__}: {exc}"))
            continue
        result.candidates.extend(_collect(spec, samples, KIND_NEW_RESPONSE, instruction.cid))
    return result


def generate_worse_responses(
    backend: Backend,
    record: SeedRecord,
    k: int,
    *,
    temperature: float = DEFAULT_GENERATE_TEMPERATURE,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> list[Candidate]:
    """Sample k deliberately flawed responses for a high-scoring record.

    Samples identical to the original response are rejected outright; a
    flawed side that equals the preferred side would poison a pair.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    user_text = load_template("worse_response").format(
        instruction=record.instruction, response=record.response
    )
    spec = PromptSpec(
        template_id="worse_response",
        system_text=GENERATE_SYSTEM_TEXT,
        user_text=user_text,
        temperature=temperature,
        max_tokens=max_tokens,
    )
    samples = backend.sample_k(spec, k)
    if all(not sample.strip() for sample in samples):
        raise AllEmptyError(f"all {k} flawed samples for {record.id} were empty")
    collected = _collect(spec, samples, KIND_FLAWED_RESPONSE, record.id)
    return [cand for cand in collected if cand.text != record.response]
