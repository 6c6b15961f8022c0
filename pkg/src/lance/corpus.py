"""On-disk and in-memory data model: seeds, generated datasets, manifests.

Datasets are canonically ordered and deduplicated by content id so that any
two runs over the same inputs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    EmptyInputError,
    KindMismatchError,
    MalformedRecordError,
    SchemaError,
)

log = logging.getLogger(__name__)

SOURCE_INSTRUCTION = "instruction-seed"
SOURCE_REVIEW = "review-seed"
SOURCES = (SOURCE_INSTRUCTION, SOURCE_REVIEW)

KIND_SEED = "seed"
KIND_SFT = "sft"
KIND_PREFERENCE = "preference"
KINDS = (KIND_SEED, KIND_SFT, KIND_PREFERENCE)

# Unit separator keeps the hash injective over the joined texts.
_SEP = "\n\x1f\n"


def record_id(*texts: str) -> str:
    """Stable content id: sha256 over the UTF-8 texts joined by a separator."""
    return hashlib.sha256(_SEP.join(texts).encode("utf-8")).hexdigest()


def _require_text(value, name: str) -> str:
    if not isinstance(value, str) or not value.strip():
        raise ValueError(f"{name} must be non-empty text")
    return value.strip()


def _require_score(value, name: str) -> int:
    if not isinstance(value, int) or isinstance(value, bool) or not 0 <= value <= 10:
        raise ValueError(f"{name} must be an integer in 0..10, got {value!r}")
    return value


@dataclass(frozen=True)
class SeedRecord:
    """One instruction/response seed item, optionally human scored."""

    instruction: str
    response: str
    source: str = SOURCE_INSTRUCTION
    human_score: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "instruction", _require_text(self.instruction, "instruction"))
        object.__setattr__(self, "response", _require_text(self.response, "response"))
        if self.source not in SOURCES:
            raise ValueError(f"unknown seed source {self.source!r}")
        if self.source == SOURCE_REVIEW:
            if self.human_score is None:
                raise ValueError("review-seed records require a human_score")
            _require_score(self.human_score, "human_score")
        elif self.human_score is not None:
            raise ValueError("instruction-seed records must not carry a human_score")

    @cached_property
    def id(self) -> str:
        return record_id(self.instruction, self.response)

    @property
    def sort_key(self) -> tuple:
        return (0, self.id, 0, "")


@dataclass(frozen=True)
class SftExample:
    """One generated instruction/response pair admitted to the SFT dataset."""

    instruction: str
    response: str
    reward: int
    iteration: int
    parent_id: str
    candidate_index: int

    def __post_init__(self):
        object.__setattr__(self, "instruction", _require_text(self.instruction, "instruction"))
        object.__setattr__(self, "response", _require_text(self.response, "response"))
        _require_score(self.reward, "reward")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")
        if self.candidate_index < 0:
            raise ValueError("candidate_index must be >= 0")

    @cached_property
    def id(self) -> str:
        return record_id(self.instruction, self.response)

    @property
    def sort_key(self) -> tuple:
        return (self.iteration, self.parent_id, self.candidate_index, self.id)


@dataclass(frozen=True)
class PreferenceExample:
    """An (instruction, preferred, dispreferred) triple with reward metadata."""

    instruction: str
    preferred: str
    dispreferred: str
    reward_w: int
    reward_l: int
    iteration: int
    parent_id: str

    def __post_init__(self):
        object.__setattr__(self, "instruction", _require_text(self.instruction, "instruction"))
        object.__setattr__(self, "preferred", _require_text(self.preferred, "preferred"))
        object.__setattr__(self, "dispreferred", _require_text(self.dispreferred, "dispreferred"))
        _require_score(self.reward_w, "reward_w")
        _require_score(self.reward_l, "reward_l")
        if self.reward_w <= self.reward_l:
            raise ValueError("reward_w must be strictly greater than reward_l")
        if self.preferred == self.dispreferred:
            raise ValueError("preferred and dispreferred must differ")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    @cached_property
    def id(self) -> str:
        return record_id(self.instruction, self.preferred, self.dispreferred)

    @property
    def sort_key(self) -> tuple:
        return (self.iteration, self.parent_id, 0, self.id)


RECORD_TYPES = {
    KIND_SEED: SeedRecord,
    KIND_SFT: SftExample,
    KIND_PREFERENCE: PreferenceExample,
}


@dataclass
class Dataset:
    """A deduplicated, canonically ordered collection of one record kind."""

    kind: str
    records: list
    provenance: list[str] = field(default_factory=list)

    @classmethod
    def build(cls, kind: str, records: Iterable, provenance: Iterable[str] = ()) -> "Dataset":
        """Deduplicate by id (first wins) and sort into canonical order."""
        if kind not in KINDS:
            raise ValueError(f"unknown dataset kind {kind!r}")
        rtype = RECORD_TYPES[kind]
        seen: dict[str, object] = {}
        for rec in records:
            if not isinstance(rec, rtype):
                raise TypeError(f"{kind} dataset cannot hold {type(rec).__name__}")
            seen.setdefault(rec.id, rec)
        ordered = sorted(seen.values(), key=lambda r: r.sort_key)
        return cls(kind=kind, records=ordered, provenance=list(dict.fromkeys(provenance)))

    def ids(self) -> set[str]:
        return {r.id for r in self.records}

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def merge_datasets(a: Dataset, b: Dataset) -> Dataset:
    """Id-level union of two datasets of the same kind."""
    if a.kind != b.kind:
        raise KindMismatchError(f"cannot merge {a.kind!r} with {b.kind!r}")
    return Dataset.build(a.kind, list(a.records) + list(b.records), list(a.provenance) + list(b.provenance))


def ingest_seed(
    raw_records: list[Mapping],
    model_scores: Mapping[str, int] | None = None,
    tolerance: int = 0,
) -> Dataset:
    """Validate raw seed records and apply the score-consistency filter.

    Instruction-seed records pass through unconditionally.  When a model
    score map is supplied, a review-seed record is retained only if its
    model score and human score agree within ``tolerance``; records whose
    id is absent from the map cannot be checked and are dropped.  Without
    a map, review-seed records pass through.
    """
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    if not raw_records:
        raise EmptyInputError("no seed records given")

    allowed = {"instruction", "response", "source", "human_score", "id"}
    kept: list[SeedRecord] = []
    dropped_inconsistent = 0
    for idx, raw in enumerate(raw_records):
        unknown = set(raw) - allowed
        if unknown:
            raise MalformedRecordError(idx, f"unknown fields {sorted(unknown)}")
        try:
            rec = SeedRecord(
                instruction=raw.get("instruction", ""),
                response=raw.get("response", ""),
                source=raw.get("source", SOURCE_INSTRUCTION),
                human_score=raw.get("human_score"),
            )
        except ValueError as exc:
            raise MalformedRecordError(idx, str(exc)) from exc
        if rec.source == SOURCE_REVIEW and model_scores is not None:
            model_score = model_scores.get(rec.id)
            if model_score is None or abs(model_score - rec.human_score) > tolerance:
                dropped_inconsistent += 1
                continue
        kept.append(rec)

    dataset = Dataset.build(KIND_SEED, kept)
    duplicates = len(kept) - len(dataset)
    log.info(
        "ingested %d raw records: %d kept, %d inconsistent review seeds dropped, %d duplicates collapsed",
        len(raw_records), len(dataset), dropped_inconsistent, duplicates,
    )
    if not len(dataset):
        raise EmptyInputError("no seed records survived ingestion")
    return dataset


# ---------------------------------------------------------------------------
# JSONL persistence

_SCHEMAS: dict[str, tuple[tuple[str, ...], tuple[str, ...]]] = {
    # kind -> (required fields, optional fields)
    KIND_SEED: (("id", "instruction", "response", "source"), ("human_score",)),
    KIND_SFT: (("id", "instruction", "response", "reward", "iteration", "parent_id", "candidate_index"), ()),
    KIND_PREFERENCE: (
        ("id", "instruction", "preferred", "dispreferred", "reward_w", "reward_l", "iteration", "parent_id"),
        (),
    ),
}


def _record_to_json(kind: str, rec) -> dict:
    if kind == KIND_SEED:
        doc = {"id": rec.id, "instruction": rec.instruction, "response": rec.response, "source": rec.source}
        if rec.human_score is not None:
            doc["human_score"] = rec.human_score
        return doc
    if kind == KIND_SFT:
        return {
            "id": rec.id,
            "instruction": rec.instruction,
            "response": rec.response,
            "reward": rec.reward,
            "iteration": rec.iteration,
            "parent_id": rec.parent_id,
            "candidate_index": rec.candidate_index,
        }
    return {
        "id": rec.id,
        "instruction": rec.instruction,
        "preferred": rec.preferred,
        "dispreferred": rec.dispreferred,
        "reward_w": rec.reward_w,
        "reward_l": rec.reward_l,
        "iteration": rec.iteration,
        "parent_id": rec.parent_id,
    }


def _record_from_json(kind: str, doc: dict, line: int):
    required, optional = _SCHEMAS[kind]
    for name in required:
        if name not in doc:
            raise SchemaError("missing field", line=line, field=name)
    for name in doc:
        if name not in required and name not in optional:
            raise SchemaError("unknown field", line=line, field=name)
    body = {k: v for k, v in doc.items() if k != "id"}
    try:
        rec = RECORD_TYPES[kind](**body)
    except (ValueError, TypeError) as exc:
        raise SchemaError(str(exc), line=line) from exc
    if rec.id != doc["id"]:
        raise SchemaError("stored id does not match record content", line=line, field="id")
    return rec


def write_jsonl(dataset: Dataset, path: str | os.PathLike) -> None:
    """Write one record per line; parent directory must already exist."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in dataset.records:
            fh.write(json.dumps(_record_to_json(dataset.kind, rec), ensure_ascii=False))
            fh.write("\n")
    os.replace(tmp, path)


def read_jsonl(path: str | os.PathLike, kind: str) -> Dataset:
    """Read a dataset back; unknown fields and id mismatches are rejected."""
    if kind not in KINDS:
        raise KindMismatchError(f"unknown dataset kind {kind!r}")
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line=line_no) from exc
            if not isinstance(doc, dict):
                raise SchemaError("line is not a JSON object", line=line_no)
            records.append(_record_from_json(kind, doc, line_no))
    return Dataset.build(kind, records)


def load_raw_seed_records(path: str | os.PathLike) -> list[dict]:
    """Read raw (pre-ingestion) seed records; the id field is optional."""
    rows: list[dict] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc}", line=line_no) from exc
            if not isinstance(doc, dict):
                raise SchemaError("line is not a JSON object", line=line_no)
            rows.append(doc)
    return rows


# ---------------------------------------------------------------------------
# iteration manifests


@dataclass
class ManifestCounts:
    reviewed: int = 0
    branched_high: int = 0
    branched_low: int = 0
    sft_kept: int = 0
    sft_dropped_by_filter: int = 0
    pref_kept: int = 0
    pref_dropped: int = 0

    def validate(self) -> None:
        if self.branched_high + self.branched_low != self.reviewed:
            raise ValueError("branched_high + branched_low must equal reviewed")
        for name, value in self.__dict__.items():
            if value < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class IterationManifest:
    """Immutable record of one completed iteration."""

    t: int
    counts: ManifestCounts
    dataset_paths: dict[str, str]
    config_hash: str
    rng_seed: int
    backend_fingerprint: str
    template_versions: dict[str, str] = field(default_factory=dict)
    review_failures: list[str] = field(default_factory=list)
    generation_failures: list[str] = field(default_factory=list)
    trainer_steps: dict[str, int] = field(default_factory=dict)
    cumulative_counts: dict[str, int] = field(default_factory=dict)
    metric: float | None = None
    complete: bool = False

    def to_json_dict(self) -> dict:
        return {
            "t": self.t,
            "counts": dict(self.counts.__dict__),
            "dataset_paths": dict(self.dataset_paths),
            "config_hash": self.config_hash,
            "rng_seed": self.rng_seed,
            "backend_fingerprint": self.backend_fingerprint,
            "template_versions": dict(self.template_versions),
            "review_failures": list(self.review_failures),
            "generation_failures": list(self.generation_failures),
            "trainer_steps": dict(self.trainer_steps),
            "cumulative_counts": dict(self.cumulative_counts),
            "metric": self.metric,
            "complete": self.complete,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "IterationManifest":
        counts = ManifestCounts(**doc["counts"])
        counts.validate()
        return cls(
            t=doc["t"],
            counts=counts,
            dataset_paths=dict(doc["dataset_paths"]),
            config_hash=doc["config_hash"],
            rng_seed=doc["rng_seed"],
            backend_fingerprint=doc["backend_fingerprint"],
            template_versions=dict(doc.get("template_versions", {})),
            review_failures=list(doc.get("review_failures", [])),
            generation_failures=list(doc.get("generation_failures", [])),
            trainer_steps=dict(doc.get("trainer_steps", {})),
            cumulative_counts=dict(doc.get("cumulative_counts", {})),
            metric=doc.get("metric"),
            complete=doc.get("complete", False),
        )


def manifest_path(out_dir: str | os.PathLike, t: int) -> Path:
    return Path(out_dir) / f"manifest_t{t}.json"


def write_manifest(manifest: IterationManifest, out_dir: str | os.PathLike) -> Path:
    """Atomically persist a manifest (write to a temp file, then rename)."""
    manifest.counts.validate()
    path = manifest_path(out_dir, manifest.t)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json_dict(), fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def read_manifest(path: str | os.PathLike) -> IterationManifest:
    with open(path, "r", encoding="utf-8") as fh:
        return IterationManifest.from_json_dict(json.load(fh))


def sft_as_seed(dataset: Dataset) -> Dataset:
    """View accepted SFT examples as instruction-seed records (merged-seed mode)."""
    if dataset.kind != KIND_SFT:
        raise KindMismatchError("expected an sft dataset")
    records = [SeedRecord(instruction=e.instruction, response=e.response) for e in dataset]
    return Dataset.build(KIND_SEED, records, dataset.provenance)
