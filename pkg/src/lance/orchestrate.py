"""The outer self-evolution loop.

Each iteration reviews the seed data, branches on the reward threshold,
generates and filters candidates, folds the survivors into the cumulative
datasets, trains the toy model (SFT then DPO), and writes an immutable
manifest.  Runs are deterministic under the mock backend: identical
configs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import re
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .backend import Backend, HttpBackend, load_mock
from .corpus import (
    KIND_PREFERENCE,
    KIND_SFT,
    Dataset,
    IterationManifest,
    ManifestCounts,
    ingest_seed,
    load_raw_seed_records,
    manifest_path,
    merge_datasets,
    read_jsonl,
    read_manifest,
    sft_as_seed,
    write_jsonl,
    write_manifest,
)
from .errors import ConfigError, LockedError
from .filtering import FilterReport, PairCandidate, build_preference_pairs, length_filter, reward_gate_sft, similarity_filter
from .generate import (
    ARM_HIGH,
    BranchDecision,
    Candidate,
    branch,
    generate_better_instructions,
    generate_worse_responses,
    sample_responses,
)
from .review import TEMPLATE_VERSIONS, ReviewOutcome, review_dataset, review_pairs
from .toytrain import (
    ToyModelParams,
    TrainConfig,
    build_vocab,
    encode_pair,
    encode_triple,
    extend_params,
    load_params,
    nll_loss,
    save_params,
    train_dpo,
    train_sft,
    uniform_params,
    write_loss_curve,
)

log = logging.getLogger(__name__)

SEED_MODE_FIXED = "fixed_seed0"
SEED_MODE_MERGED = "merged_seed"
SEED_MODES = (SEED_MODE_FIXED, SEED_MODE_MERGED)

GATE_CONTINUE = "continue"
GATE_STOP = "stop"

METRIC_TOY_NLL = "toy_nll"
METRIC_EXTERNAL = "external"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class Thresholds:
    instruction_length: tuple[int, int] = (3, 512)
    response_length: tuple[int, int] = (8, 2048)
    similarity: float = 0.7
    min_margin: int = 1
    tolerance: int = 0
    max_review_failures: float = 0.02
    similarity_pool_cap: int = 10_000

    def validate(self) -> None:
        for bounds in (self.instruction_length, self.response_length):
            if bounds[0] >= bounds[1] or bounds[0] < 1:
                raise ConfigError(f"bad length bounds {bounds}")
        if not 0.0 < self.similarity <= 1.0:
            raise ConfigError("similarity threshold must be in (0, 1]")
        if self.min_margin < 1:
            raise ConfigError("min_margin must be >= 1")
        if self.tolerance < 0:
            raise ConfigError("tolerance must be >= 0")
        if not 0.0 <= self.max_review_failures <= 1.0:
            raise ConfigError("max_review_failures must be a fraction")
        if self.similarity_pool_cap < 1:
            raise ConfigError("similarity_pool_cap must be >= 1")


@dataclass(frozen=True)
class BackendSettings:
    kind: str = "mock"
    script_path: str | None = None
    base_url: str | None = None
    model: str | None = None
    temperature_review: float = 0.0
    temperature_generate: float = 1.0
    max_tokens: int = 1024
    max_attempts: int = 3
    base_delay: float = 0.5
    in_flight: int = 4
    timeout: float = 30.0

    def validate(self) -> None:
        if self.kind == "mock":
            if not self.script_path:
                raise ConfigError("mock backend requires backend.script_path")
        elif self.kind == "http":
            if not self.base_url or not self.model:
                raise ConfigError("http backend requires backend.base_url and backend.model")
        else:
            raise ConfigError(f"unknown backend kind {self.kind!r}")


@dataclass(frozen=True)
class MetricSettings:
    source: str = METRIC_TOY_NLL
    external: tuple[float, ...] | None = None
    holdout_fraction: float = 0.2

    def validate(self) -> None:
        if self.source not in (METRIC_TOY_NLL, METRIC_EXTERNAL):
            raise ConfigError(f"unknown metric source {self.source!r}")
        if self.source == METRIC_EXTERNAL and not self.external:
            raise ConfigError("external metric source requires metric.external values")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must be in [0, 1)")


_DEFAULT_DOC: dict = {
    "V": 6,
    "K": 4,
    "N": 3,
    "seed_path": "seeds.jsonl",
    "model_scores_path": None,
    "seed_mode": SEED_MODE_FIXED,
    "skip_sft": False,
    "skip_dpo": False,
    "rng_seed": 17,
    "patience": 0,
    "thresholds": {
        "instruction_length": [3, 512],
        "response_length": [8, 2048],
        "similarity": 0.7,
        "min_margin": 1,
        "tolerance": 0,
        "max_review_failures": 0.02,
        "similarity_pool_cap": 10_000,
    },
    "backend": {
        "kind": "mock",
        "script_path": "mock_script.json",
        "base_url": None,
        "model": None,
        "temperature_review": 0.0,
        "temperature_generate": 1.0,
        "max_tokens": 1024,
        "max_attempts": 3,
        "base_delay": 0.5,
        "in_flight": 4,
        "timeout": 30.0,
    },
    "trainer": {"beta": 0.1, "learning_rate": 0.5, "steps": 200, "rng_seed": 0},
    "metric": {"source": METRIC_TOY_NLL, "external": None, "holdout_fraction": 0.2},
}


def default_config_doc() -> dict:
    return json.loads(json.dumps(_DEFAULT_DOC))


def _merge_doc(base: dict, override: dict, path: str = "") -> dict:
    merged = dict(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge_doc(base[key], value, path + key + ".")
        else:
            merged[key] = value
    return merged


def apply_overrides(doc: dict, overrides: Sequence[str]) -> dict:
    """Apply repeatable KEY=VALUE overrides; keys are dotted config paths."""
    doc = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        key, _, raw_value = item.partition("=")
        try:
            value = json.loads(raw_value)
        except json.JSONDecodeError:
            value = raw_value
        target = doc
        parts = key.split(".")
        for part in parts[:-1]:
            if part not in target or not isinstance(target[part], dict):
                raise ConfigError(f"override references unknown config key {key!r}")
            target = target[part]
        if parts[-1] not in target:
            raise ConfigError(f"override references unknown config key {key!r}")
        target[parts[-1]] = value
    return doc


@dataclass(frozen=True)
class RunConfig:
    """Validated run configuration; the JSON document is the source of truth."""

    V: int
    K: int
    N: int
    seed_path: str
    model_scores_path: str | None
    seed_mode: str
    skip_sft: bool
    skip_dpo: bool
    rng_seed: int
    patience: int
    thresholds: Thresholds
    backend: BackendSettings
    trainer: TrainConfig
    metric: MetricSettings
    output_dir: str | None = None
    doc: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_doc(cls, doc: dict, *, output_dir: str | None = None, base_dir: str | None = None) -> "RunConfig":
        merged = _merge_doc(default_config_doc(), doc)

        def resolve(p: str | None) -> str | None:
            if p is None or base_dir is None or os.path.isabs(p):
                return p
            return str(Path(base_dir) / p)

        thresholds = Thresholds(
            instruction_length=tuple(merged["thresholds"]["instruction_length"]),
            response_length=tuple(merged["thresholds"]["response_length"]),
            similarity=merged["thresholds"]["similarity"],
            min_margin=merged["thresholds"]["min_margin"],
            tolerance=merged["thresholds"]["tolerance"],
            max_review_failures=merged["thresholds"]["max_review_failures"],
            similarity_pool_cap=merged["thresholds"]["similarity_pool_cap"],
        )
        be = merged["backend"]
        backend = BackendSettings(
            kind=be["kind"],
            script_path=resolve(be["script_path"]),
            base_url=be["base_url"],
            model=be["model"],
            temperature_review=be["temperature_review"],
            temperature_generate=be["temperature_generate"],
            max_tokens=be["max_tokens"],
            max_attempts=be["max_attempts"],
            base_delay=be["base_delay"],
            in_flight=be["in_flight"],
            timeout=be["timeout"],
        )
        tr = merged["trainer"]
        trainer = TrainConfig(
            beta=tr["beta"], learning_rate=tr["learning_rate"], steps=tr["steps"], rng_seed=tr["rng_seed"]
        )
        me = merged["metric"]
        metric = MetricSettings(
            source=me["source"],
            external=tuple(me["external"]) if me["external"] else None,
            holdout_fraction=me["holdout_fraction"],
        )
        config = cls(
            V=merged["V"],
            K=merged["K"],
            N=merged["N"],
            seed_path=resolve(merged["seed_path"]),
            model_scores_path=resolve(merged["model_scores_path"]),
            seed_mode=merged["seed_mode"],
            skip_sft=merged["skip_sft"],
            skip_dpo=merged["skip_dpo"],
            rng_seed=merged["rng_seed"],
            patience=merged["patience"],
            thresholds=thresholds,
            backend=backend,
            trainer=trainer,
            metric=metric,
            output_dir=output_dir,
            doc=merged,
        )
        config.validate()
        return config

    @classmethod
    def from_file(
        cls, path: str | os.PathLike, *, overrides: Sequence[str] = (), output_dir: str | None = None
    ) -> "RunConfig":
        path = Path(path)
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ConfigError("config file must contain a JSON object")
        doc = apply_overrides(_merge_doc(default_config_doc(), doc), overrides)
        return cls.from_doc(doc, output_dir=output_dir, base_dir=str(path.parent))

    def validate(self) -> None:
        if self.N < 1:
            raise ConfigError("N must be >= 1")
        if not 0 <= self.V <= 10:
            raise ConfigError("V must be in 0..10")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.seed_mode not in SEED_MODES:
            raise ConfigError(f"unknown seed_mode {self.seed_mode!r}")
        if self.skip_sft and self.skip_dpo:
            raise ConfigError("skip_sft and skip_dpo cannot both be true")
        if self.patience < 0:
            raise ConfigError("patience must be >= 0")
        self.thresholds.validate()
        self.backend.validate()
        self.metric.validate()

    def canonical_doc(self) -> dict:
        """The merged config document; excludes the output directory so the
        hash identifies the logical run, not where it lives on disk."""
        return json.loads(json.dumps(self.doc, sort_keys=True))

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical_doc(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# run state


@dataclass
class RunState:
    t: int
    seed: Dataset
    sft: Dataset
    pref: Dataset
    params: ToyModelParams
    heldout_ids: list[str]
    manifests: list[IterationManifest] = field(default_factory=list)
    metric_history: list[float] = field(default_factory=list)

    def heldout_batch(self) -> list:
        wanted = set(self.heldout_ids)
        return [encode_pair(r.instruction, r.response) for r in self.seed if r.id in wanted]

    def train_seed_batch(self) -> list:
        held = set(self.heldout_ids)
        return [encode_pair(r.instruction, r.response) for r in self.seed if r.id not in held]


def regression_gate(metric_history: Sequence[float], patience: int) -> str:
    """Stop once the metric has sat below its running maximum for more than
    ``patience`` consecutive observations."""
    if patience < 0:
        raise ValueError("patience must be >= 0")
    prefix_max = float("-inf")
    trailing_below = 0
    for value in metric_history:
        if value < prefix_max:
            trailing_below += 1
        else:
            trailing_below = 0
        prefix_max = max(prefix_max, value)
    return GATE_STOP if trailing_below > patience else GATE_CONTINUE


def make_backend(config: RunConfig) -> Backend:
    be = config.backend
    if be.kind == "mock":
        return load_mock(be.script_path, seed=config.rng_seed)
    return HttpBackend(
        be.base_url,
        be.model,
        max_attempts=be.max_attempts,
        base_delay=be.base_delay,
        in_flight=be.in_flight,
        timeout=be.timeout,
    )


# ---------------------------------------------------------------------------
# one iteration


@dataclass
class IterationData:
    """Everything one pass of review -> branch -> generate -> filter produced."""

    reviews: ReviewOutcome
    decisions: list[BranchDecision]
    candidates: list[Candidate]
    sft_report: FilterReport
    pref_report: FilterReport
    new_sft: Dataset
    new_pref: Dataset
    generation_failures: list[str]
    generation_dropped_sft: int = 0
    generation_dropped_pref: int = 0


def construct_iteration_data(
    backend: Backend,
    iteration_seed: Dataset,
    pool_texts: Sequence[str],
    config: RunConfig,
    t: int,
) -> IterationData:
    """Run the data-construction cycle over one seed snapshot."""
    th = config.thresholds
    be = config.backend
    outcome = review_dataset(
        backend,
        iteration_seed,
        max_failure_fraction=th.max_review_failures,
        temperature=be.temperature_review,
        max_tokens=be.max_tokens,
    )
    reviews = outcome.reviews

    reviewed_records = [r for r in iteration_seed if r.id in reviews]
    exemplar_pool = sorted(reviewed_records, key=lambda r: (-reviews[r.id].total, r.id))[:3]

    # Cross-iteration dedup pool: seed instructions plus previously accepted
    # instructions, most recent last, capped.
    pool: list[str] = list(dict.fromkeys(pool_texts))[-th.similarity_pool_cap :]

    decisions: list[BranchDecision] = []
    candidates: list[Candidate] = []
    sft_report = FilterReport()
    pref_report = FilterReport()
    sft_examples = []
    pref_examples = []
    generation_failures: list[str] = []
    dropped_gen_sft = 0
    dropped_gen_pref = 0

    def drop(report: FilterReport, cand: Candidate, reason: str, counter: str) -> None:
        setattr(report, counter, getattr(report, counter) + 1)
        report.reasons[cand.cid] = reason

    def unique(batch: list[Candidate]) -> list[Candidate]:
        # A pool stream that wraps mid-call may re-emit a text; exact
        # re-draws carry no information, and dropping them here keeps
        # candidate ids unique per iteration.
        seen: set[str] = set()
        kept = []
        for cand in batch:
            if cand.cid not in seen:
                seen.add(cand.cid)
                kept.append(cand)
        return kept

    for record in reviewed_records:
        review = reviews[record.id]
        decision = branch(review, config.V, record.id)
        decisions.append(decision)

        if decision.arm == ARM_HIGH:
            flawed = generate_worse_responses(
                backend,
                record,
                config.K,
                temperature=be.temperature_generate,
                max_tokens=be.max_tokens,
            )
            flawed = unique(flawed)
            dropped_gen_pref += config.K - len(flawed)
            candidates.extend(flawed)
            pref_report.input_count += len(flawed)

            by_length = []
            for cand in flawed:
                if length_filter(cand, th.response_length):
                    by_length.append(cand)
                else:
                    drop(pref_report, cand, "length", "dropped_length")
            by_similarity, sim_report = similarity_filter(by_length, [record.response], th.similarity)
            pref_report.dropped_similarity += sim_report.dropped_similarity
            pref_report.reasons.update(sim_report.reasons)

            re_reviews = review_pairs(
                backend,
                ((c.cid, record.instruction, c.text) for c in by_similarity),
                temperature=be.temperature_review,
                max_tokens=be.max_tokens,
            )
            scored = []
            for cand in by_similarity:
                if cand.cid in re_reviews.reviews:
                    scored.append((cand, re_reviews.reviews[cand.cid]))
                else:
                    drop(pref_report, cand, "review_failed", "dropped_reward")
            pairs = build_preference_pairs((record, review), scored, th.min_margin, iteration=t)
            paired_texts = {p.preferred for p in pairs} | {p.dispreferred for p in pairs}
            for cand, _ in scored:
                if cand.text not in paired_texts:
                    drop(pref_report, cand, "margin", "dropped_tie_or_margin")
            pref_report.kept_count += len(pairs)
            pref_examples.extend(pairs)
        else:
            exemplars = [r for r in exemplar_pool if r.id != record.id][:2]
            instructions = generate_better_instructions(
                backend,
                record,
                config.K,
                exemplars,
                temperature=be.temperature_generate,
                max_tokens=be.max_tokens,
            )
            instructions = unique(instructions)
            dropped_gen_sft += config.K - len(instructions)
            candidates.extend(instructions)
            sft_report.input_count += len(instructions)

            by_length = []
            for cand in instructions:
                if length_filter(cand, th.instruction_length):
                    by_length.append(cand)
                else:
                    drop(sft_report, cand, "length", "dropped_length")
            kept_instructions, sim_report = similarity_filter(by_length, pool, th.similarity)
            sft_report.dropped_similarity += sim_report.dropped_similarity
            sft_report.reasons.update(sim_report.reasons)
            sft_report.kept_count += len(kept_instructions)
            pool.extend(c.text for c in kept_instructions)
            del pool[: max(0, len(pool) - th.similarity_pool_cap)]
            if not kept_instructions:
                continue

            sampled = sample_responses(
                backend,
                kept_instructions,
                config.K,
                temperature=be.temperature_generate,
                max_tokens=be.max_tokens,
            )
            generation_failures.extend(f"{cid}: {err}" for cid, err in sampled.failures)
            failed_cids = {cid for cid, _ in sampled.failures}
            responses = unique(sampled.candidates)
            expected = config.K * (len(kept_instructions) - len(failed_cids))
            dropped_gen_sft += expected - len(responses)
            candidates.extend(responses)
            sft_report.input_count += len(responses)

            by_length = []
            for cand in responses:
                if length_filter(cand, th.response_length):
                    by_length.append(cand)
                else:
                    drop(sft_report, cand, "length", "dropped_length")
            kept_responses, sim_report = similarity_filter(by_length, [record.response], th.similarity)
            sft_report.dropped_similarity += sim_report.dropped_similarity
            sft_report.reasons.update(sim_report.reasons)

            by_cid = {c.cid: c for c in kept_instructions}
            items = [
                (
                    PairCandidate(
                        instruction=by_cid[cand.parent_id].text,
                        response=cand.text,
                        parent_id=record.id,
                        candidate_index=by_cid[cand.parent_id].candidate_index * config.K
                        + cand.candidate_index,
                    ),
                    cand,
                )
                for cand in kept_responses
            ]
            re_reviews = review_pairs(
                backend,
                ((item.id, item.instruction, item.response) for item, _ in items),
                temperature=be.temperature_review,
                max_tokens=be.max_tokens,
            )
            gated = []
            for item, cand in items:
                if item.id in re_reviews.reviews:
                    gated.append((item, cand))
                else:
                    drop(sft_report, cand, "review_failed", "dropped_reward")
            examples = reward_gate_sft([item for item, _ in gated], re_reviews.reviews, config.V, iteration=t)
            kept_ids = {e.id for e in examples}
            for item, cand in gated:
                if item.id in kept_ids:
                    sft_report.kept_count += 1
                else:
                    drop(sft_report, cand, "reward", "dropped_reward")
            sft_examples.extend(examples)

    sft_report.validate()
    pref_report.validate()
    manifest_id = f"manifest_t{t}"
    return IterationData(
        reviews=outcome,
        decisions=decisions,
        candidates=candidates,
        sft_report=sft_report,
        pref_report=pref_report,
        new_sft=Dataset.build(KIND_SFT, sft_examples, provenance=[manifest_id]),
        new_pref=Dataset.build(KIND_PREFERENCE, pref_examples, provenance=[manifest_id]),
        generation_failures=generation_failures,
        generation_dropped_sft=dropped_gen_sft,
        generation_dropped_pref=dropped_gen_pref,
    )


def _write_json(doc: dict, path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(tmp, path)


def write_candidates(candidates: Sequence[Candidate], path: Path) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for cand in candidates:
            fh.write(json.dumps(cand.to_json_dict(), ensure_ascii=False))
            fh.write("\n")
    os.replace(tmp, path)


def _quarantine(out: Path, t: int, written: list[Path]) -> None:
    target = out / f"failed_t{t}"
    target.mkdir(exist_ok=True)
    leftovers = list(out.glob(f"*_t{t}*.tmp"))
    for path in written + leftovers:
        if path.exists():
            shutil.move(str(path), str(target / path.name))
    log.error("iteration %d failed; partial outputs quarantined under %s", t, target)


def run_iteration(state: RunState, config: RunConfig, backend: Backend) -> RunState:
    """Execute one full iteration and return the advanced state.

    Any stage error aborts without advancing t; partial files for this
    iteration are moved to failed_t{N}/.  The manifest is written last,
    atomically, so prior manifests can never be corrupted.
    """
    t = state.t
    out = Path(config.output_dir)
    written: list[Path] = []
    try:
        if config.seed_mode == SEED_MODE_MERGED and len(state.sft):
            iteration_seed = merge_datasets(state.seed, sft_as_seed(state.sft))
        else:
            iteration_seed = state.seed
        pool_texts = [r.instruction for r in state.seed] + [e.instruction for e in state.sft]

        data = construct_iteration_data(backend, iteration_seed, pool_texts, config, t)

        candidates_path = out / f"candidates_t{t}.jsonl"
        write_candidates(data.candidates, candidates_path)
        written.append(candidates_path)

        report_path = out / f"filter_report_t{t}.json"
        _write_json(
            {
                "sft": data.sft_report.to_json_dict(),
                "pref": data.pref_report.to_json_dict(),
                "generation_dropped": {
                    "sft": data.generation_dropped_sft,
                    "pref": data.generation_dropped_pref,
                },
            },
            report_path,
        )
        written.append(report_path)

        sft_t_path = out / f"d_sft_t{t}.jsonl"
        pref_t_path = out / f"d_pref_t{t}.jsonl"
        write_jsonl(data.new_sft, sft_t_path)
        write_jsonl(data.new_pref, pref_t_path)
        written.extend([sft_t_path, pref_t_path])

        cumulative_sft = merge_datasets(state.sft, data.new_sft)
        cumulative_pref = merge_datasets(state.pref, data.new_pref)

        params = extend_params(
            state.params,
            [e.instruction for e in cumulative_sft]
            + [e.response for e in cumulative_sft]
            + [e.instruction for e in cumulative_pref]
            + [e.preferred for e in cumulative_pref]
            + [e.dispreferred for e in cumulative_pref],
        )
        sft_steps = dpo_steps = 0
        if not config.skip_sft and len(cumulative_sft):
            losses: list[float] = []
            batch = [encode_pair(e.instruction, e.response) for e in cumulative_sft]
            params = train_sft(params, batch, config.trainer, losses)
            sft_steps = config.trainer.steps
            curve = out / f"sft_curve_t{t}.csv"
            write_loss_curve(losses, curve)
            written.append(curve)
        reference = params.copy()
        if not config.skip_dpo and len(cumulative_pref):
            losses = []
            pairs = [encode_triple(e.instruction, e.preferred, e.dispreferred) for e in cumulative_pref]
            params = train_dpo(params, reference, pairs, config.trainer, losses)
            dpo_steps = config.trainer.steps
            curve = out / f"dpo_curve_t{t}.csv"
            write_loss_curve(losses, curve)
            written.append(curve)

        model_path = out / f"toymodel_t{t}.json"
        save_params(params, model_path)
        written.append(model_path)

        metric = _compute_metric(config, state.metric_history, params, state.heldout_batch())

        write_jsonl(cumulative_sft, out / "d_sft.jsonl")
        write_jsonl(cumulative_pref, out / "d_pref.jsonl")

        counts = ManifestCounts(
            reviewed=len(data.reviews.reviews),
            branched_high=sum(1 for d in data.decisions if d.arm == ARM_HIGH),
            branched_low=sum(1 for d in data.decisions if d.arm != ARM_HIGH),
            sft_kept=len(data.new_sft),
            sft_dropped_by_filter=data.generation_dropped_sft
            + data.sft_report.dropped_length
            + data.sft_report.dropped_similarity
            + data.sft_report.dropped_reward,
            pref_kept=len(data.new_pref),
            pref_dropped=data.generation_dropped_pref
            + data.pref_report.dropped_length
            + data.pref_report.dropped_similarity
            + data.pref_report.dropped_reward
            + data.pref_report.dropped_tie_or_margin
            + (data.pref_report.kept_count - len(data.new_pref)),
        )
        manifest = IterationManifest(
            t=t,
            counts=counts,
            dataset_paths={
                "sft_iteration": sft_t_path.name,
                "pref_iteration": pref_t_path.name,
                "sft_cumulative": "d_sft.jsonl",
                "pref_cumulative": "d_pref.jsonl",
                "candidates": candidates_path.name,
                "filter_report": report_path.name,
                "toymodel": model_path.name,
            },
            config_hash=config.config_hash,
            rng_seed=config.rng_seed,
            backend_fingerprint=str(backend.fingerprint),
            template_versions=dict(TEMPLATE_VERSIONS),
            review_failures=sorted(data.reviews.failures),
            generation_failures=list(data.generation_failures),
            trainer_steps={"sft": sft_steps, "dpo": dpo_steps},
            cumulative_counts={"sft": len(cumulative_sft), "pref": len(cumulative_pref)},
            metric=metric,
            complete=True,
        )
        write_manifest(manifest, out)
        log.info(
            "iteration %d: reviewed=%d high=%d low=%d sft+%d pref+%d metric=%s",
            t, counts.reviewed, counts.branched_high, counts.branched_low,
            counts.sft_kept, counts.pref_kept, metric,
        )
        return replace(
            state,
            t=t + 1,
            sft=cumulative_sft,
            pref=cumulative_pref,
            params=params,
            manifests=state.manifests + [manifest],
            metric_history=state.metric_history + ([metric] if metric is not None else []),
        )
    except Exception:
        _quarantine(out, t, written)
        raise


def _compute_metric(
    config: RunConfig,
    metric_history: Sequence[float],
    params: ToyModelParams,
    heldout_batch: list,
) -> float | None:
    ms = config.metric
    if ms.source == METRIC_EXTERNAL:
        index = len(metric_history)
        if index >= len(ms.external):
            raise ConfigError("external metric sequence exhausted")
        return float(ms.external[index])
    if heldout_batch:
        # Negated so that, like a benchmark score, higher is better.
        return -nll_loss(params, heldout_batch)
    return None


# ---------------------------------------------------------------------------
# whole runs


def _heldout_split(seed: Dataset, fraction: float, rng_seed: int) -> list[str]:
    ids = [r.id for r in seed]
    k = min(int(len(ids) * fraction), len(ids) - 1)
    if k <= 0:
        return []
    rng = random.Random(f"heldout:{rng_seed}")
    return sorted(rng.sample(ids, k))


def _acquire_lock(out: Path) -> Path:
    lock = out / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockedError(f"{out} is locked by another run (remove {lock} if stale)") from None
    os.write(fd, f"{os.getpid()}\n".encode())
    os.close(fd)
    return lock


def _initialize(out: Path, config: RunConfig) -> RunState:
    raw = load_raw_seed_records(config.seed_path)
    model_scores = None
    if config.model_scores_path:
        with open(config.model_scores_path, "r", encoding="utf-8") as fh:
            model_scores = json.load(fh)
    seed = ingest_seed(raw, model_scores, config.thresholds.tolerance)
    write_jsonl(seed, out / "seeds_ingested.jsonl")

    heldout_ids = _heldout_split(seed, config.metric.holdout_fraction, config.rng_seed)
    vocab_texts = [r.instruction for r in seed] + [r.response for r in seed]
    params = uniform_params(build_vocab(vocab_texts))
    state = RunState(
        t=0,
        seed=seed,
        sft=Dataset.build(KIND_SFT, []),
        pref=Dataset.build(KIND_PREFERENCE, []),
        params=params,
        heldout_ids=heldout_ids,
    )

    train_batch = state.train_seed_batch()
    if train_batch and config.trainer.steps > 0:
        losses: list[float] = []
        state.params = train_sft(state.params, train_batch, config.trainer, losses)
        write_loss_curve(losses, out / "sft_curve_init.csv")
    save_params(state.params, out / "toymodel_init.json")

    metric = _compute_metric(config, [], state.params, state.heldout_batch())
    if metric is not None:
        state.metric_history.append(metric)
    _write_json(
        {
            "config_hash": config.config_hash,
            "heldout_ids": heldout_ids,
            "metric": metric,
            "complete": True,
        },
        out / "initial_state.json",
    )
    _write_json(config.canonical_doc(), out / "config_canonical.json")
    log.info("initialized run: %d seeds, %d held out, metric=%s", len(seed), len(heldout_ids), metric)
    return state


def _existing_manifests(out: Path) -> list[IterationManifest]:
    manifests = []
    for path in sorted(out.glob("manifest_t*.json"), key=lambda p: int(re.findall(r"\d+", p.name)[0])):
        manifests.append(read_manifest(path))
    for expected, manifest in enumerate(manifests):
        if manifest.t != expected or not manifest.complete:
            raise ConfigError(f"manifest sequence broken at t={manifest.t}")
    return manifests


def resume(state_dir: str | os.PathLike, config: RunConfig) -> RunState:
    """Rebuild run state from the highest complete manifest.

    Cumulative datasets are re-derived as the union of the per-iteration
    files, so a crash after the cumulative rewrite but before the manifest
    cannot poison the resumed state.
    """
    out = Path(state_dir)
    init_path = out / "initial_state.json"
    if not init_path.exists():
        raise ConfigError(f"{out} has no initialized run to resume")
    with open(init_path, "r", encoding="utf-8") as fh:
        init = json.load(fh)
    stored_doc_path = out / "config_canonical.json"
    with open(stored_doc_path, "r", encoding="utf-8") as fh:
        stored_doc = json.load(fh)
    current = config.canonical_doc()
    stored_no_n = {k: v for k, v in stored_doc.items() if k != "N"}
    current_no_n = {k: v for k, v in current.items() if k != "N"}
    if stored_no_n != current_no_n:
        raise ConfigError("config differs from the one that produced this directory (only N may change)")

    seed = read_jsonl(out / "seeds_ingested.jsonl", "seed")
    manifests = _existing_manifests(out)
    sft = Dataset.build(KIND_SFT, [])
    pref = Dataset.build(KIND_PREFERENCE, [])
    for manifest in manifests:
        sft = merge_datasets(sft, read_jsonl(out / manifest.dataset_paths["sft_iteration"], KIND_SFT))
        pref = merge_datasets(pref, read_jsonl(out / manifest.dataset_paths["pref_iteration"], KIND_PREFERENCE))
    if manifests:
        params = load_params(out / manifests[-1].dataset_paths["toymodel"])
    else:
        params = load_params(out / "toymodel_init.json")
    metric_history = []
    if init.get("metric") is not None:
        metric_history.append(init["metric"])
    metric_history.extend(m.metric for m in manifests if m.metric is not None)
    return RunState(
        t=len(manifests),
        seed=seed,
        sft=sft,
        pref=pref,
        params=params,
        heldout_ids=list(init.get("heldout_ids", [])),
        manifests=manifests,
        metric_history=metric_history,
    )


def run(config: RunConfig) -> RunState:
    """Ingest, initial-SFT, then iterate until N or the regression gate."""
    config.validate()
    if not config.output_dir:
        raise ConfigError("output_dir is required")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = _acquire_lock(out)
    try:
        if (out / "initial_state.json").exists():
            state = resume(out, config)
            if state.t >= config.N:
                log.info("run already complete (%d iterations); nothing to do", state.t)
                return state
            if regression_gate(state.metric_history, config.patience) == GATE_STOP:
                log.info("regression gate already tripped; not resuming iterations")
                return state
        else:
            state = _initialize(out, config)
        backend = make_backend(config)
        while state.t < config.N:
            state = run_iteration(state, config, backend)
            if regression_gate(state.metric_history, config.patience) == GATE_STOP:
                log.info("regression gate stopped the run after iteration %d", state.t - 1)
                break
        return state
    finally:
        lock.unlink(missing_ok=True)


def run_single_iteration(config: RunConfig) -> RunState:
    """Initialize if needed, then run exactly one more iteration."""
    config.validate()
    if not config.output_dir:
        raise ConfigError("output_dir is required")
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    lock = _acquire_lock(out)
    try:
        if (out / "initial_state.json").exists():
            state = resume(out, config)
        else:
            state = _initialize(out, config)
        return run_iteration(state, config, make_backend(config))
    finally:
        lock.unlink(missing_ok=True)
