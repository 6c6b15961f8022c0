"""Self-contained demo assets: seed corpus, mock script, and run config.

The generated script gives every pipeline stage something to do: scores
spread over both branch arms, near-duplicate candidates for the
similarity filter, too-short candidates for the length filter, an
identity candidate for the flawed-response reject, re-review scores
straddling the reward gate, and a tie for the margin rule.
"""

from __future__ import annotations

import json
from pathlib import Path

from .corpus import record_id
from .orchestrate import default_config_doc

# Re-review scores for generated (instruction, response) pairs, by response slot.
PAIR_SCORES = [9, 8, 7, 6, 5, 4]
# Re-review scores for flawed responses, by flawed slot.
FLAWED_SCORES = {1: 2, 2: 3, 3: 8, 4: 1}


def seed_score(i: int) -> int:
    """Deterministic 0..10 spread; roughly 45% land at or above 6."""
    return (i * 7) % 11


def _marker(i: int) -> str:
    return f"s{i:03d}"


def _instruction(i: int) -> str:
    return f"{_marker(i)} explain how to approach topic-{i} with clear goals and steps"


def _response(i: int) -> str:
    return (
        f"{_marker(i)} answer: first outline the goal for topic-{i} "
        "then list each step and verify the result"
    )


def demo_seed_rows(n: int) -> list[dict]:
    rows = []
    for i in range(n):
        row = {"instruction": _instruction(i), "response": _response(i), "source": "instruction-seed"}
        if i % 3 == 0:
            row["source"] = "review-seed"
            row["human_score"] = seed_score(i)
        rows.append(row)
    return rows


def demo_model_scores(n: int) -> dict[str, int]:
    scores = {}
    for i in range(n):
        if i % 3 == 0:
            scores[record_id(_instruction(i), _response(i))] = seed_score(i)
    return scores


def demo_mock_script(n: int) -> dict:
    entries: list[dict] = []
    for i in range(n):
        m = _marker(i)
        entries.append(
            {
                "template": "review",
                "match": m,
                "responses": [f"Judged topic-{i} for clarity and guidance.\nScore: {seed_score(i)}"],
            }
        )
        entries.append(
            {
                "template": "worse_response",
                "match": m,
                "responses": [
                    _response(i),
                    f"{m} flawed-1 answer: just wing it for topic-{i} and skip most of the details",
                    f"{m} flawed-2 answer: basically do topic-{i} stuff however it feels right probably fine",
                    f"{m} flawed-3 answer: an expertly worded but subtly wrong take on topic-{i} with confident missteps",
                    f"{m} flawed-4 answer: mix up the steps for topic-{i} and omit the verification part entirely",
                    f"{m} flawed-5 nah",
                    "   ",
                ],
            }
        )
        entries.append(
            {
                # Anchor on the target block so exemplar markers embedded
                # few-shot in the same prompt cannot hijack the match.
                "template": "better_instruction",
                "match": f"ITEM\nInstruction: {m}",
                "responses": [
                    f"{m} improved-0 explain topic-{i} goals alpha-{i} beta-{i} steps checks gamma-{i} notes",
                    f"{m} improved-1 explain topic-{i} goals alpha-{i} beta-{i} steps checks gamma-{i} notes extra",
                    f"{m} improved-2 define the objective of topic-{i} using alpha-{i} beta-{i} worked method gamma-{i}",
                    f"{m} improved-3 teach topic-{i} constraints alpha-{i} plan beta-{i} complete walkthrough gamma-{i} review",
                    f"{m} improved-4 outline topic-{i} alpha-{i} precise beta-{i} measurable gamma-{i} stepwise instructions",
                    f"{m} short",
                ],
            }
        )
    for j in range(5):
        entries.append(
            {
                "template": "response",
                "match": f"improved-{j}",
                "responses": [
                    "resp-0 answer: define the goal then give numbered steps covering each factor with final checks r0",
                    "resp-1 answer: state the objective list the factors then walk through the steps and verify r1",
                    "resp-2 answer: open with the goal enumerate constraints then give a complete stepwise method r2",
                    "resp-3 answer: describe the aim then outline the procedure factor by factor with a closing check r3",
                    "resp-4 answer: set the goal then give numbered steps covering every factor with closing checks r4",
                    "resp-5 answer: set the goal then give numbered steps covering every factor with closing checks r5",
                ],
            }
        )
    for r, score in enumerate(PAIR_SCORES):
        entries.append(
            {
                "template": "review",
                "match": f"resp-{r} answer",
                "responses": [f"Generated pair judged on the rubric.\nScore: {score}"],
            }
        )
    for j, score in FLAWED_SCORES.items():
        entries.append(
            {
                "template": "review",
                "match": f"flawed-{j} answer",
                "responses": [f"Plausible surface, misleading content.\nScore: {score}"],
            }
        )
    return {"entries": entries}


def demo_config_doc(*, n_iterations: int = 2, k: int = 2, steps: int = 40) -> dict:
    doc = default_config_doc()
    doc.update(
        {
            "N": n_iterations,
            "K": k,
            "seed_path": "seeds.jsonl",
            "model_scores_path": "model_scores.json",
            # The toy held-out metric dips once training moves onto generated
            # data; a tolerant patience lets short demo runs finish.
            "patience": 10,
        }
    )
    doc["backend"]["script_path"] = "mock_script.json"
    doc["trainer"]["steps"] = steps
    return doc


def build_demo(
    target: str | Path,
    *,
    n_seeds: int = 24,
    n_iterations: int = 2,
    k: int = 2,
    steps: int = 40,
) -> dict[str, Path]:
    """Write seeds, model scores, mock script, and config under ``target``."""
    target = Path(target)
    target.mkdir(parents=True, exist_ok=True)
    paths = {
        "seeds": target / "seeds.jsonl",
        "model_scores": target / "model_scores.json",
        "mock_script": target / "mock_script.json",
        "config": target / "cfg.json",
    }
    with open(paths["seeds"], "w", encoding="utf-8") as fh:
        for row in demo_seed_rows(n_seeds):
            fh.write(json.dumps(row, ensure_ascii=False))
            fh.write("\n")
    with open(paths["model_scores"], "w", encoding="utf-8") as fh:
        json.dump(demo_model_scores(n_seeds), fh, ensure_ascii=False, sort_keys=True, indent=2)
    with open(paths["mock_script"], "w", encoding="utf-8") as fh:
        json.dump(demo_mock_script(n_seeds), fh, ensure_ascii=False, indent=2)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(
            demo_config_doc(n_iterations=n_iterations, k=k, steps=steps),
            fh, ensure_ascii=False, sort_keys=True, indent=2,
        )
        fh.write("\n")
    return paths
