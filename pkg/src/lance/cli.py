"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 pipeline error.  The config file
is the source of truth; repeatable --set KEY=VALUE flags override it and
flow into each manifest's config hash.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import demo, orchestrate
from .corpus import ingest_seed, load_raw_seed_records, read_jsonl, read_manifest
from .errors import LanceError, UsageError
from .orchestrate import RunConfig, construct_iteration_data, make_backend
from .review import review_dataset
from .toytrain import gradient_check

GRADCHECK_TOLERANCE = 1e-5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="run configuration JSON")
    parser.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key (repeatable)"
    )


def build_parser() -> _Parser:
    parser = _Parser(prog="lance", description="Self-evolving post-training data engine.")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("init", help="scaffold a config plus a runnable mock demo")
    p.add_argument("--out", required=True, help="directory to scaffold into")
    p.add_argument("--seeds", type=int, default=24, help="demo seed corpus size")

    p = sub.add_parser("run", help="execute the full iteration loop")
    _add_config_args(p)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--resume", action="store_true", help="resume an interrupted run (also the default)")

    p = sub.add_parser("iterate", help="run exactly one more iteration")
    _add_config_args(p)
    p.add_argument("--out", required=True)

    p = sub.add_parser("review", help="review a seed file and write the scores")
    _add_config_args(p)
    p.add_argument("--seeds", required=True, help="raw seed JSONL")
    p.add_argument("--dest", required=True, help="output JSON file")

    p = sub.add_parser("generate", help="review, branch, and generate candidates")
    _add_config_args(p)
    p.add_argument("--seeds", required=True)
    p.add_argument("--dest", required=True, help="output candidates JSONL")

    p = sub.add_parser("filter", help="run one data-construction pass and write the filtered datasets")
    _add_config_args(p)
    p.add_argument("--seeds", required=True)
    p.add_argument("--dest", required=True, help="output directory")

    p = sub.add_parser("stats", help="summarize the manifests of a run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--json", action="store_true", help="machine-readable output")

    p = sub.add_parser("export", help="copy the cumulative datasets out of a run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--dest", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of the trainer gradients")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-4)

    return parser


def _load_seed_dataset(config: RunConfig, seeds_path: str):
    raw = load_raw_seed_records(seeds_path)
    model_scores = None
    if config.model_scores_path:
        with open(config.model_scores_path, "r", encoding="utf-8") as fh:
            model_scores = json.load(fh)
    return ingest_seed(raw, model_scores, config.thresholds.tolerance)


def _cmd_init(args) -> int:
    paths = demo.build_demo(args.out, n_seeds=args.seeds)
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"try: lance run --config {paths['config']} --out {Path(args.out) / 'out'}")
    return 0


def _cmd_run(args) -> int:
    config = RunConfig.from_file(args.config, overrides=args.set, output_dir=args.out)
    state = orchestrate.run(config)
    print(
        f"run complete: iterations={state.t} sft={len(state.sft)} pref={len(state.pref)} "
        f"metric={state.metric_history[-1] if state.metric_history else None}"
    )
    return 0


def _cmd_iterate(args) -> int:
    config = RunConfig.from_file(args.config, overrides=args.set, output_dir=args.out)
    state = orchestrate.run_single_iteration(config)
    manifest = state.manifests[-1]
    print(f"iteration {manifest.t}: sft+{manifest.counts.sft_kept} pref+{manifest.counts.pref_kept}")
    return 0


def _cmd_review(args) -> int:
    config = RunConfig.from_file(args.config, overrides=args.set)
    seed = _load_seed_dataset(config, args.seeds)
    outcome = review_dataset(
        make_backend(config),
        seed,
        max_failure_fraction=config.thresholds.max_review_failures,
        temperature=config.backend.temperature_review,
        max_tokens=config.backend.max_tokens,
    )
    doc = {
        "reviews": {
            key: {"total": r.total, "rationale": r.rationale} for key, r in sorted(outcome.reviews.items())
        },
        "failures": dict(sorted(outcome.failures.items())),
    }
    with open(args.dest, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, ensure_ascii=False, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"reviewed {len(outcome.reviews)} records, {len(outcome.failures)} failures -> {args.dest}")
    return 0


def _standalone_pass(args):
    config = RunConfig.from_file(args.config, overrides=args.set)
    seed = _load_seed_dataset(config, args.seeds)
    pool = [r.instruction for r in seed]
    data = construct_iteration_data(make_backend(config), seed, pool, config, t=0)
    return config, data


def _cmd_generate(args) -> int:
    _, data = _standalone_pass(args)
    orchestrate.write_candidates(data.candidates, Path(args.dest))
    print(f"generated {len(data.candidates)} candidates -> {args.dest}")
    return 0


def _cmd_filter(args) -> int:
    from .corpus import write_jsonl

    _, data = _standalone_pass(args)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    orchestrate.write_candidates(data.candidates, dest / "candidates_t0.jsonl")
    write_jsonl(data.new_sft, dest / "d_sft_t0.jsonl")
    write_jsonl(data.new_pref, dest / "d_pref_t0.jsonl")
    orchestrate._write_json(
        {
            "sft": data.sft_report.to_json_dict(),
            "pref": data.pref_report.to_json_dict(),
            "generation_dropped": {"sft": data.generation_dropped_sft, "pref": data.generation_dropped_pref},
        },
        dest / "filter_report_t0.json",
    )
    print(f"kept sft={len(data.new_sft)} pref={len(data.new_pref)} -> {dest}")
    return 0


def _manifests(out: Path):
    paths = sorted(out.glob("manifest_t*.json"), key=lambda p: int("".join(ch for ch in p.stem if ch.isdigit())))
    return [read_manifest(p) for p in paths]


def _cmd_stats(args) -> int:
    out = Path(args.out)
    manifests = _manifests(out)
    if args.json:
        print(json.dumps([m.to_json_dict() for m in manifests], ensure_ascii=False, sort_keys=True))
        return 0
    if not manifests:
        print("no manifests found")
        return 0
    header = f"{'t':>3} {'reviewed':>8} {'high':>5} {'low':>5} {'sft+':>6} {'pref+':>6} {'|Ds|':>6} {'|Dp|':>6} {'metric':>12}"
    print(header)
    print("-" * len(header))
    for m in manifests:
        c = m.counts
        metric = f"{m.metric:.4f}" if m.metric is not None else "-"
        print(
            f"{m.t:>3} {c.reviewed:>8} {c.branched_high:>5} {c.branched_low:>5} "
            f"{c.sft_kept:>6} {c.pref_kept:>6} {m.cumulative_counts.get('sft', 0):>6} "
            f"{m.cumulative_counts.get('pref', 0):>6} {metric:>12}"
        )
    return 0


def _cmd_export(args) -> int:
    out = Path(args.out)
    dest = Path(args.dest)
    dest.mkdir(parents=True, exist_ok=True)
    exported = []
    for name, kind in (("d_sft.jsonl", "sft"), ("d_pref.jsonl", "preference")):
        source = out / name
        if not source.exists():
            continue
        dataset = read_jsonl(source, kind)
        shutil.copyfile(source, dest / name)
        exported.append(f"{name} ({len(dataset)} records)")
    if not exported:
        raise LanceError(f"no cumulative datasets found under {out}")
    print("exported " + ", ".join(exported) + f" -> {dest}")
    return 0


def _cmd_gradcheck(args) -> int:
    report = gradient_check(trials=args.trials, rng_seed=args.seed, eps=args.eps)
    print(
        f"trials={report.trials} eps={report.eps} "
        f"max_rel_err_nll={report.max_rel_err_nll:.3e} "
        f"max_rel_err_dpo={report.max_rel_err_dpo:.3e} "
        f"max_rel_err={report.max_rel_err:.3e}"
    )
    return 0 if report.max_rel_err < GRADCHECK_TOLERANCE else 2


_COMMANDS = {
    "init": _cmd_init,
    "run": _cmd_run,
    "iterate": _cmd_iterate,
    "review": _cmd_review,
    "generate": _cmd_generate,
    "filter": _cmd_filter,
    "stats": _cmd_stats,
    "export": _cmd_export,
    "gradcheck": _cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"lance: error: {exc}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.verb](args)
    except UsageError as exc:
        print(f"lance: error: {exc}", file=sys.stderr)
        return 1
    except (LanceError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
