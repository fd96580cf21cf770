"""Operator entry point: ingest -> forge -> detect -> evaluate, plus
cost-report. Each phase reads the same config file; failures exit non-zero
with one machine-parseable ``Category: detail`` line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import bench
from .config import (
    RunConfig,
    build_backend,
    config_hash,
    load_config,
    load_lists,
    load_templates,
    resolve_path,
)
from .debate import DebateConfig, transcript_doc
from .decomposer import decompose, refine, validate_coverage
from .errors import (
    AuditError,
    ConfigInvalid,
    CoverageIncomplete,
    LabelsMissing,
    RegistryMissing,
)
from .forge import REGISTRY_FORMAT, build_tool_for_subtask, load_registry, save_registry
from .gateway import CostLedger, CostRecord, cost_report
from .logstore import (
    LogStore,
    build_user_sequences,
    load_labels,
    load_store,
    parse_cert_file,
    parse_zeek_file,
    sample_exemplars,
    save_store,
    undersample_benign,
)
from .pipeline import VARIANTS, context_from_registry, detect_all

logger = logging.getLogger(__name__)

CONCLUSIONS_FORMAT = "audit-conclusions/1"


def _write_json(path: Path, doc: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_manifest(config: RunConfig, phase: str, extra: dict | None = None) -> None:
    outdir = resolve_path(config, config.output_dir)
    doc = {
        "phase": phase,
        "config_hash": config_hash(config),
        "seeds": {
            "sampler": config.seed_sampler,
            "executor_a": config.seed_executor_a,
            "executor_b": config.seed_executor_b,
        },
        "registry_format": REGISTRY_FORMAT,
        "variant": config.ablation,
    }
    if extra:
        doc.update(extra)
    _write_json(outdir / f"manifest-{phase}.json", doc)


def _write_ledger(config: RunConfig, phase: str, ledger: CostLedger) -> Path:
    outdir = resolve_path(config, config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / f"costs-{phase}.jsonl"
    with path.open("w", encoding="utf-8") as handle:
        for record in ledger.records():
            handle.write(json.dumps(dataclasses.asdict(record), sort_keys=True) + "\n")
    return path


def _read_ledgers(outdir: Path) -> list[CostRecord]:
    records: list[CostRecord] = []
    for path in sorted(outdir.glob("costs-*.jsonl")):
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                records.append(CostRecord(**json.loads(line)))
    return records


# ---------------------------------------------------------------------------
# Phases
# ---------------------------------------------------------------------------

def cmd_ingest(config: RunConfig) -> int:
    store = LogStore()
    dataset = config.dataset
    for source, raw_path in sorted(dataset.paths.items()):
        path = resolve_path(config, raw_path)
        if not path.exists():
            raise ConfigInvalid(f"dataset file not found: {path}")
        if dataset.kind == "cert":
            parsed = parse_cert_file(path, source)
        else:
            parsed = parse_zeek_file(path, kind=source)
        store.add_parsed(parsed)
        logger.info("ingested %s: %d entries, %d malformed", path, len(parsed.entries),
                    len(parsed.errors))
    build_user_sequences(store)
    if dataset.labels:
        labels_path = resolve_path(config, dataset.labels)
        if not labels_path.exists():
            raise LabelsMissing(f"ground-truth file not found: {labels_path}")
        store.attach_labels(load_labels(labels_path))
        # Class-imbalance control: keep every malicious entry and at most
        # `undersample_cap` benign ones in the sealed snapshot.
        view = undersample_benign(store, cap=config.undersample_cap,
                                  seed=config.seed_sampler)
        if view is not store:
            logger.info("under-sampled benign entries: %d -> %d",
                        len(store.entries), len(view.entries))
            store = view
    store_path = resolve_path(config, config.store_path)
    store_path.parent.mkdir(parents=True, exist_ok=True)
    save_store(store, store_path)
    _write_manifest(config, "ingest", {
        "entries": len(store.entries),
        "users": len(store.users),
        "files": len(store.source_manifest),
    })
    print(f"ingested {len(store.entries)} entries from {len(store.source_manifest)} files "
          f"({len(store.users)} users) -> {store_path}")
    return 0


def cmd_forge(config: RunConfig) -> int:
    store_path = resolve_path(config, config.store_path)
    if not store_path.exists():
        raise ConfigInvalid(f"store snapshot not found: {store_path}; run ingest first")
    store = load_store(store_path)
    lists = load_lists(config)
    backend = build_backend(config)
    templates = load_templates(config)
    ledger = CostLedger()

    exemplars = sample_exemplars(store, k=config.exemplar_k, seed=config.seed_sampler)
    subtasks = decompose(exemplars, backend, ledger=ledger, rates=config.rates,
                         template=templates["decomposer"])
    subtasks = refine(subtasks, backend, max_rounds=config.max_refine_rounds,
                      ledger=ledger, rates=config.rates,
                      template=templates["decomposer_refine"])

    coverage = validate_coverage(subtasks, store.activity_types())
    if not coverage.complete and not config.allow_partial_coverage:
        raise CoverageIncomplete(
            "uncovered activity types: "
            + ", ".join(sorted(t.value for t in coverage.uncovered))
            + " (pass --allow-partial-coverage to proceed)"
        )

    specs = []
    unservable = []
    for subtask in subtasks.subtasks:
        examples = [e for t in sorted(subtask.activity_types, key=lambda a: a.value)
                    for e in exemplars.get(t, [])]
        cases = config.tool_tests.get(subtask.id, [])
        outcome = build_tool_for_subtask(
            subtask, examples, cases, store, backend,
            lists=lists, ledger=ledger, rates=config.rates,
            max_repair_attempts=config.max_repair_attempts, k_sigma=config.k_sigma,
            draft_template=templates["tool_builder"],
            repair_template=templates["tool_repair"],
        )
        if outcome.spec is None:
            unservable.append(subtask.id)
            logger.warning("sub-task %s is unservable: %s", subtask.id, outcome.error)
        else:
            specs.append(outcome.spec)

    registry_path = resolve_path(config, config.registry_path)
    registry_path.parent.mkdir(parents=True, exist_ok=True)
    save_registry(specs, subtasks, registry_path)
    _write_ledger(config, "forge", ledger)
    _write_manifest(config, "forge", {
        "subtasks": len(subtasks.subtasks),
        "tools": len(specs),
        "unservable": unservable,
        "refine_rounds": subtasks.rounds,
    })
    print(f"forged {len(specs)} tools for {len(subtasks.subtasks)} checks "
          f"({subtasks.rounds} refinement rounds) -> {registry_path}")
    return 0


def cmd_detect(config: RunConfig) -> int:
    store_path = resolve_path(config, config.store_path)
    if not store_path.exists():
        raise ConfigInvalid(f"store snapshot not found: {store_path}; run ingest first")
    registry_path = resolve_path(config, config.registry_path)
    if not registry_path.exists():
        raise RegistryMissing(f"registry not found: {registry_path}; run forge first")

    store = load_store(store_path)
    lists = load_lists(config)
    registry = load_registry(registry_path, store=store, lists=lists)
    backend = build_backend(config)
    ledger = CostLedger()
    ctx = context_from_registry(
        registry, store, backend, ledger,
        rates=config.rates, lists=lists,
        debate=DebateConfig(n_debate=config.n_debate, seed_a=config.seed_executor_a,
                            seed_b=config.seed_executor_b),
        excerpt_budget=config.excerpt_budget,
        variant=config.ablation,
        templates=load_templates(config),
    )
    outcomes = detect_all(ctx, parallelism=config.parallelism)

    outdir = resolve_path(config, config.output_dir)
    transcripts_dir = outdir / "transcripts"
    users_doc = {}
    for user, (final, transcript) in sorted(outcomes.items()):
        users_doc[user] = {
            "verdict": final.verdict,
            "anomalies": sorted(final.anomalies),
            "basis": final.basis,
            "rounds_used": final.rounds_used,
            "consensus": final.consensus,
            "correction": final.correction,
        }
        if transcript is not None:
            _write_json(transcripts_dir / f"{user}.json", transcript_doc(user, transcript))
    _write_json(outdir / "conclusions.json", {
        "format": CONCLUSIONS_FORMAT,
        "variant": config.ablation,
        "users": users_doc,
    })
    _write_ledger(config, "detect", ledger)
    _write_manifest(config, "detect", {"users": len(users_doc)})
    malicious = sum(1 for u in users_doc.values() if u["verdict"] == "malicious")
    print(f"detected {malicious} malicious of {len(users_doc)} users -> {outdir / 'conclusions.json'}")
    return 0


def cmd_evaluate(config: RunConfig) -> int:
    store_path = resolve_path(config, config.store_path)
    if not store_path.exists():
        raise ConfigInvalid(f"store snapshot not found: {store_path}; run ingest first")
    store = load_store(store_path)
    if not store.labels:
        raise LabelsMissing(
            "store has no ground-truth labels; set dataset.labels and re-run ingest"
        )
    outdir = resolve_path(config, config.output_dir)
    conclusions_path = outdir / "conclusions.json"
    if not conclusions_path.exists():
        raise ConfigInvalid(f"conclusions not found: {conclusions_path}; run detect first")
    doc = json.loads(conclusions_path.read_text(encoding="utf-8"))
    predictions = {user: item["verdict"] for user, item in doc.get("users", {}).items()}

    metrics = bench.evaluate(predictions, bench.user_labels(store),
                             variant=doc.get("variant", config.ablation))
    records = _read_ledgers(outdir)
    paths = bench.emit_report([metrics], cost_report(records), outdir)
    _write_manifest(config, "evaluate", {"users": len(predictions)})
    print(bench.render_metrics_table([metrics]), end="")
    print(f"reports -> {paths['table']}, {paths['struct']}, {paths['costs']}")
    return 0


def cmd_cost_report(config: RunConfig) -> int:
    outdir = resolve_path(config, config.output_dir)
    records = _read_ledgers(outdir)
    report = cost_report(records)
    print(f"calls: {report.calls}")
    print(f"latency_ms: {report.latency_ms:.1f}")
    print(f"tokens: prompt={report.prompt_tokens} completion={report.completion_tokens} "
          f"total={report.total_tokens}")
    print(f"dollars: {report.dollars:.6f}")
    for stage, stats in sorted(report.per_stage.items()):
        print(f"  {stage:<12} calls={stats.calls:<5} mean_latency_ms={stats.mean_latency_ms:.1f} "
              f"mean_tokens={stats.mean_tokens:.1f} mean_dollars={stats.mean_dollars:.8f}")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

_COMMANDS = {
    "ingest": cmd_ingest,
    "forge": cmd_forge,
    "detect": cmd_detect,
    "evaluate": cmd_evaluate,
    "cost-report": cmd_cost_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="logaudit",
        description="Multi-agent security log auditing pipeline",
    )
    parser.add_argument("command", choices=sorted(_COMMANDS))
    parser.add_argument("--config", required=True, help="path to the run config (json/yaml)")
    parser.add_argument("--variant", choices=sorted(VARIANTS),
                        help="override the config's ablation tag")
    parser.add_argument("--allow-partial-coverage", action="store_true",
                        help="proceed even when some activity types lack checks")
    parser.add_argument("--parallelism", type=int, help="detection workers (default from config)")
    parser.add_argument("--seed", type=int, help="override the sampler seed")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="[%(levelname)s] %(name)s: %(message)s",
    )
    try:
        config = load_config(args.config)
        if args.variant:
            config.ablation = args.variant
        if args.allow_partial_coverage:
            config.allow_partial_coverage = True
        if args.parallelism is not None:
            config.parallelism = args.parallelism
        if args.seed is not None:
            config.seed_sampler = args.seed
        if config.ablation not in VARIANTS:
            raise ConfigInvalid(f"unknown ablation tag {config.ablation!r}")
        return _COMMANDS[args.command](config)
    except AuditError as exc:
        print(f"{exc.category}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
