"""Per-user detection across the pipeline variants.

The full configuration runs decomposed checks with tools and debate. Each
ablation variant removes exactly one mechanism: the basic single prompt, the
per-check iteration, the decomposed check set, the tools, or the debate.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping

from .debate import (
    EXECUTOR_A,
    EXECUTOR_B,
    DebateConfig,
    DebateTranscript,
    FinalConclusion,
    debate_loop,
    run_emad,
)
from .decomposer import SubTask, SubTaskSet
from .errors import InsufficientHistory, MissingDecision, ResponseUnparseable, UnknownUser
from .executor import (
    VERDICT_MALICIOUS,
    ExecutorResultSet,
    SubTaskResult,
    apply_evidence_check,
    parse_structured_response,
    render_excerpt,
    run_subtask,
    synthesize,
)
from .forge import LoadedRegistry, ToolSpec
from .gateway import Backend, CostLedger, PromptTemplate, RateTable, chat
from .logstore import LogStore, UserSequence
from .prompts import DEFAULT_TEMPLATES, ONE_SHOT, VANILLA
from .runtime import ListCatalog, ToolResult, invoke

logger = logging.getLogger(__name__)

VARIANT_ORIGINAL = "original"
VARIANT_VANILLA = "vanilla"
VARIANT_NO_COT = "no_cot"
VARIANT_NO_DECOMP = "no_decomp"
VARIANT_NO_TOOLS = "no_tools"
VARIANT_NO_EMAD = "no_emad"


@dataclass(frozen=True)
class VariantBehavior:
    """Exactly one documented pipeline configuration per ablation tag."""

    tag: str
    description: str
    use_decomposition: bool = True
    use_tools: bool = True
    per_check_cot: bool = True
    use_debate: bool = True
    agentless: bool = False


VARIANTS: dict[str, VariantBehavior] = {
    VARIANT_ORIGINAL: VariantBehavior(
        VARIANT_ORIGINAL,
        "decomposed checks, tools, per-check reasoning, debate",
    ),
    VARIANT_VANILLA: VariantBehavior(
        VARIANT_VANILLA,
        "one basic prompt per user; no checks, tools, or debate",
        use_decomposition=False, use_tools=False, per_check_cot=False,
        use_debate=False, agentless=True,
    ),
    VARIANT_NO_COT: VariantBehavior(
        VARIANT_NO_COT,
        "one-step decision: all checks and tool outputs in a single call per executor",
        per_check_cot=False,
    ),
    VARIANT_NO_DECOMP: VariantBehavior(
        VARIANT_NO_DECOMP,
        "single generic check with every registry tool's output attached",
        use_decomposition=False,
    ),
    VARIANT_NO_TOOLS: VariantBehavior(
        VARIANT_NO_TOOLS,
        "executors see only the raw excerpt; tools are never invoked",
        use_tools=False,
    ),
    VARIANT_NO_EMAD: VariantBehavior(
        VARIANT_NO_EMAD,
        "debate rounds capped at zero; initial result sets merged directly",
        use_debate=False,
    ),
}


@dataclass
class DetectContext:
    """Everything needed to audit users under one configuration."""

    subtasks: SubTaskSet
    tools: Mapping[str, ToolSpec | None]
    store: LogStore
    backend: Backend
    ledger: CostLedger
    rates: RateTable | None = None
    lists: ListCatalog | None = None
    debate: DebateConfig = field(default_factory=DebateConfig)
    excerpt_budget: int = 50
    variant: VariantBehavior = VARIANTS[VARIANT_ORIGINAL]
    templates: Mapping[str, PromptTemplate] = field(default_factory=lambda: dict(DEFAULT_TEMPLATES))


def context_from_registry(
    registry: LoadedRegistry,
    store: LogStore,
    backend: Backend,
    ledger: CostLedger,
    *,
    rates: RateTable | None = None,
    lists: ListCatalog | None = None,
    debate: DebateConfig | None = None,
    excerpt_budget: int = 50,
    variant: str = VARIANT_ORIGINAL,
    templates: Mapping[str, PromptTemplate] | None = None,
) -> DetectContext:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant tag {variant!r}; expected one of {sorted(VARIANTS)}")
    tools = {s.id: registry.tool_for(s.id) for s in registry.subtasks.subtasks}
    return DetectContext(
        subtasks=registry.subtasks,
        tools=tools,
        store=store,
        backend=backend,
        ledger=ledger,
        rates=rates,
        lists=lists,
        debate=debate or DebateConfig(),
        excerpt_budget=excerpt_budget,
        variant=VARIANTS[variant],
        templates=dict(templates) if templates is not None else dict(DEFAULT_TEMPLATES),
    )


# ---------------------------------------------------------------------------
# Variant building blocks
# ---------------------------------------------------------------------------

def _invoke_for_user(
    ctx: DetectContext, spec: ToolSpec, user: UserSequence
) -> tuple[str, ToolResult | None]:
    """Invoke one tool with its natural (user, busiest-day) binding."""
    assert spec.plan is not None
    relevant_days: dict[str, int] = {}
    for entry in user.entries:
        if entry.activity in set(spec.plan.select.activity_types):
            key = entry.day.isoformat()
            relevant_days[key] = relevant_days.get(key, 0) + 1
    if not relevant_days:
        return f"[{spec.name}] (no relevant activity)", None
    focus = max(sorted(relevant_days), key=lambda d: relevant_days[d])
    params = {
        name: (user.user if name == "user" else focus) for name, _ in spec.params
    }
    try:
        result = invoke(spec, params, ctx.store, ctx.lists)
    except (InsufficientHistory, UnknownUser) as exc:
        return f"[{spec.name}] (no usable history: {exc})", None
    return f"[{spec.name}] {result.rendered}", result


def _combined_tool_result(ctx: DetectContext, user: UserSequence) -> ToolResult:
    """Invoke every registry tool for this user and fold the outputs."""
    rendered: list[str] = []
    evidence: list[str] = []
    any_suspicious = False
    any_signal = False
    for subtask in ctx.subtasks.subtasks:
        spec = ctx.tools.get(subtask.id)
        if spec is None or spec.plan is None:
            continue
        line, result = _invoke_for_user(ctx, spec, user)
        rendered.append(line)
        if result is not None and result.verdict_hint is not None:
            any_signal = True
            if result.verdict_hint == "suspicious":
                any_suspicious = True
                evidence.extend(result.evidence)
    hint = None
    if any_signal:
        hint = "suspicious" if any_suspicious else "normal"
    return ToolResult(
        tool_name="combined-registry",
        bound_params={"user": user.user},
        values={},
        rendered="\n".join(rendered) or "(no tools produced output)",
        verdict_hint=hint,
        evidence=tuple(dict.fromkeys(evidence)),
    )


def _generic_subtask(ctx: DetectContext) -> SubTask:
    return SubTask(
        id="general-audit",
        description="Audit all of this user's activity for insider threat indicators.",
        activity_types=frozenset(ctx.store.activity_types()),
    )


def _one_shot_set(ctx: DetectContext, executor_id: str, user: UserSequence, seed: int) -> ExecutorResultSet:
    """One backend call deciding all checks at once (the no-CoT path)."""
    blocks = []
    per_tool_evidence: dict[str, tuple[str, ...]] = {}
    for subtask in ctx.subtasks.subtasks:
        spec = ctx.tools.get(subtask.id) if ctx.variant.use_tools else None
        line = f"- [{subtask.id}] {subtask.description}"
        if spec is not None and spec.plan is not None:
            text, result = _invoke_for_user(ctx, spec, user)
            signal = result.verdict_hint if result is not None else None
            line += f"\n    tool: {text} (signal: {signal or 'none'})"
            if result is not None:
                per_tool_evidence[subtask.id] = result.evidence
        blocks.append(line)
    excerpt = user.entries[-ctx.excerpt_budget:]
    variables = {
        "user": user.user,
        "findings_block": "\n".join(blocks),
        "excerpt_count": len(excerpt),
        "activity_excerpt": render_excerpt(excerpt, ctx.excerpt_budget),
    }
    parsed = None
    for attempt in range(2):
        try:
            completion, _ = chat(
                ctx.backend, ctx.templates.get("one_shot", ONE_SHOT), variables,
                stage="one-shot", ledger=ctx.ledger, rates=ctx.rates,
                note=f"{executor_id}" + (":reprompt" if attempt else ""), seed_hint=seed,
            )
            parsed = parse_structured_response(completion.text)
            break
        except MissingDecision:
            continue
    if parsed is None:
        raise ResponseUnparseable(f"one-shot decision for {user.user!r} unparseable after re-prompt")

    valid_ids = {e.entry_id for e in user.entries}
    explicit = frozenset(i for i in parsed.flagged if i in valid_ids)
    if explicit:
        anomalies = explicit
    elif parsed.decision == VERDICT_MALICIOUS:
        anomalies = frozenset(i for ids in per_tool_evidence.values() for i in ids)
    else:
        anomalies = frozenset()
    verdict, correction = apply_evidence_check(parsed.decision, anomalies)

    results = []
    for subtask in ctx.subtasks.subtasks:
        ids = frozenset(per_tool_evidence.get(subtask.id, ())) & anomalies
        results.append(
            SubTaskResult(
                subtask_id=subtask.id,
                tool_rendered="(one-step decision)",
                finding=parsed.fields.get(subtask.id, "(decided in one step)"),
                flagged=ids,
                suspicious=bool(ids),
            )
        )
    return ExecutorResultSet(
        executor_id=executor_id,
        results=results,
        anomalies=anomalies,
        basis=parsed.basis or "(one-step decision)",
        verdict=verdict,
        round=0,
        correction=correction,
    )


def _vanilla_conclusion(ctx: DetectContext, user: UserSequence) -> FinalConclusion:
    excerpt = user.entries[-ctx.excerpt_budget:]
    variables = {
        "user": user.user,
        "excerpt_count": len(excerpt),
        "activity_excerpt": render_excerpt(excerpt, ctx.excerpt_budget),
    }
    parsed = None
    for attempt in range(2):
        try:
            completion, _ = chat(
                ctx.backend, ctx.templates.get("vanilla", VANILLA), variables,
                stage="vanilla", ledger=ctx.ledger, rates=ctx.rates,
                note=user.user + (":reprompt" if attempt else ""),
            )
            parsed = parse_structured_response(completion.text)
            break
        except MissingDecision:
            continue
    if parsed is None:
        raise ResponseUnparseable(f"vanilla decision for {user.user!r} unparseable after re-prompt")
    valid_ids = {e.entry_id for e in user.entries}
    anomalies = frozenset(i for i in parsed.flagged if i in valid_ids)
    if parsed.decision == VERDICT_MALICIOUS and not anomalies:
        # The single-prompt variant implicates the window it saw.
        anomalies = frozenset(e.entry_id for e in excerpt)
    verdict, correction = apply_evidence_check(parsed.decision, anomalies)
    return FinalConclusion(
        verdict=verdict,
        anomalies=anomalies,
        basis=parsed.basis or "(single prompt)",
        rounds_used=0,
        consensus=False,
        correction=correction,
    )


# ---------------------------------------------------------------------------
# Per-user detection
# ---------------------------------------------------------------------------

def detect_user(
    user: UserSequence, ctx: DetectContext
) -> tuple[FinalConclusion, DebateTranscript | None]:
    """Audit one user under the context's variant configuration."""
    variant = ctx.variant

    if variant.agentless:
        return _vanilla_conclusion(ctx, user), None

    debate = ctx.debate if variant.use_debate else DebateConfig(
        n_debate=0, seed_a=ctx.debate.seed_a, seed_b=ctx.debate.seed_b
    )

    rebuttal_template = ctx.templates["executor_rebuttal"]
    merge_template = ctx.templates["executor_merge"]

    if not variant.per_check_cot:
        a0 = _one_shot_set(ctx, EXECUTOR_A, user, debate.seed_a)
        b0 = _one_shot_set(ctx, EXECUTOR_B, user, debate.seed_b)
        return debate_loop(a0, b0, ctx.backend, debate, user=user,
                           ledger=ctx.ledger, rates=ctx.rates,
                           rebuttal_template=rebuttal_template,
                           merge_template=merge_template)

    if not variant.use_decomposition:
        generic = _generic_subtask(ctx)
        subtasks = SubTaskSet([generic], rounds=0)
        override = _combined_tool_result(ctx, user) if variant.use_tools else None

        def build(executor_id: str, seed: int) -> ExecutorResultSet:
            result = run_subtask(
                executor_id, generic, None, user, ctx.store, ctx.backend,
                lists=ctx.lists, excerpt_budget=ctx.excerpt_budget,
                ledger=ctx.ledger, rates=ctx.rates, seed_hint=seed,
                tool_result_override=override,
                template=ctx.templates["executor_subtask"],
            )
            return synthesize(executor_id, [result], backend=None, round_index=0)

        a0 = build(EXECUTOR_A, debate.seed_a)
        b0 = build(EXECUTOR_B, debate.seed_b)
        return debate_loop(a0, b0, ctx.backend, debate, user=user,
                           ledger=ctx.ledger, rates=ctx.rates,
                           rebuttal_template=rebuttal_template,
                           merge_template=merge_template)

    tools = dict(ctx.tools) if variant.use_tools else {s.id: None for s in ctx.subtasks.subtasks}
    return run_emad(
        ctx.subtasks, tools, user, ctx.store, ctx.backend, debate,
        lists=ctx.lists, excerpt_budget=ctx.excerpt_budget,
        ledger=ctx.ledger, rates=ctx.rates,
        subtask_template=ctx.templates["executor_subtask"],
        rebuttal_template=rebuttal_template,
        merge_template=merge_template,
    )


def detect_all(
    ctx: DetectContext, parallelism: int = 1
) -> dict[str, tuple[FinalConclusion, DebateTranscript | None]]:
    """Audit every user in the store; distinct users may run in parallel."""
    users = sorted(ctx.store.users)
    if parallelism <= 1:
        return {u: detect_user(ctx.store.users[u], ctx) for u in users}
    results: dict[str, tuple[FinalConclusion, DebateTranscript | None]] = {}
    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        futures = {u: pool.submit(detect_user, ctx.store.users[u], ctx) for u in users}
        for user, future in futures.items():
            results[user] = future.result()
    return results
