"""Executors: run each audit check with its tool, judge the outcome through
the backend, and synthesize a structured verdict.

Verdicts are always forced back into line with the evidence: a result set is
malicious iff its anomaly set is non-empty. When a backend's stated Decision
contradicts the flagged evidence, the verdict is corrected and the
contradiction recorded — that correction is the whole point of the debate
stage existing downstream.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field, replace
from datetime import date
from typing import Mapping, Sequence

from .decomposer import SubTask
from .errors import (
    InsufficientHistory,
    MissingDecision,
    ResponseUnparseable,
    UnknownUser,
)
from .forge import ToolSpec
from .gateway import Backend, CostLedger, PromptTemplate, RateTable, chat
from .logstore import LogEntry, LogStore, UserSequence
from .prompts import EXECUTOR_SUBTASK, EXECUTOR_SYNTHESIS
from .runtime import ListCatalog, ToolResult, invoke

logger = logging.getLogger(__name__)

VERDICT_BENIGN = "benign"
VERDICT_MALICIOUS = "malicious"

DEFAULT_EXCERPT_BUDGET = 50

NO_ACTIVITY = "no activity of the inspected types for this user"
TOOL_UNAVAILABLE = "(tool unavailable)"

_KEY_LINE_RE = re.compile(r"^\s*\**(?P<key>[A-Za-z][\w /-]*?)\**\s*:\s*(?P<value>.*)$")


@dataclass(frozen=True)
class SubTaskResult:
    """One executor's judgment on one audit check."""

    subtask_id: str
    tool_rendered: str
    finding: str
    flagged: frozenset[str] = frozenset()
    suspicious: bool = False


@dataclass
class ExecutorResultSet:
    """An executor's per-check findings plus its overall verdict."""

    executor_id: str
    results: list[SubTaskResult]
    anomalies: frozenset[str]
    basis: str
    verdict: str
    round: int = 0
    correction: str | None = None


def apply_evidence_check(verdict: str, anomalies: frozenset[str]) -> tuple[str, str | None]:
    """Force verdict = malicious iff anomalies is non-empty; returns the
    corrected verdict and a note when a correction was applied."""
    consistent = VERDICT_MALICIOUS if anomalies else VERDICT_BENIGN
    if verdict == consistent:
        return verdict, None
    note = (
        f"stated decision {verdict!r} contradicts the evidence "
        f"({len(anomalies)} flagged entries); corrected to {consistent!r}"
    )
    logger.warning("evidence-consistency correction: %s", note)
    return consistent, note


# ---------------------------------------------------------------------------
# Structured response parsing
# ---------------------------------------------------------------------------

@dataclass
class StructuredResponse:
    fields: dict[str, str]
    decision: str
    suspicious_items: list[str]
    basis: str
    flagged: list[str] = field(default_factory=list)


def parse_key_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for line in text.splitlines():
        match = _KEY_LINE_RE.match(line)
        if match:
            pairs.append((match.group("key").strip(), match.group("value").strip()))
    return pairs


def _normalize_decision(value: str) -> str | None:
    lowered = value.strip().lower()
    if lowered.startswith(VERDICT_MALICIOUS):
        return VERDICT_MALICIOUS
    if lowered.startswith(VERDICT_BENIGN):
        return VERDICT_BENIGN
    return None


def _split_ids(value: str) -> list[str]:
    return [p for p in re.split(r"[,\s]+", value.strip()) if p and p.lower() not in ("none", "(none)")]


def parse_structured_response(text: str) -> StructuredResponse:
    """Line-oriented parse of ``Key: value`` pairs.

    Decision is mandatory and normalized to benign/malicious; duplicate
    Decision lines keep the last one (with a warning). Unknown keys are
    preserved in the fields map.
    """
    fields: dict[str, str] = {}
    decision: str | None = None
    decision_count = 0
    suspicious_items: list[str] = []
    basis = ""
    flagged: list[str] = []

    for key, value in parse_key_lines(text):
        lowered = key.lower()
        if lowered == "decision":
            decision_count += 1
            parsed = _normalize_decision(value)
            if parsed is not None:
                decision = parsed
        elif lowered == "suspicious":
            suspicious_items = [s.strip() for s in re.split(r"[;]", value) if s.strip()]
        elif lowered in ("basis of judgment", "basis"):
            basis = value
        elif lowered == "flagged":
            flagged = _split_ids(value)
        else:
            fields[key] = value

    if decision_count > 1:
        logger.warning("multiple Decision lines in response; keeping the last one")
    if decision is None:
        raise MissingDecision("no usable Decision line in response")
    return StructuredResponse(
        fields=fields,
        decision=decision,
        suspicious_items=suspicious_items,
        basis=basis,
        flagged=flagged,
    )


# ---------------------------------------------------------------------------
# Per-check execution
# ---------------------------------------------------------------------------

def select_focus_day(user: UserSequence, subtask: SubTask) -> date | None:
    """The day under audit: the user's busiest day for the check's activity
    types (earliest on ties), or None when no such activity exists."""
    counts: dict[date, int] = {}
    for entry in user.entries:
        if entry.activity in subtask.activity_types:
            counts[entry.day] = counts.get(entry.day, 0) + 1
    if not counts:
        return None
    return max(sorted(counts), key=lambda d: counts[d])


def render_excerpt(entries: Sequence[LogEntry], budget: int) -> str:
    lines = []
    for entry in entries[:budget]:
        payload = ", ".join(f"{k}={v}" for k, v in sorted(entry.payload.items()))
        lines.append(
            f"  {entry.entry_id} | {entry.timestamp.isoformat()} | {entry.activity.value} "
            f"| host={entry.host}" + (f" | {payload}" if payload else "")
        )
    return "\n".join(lines) if lines else "  (none)"


def _excerpt_entries(user: UserSequence, subtask: SubTask, focus: date | None, budget: int) -> list[LogEntry]:
    relevant = [e for e in user.entries if e.activity in subtask.activity_types]
    if len(relevant) <= budget:
        return relevant
    # Keep the audited day in view, then fill with the most recent entries.
    on_focus = [e for e in relevant if e.day == focus] if focus else []
    rest = [e for e in relevant if e not in on_focus]
    fill = rest[-(budget - len(on_focus)):] if budget > len(on_focus) else []
    picked = sorted(on_focus[:budget] + fill, key=lambda e: e.timestamp)
    return picked


def _parse_subtask_reply(text: str) -> tuple[str, bool, list[str]] | None:
    finding = None
    suspicious = None
    flagged: list[str] = []
    for key, value in parse_key_lines(text):
        lowered = key.lower()
        if lowered == "finding":
            finding = value
        elif lowered == "suspicious":
            word = value.strip().lower()
            if word.startswith(("y", "true")):
                suspicious = True
            elif word.startswith(("n", "false")):
                suspicious = False
        elif lowered == "flagged":
            flagged = _split_ids(value)
    if finding is None or suspicious is None:
        return None
    return finding, suspicious, flagged


def run_subtask(
    executor_id: str,
    subtask: SubTask,
    spec: ToolSpec | None,
    user: UserSequence,
    store: LogStore,
    backend: Backend,
    *,
    lists: ListCatalog | None = None,
    excerpt_budget: int = DEFAULT_EXCERPT_BUDGET,
    ledger: CostLedger,
    rates: RateTable | None = None,
    template: PromptTemplate = EXECUTOR_SUBTASK,
    seed_hint: int | None = None,
    tool_result_override: ToolResult | None = None,
) -> SubTaskResult:
    """Invoke the check's tool, ask the backend for a judgment, and parse it.

    Checks whose activity types are absent from the user's sequence are not
    sent to the backend at all: they report "no activity" and can never flag
    anomalies. Backend-flagged ids are validated against the user's own
    entries; when a suspicious judgment names no valid ids, the tool's own
    evidence is used instead. ``tool_result_override`` substitutes an
    already-computed tool output (used by ablation variants that fold many
    tools into one check).
    """
    focus = select_focus_day(user, subtask)
    tool_result: ToolResult | None = None
    rendered = TOOL_UNAVAILABLE
    signal = "none"

    if tool_result_override is not None:
        tool_result = tool_result_override
        rendered = tool_result.rendered
        signal = tool_result.verdict_hint or "none"
    elif spec is not None and spec.plan is not None:
        params: dict[str, str] = {}
        bindable = True
        for name, _semantic in spec.params:
            if name == "user":
                params["user"] = user.user
            elif name == "day":
                if focus is None:
                    bindable = False
                else:
                    params["day"] = focus.isoformat()
            else:
                bindable = False
        if bindable:
            try:
                tool_result = invoke(spec, params, store, lists)
                rendered = tool_result.rendered
                signal = tool_result.verdict_hint or "none"
            except (InsufficientHistory, UnknownUser) as exc:
                rendered = f"(no usable history: {exc})"
                signal = "none"
        else:
            rendered = "(tool not invocable: no relevant activity to bind)"
            signal = "none"

    if focus is None:
        # Vacuous check: nothing of these types to audit for this user.
        return SubTaskResult(
            subtask_id=subtask.id,
            tool_rendered=rendered if spec is not None else TOOL_UNAVAILABLE,
            finding=NO_ACTIVITY,
            flagged=frozenset(),
            suspicious=False,
        )

    excerpt = _excerpt_entries(user, subtask, focus, excerpt_budget)
    variables = {
        "user": user.user,
        "subtask_description": subtask.description,
        "tool_output": rendered,
        "tool_signal": signal,
        "excerpt_count": len(excerpt),
        "activity_excerpt": render_excerpt(excerpt, excerpt_budget),
    }

    completion, _ = chat(
        backend, template, variables,
        stage="subtask", ledger=ledger, rates=rates,
        note=f"{executor_id}:{subtask.id}", seed_hint=seed_hint,
    )
    parsed = _parse_subtask_reply(completion.text)
    if parsed is None:
        completion, _ = chat(
            backend, template,
            {**variables, "subtask_description": variables["subtask_description"]
             + " (Reply with the mandated Finding/Suspicious lines.)"},
            stage="subtask", ledger=ledger, rates=rates,
            note=f"{executor_id}:{subtask.id}:reprompt", seed_hint=seed_hint,
        )
        parsed = _parse_subtask_reply(completion.text)
        if parsed is None:
            raise ResponseUnparseable(
                f"check {subtask.id}: mandatory Finding/Suspicious lines absent after re-prompt"
            )
    finding, suspicious, raw_ids = parsed

    own_ids = {e.entry_id for e in user.entries}
    flagged = frozenset(i for i in raw_ids if i in own_ids and store.has_entry(i))
    dropped = [i for i in raw_ids if i not in flagged]
    if dropped:
        logger.warning("%s/%s: dropped %d flagged ids not in this user's entries",
                       executor_id, subtask.id, len(dropped))
    if suspicious and not flagged and tool_result is not None:
        flagged = frozenset(tool_result.evidence)
    if not suspicious:
        flagged = frozenset()

    return SubTaskResult(
        subtask_id=subtask.id,
        tool_rendered=rendered,
        finding=finding,
        flagged=flagged,
        suspicious=suspicious,
    )


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------

def render_findings(results: Sequence[SubTaskResult]) -> str:
    lines = []
    for result in results:
        mark = "yes" if result.suspicious else "no"
        lines.append(f"- [{result.subtask_id}] suspicious={mark}: {result.finding}")
        lines.append(f"    tool: {result.tool_rendered}")
        if result.flagged:
            lines.append(f"    flagged: {', '.join(sorted(result.flagged))}")
    return "\n".join(lines)


def _deterministic_basis(results: Sequence[SubTaskResult]) -> str:
    suspicious = [r.subtask_id for r in results if r.suspicious]
    if not suspicious:
        return "no suspicious behavior detected across the audit checks"
    return "suspicious findings from: " + ", ".join(suspicious)


def synthesize(
    executor_id: str,
    results: Sequence[SubTaskResult],
    backend: Backend | None = None,
    *,
    user: str = "",
    ledger: CostLedger | None = None,
    rates: RateTable | None = None,
    template: PromptTemplate = EXECUTOR_SYNTHESIS,
    round_index: int = 0,
) -> ExecutorResultSet:
    """Fold per-check results into a verdict.

    Without a backend the synthesis is the deterministic evidence fold
    (verdict from the union of flagged anomalies). With a backend, the
    structured summary is requested and then held to the same evidence
    check, so a hallucinated Decision can never survive.
    """
    anomalies = frozenset().union(*(r.flagged for r in results)) if results else frozenset()

    if backend is None:
        verdict = VERDICT_MALICIOUS if anomalies else VERDICT_BENIGN
        return ExecutorResultSet(
            executor_id=executor_id,
            results=list(results),
            anomalies=anomalies,
            basis=_deterministic_basis(results),
            verdict=verdict,
            round=round_index,
        )

    if ledger is None:
        raise ValueError("backend synthesis requires a ledger")
    variables = {"user": user, "findings_block": render_findings(results)}
    completion, _ = chat(
        backend, template, variables,
        stage="synthesis", ledger=ledger, rates=rates, note=executor_id,
    )
    try:
        parsed = parse_structured_response(completion.text)
    except MissingDecision:
        completion, _ = chat(
            backend, template,
            {**variables, "user": f"{user} (your reply must end with a Decision line)"},
            stage="synthesis", ledger=ledger, rates=rates, note=f"{executor_id}:reprompt",
        )
        try:
            parsed = parse_structured_response(completion.text)
        except MissingDecision as exc:
            raise ResponseUnparseable(f"synthesis for {user!r}: {exc}")

    verdict, correction = apply_evidence_check(parsed.decision, anomalies)
    basis = parsed.basis or _deterministic_basis(results)
    return ExecutorResultSet(
        executor_id=executor_id,
        results=list(results),
        anomalies=anomalies,
        basis=basis,
        verdict=verdict,
        round=round_index,
        correction=correction,
    )


def render_result_set(result_set: ExecutorResultSet, label: str) -> str:
    """Render a result set for debate prompts."""
    lines = [
        f"executor: {label}",
        f"round: {result_set.round}",
        f"verdict: {result_set.verdict}",
        f"anomalous entries: {', '.join(sorted(result_set.anomalies)) or '(none)'}",
        f"basis: {result_set.basis}",
        "findings:",
        render_findings(result_set.results) or "  (none)",
    ]
    return "\n".join(lines)


def rebuild_results_from_anomalies(
    base: Sequence[SubTaskResult],
    anomalies: frozenset[str],
    attribution: Mapping[str, str],
) -> list[SubTaskResult]:
    """Redistribute an updated anomaly set over per-check results.

    Each anomaly id goes to the check it was originally flagged by (own or
    opposing side); unattributable ids fall to the first check. Suspicion
    follows the evidence.
    """
    per_check: dict[str, set[str]] = {r.subtask_id: set() for r in base}
    for entry_id in anomalies:
        check = attribution.get(entry_id)
        if check not in per_check:
            check = base[0].subtask_id if base else None
        if check is not None:
            per_check[check].add(entry_id)
    rebuilt = []
    for result in base:
        ids = frozenset(per_check.get(result.subtask_id, ()))
        rebuilt.append(replace(result, flagged=ids, suspicious=bool(ids)))
    return rebuilt
