from __future__ import annotations

import json

import pytest

from conftest import entry, seal
from logaudit.decomposer import SubTask, SubTaskSet
from logaudit.errors import (
    InvalidTestCases,
    LifecycleError,
    PlanInvalid,
    RegistryCorrupt,
    TemplateMismatch,
    ToolIrreparable,
)
from logaudit.forge import (
    ToolTestCase,
    ToolSpec,
    build_tool_for_subtask,
    builtin_tools,
    decorate_tool,
    draft_tool,
    load_registry,
    match_builtin,
    repair_tool,
    save_registry,
    unit_test_tool,
)
from logaudit.gateway import ScriptEntry, make_scripted_backend
from logaudit.logstore import ActivityType
from logaudit.plans import parse_plan

LOGON_SUBTASK = SubTask(
    id="logon-baseline",
    description="Compare daily logon counts against the user's baseline.",
    activity_types=frozenset({ActivityType.LOGON}),
)

GOOD_PLAN = ("select activity=Logon user={user}\ngroup_by key=user_day\n"
             "aggregate func=count\nbaseline_compare statistic=mean k_sigma=2.0")
COUNT_PLAN = "select activity=Logon user={user} day={day}\naggregate func=count"
BAD_FIELD_PLAN = "select activity=HttpVisit user={user}\nfilter field=urll predicate=contains value=x"

LOG_EXAMPLES = [entry("L1", "u", ActivityType.LOGON)]
RESULT_EXAMPLES = ["n=4"]


@pytest.fixture
def fixture_store(burst_store):
    return burst_store


def _count_cases():
    return [
        ToolTestCase(params={"user": "UX", "day": "2024-01-05"}, expected={"n": 4}),
        ToolTestCase(params={"user": "UX", "day": "2024-01-02"}, expected={"n": 2}),
        ToolTestCase(params={"user": "UY", "day": "2024-01-03"}, expected={"n": 2}),
    ]


# --- drafting ---

def test_draft_tool_parses_scripted_plan(ledger):
    backend = make_scripted_backend([("tool_builder", GOOD_PLAN)])
    spec = draft_tool(LOGON_SUBTASK, LOG_EXAMPLES, RESULT_EXAMPLES, backend, ledger=ledger)
    assert spec.status == "draft"
    assert spec.plan == parse_plan(GOOD_PLAN)
    assert spec.params == (("day", "date"), ("user", "principal"))
    assert spec.subtask_id == "logon-baseline"


def test_draft_tool_invalid_plan_raises_with_text(ledger):
    backend = make_scripted_backend([("tool_builder", "aggregate func=count\nselect activity=Logon")])
    with pytest.raises(PlanInvalid) as excinfo:
        draft_tool(LOGON_SUBTASK, LOG_EXAMPLES, RESULT_EXAMPLES, backend, ledger=ledger)
    assert hasattr(excinfo.value, "completion_text")


def test_draft_tool_unknown_field(ledger):
    backend = make_scripted_backend([("tool_builder", BAD_FIELD_PLAN)])
    with pytest.raises(PlanInvalid) as excinfo:
        draft_tool(LOGON_SUBTASK, LOG_EXAMPLES, RESULT_EXAMPLES, backend, ledger=ledger)
    assert "urll" in str(excinfo.value)


def test_draft_tool_requires_examples(ledger):
    backend = make_scripted_backend([("tool_builder", GOOD_PLAN)])
    with pytest.raises(InvalidTestCases):
        draft_tool(LOGON_SUBTASK, [], RESULT_EXAMPLES, backend, ledger=ledger)
    with pytest.raises(InvalidTestCases):
        draft_tool(LOGON_SUBTASK, LOG_EXAMPLES, [], backend, ledger=ledger)


# --- unit testing ---

def _draft(plan_text: str) -> ToolSpec:
    plan = parse_plan(plan_text)
    from logaudit.plans import free_params
    from logaudit.runtime import default_output_template

    return ToolSpec(name="logon-baseline-tool", subtask_id="logon-baseline", plan=plan,
                    params=free_params(plan), output_template=default_output_template(plan))


def test_unit_test_passes_on_brute_force_counts(fixture_store):
    spec = _draft(COUNT_PLAN)
    report = unit_test_tool(spec, fixture_store, _count_cases())
    assert report.passed
    assert spec.status == "tested"
    assert len(report.invocations) == 3
    assert spec.test_cases == tuple(_count_cases())


def test_unit_test_records_mismatch(fixture_store):
    spec = _draft(COUNT_PLAN)
    cases = [ToolTestCase(params={"user": "UX", "day": "2024-01-05"}, expected={"n": 5})]
    report = unit_test_tool(spec, fixture_store, cases)
    assert not report.passed
    assert spec.status == "draft"
    assert "expected 5" in report.failures[0]
    assert "got 4" in report.failures[0]


def test_unit_test_zero_cases_rejected(fixture_store):
    with pytest.raises(InvalidTestCases):
        unit_test_tool(_draft(COUNT_PLAN), fixture_store, [])


def test_unit_test_pads_to_three_invocations(fixture_store):
    spec = _draft(COUNT_PLAN)
    report = unit_test_tool(spec, fixture_store,
                            [ToolTestCase(params={"user": "UX", "day": "2024-01-05"},
                                      expected={"n": 4})])
    assert len(report.invocations) == 3
    assert report.passed


def test_unit_test_requires_draft_status(fixture_store):
    spec = _draft(COUNT_PLAN)
    unit_test_tool(spec, fixture_store, _count_cases())
    with pytest.raises(LifecycleError):
        unit_test_tool(spec, fixture_store, _count_cases())


# --- repair ---

def test_repair_fixes_bad_field_on_first_attempt(fixture_store, ledger):
    backend = make_scripted_backend([("tool_repair", COUNT_PLAN)])
    spec = _draft("select activity=Logon user={user} day={day}\naggregate func=count\n")
    spec.plan = None  # simulate a failed draft carrying only raw text
    spec.raw_plan_text = BAD_FIELD_PLAN
    repaired = repair_tool(spec, ["PlanInvalid: unknown field 'urll'"], backend,
                           fixture_store, _count_cases(), ledger=ledger,
                           subtask=LOGON_SUBTASK)
    assert repaired.status == "tested"
    assert repaired.plan == parse_plan(COUNT_PLAN)


def test_repair_exhausts_attempts(fixture_store, ledger):
    backend = make_scripted_backend([
        ScriptEntry("tool_repair", BAD_FIELD_PLAN, repeat=True),
    ])
    spec = _draft(COUNT_PLAN)
    spec.plan = None
    with pytest.raises(ToolIrreparable):
        repair_tool(spec, ["bad"], backend, fixture_store, _count_cases(),
                    max_attempts=3, ledger=ledger, subtask=LOGON_SUBTASK)
    # exactly three repair prompts were issued
    assert sum(1 for r in ledger.records() if r.stage == "tool-repair") == 3


def test_repair_rejects_tested_spec(fixture_store, ledger):
    backend = make_scripted_backend([])
    spec = _draft(COUNT_PLAN)
    unit_test_tool(spec, fixture_store, _count_cases())
    with pytest.raises(LifecycleError):
        repair_tool(spec, ["x"], backend, fixture_store, _count_cases(), ledger=ledger)


# --- decoration ---

def test_decorate_produces_labeled_sentence(fixture_store):
    spec = _draft(GOOD_PLAN)
    cases = [ToolTestCase(params={"user": "UX", "day": "2024-01-05"}, expected={"n": 4})]
    unit_test_tool(spec, fixture_store, cases)
    decorated = decorate_tool(spec, LOGON_SUBTASK)
    assert decorated.status == "decorated"
    assert decorated.doc.startswith("Compare daily logon counts")
    assert "{assessment}" in decorated.output_template
    assert "{mu}" in decorated.output_template
    from logaudit.runtime import invoke

    result = invoke(decorated, {"user": "UX", "day": "2024-01-05"}, fixture_store)
    assert "above average" in result.rendered


def test_decorate_rejects_template_with_foreign_placeholder(fixture_store):
    from logaudit.forge import validate_template

    plan = parse_plan(GOOD_PLAN)
    with pytest.raises(TemplateMismatch):
        validate_template("User {user} on host {host}: {n}", plan)


def test_decorate_twice_is_idempotent(fixture_store):
    spec = _draft(COUNT_PLAN)
    unit_test_tool(spec, fixture_store, _count_cases())
    decorated = decorate_tool(spec, LOGON_SUBTASK)
    template = decorated.output_template
    again = decorate_tool(decorated, LOGON_SUBTASK)
    assert again is decorated
    assert again.output_template == template


def test_decorate_requires_tested(fixture_store):
    with pytest.raises(LifecycleError):
        decorate_tool(_draft(COUNT_PLAN), LOGON_SUBTASK)


# --- builtins ---

def test_builtins_are_decorated_and_valid():
    tools = builtin_tools()
    assert set(tools) == {
        "logon_frequency", "after_hours_logon", "device_usage_rate",
        "url_legitimacy", "email_keywords", "executable_download",
    }
    for spec in tools.values():
        assert spec.status == "decorated"
        assert spec.builtin
        assert spec.doc


def test_match_builtin_keyword_routing():
    download = SubTask("d", "Detect executable payload downloads from websites.",
                       frozenset({ActivityType.HTTP_VISIT}))
    assert match_builtin(download).name == "d-builtin"
    assert "executable_markers" in match_builtin(download).plan.stages[-1].list_name

    url = SubTask("u", "Verify website legitimacy.", frozenset({ActivityType.HTTP_VISIT}))
    assert match_builtin(url).plan.stages[-1].list_name == "untrusted_domains"

    email = SubTask("e", "Screen email tone.", frozenset({ActivityType.EMAIL_SEND}))
    assert match_builtin(email).plan.stages[-1].list_name == "disgruntled_keywords"

    logon = SubTask("l", "Check logon frequency.", frozenset({ActivityType.LOGON}))
    from logaudit.plans import BaselineCompareStage

    assert isinstance(match_builtin(logon).plan.stages[-1], BaselineCompareStage)

    night = SubTask("n", "Check after-hours logon activity.", frozenset({ActivityType.LOGON}))
    assert match_builtin(night).plan.filters()  # the hour filter marks the night variant

    zeek = SubTask("z", "Inspect kerberos anomalies.", frozenset({ActivityType.ZEEK_AUTH}))
    assert match_builtin(zeek) is None


def test_build_tool_falls_back_to_builtin(fixture_store, ledger):
    backend = make_scripted_backend([
        ScriptEntry("tool_builder", BAD_FIELD_PLAN),
        ScriptEntry("tool_repair", BAD_FIELD_PLAN, repeat=True),
    ])
    outcome = build_tool_for_subtask(
        LOGON_SUBTASK, LOG_EXAMPLES, _count_cases(), fixture_store, backend, ledger=ledger
    )
    assert outcome.used_builtin
    assert outcome.spec is not None
    assert outcome.spec.subtask_id == "logon-baseline"
    assert outcome.spec.status == "decorated"
    assert outcome.error is not None


# --- registry ---

def _decorated_specs(fixture_store):
    spec = _draft(GOOD_PLAN)
    unit_test_tool(spec, fixture_store,
                   [ToolTestCase(params={"user": "UX", "day": "2024-01-05"}, expected={"n": 4})])
    decorate_tool(spec, LOGON_SUBTASK)
    return [spec]


def _subtask_set():
    return SubTaskSet(subtasks=[LOGON_SUBTASK], rounds=1)


def test_registry_round_trip(tmp_path, fixture_store):
    specs = _decorated_specs(fixture_store)
    path = tmp_path / "registry.json"
    save_registry(specs, _subtask_set(), path)
    loaded = load_registry(path)
    assert loaded.warnings == []
    assert len(loaded.tools) == 1
    tool = loaded.tools[0]
    original = specs[0]
    assert tool.name == original.name
    assert tool.plan == original.plan
    assert tool.output_template == original.output_template
    assert tool.params == original.params
    assert tool.test_cases[0].params == original.test_cases[0].params
    assert loaded.subtasks.subtasks[0] == LOGON_SUBTASK
    assert loaded.subtasks.rounds == 1
    # Save the loaded registry again: byte-identical file.
    second = tmp_path / "registry2.json"
    save_registry(loaded.tools, loaded.subtasks, second)
    assert path.read_bytes() == second.read_bytes()


def test_registry_rejects_non_decorated_on_save(tmp_path, fixture_store):
    spec = _draft(COUNT_PLAN)
    with pytest.raises(LifecycleError):
        save_registry([spec], _subtask_set(), tmp_path / "r.json")


def test_registry_draft_status_is_corrupt(tmp_path, fixture_store):
    path = tmp_path / "registry.json"
    save_registry(_decorated_specs(fixture_store), _subtask_set(), path)
    doc = json.loads(path.read_text())
    doc["tools"][0]["status"] = "draft"
    path.write_text(json.dumps(doc))
    with pytest.raises(RegistryCorrupt):
        load_registry(path)


def test_registry_bad_format_tag(tmp_path):
    path = tmp_path / "registry.json"
    path.write_text(json.dumps({"format": "something/9", "tools": []}))
    with pytest.raises(RegistryCorrupt):
        load_registry(path)


def test_registry_load_warns_on_missing_activity_type(tmp_path, fixture_store):
    path = tmp_path / "registry.json"
    save_registry(_decorated_specs(fixture_store), _subtask_set(), path)
    pruned = seal([entry("H1", "u", ActivityType.HTTP_VISIT, url="http://a.example/")])
    loaded = load_registry(path, store=pruned)
    assert len(loaded.warnings) == 1
    assert "logon-baseline-tool" in loaded.warnings[0]


def test_registry_load_detects_case_drift(tmp_path, fixture_store):
    path = tmp_path / "registry.json"
    save_registry(_decorated_specs(fixture_store), _subtask_set(), path)
    drifted = seal([entry("L1", "UX", ActivityType.LOGON)])
    with pytest.raises(RegistryCorrupt):
        load_registry(path, store=drifted)


def test_registry_verifies_cases_against_store(tmp_path, fixture_store):
    path = tmp_path / "registry.json"
    save_registry(_decorated_specs(fixture_store), _subtask_set(), path)
    loaded = load_registry(path, store=fixture_store)
    assert loaded.warnings == []
