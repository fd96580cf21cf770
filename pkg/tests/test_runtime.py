from __future__ import annotations

from datetime import date

import pytest

from conftest import entry, seal
from logaudit.errors import (
    InsufficientHistory,
    MalformedUrl,
    ParamMissing,
    UnknownList,
    UnknownUser,
)
from logaudit.forge import builtin_tools
from logaudit.logstore import ActivityType
from logaudit.plans import parse_plan
from logaudit.runtime import (
    ListDef,
    baseline_stats,
    check_url,
    daily_counts,
    extract_domain,
    invoke,
)
from oracles import naive_plan_eval

DENY = ListDef("untrusted_domains", "domain_deny", frozenset({"wikileaks.org"}))
KEYWORDS = ListDef("disgruntled_keywords", "keyword", frozenset({"resign", "unfair"}))
LISTS = {"untrusted_domains": DENY, "disgruntled_keywords": KEYWORDS}


def _logon_tool():
    return builtin_tools()["logon_frequency"]


# --- invoke: baseline comparison ---

def test_logon_burst_is_suspicious(burst_store):
    # History [1,2,1,2] excluding the audited day: mean 1.5, std 0.5.
    # |4 - 1.5| = 2.5 > 2 * 0.5 -> suspicious, "above average".
    result = invoke(_logon_tool(), {"user": "UX", "day": "2024-01-05"}, burst_store)
    assert result.verdict_hint == "suspicious"
    assert result.values["n"] == 4
    assert abs(float(result.values["mu"]) - 1.5) <= 1e-9
    assert abs(float(result.values["sigma"]) - 0.5) <= 1e-9
    assert result.values["assessment"] == "above average"
    assert "above average" in result.rendered
    assert len(result.evidence) == 4


def test_exactly_mean_activity_is_normal(burst_store):
    result = invoke(_logon_tool(), {"user": "UY", "day": "2024-01-03"}, burst_store)
    assert result.verdict_hint == "normal"
    assert result.values["assessment"] == "within normal range"
    assert result.evidence == ()


def test_boundary_deviation_is_not_suspicious():
    # History [1,3] -> mean 2, std 1; current 4 gives |4-2| = 2 == 2*1,
    # which is not strictly greater, so it stays normal.
    entries = []
    for day, count in enumerate([1, 3, 4]):
        for j in range(count):
            entries.append(entry(f"B{day}{j}", "u", ActivityType.LOGON,
                                 day_offset=day, hour=8 + j))
    store = seal(entries)
    result = invoke(_logon_tool(), {"user": "u", "day": "2024-01-03"}, store)
    assert result.verdict_hint == "normal"


def test_baseline_over_zero_history_raises(burst_store):
    single = seal([entry("S1", "solo", ActivityType.LOGON)])
    with pytest.raises(InsufficientHistory):
        invoke(_logon_tool(), {"user": "solo", "day": "2024-01-01"}, single)


def test_param_missing(burst_store):
    with pytest.raises(ParamMissing):
        invoke(_logon_tool(), {"user": "UX"}, burst_store)


# --- invoke: lookups ---

def test_denylist_lookup_flags_visit(burst_store):
    tool = builtin_tools()["url_legitimacy"]
    result = invoke(tool, {"user": "UX"}, burst_store, LISTS)
    assert result.verdict_hint == "suspicious"
    assert result.values["n_matched"] == 1
    assert result.values["matched"] == "wikileaks.org"
    assert result.evidence == ("WEB-1",)


def test_denylist_lookup_clean_user(burst_store):
    tool = builtin_tools()["url_legitimacy"]
    result = invoke(tool, {"user": "UY"}, burst_store, LISTS)
    assert result.verdict_hint == "normal"
    assert result.values["n_matched"] == 0
    assert result.values["matched"] == "(none)"


def test_keyword_lookup_on_email_body():
    store = seal([
        entry("M1", "u", ActivityType.EMAIL_SEND, body="I may resign over this unfair review"),
        entry("M2", "u", ActivityType.EMAIL_SEND, day_offset=1, body="weekly status"),
    ])
    tool = builtin_tools()["email_keywords"]
    result = invoke(tool, {"user": "u"}, store, LISTS)
    assert result.verdict_hint == "suspicious"
    assert result.values["n_matched"] == 1
    assert "resign" in str(result.values["matched"])


def test_lookup_unknown_list(burst_store):
    tool = builtin_tools()["url_legitimacy"]
    with pytest.raises(UnknownList):
        invoke(tool, {"user": "UX"}, burst_store, {})


def test_empty_selection_yields_n_zero(burst_store):
    tool = builtin_tools()["email_keywords"]
    result = invoke(tool, {"user": "UX"}, burst_store, LISTS)
    assert result.values["n"] == 0
    assert result.verdict_hint == "normal"


def test_invoke_deterministic(burst_store):
    tool = builtin_tools()["logon_frequency"]
    first = invoke(tool, {"user": "UX", "day": "2024-01-05"}, burst_store)
    second = invoke(tool, {"user": "UX", "day": "2024-01-05"}, burst_store)
    assert first.values == second.values
    assert first.rendered == second.rendered
    assert first.evidence == second.evidence


# --- baseline_stats ---

def test_baseline_stats_flat_counts():
    store = seal(sum(([entry(f"F{d}{j}", "u", ActivityType.LOGON, day_offset=d, hour=8 + j)
                       for j in range(2)] for d in range(3)), []))
    stats = baseline_stats(store, "u", ActivityType.LOGON,
                           (date(2024, 1, 1), date(2024, 1, 3)))
    assert stats.mean == 2.0
    assert stats.std == 0.0
    assert stats.n_days == 3


def test_baseline_stats_population_std():
    # Counts [0, 4] over a two-day window: population mean 2, std 2.
    store = seal([entry(f"P{j}", "u", ActivityType.LOGON, day_offset=1, hour=8 + j)
                  for j in range(4)])
    stats = baseline_stats(store, "u", ActivityType.LOGON,
                           (date(2024, 1, 1), date(2024, 1, 2)))
    assert stats.mean == 2.0
    assert stats.std == 2.0


def test_baseline_stats_zero_fill_absent_user_window():
    store = seal([entry("Z1", "u", ActivityType.LOGON)])
    stats = baseline_stats(store, "u", ActivityType.EMAIL_SEND,
                           (date(2024, 2, 1), date(2024, 2, 7)))
    assert stats.mean == 0.0
    assert stats.std == 0.0
    assert stats.n_days == 7


def test_baseline_stats_unknown_user():
    store = seal([entry("Z1", "u", ActivityType.LOGON)])
    with pytest.raises(UnknownUser):
        baseline_stats(store, "ghost", ActivityType.LOGON,
                       (date(2024, 1, 1), date(2024, 1, 2)))


def test_daily_counts_zero_fill():
    counts = daily_counts([entry("D1", "u", ActivityType.LOGON, day_offset=1)],
                          (date(2024, 1, 1), date(2024, 1, 3)))
    assert counts == {date(2024, 1, 1): 0, date(2024, 1, 2): 1, date(2024, 1, 3): 0}


# --- check_url ---

def test_check_url_denied_domain():
    assert check_url("http://wikileaks.org/xxx.php", deny={"wikileaks.org"}) == "untrusted"


def test_check_url_subdomain_and_port():
    assert check_url("https://files.wikileaks.org:8443/a", deny={"wikileaks.org"}) == "untrusted"
    assert check_url("http://notwikileaks.org/a", deny={"wikileaks.org"}) == "unknown"


def test_check_url_allowed_domain():
    assert check_url("http://docs.corp.example/x", allow={"corp.example"}) == "trusted"


def test_check_url_unknown_domain():
    assert check_url("http://neutral.example.net/") == "unknown"


def test_check_url_malformed():
    with pytest.raises(MalformedUrl):
        check_url("not a url")
    with pytest.raises(MalformedUrl):
        extract_domain("")


def test_check_url_schemeless():
    assert extract_domain("www.example.com/path") == "www.example.com"


# --- oracle spot checks (the big equivalence suite lives in acceptance) ---

def test_invoke_matches_naive_oracle_on_counts(burst_store):
    plan = parse_plan("select activity=Logon user={user} day={day}\naggregate func=count")
    from logaudit.forge import ToolSpec
    from logaudit.plans import free_params
    from logaudit.runtime import default_output_template

    spec = ToolSpec(name="t", subtask_id="s", plan=plan, params=free_params(plan),
                    output_template=default_output_template(plan), status="decorated",
                    doc="count logons")
    params = {"user": "UX", "day": "2024-01-05"}
    mine = invoke(spec, params, burst_store)
    theirs = naive_plan_eval(burst_store, plan, params)
    assert mine.values["n"] == theirs["n"] == 4
