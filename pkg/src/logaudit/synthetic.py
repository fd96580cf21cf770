"""Synthetic CERT-style demo corpus plus the scripted backend that audits it.

Generates a 50-user fixture (48 benign users, one data-leakage user who
visits a deny-listed site, one keylogging insider with a logon burst, an
executable download, and a disgruntled email), the allow/deny/keyword lists,
per-check unit-test cases, a deterministic backend script, and a ready run
config. Everything is derived from fixed formulas, so repeated generation is
byte-identical.

    python -m logaudit.synthetic demo/
    logaudit ingest --config demo/config.json
"""

from __future__ import annotations

import argparse
import csv
import json
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from pathlib import Path

from .decomposer import slugify

N_BENIGN = 48
N_DAYS = 14
START_DAY = date(2024, 3, 4)

LEAK_USER = "LEAK0001"
KEYLOG_USER = "KEYL0001"

LEAK_DAY_OFFSET = 6
BURST_DAY_OFFSET = 9
BURST_LOGONS = 5

LEAK_URL = "http://wikileaks.org/xxx.php"
KEYLOGGER_URL = "http://free-keytools.example.net/tools/keylogger.exe"
DISGRUNTLED_BODY = (
    "I am irreplaceable here and this treatment is unfair; I may resign soon."
)

TRUSTED_DOMAINS = ("docs.corp.example", "intranet.corp.example", "news.example.com")

# The seven audit checks the scripted planner proposes.
CHECKS = [
    ("Compare each user's daily logon count against their personal baseline.",
     "Logon, Logoff", "per-day logon counts, baseline mean and deviation",
     "daily logon count",
     "select activity=Logon user={user}\ngroup_by key=user_day\n"
     "aggregate func=count\nbaseline_compare statistic=mean k_sigma=2.0"),
    ("Verify the legitimacy of visited website domains.",
     "HttpVisit", "visited domains, domain deny list",
     "legitimacy of visited",
     "select activity=HttpVisit user={user}\nlookup list=untrusted_domains field=url"),
    ("Review visited website content for threatening material.",
     "HttpVisit", "page content keywords",
     "website content for threatening",
     "select activity=HttpVisit user={user}\nlookup list=threat_keywords field=content"),
    ("Detect downloads of executable payloads from websites.",
     "HttpVisit", "download markers in URLs",
     "downloads of executable payloads",
     "select activity=HttpVisit user={user}\nlookup list=executable_markers field=url"),
    ("Compare each user's daily removable device usage against their baseline.",
     "DeviceConnect, DeviceDisconnect", "per-day device connections",
     "daily removable device",
     "select activity=DeviceConnect user={user}\ngroup_by key=user_day\n"
     "aggregate func=count\nbaseline_compare statistic=mean k_sigma=2.0"),
    ("Screen outgoing email content for disgruntlement or data theft.",
     "EmailSend", "email bodies, keyword list",
     "outgoing email content",
     "select activity=EmailSend user={user}\nlookup list=disgruntled_keywords field=body"),
    ("Review file operations for executable or sensitive files.",
     "FileOp", "filenames and extensions",
     "file operations for executable",
     "select activity=FileOp user={user}\nfilter field=filename predicate=matches_glob "
     "value=*.exe\naggregate func=count"),
]

LISTS = {
    "untrusted_domains": ("domain_deny", ["wikileaks.org", "pastebin.example.net"]),
    "trusted_domains": ("domain_allow", list(TRUSTED_DOMAINS)),
    "threat_keywords": ("keyword", ["keylog", "exploit", "crack"]),
    "disgruntled_keywords": ("keyword", ["resign", "unfair", "irreplaceable", "dissatisf"]),
    "executable_markers": ("keyword", [".exe", ".msi", ".scr"]),
}


@dataclass
class DemoManifest:
    """What the generator produced, for tests and demos."""

    users: list[str]
    malicious_users: list[str]
    burst_day: date
    leak_day: date
    check_ids: list[str]
    malicious_entry_ids: list[str]
    logons_per_day: dict[str, int]
    entry_counts: dict[str, int] = field(default_factory=dict)


class _Corpus:
    def __init__(self) -> None:
        self.rows: dict[str, list[list[str]]] = {
            "logon": [], "device": [], "http": [], "email": [], "file": []
        }
        self.malicious: list[str] = []
        self._seq = 0

    def next_id(self) -> str:
        self._seq += 1
        return f"{{S{self._seq:07d}}}"

    @staticmethod
    def ts(day: date, hour: int, minute: int, second: int = 0) -> str:
        return datetime(day.year, day.month, day.day, hour, minute, second).strftime(
            "%m/%d/%Y %H:%M:%S"
        )

    def logon(self, day: date, user: str, pc: str, hour: int, minute: int,
              kind: str = "Logon") -> str:
        entry_id = self.next_id()
        self.rows["logon"].append([entry_id, self.ts(day, hour, minute), user, pc, kind])
        return entry_id

    def device(self, day: date, user: str, pc: str, hour: int, minute: int, kind: str) -> str:
        entry_id = self.next_id()
        self.rows["device"].append([entry_id, self.ts(day, hour, minute), user, pc, kind])
        return entry_id

    def http(self, day: date, user: str, pc: str, hour: int, minute: int,
             url: str, content: str) -> str:
        entry_id = self.next_id()
        self.rows["http"].append([entry_id, self.ts(day, hour, minute), user, pc, url, content])
        return entry_id

    def email(self, day: date, user: str, pc: str, hour: int, minute: int,
              to: str, body: str) -> str:
        entry_id = self.next_id()
        self.rows["email"].append([
            entry_id, self.ts(day, hour, minute), user, pc, to, "", "",
            f"{user.lower()}@corp.example", str(len(body)), "0", body,
        ])
        return entry_id

    def file_op(self, day: date, user: str, pc: str, hour: int, minute: int,
                filename: str, content: str) -> str:
        entry_id = self.next_id()
        self.rows["file"].append([
            entry_id, self.ts(day, hour, minute), user, pc, filename, content,
        ])
        return entry_id


def _benign_day(corpus: _Corpus, day: date, user: str, pc: str, index: int,
                logon_rate: int, has_device: bool) -> None:
    corpus.logon(day, user, pc, 8, index % 50)
    if logon_rate == 2:
        corpus.logon(day, user, pc, 13, (index * 7) % 50)
    corpus.logon(day, user, pc, 17, 30, kind="Logoff")
    domain = TRUSTED_DOMAINS[(index + day.toordinal()) % len(TRUSTED_DOMAINS)]
    corpus.http(day, user, pc, 10, (index * 3) % 50,
                f"http://{domain}/pages/item-{day.toordinal() % 97}.html",
                "quarterly planning notes and schedules")
    if has_device:
        corpus.device(day, user, pc, 9, 15, "Connect")
        corpus.device(day, user, pc, 16, 45, "Disconnect")
    corpus.email(day, user, pc, 11, (index * 5) % 50,
                 f"team-{index % 9}@corp.example",
                 "weekly status update attached; all milestones on track")
    corpus.file_op(day, user, pc, 14, (index * 11) % 50,
                   f"report_w{day.isocalendar()[1]}_{index}.docx",
                   "routine weekly report text")


def build_corpus() -> tuple[_Corpus, DemoManifest]:
    corpus = _Corpus()
    days = [START_DAY + timedelta(days=i) for i in range(N_DAYS)]
    burst_day = START_DAY + timedelta(days=BURST_DAY_OFFSET)
    leak_day = START_DAY + timedelta(days=LEAK_DAY_OFFSET)

    users: list[str] = []
    logons_per_day: dict[str, int] = {}

    for i in range(1, N_BENIGN + 1):
        user = f"B{i:04d}"
        users.append(user)
        pc = f"PC-{i:04d}"
        rate = 1 + (i % 2)
        logons_per_day[user] = rate
        for day in days:
            _benign_day(corpus, day, user, pc, i, rate, has_device=(i % 3 == 0))

    # Data-leakage insider: steady habits, one visit to a deny-listed site.
    users.append(LEAK_USER)
    logons_per_day[LEAK_USER] = 1
    pc = "PC-0101"
    for day in days:
        _benign_day(corpus, day, LEAK_USER, pc, 101, 1, has_device=False)
        if day == leak_day:
            leak_visit = corpus.http(day, LEAK_USER, pc, 15, 42, LEAK_URL,
                                     "leaked documents archive")
            corpus.malicious.append(leak_visit)

    # Keylogging insider: logon burst, keylogger download, disgruntled email.
    users.append(KEYLOG_USER)
    logons_per_day[KEYLOG_USER] = 2
    pc = "PC-0102"
    for day in days:
        base = [(8, 2), (13, 21)] if day != burst_day else [
            (6, 12), (8, 2), (12, 40), (13, 21), (20, 55)
        ]
        for hour, minute in base:
            entry_id = corpus.logon(day, KEYLOG_USER, pc, hour, minute)
            if day == burst_day:
                corpus.malicious.append(entry_id)
        corpus.logon(day, KEYLOG_USER, pc, 18, 5, kind="Logoff")
        corpus.device(day, KEYLOG_USER, pc, 9, 5, "Connect")
        corpus.device(day, KEYLOG_USER, pc, 9, 35, "Disconnect")
        corpus.device(day, KEYLOG_USER, pc, 15, 5, "Connect")
        corpus.device(day, KEYLOG_USER, pc, 15, 35, "Disconnect")
        corpus.http(day, KEYLOG_USER, pc, 10, 10,
                    f"http://{TRUSTED_DOMAINS[0]}/pages/item-{day.toordinal() % 97}.html",
                    "quarterly planning notes and schedules")
        if day == burst_day:
            download = corpus.http(day, KEYLOG_USER, pc, 12, 58, KEYLOGGER_URL,
                                   "keylogger download page free keylogging tools")
            corpus.malicious.append(download)
            angry = corpus.email(day, KEYLOG_USER, pc, 16, 33,
                                 "friend@external.example", DISGRUNTLED_BODY)
            corpus.malicious.append(angry)
        else:
            corpus.email(day, KEYLOG_USER, pc, 11, 7, "team-2@corp.example",
                         "weekly status update attached; all milestones on track")
        corpus.file_op(day, KEYLOG_USER, pc, 14, 44,
                       f"report_w{day.isocalendar()[1]}_k.docx", "routine weekly report text")

    manifest = DemoManifest(
        users=users,
        malicious_users=[LEAK_USER, KEYLOG_USER],
        burst_day=burst_day,
        leak_day=leak_day,
        check_ids=[slugify(desc) for desc, *_ in CHECKS],
        malicious_entry_ids=list(corpus.malicious),
        logons_per_day=logons_per_day,
        entry_counts={kind: len(rows) for kind, rows in corpus.rows.items()},
    )
    return corpus, manifest


# ---------------------------------------------------------------------------
# Scripted backend
# ---------------------------------------------------------------------------

def _decomposition_response() -> str:
    lines = []
    for i, (desc, types, context, _marker, _plan) in enumerate(CHECKS, start=1):
        lines.append(f"{i}. {desc} (types: {types}; context: {context})")
    return "\n".join(lines)


def build_script() -> list[dict[str, object]]:
    """Backend script for the whole pipeline; executor judgments depend only
    on what the tool output says."""
    script: list[dict[str, object]] = [
        {"when": "[stage: decompose]", "response": _decomposition_response()},
        {"when": "[stage: refine]", "response": "nothing further"},
    ]
    for _desc, _types, _context, marker, plan in CHECKS:
        script.append({"when": ["[stage: tool-draft]", marker], "response": plan})
    script += [
        {"when": ["[stage: subtask]", "Tool signal: suspicious"],
         "response": "Finding: Tool evidence shows anomalous behavior for this check.\nSuspicious: yes",
         "repeat": True},
        {"when": ["[stage: subtask]", "Tool signal: normal"],
         "response": "Finding: Within the user's normal range for this check.\nSuspicious: no",
         "repeat": True},
        {"when": "[stage: subtask]",
         "response": "Finding: Nothing notable in the excerpt.\nSuspicious: no",
         "repeat": True},
        {"when": ["[stage: merge]", "verdict: malicious"],
         "response": "Basis of Judgment: Combined evidence from both independent audits.\nDecision: Malicious",
         "repeat": True},
        {"when": "[stage: merge]",
         "response": "Basis of Judgment: No anomalies reported by either audit.\nDecision: Benign",
         "repeat": True},
        {"when": ["[stage: one-shot]", "(signal: suspicious)"],
         "response": "Suspicious: tool-flagged behaviors\nBasis of Judgment: Tool outputs show deviations.\nDecision: Malicious",
         "repeat": True},
        {"when": "[stage: one-shot]",
         "response": "Suspicious: none\nBasis of Judgment: No tool signals.\nDecision: Benign",
         "repeat": True},
        {"when": "[stage: vanilla]",
         "response": "Basis of Judgment: Single-prompt review of the excerpt.\nDecision: Benign",
         "repeat": True},
    ]
    return script


# ---------------------------------------------------------------------------
# Config and unit-test cases
# ---------------------------------------------------------------------------

def build_tool_tests(manifest: DemoManifest) -> dict[str, list[dict[str, object]]]:
    ids = manifest.check_ids
    day2 = (START_DAY + timedelta(days=2)).isoformat()
    day5 = (START_DAY + timedelta(days=5)).isoformat()
    burst = manifest.burst_day.isoformat()
    return {
        ids[0]: [
            {"params": {"user": "B0001", "day": day2},
             "expected": {"n": manifest.logons_per_day["B0001"]}},
            {"params": {"user": KEYLOG_USER, "day": burst}, "expected": {"n": BURST_LOGONS}},
            {"params": {"user": LEAK_USER, "day": day5}, "expected": {"n": 1}},
        ],
        ids[1]: [
            {"params": {"user": "B0002"}, "expected": {"n_matched": 0}},
            {"params": {"user": LEAK_USER}, "expected": {"n_matched": 1}},
            {"params": {"user": "B0003"}, "expected": {"n_matched": 0}},
        ],
        ids[2]: [
            {"params": {"user": "B0004"}, "expected": {"n_matched": 0}},
            {"params": {"user": KEYLOG_USER}, "expected": {"n_matched": 1}},
            {"params": {"user": "B0005"}, "expected": {"n_matched": 0}},
        ],
        ids[3]: [
            {"params": {"user": KEYLOG_USER}, "expected": {"n_matched": 1}},
            {"params": {"user": "B0006"}, "expected": {"n_matched": 0}},
            {"params": {"user": "B0007"}, "expected": {"n_matched": 0}},
        ],
        ids[4]: [
            {"params": {"user": "B0003", "day": day2}, "expected": {"n": 1}},
            {"params": {"user": KEYLOG_USER, "day": day5}, "expected": {"n": 2}},
            {"params": {"user": "B0006", "day": day5}, "expected": {"n": 1}},
        ],
        ids[5]: [
            {"params": {"user": KEYLOG_USER}, "expected": {"n_matched": 1}},
            {"params": {"user": "B0008"}, "expected": {"n_matched": 0}},
            {"params": {"user": "B0009"}, "expected": {"n_matched": 0}},
        ],
        ids[6]: [
            {"params": {"user": "B0010"}, "expected": {"n": 0}},
            {"params": {"user": KEYLOG_USER}, "expected": {"n": 0}},
            {"params": {"user": "B0011"}, "expected": {"n": 0}},
        ],
    }


def build_config(manifest: DemoManifest) -> dict[str, object]:
    return {
        "dataset": {
            "kind": "cert",
            "paths": {kind: f"data/{kind}.csv" for kind in ("logon", "device", "http", "email", "file")},
            "labels": "data/labels.csv",
        },
        "backend": {"type": "scripted", "script": "script.json", "name": "scripted-demo"},
        "rates": {"input_per_1k": 0.0005, "output_per_1k": 0.0015},
        "seeds": {"sampler": 42, "executor_a": 1, "executor_b": 2},
        "n_debate": 3,
        "k_sigma": 2.0,
        "excerpt_budget": 50,
        "undersample_cap": 20000,
        "registry_path": "out/registry.json",
        "store_path": "out/store.json",
        "output_dir": "out",
        "ablation": "original",
        "lists": {
            name: {"kind": kind, "path": f"lists/{name}.txt"}
            for name, (kind, _values) in LISTS.items()
        },
        "tool_tests": build_tool_tests(manifest),
        "exemplar_k": 3,
        "max_refine_rounds": 5,
        "max_repair_attempts": 3,
        "parallelism": 1,
    }


_HEADERS = {
    "logon": ["id", "date", "user", "pc", "activity"],
    "device": ["id", "date", "user", "pc", "activity"],
    "http": ["id", "date", "user", "pc", "url", "content"],
    "email": ["id", "date", "user", "pc", "to", "cc", "bcc", "from", "size",
              "attachments", "content"],
    "file": ["id", "date", "user", "pc", "filename", "content"],
}


def generate_demo(outdir: str | Path) -> DemoManifest:
    """Write the complete demo tree: data/, lists/, script.json, config.json."""
    outdir = Path(outdir)
    (outdir / "data").mkdir(parents=True, exist_ok=True)
    (outdir / "lists").mkdir(parents=True, exist_ok=True)

    corpus, manifest = build_corpus()
    for kind, rows in corpus.rows.items():
        with (outdir / "data" / f"{kind}.csv").open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(_HEADERS[kind])
            writer.writerows(rows)

    with (outdir / "data" / "labels.csv").open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["entry_id", "label"])
        for entry_id in corpus.malicious:
            writer.writerow([entry_id, "malicious"])

    for name, (_kind, values) in LISTS.items():
        (outdir / "lists" / f"{name}.txt").write_text(
            "\n".join(values) + "\n", encoding="utf-8"
        )

    (outdir / "script.json").write_text(
        json.dumps(build_script(), indent=1) + "\n", encoding="utf-8"
    )
    (outdir / "config.json").write_text(
        json.dumps(build_config(manifest), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return manifest


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="Generate the synthetic demo corpus")
    parser.add_argument("outdir", help="directory to write the demo tree into")
    args = parser.parse_args(argv)
    manifest = generate_demo(args.outdir)
    total = sum(manifest.entry_counts.values())
    print(f"wrote {total} rows for {len(manifest.users)} users to {args.outdir} "
          f"(malicious users: {', '.join(manifest.malicious_users)})")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
