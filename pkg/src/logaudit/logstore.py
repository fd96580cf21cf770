"""Unified, time-ordered activity log store.

Ingests CERT-style CSV logs and Zeek-style TSV logs into one LogEntry shape,
indexes them per user, and provides the seeded exemplar sampling and benign
under-sampling the rest of the pipeline builds on. A store is mutable during
ingestion and immutable ("sealed") once user sequences are built.
"""

from __future__ import annotations

import csv
import json
import logging
import random
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from .errors import (
    DuplicateEntryId,
    IngestFailed,
    LabelsInvalid,
    LabelsMissing,
    StoreSealed,
    UnknownStream,
)

logger = logging.getLogger(__name__)

LABEL_BENIGN = "benign"
LABEL_MALICIOUS = "malicious"

# Fraction of data rows allowed to fail before the whole file is rejected.
MALFORMED_ROW_TOLERANCE = 0.01

DEFAULT_EXEMPLARS_PER_TYPE = 3
DEFAULT_UNDERSAMPLE_CAP = 20_000
DEFAULT_SEED = 42


class ActivityType(str, Enum):
    """Kinds of activity records the pipeline audits."""

    LOGON = "Logon"
    LOGOFF = "Logoff"
    DEVICE_CONNECT = "DeviceConnect"
    DEVICE_DISCONNECT = "DeviceDisconnect"
    HTTP_VISIT = "HttpVisit"
    EMAIL_SEND = "EmailSend"
    FILE_OP = "FileOp"
    ZEEK_AUTH = "ZeekAuth"
    ZEEK_NETWORK = "ZeekNetwork"
    ZEEK_FILE = "ZeekFile"
    ZEEK_SYSTEM = "ZeekSystem"
    ZEEK_ANOMALY = "ZeekAnomaly"

    @classmethod
    def from_name(cls, name: str) -> "ActivityType":
        for member in cls:
            if member.value.lower() == name.strip().lower():
                return member
        raise ValueError(f"unknown activity type: {name!r}")


@dataclass(frozen=True)
class LogEntry:
    """One normalized activity record."""

    entry_id: str
    timestamp: datetime
    user: str
    host: str
    activity: ActivityType
    payload: Mapping[str, str] = field(default_factory=dict)

    @property
    def day(self) -> date:
        return self.timestamp.date()


@dataclass
class RowError:
    """One malformed row, collected rather than raised."""

    line_no: int
    reason: str


@dataclass
class SourceFile:
    """Manifest record for one ingested file."""

    path: str
    kind: str
    rows: int
    malformed: int


@dataclass
class ParsedFile:
    """Outcome of parsing a single input file."""

    entries: list[LogEntry]
    errors: list[RowError]
    source: SourceFile


@dataclass
class UserSequence:
    """All entries of one user, in ascending time order."""

    user: str
    entries: list[LogEntry]
    day_spans: dict[date, tuple[int, int]] = field(default_factory=dict)

    def entries_on(self, day: date) -> list[LogEntry]:
        span = self.day_spans.get(day)
        if span is None:
            return []
        return self.entries[span[0]:span[1]]

    def day_range(self) -> tuple[date, date] | None:
        if not self.entries:
            return None
        return self.entries[0].day, self.entries[-1].day


class LogStore:
    """Time-ordered set of all activity records across users."""

    def __init__(self) -> None:
        self.entries: list[LogEntry] = []
        self.users: dict[str, UserSequence] = {}
        self.labels: dict[str, str] = {}
        self.source_manifest: list[SourceFile] = []
        self._by_id: dict[str, LogEntry] = {}
        self._sealed = False

    # -- ingestion --

    def add_parsed(self, parsed: ParsedFile) -> None:
        self.add_entries(parsed.entries, parsed.source)

    def add_entries(self, entries: Iterable[LogEntry], source: SourceFile | None = None) -> None:
        if self._sealed:
            raise StoreSealed("store is sealed; no mutation after build_user_sequences")
        for entry in entries:
            if entry.entry_id in self._by_id:
                raise DuplicateEntryId(f"duplicate entry id {entry.entry_id!r}")
            self._by_id[entry.entry_id] = entry
            self.entries.append(entry)
        if source is not None:
            self.source_manifest.append(source)

    def attach_labels(self, labels: Mapping[str, str]) -> None:
        """Attach ground-truth labels; every id must exist in the store."""
        for entry_id, label in labels.items():
            if entry_id not in self._by_id:
                raise LabelsInvalid(f"label references unknown entry id {entry_id!r}")
            if label not in (LABEL_BENIGN, LABEL_MALICIOUS):
                raise LabelsInvalid(f"bad label {label!r} for {entry_id!r}")
        self.labels.update(labels)

    # -- lookups --

    @property
    def sealed(self) -> bool:
        return self._sealed

    def has_entry(self, entry_id: str) -> bool:
        return entry_id in self._by_id

    def entry(self, entry_id: str) -> LogEntry:
        return self._by_id[entry_id]

    def activity_types(self) -> set[ActivityType]:
        return {e.activity for e in self.entries}

    def is_malicious(self, entry_id: str) -> bool:
        return self.labels.get(entry_id) == LABEL_MALICIOUS

    def malicious_ids(self) -> set[str]:
        return {i for i, lab in self.labels.items() if lab == LABEL_MALICIOUS}

    def user_label(self, user: str) -> str:
        """A user is malicious iff any of their entries is labeled malicious."""
        seq = self.users.get(user)
        if seq is None:
            return LABEL_BENIGN
        for entry in seq.entries:
            if self.is_malicious(entry.entry_id):
                return LABEL_MALICIOUS
        return LABEL_BENIGN


# ---------------------------------------------------------------------------
# CERT-style CSV parsing
# ---------------------------------------------------------------------------

CERT_SOURCES = ("logon", "device", "http", "email", "file")

# Per-source required header columns; extra columns are kept in the payload.
_CERT_REQUIRED = {
    "logon": ("id", "date", "user", "pc", "activity"),
    "device": ("id", "date", "user", "pc", "activity"),
    "http": ("id", "date", "user", "pc", "url"),
    "email": ("id", "date", "user", "pc", "to", "from"),
    "file": ("id", "date", "user", "pc", "filename"),
}

_CERT_TIME_FORMAT = "%m/%d/%Y %H:%M:%S"


def _parse_timestamp(raw: str) -> datetime:
    raw = raw.strip()
    try:
        return datetime.strptime(raw, _CERT_TIME_FORMAT)
    except ValueError:
        pass
    try:
        return datetime.fromisoformat(raw)
    except ValueError:
        raise ValueError(f"unparseable timestamp {raw!r}")


def _cert_activity(source: str, row: dict[str, str], line_no: int) -> ActivityType:
    if source == "logon":
        value = row.get("activity", "").strip().lower()
        if value == "logon":
            return ActivityType.LOGON
        if value == "logoff":
            return ActivityType.LOGOFF
        raise ValueError(f"line {line_no}: logon activity column reads {row.get('activity')!r}")
    if source == "device":
        value = row.get("activity", "").strip().lower()
        if value == "connect":
            return ActivityType.DEVICE_CONNECT
        if value == "disconnect":
            return ActivityType.DEVICE_DISCONNECT
        raise ValueError(f"line {line_no}: device activity column reads {row.get('activity')!r}")
    if source == "http":
        return ActivityType.HTTP_VISIT
    if source == "email":
        return ActivityType.EMAIL_SEND
    return ActivityType.FILE_OP


def _cert_payload(source: str, row: dict[str, str]) -> dict[str, str]:
    if source == "http":
        payload = {"url": row.get("url", "")}
        if row.get("content"):
            payload["content"] = row["content"]
        return payload
    if source == "email":
        payload = {"to": row.get("to", ""), "from": row.get("from", "")}
        for key in ("cc", "bcc", "size", "attachments"):
            if row.get(key):
                payload[key] = row[key]
        # CERT ships the message text in a "content" column.
        payload["body"] = row.get("content", "")
        return payload
    if source == "file":
        payload = {"filename": row.get("filename", "")}
        if row.get("content"):
            payload["content"] = row["content"]
        return payload
    return {}


def parse_cert_file(path: str | Path, source: str) -> ParsedFile:
    """Parse one CERT-style CSV file (header row, quoted fields permitted).

    Malformed rows are collected; the parse only fails wholesale when the
    header is unusable or more than 1% of data rows are bad.
    """
    if source not in CERT_SOURCES:
        raise IngestFailed(f"unknown CERT source {source!r}; expected one of {CERT_SOURCES}")
    path = Path(path)
    required = _CERT_REQUIRED[source]
    entries: list[LogEntry] = []
    errors: list[RowError] = []
    data_rows = 0

    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestFailed(f"{path}: empty file, no header row")
        columns = [c.strip().lower() for c in header]
        missing = [c for c in required if c not in columns]
        if missing:
            raise IngestFailed(f"{path}: header missing required columns {missing}")

        for line_no, raw in enumerate(reader, start=2):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            data_rows += 1
            if len(raw) != len(columns):
                errors.append(RowError(line_no, f"expected {len(columns)} fields, got {len(raw)}"))
                continue
            row = dict(zip(columns, raw))
            try:
                timestamp = _parse_timestamp(row["date"])
                activity = _cert_activity(source, row, line_no)
            except ValueError as exc:
                errors.append(RowError(line_no, str(exc)))
                continue
            user = row.get("user", "").strip()
            if not user:
                errors.append(RowError(line_no, "empty user field"))
                continue
            entries.append(
                LogEntry(
                    entry_id=row["id"].strip(),
                    timestamp=timestamp,
                    user=user,
                    host=row.get("pc", "").strip(),
                    activity=activity,
                    payload=_cert_payload(source, row),
                )
            )

    if data_rows and len(errors) > MALFORMED_ROW_TOLERANCE * data_rows:
        raise IngestFailed(
            f"{path}: {len(errors)}/{data_rows} rows malformed (tolerance {MALFORMED_ROW_TOLERANCE:.0%})"
        )
    source_file = SourceFile(path=str(path), kind=f"cert:{source}", rows=data_rows, malformed=len(errors))
    return ParsedFile(entries=entries, errors=errors, source=source_file)


# ---------------------------------------------------------------------------
# Zeek-style TSV parsing
# ---------------------------------------------------------------------------

# Stream groups: file logs, system logs, authentication logs, network
# traffic, and anomaly detections. Unmapped streams land in ZeekSystem.
ZEEK_STREAM_GROUPS: dict[str, ActivityType] = {
    "files": ActivityType.ZEEK_FILE,
    "smb_files": ActivityType.ZEEK_FILE,
    "dhcp": ActivityType.ZEEK_SYSTEM,
    "hosts": ActivityType.ZEEK_SYSTEM,
    "services": ActivityType.ZEEK_SYSTEM,
    "kerberos": ActivityType.ZEEK_AUTH,
    "ntlm": ActivityType.ZEEK_AUTH,
    "weird": ActivityType.ZEEK_ANOMALY,
    "conn": ActivityType.ZEEK_NETWORK,
    "dns": ActivityType.ZEEK_NETWORK,
    "http": ActivityType.ZEEK_NETWORK,
    "ssl": ActivityType.ZEEK_NETWORK,
    "x509": ActivityType.ZEEK_NETWORK,
    "smtp": ActivityType.ZEEK_NETWORK,
    "dce_rpc": ActivityType.ZEEK_NETWORK,
    "smb_mapping": ActivityType.ZEEK_FILE,
}

_ZEEK_USER_FIELDS = ("client", "username", "user")
_ZEEK_HOST_FIELDS = ("id.orig_h", "host", "assigned_ip")


def _zeek_epoch(raw: str) -> datetime:
    return datetime.fromtimestamp(float(raw), tz=timezone.utc).replace(tzinfo=None)


def parse_zeek_file(path: str | Path, kind: str | None = None, strict: bool = False) -> ParsedFile:
    """Parse one Zeek TSV log (``#fields`` header) or JSON-lines log.

    ``kind`` is the stream name; when omitted it is taken from the ``#path``
    header line or the file stem. Unknown streams map to ZeekSystem unless
    ``strict`` is set, in which case they raise UnknownStream.
    """
    path = Path(path)
    entries: list[LogEntry] = []
    errors: list[RowError] = []
    data_rows = 0
    fields: list[str] | None = None
    separator = "\t"
    header_kind: str | None = None
    json_mode: bool | None = None

    with path.open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if line.startswith("#"):
                json_mode = False
                token, _, rest = line[1:].partition("\t")
                if token == "separator" and rest:
                    separator = rest.encode("utf-8").decode("unicode_escape")
                elif token == "fields":
                    fields = rest.split(separator) if rest else []
                elif token == "path":
                    header_kind = rest.strip()
                continue
            if json_mode is None:
                json_mode = line.lstrip().startswith("{")

            data_rows += 1
            if json_mode:
                try:
                    record = {str(k): str(v) for k, v in json.loads(line).items()}
                except (json.JSONDecodeError, AttributeError):
                    errors.append(RowError(line_no, "unparseable JSON record"))
                    continue
            else:
                if fields is None:
                    errors.append(RowError(line_no, "data row before #fields header"))
                    continue
                values = line.split(separator)
                if len(values) != len(fields):
                    errors.append(RowError(line_no, f"expected {len(fields)} fields, got {len(values)}"))
                    continue
                record = dict(zip(fields, values))

            try:
                timestamp = _zeek_epoch(record["ts"])
            except (KeyError, ValueError, OverflowError):
                errors.append(RowError(line_no, "missing or unparseable ts field"))
                continue

            stream = kind or header_kind or path.stem
            activity = ZEEK_STREAM_GROUPS.get(stream)
            if activity is None:
                if strict:
                    raise UnknownStream(f"{path}: stream {stream!r} not in the mapping table")
                activity = ActivityType.ZEEK_SYSTEM

            user = ""
            for name in _ZEEK_USER_FIELDS:
                value = record.get(name, "")
                if value and value != "-":
                    user = value
                    break
            host = ""
            for name in _ZEEK_HOST_FIELDS:
                value = record.get(name, "")
                if value and value != "-":
                    host = value
                    break

            entries.append(
                LogEntry(
                    entry_id=f"{path.stem}:{data_rows}",
                    timestamp=timestamp,
                    user=user,
                    host=host,
                    activity=activity,
                    payload=record,
                )
            )

    if data_rows and len(errors) > MALFORMED_ROW_TOLERANCE * data_rows:
        raise IngestFailed(
            f"{path}: {len(errors)}/{data_rows} rows malformed (tolerance {MALFORMED_ROW_TOLERANCE:.0%})"
        )
    stream = kind or header_kind or path.stem
    source_file = SourceFile(path=str(path), kind=f"zeek:{stream}", rows=data_rows, malformed=len(errors))
    return ParsedFile(entries=entries, errors=errors, source=source_file)


# ---------------------------------------------------------------------------
# Sequences, sampling, under-sampling
# ---------------------------------------------------------------------------

def build_user_sequences(store: LogStore) -> LogStore:
    """Populate per-user sequences and seal the store.

    The sort is stable: entries with equal timestamps keep ingest order.
    Entries without a user (host-only records) stay in the store but are not
    attributed to any sequence.
    """
    grouped: dict[str, list[LogEntry]] = {}
    for entry in store.entries:
        if entry.user:
            grouped.setdefault(entry.user, []).append(entry)
    store.users = {}
    for user, entries in grouped.items():
        ordered = sorted(entries, key=lambda e: e.timestamp)
        day_spans: dict[date, tuple[int, int]] = {}
        start = 0
        for idx in range(1, len(ordered) + 1):
            if idx == len(ordered) or ordered[idx].day != ordered[start].day:
                day_spans[ordered[start].day] = (start, idx)
                start = idx
        store.users[user] = UserSequence(user=user, entries=ordered, day_spans=day_spans)
    store._sealed = True
    return store


def sample_exemplars(
    store: LogStore, k: int = DEFAULT_EXEMPLARS_PER_TYPE, seed: int = DEFAULT_SEED
) -> dict[ActivityType, list[LogEntry]]:
    """Pick up to ``k`` exemplar entries per activity type, deterministically.

    Each type gets its own child RNG keyed by (seed, type) so the selection
    for one type is independent of which other types are present.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    by_type: dict[ActivityType, list[LogEntry]] = {}
    for entry in store.entries:
        by_type.setdefault(entry.activity, []).append(entry)
    exemplars: dict[ActivityType, list[LogEntry]] = {}
    for activity in sorted(by_type, key=lambda a: a.value):
        pool = by_type[activity]
        rng = random.Random(f"{seed}:{activity.value}")
        if len(pool) <= k:
            exemplars[activity] = list(pool)
        else:
            picks = sorted(rng.sample(range(len(pool)), k))
            exemplars[activity] = [pool[i] for i in picks]
    return exemplars


def undersample_benign(
    store: LogStore, cap: int = DEFAULT_UNDERSAMPLE_CAP, seed: int = DEFAULT_SEED
) -> LogStore:
    """Return a view keeping all malicious entries and at most ``cap`` benign.

    Entries without an explicit label count as benign. The underlying store
    is never modified; when the benign count is already within the cap the
    store itself is returned.
    """
    if cap < 0:
        raise ValueError("cap must be >= 0")
    if not store.labels:
        raise LabelsMissing("under-sampling requires ground-truth labels")

    benign_idx = [i for i, e in enumerate(store.entries) if not store.is_malicious(e.entry_id)]
    if len(benign_idx) <= cap:
        return store

    rng = random.Random(seed)
    kept = set(rng.sample(benign_idx, cap))
    view = LogStore()
    selected = [
        e for i, e in enumerate(store.entries)
        if i in kept or store.is_malicious(e.entry_id)
    ]
    view.add_entries(selected)
    view.attach_labels({i: lab for i, lab in store.labels.items() if view.has_entry(i)})
    view.source_manifest = list(store.source_manifest)
    if store.sealed:
        build_user_sequences(view)
    return view


# ---------------------------------------------------------------------------
# Ground truth and snapshots
# ---------------------------------------------------------------------------

def load_labels(path: str | Path) -> dict[str, str]:
    """Read a two-column ``entry_id,label`` ground-truth file."""
    path = Path(path)
    labels: dict[str, str] = {}
    with path.open("r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        for line_no, raw in enumerate(reader, start=1):
            if not raw or (len(raw) == 1 and not raw[0].strip()):
                continue
            if line_no == 1 and [c.strip().lower() for c in raw[:2]] == ["entry_id", "label"]:
                continue
            if len(raw) < 2:
                raise LabelsInvalid(f"{path}:{line_no}: expected entry_id,label")
            entry_id, label = raw[0].strip(), raw[1].strip().lower()
            if label not in (LABEL_BENIGN, LABEL_MALICIOUS):
                raise LabelsInvalid(f"{path}:{line_no}: bad label {label!r}")
            labels[entry_id] = label
    return labels


STORE_FORMAT = "audit-store/1"


def save_store(store: LogStore, path: str | Path) -> None:
    """Write a store snapshot as stable JSON."""
    doc = {
        "format": STORE_FORMAT,
        "entries": [
            {
                "id": e.entry_id,
                "ts": e.timestamp.isoformat(),
                "user": e.user,
                "host": e.host,
                "activity": e.activity.value,
                "payload": dict(e.payload),
            }
            for e in store.entries
        ],
        "labels": store.labels,
        "manifest": [
            {"path": s.path, "kind": s.kind, "rows": s.rows, "malformed": s.malformed}
            for s in store.source_manifest
        ],
    }
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_store(path: str | Path) -> LogStore:
    """Load a snapshot written by :func:`save_store`; returns a sealed store."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != STORE_FORMAT:
        raise IngestFailed(f"{path}: not a store snapshot (format tag {doc.get('format')!r})")
    store = LogStore()
    store.add_entries(
        LogEntry(
            entry_id=row["id"],
            timestamp=datetime.fromisoformat(row["ts"]),
            user=row["user"],
            host=row["host"],
            activity=ActivityType(row["activity"]),
            payload=row.get("payload", {}),
        )
        for row in doc["entries"]
    )
    for item in doc.get("manifest", []):
        store.source_manifest.append(SourceFile(**item))
    build_user_sequences(store)
    if doc.get("labels"):
        store.attach_labels(doc["labels"])
    return store
