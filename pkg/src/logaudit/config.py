"""Run configuration: one structured file drives all pipeline phases.

JSON and YAML are both accepted (by extension). The schema is documented in
the README; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigInvalid
from .forge import ToolTestCase
from .gateway import Backend, HttpBackend, RateTable, ScriptEntry, ScriptedBackend
from .runtime import LIST_KINDS, ListCatalog, load_list_file

_KNOWN_KEYS = {
    "dataset", "backend", "rates", "seeds", "n_debate", "k_sigma",
    "excerpt_budget", "undersample_cap", "registry_path", "store_path",
    "output_dir", "ablation", "lists", "tool_tests", "exemplar_k",
    "max_refine_rounds", "max_repair_attempts", "parallelism",
    "allow_partial_coverage", "templates",
}

_CERT_SOURCES = ("logon", "device", "http", "email", "file")


@dataclass
class DatasetConfig:
    kind: str                       # "cert" or "zeek"
    paths: dict[str, str] = field(default_factory=dict)
    labels: str | None = None


@dataclass
class BackendConfig:
    type: str                       # "scripted" or "http"
    name: str = ""
    script: str | None = None       # scripted: path to the script file
    endpoint: str | None = None     # http: full chat-completions URL
    model: str | None = None
    api_key_env: str = "LOGAUDIT_API_KEY"


@dataclass
class ListConfig:
    kind: str
    path: str


@dataclass
class RunConfig:
    config_path: str
    dataset: DatasetConfig
    backend: BackendConfig
    rates: RateTable = field(default_factory=RateTable)
    seed_sampler: int = 42
    seed_executor_a: int = 1
    seed_executor_b: int = 2
    n_debate: int = 3
    k_sigma: float = 2.0
    excerpt_budget: int = 50
    undersample_cap: int = 20_000
    registry_path: str = "out/registry.json"
    store_path: str = "out/store.json"
    output_dir: str = "out"
    ablation: str = "original"
    lists: dict[str, ListConfig] = field(default_factory=dict)
    tool_tests: dict[str, list[ToolTestCase]] = field(default_factory=dict)
    exemplar_k: int = 3
    max_refine_rounds: int = 5
    max_repair_attempts: int = 3
    parallelism: int = 1
    allow_partial_coverage: bool = False
    templates: dict[str, str] = field(default_factory=dict)
    raw: dict = field(default_factory=dict)


def _read_doc(path: Path) -> dict:
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() in (".yaml", ".yml"):
        import yaml

        doc = yaml.safe_load(text)
    else:
        doc = json.loads(text)
    if not isinstance(doc, dict):
        raise ConfigInvalid(f"{path}: config root must be a mapping")
    return doc


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigInvalid(f"config file not found: {path}")
    doc = _read_doc(path)

    unknown = set(doc) - _KNOWN_KEYS
    if unknown:
        raise ConfigInvalid(f"{path}: unknown config keys {sorted(unknown)}")

    dataset_doc = doc.get("dataset") or {}
    kind = dataset_doc.get("kind", "")
    if kind not in ("cert", "zeek"):
        raise ConfigInvalid(f"{path}: dataset.kind must be 'cert' or 'zeek', got {kind!r}")
    dataset = DatasetConfig(
        kind=kind,
        paths={str(k): str(v) for k, v in (dataset_doc.get("paths") or {}).items()},
        labels=dataset_doc.get("labels"),
    )
    if kind == "cert":
        bad = set(dataset.paths) - set(_CERT_SOURCES)
        if bad:
            raise ConfigInvalid(f"{path}: unknown CERT sources {sorted(bad)}")

    backend_doc = doc.get("backend") or {}
    backend_type = backend_doc.get("type", "")
    if backend_type not in ("scripted", "http"):
        raise ConfigInvalid(f"{path}: backend.type must be 'scripted' or 'http'")
    backend = BackendConfig(
        type=backend_type,
        name=backend_doc.get("name", backend_type),
        script=backend_doc.get("script"),
        endpoint=backend_doc.get("endpoint"),
        model=backend_doc.get("model"),
        api_key_env=backend_doc.get("api_key_env", "LOGAUDIT_API_KEY"),
    )
    if backend_type == "scripted" and not backend.script:
        raise ConfigInvalid(f"{path}: scripted backend requires backend.script")
    if backend_type == "http" and not (backend.endpoint and backend.model):
        raise ConfigInvalid(f"{path}: http backend requires endpoint and model")

    rates_doc = doc.get("rates") or {}
    rates = RateTable(
        input_per_1k=float(rates_doc.get("input_per_1k", 0.0)),
        output_per_1k=float(rates_doc.get("output_per_1k", 0.0)),
    )

    seeds = doc.get("seeds") or {}
    lists = {}
    for name, item in (doc.get("lists") or {}).items():
        list_kind = item.get("kind", "")
        if list_kind not in LIST_KINDS:
            raise ConfigInvalid(f"{path}: list {name!r} kind must be one of {LIST_KINDS}")
        lists[name] = ListConfig(kind=list_kind, path=item["path"])

    tool_tests: dict[str, list[ToolTestCase]] = {}
    for subtask_id, cases in (doc.get("tool_tests") or {}).items():
        tool_tests[subtask_id] = [
            ToolTestCase(
                params={str(k): str(v) for k, v in case.get("params", {}).items()},
                expected=dict(case.get("expected", {})),
            )
            for case in cases
        ]

    from .prompts import DEFAULT_TEMPLATES

    templates = {str(k): str(v) for k, v in (doc.get("templates") or {}).items()}
    unknown_templates = set(templates) - set(DEFAULT_TEMPLATES)
    if unknown_templates:
        raise ConfigInvalid(f"{path}: unknown template names {sorted(unknown_templates)}")

    config = RunConfig(
        config_path=str(path),
        dataset=dataset,
        backend=backend,
        rates=rates,
        seed_sampler=int(seeds.get("sampler", 42)),
        seed_executor_a=int(seeds.get("executor_a", 1)),
        seed_executor_b=int(seeds.get("executor_b", 2)),
        n_debate=int(doc.get("n_debate", 3)),
        k_sigma=float(doc.get("k_sigma", 2.0)),
        excerpt_budget=int(doc.get("excerpt_budget", 50)),
        undersample_cap=int(doc.get("undersample_cap", 20_000)),
        registry_path=str(doc.get("registry_path", "out/registry.json")),
        store_path=str(doc.get("store_path", "out/store.json")),
        output_dir=str(doc.get("output_dir", "out")),
        ablation=str(doc.get("ablation", "original")),
        lists=lists,
        tool_tests=tool_tests,
        exemplar_k=int(doc.get("exemplar_k", 3)),
        max_refine_rounds=int(doc.get("max_refine_rounds", 5)),
        max_repair_attempts=int(doc.get("max_repair_attempts", 3)),
        parallelism=int(doc.get("parallelism", 1)),
        allow_partial_coverage=bool(doc.get("allow_partial_coverage", False)),
        templates=templates,
        raw=doc,
    )
    _validate_ranges(config)
    return config


def _validate_ranges(config: RunConfig) -> None:
    checks = [
        (config.n_debate >= 0, "n_debate must be >= 0"),
        (config.k_sigma > 0, "k_sigma must be > 0"),
        (config.excerpt_budget >= 1, "excerpt_budget must be >= 1"),
        (config.undersample_cap >= 0, "undersample_cap must be >= 0"),
        (config.exemplar_k >= 1, "exemplar_k must be >= 1"),
        (config.max_refine_rounds >= 0, "max_refine_rounds must be >= 0"),
        (config.max_repair_attempts >= 1, "max_repair_attempts must be >= 1"),
        (config.parallelism >= 1, "parallelism must be >= 1"),
    ]
    for ok, message in checks:
        if not ok:
            raise ConfigInvalid(message)


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.raw, sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Derived objects
# ---------------------------------------------------------------------------

def _resolve(config: RunConfig, path: str) -> Path:
    """Relative paths in the config are relative to the config file."""
    p = Path(path)
    if p.is_absolute():
        return p
    return Path(config.config_path).parent / p


def resolve_path(config: RunConfig, path: str) -> Path:
    return _resolve(config, path)


def load_script_file(path: str | Path) -> list[ScriptEntry]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = []
    for item in doc:
        entries.append(
            ScriptEntry(
                when=item["when"] if isinstance(item["when"], str) else list(item["when"]),
                response=item["response"],
                repeat=bool(item.get("repeat", False)),
            )
        )
    return entries


def build_backend(config: RunConfig) -> Backend:
    if config.backend.type == "scripted":
        script_path = _resolve(config, config.backend.script or "")
        if not script_path.exists():
            raise ConfigInvalid(f"script file not found: {script_path}")
        return ScriptedBackend(load_script_file(script_path), name=config.backend.name or "scripted")
    return HttpBackend(
        endpoint=config.backend.endpoint or "",
        model=config.backend.model or "",
        api_key_env=config.backend.api_key_env,
        name=config.backend.name or config.backend.model or "http",
    )


def load_lists(config: RunConfig) -> ListCatalog:
    catalog = {}
    for name, item in config.lists.items():
        catalog[name] = load_list_file(name, item.kind, _resolve(config, item.path))
    return catalog


def load_templates(config: RunConfig):
    """Default prompt templates with any config-file overrides applied."""
    from .prompts import load_template_overrides

    return load_template_overrides(
        {name: str(_resolve(config, path)) for name, path in config.templates.items()}
    )
