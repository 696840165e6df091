"""Run configuration: one INI file, overridable by CLI flags.

Secrets (API keys, endpoints) come only from environment variables; the
config file holds everything needed to reproduce a run.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

BACKENDS = ("mock", "http")
EMBED_PROVIDERS = ("hash", "sidecar", "remote")

_BUDGET_FIELDS = (
    "outline_candidates",
    "section_paper_budget",
    "survey_exemplars",
    "section_exemplars",
    "prompt_title_budget",
    "subquery_cap",
    "subquery_depth",
    "section_references",
    "length_budget_words",
    "parallelism",
    "max_concurrency",
    "transport_retries",
    "embed_dim",
)


@dataclass
class RunConfig:
    papers_file: Path = Path("papers.jsonl")
    outlines_file: Path = Path("outlines.jsonl")
    store_dir: Path | None = None
    paper_index: Path | None = None
    outline_index: Path | None = None
    benchmark_file: Path | None = None
    output_dir: Path = Path("out")

    outline_candidates: int = 1500
    section_paper_budget: int = 100
    survey_exemplars: int = 10
    section_exemplars: int = 5
    prompt_title_budget: int = 200
    subquery_cap: int = 4
    subquery_depth: int = 40
    section_references: int = 60
    length_budget_words: int = 700

    backend: str = "mock"
    mock_script: Path | None = None
    model: str = ""
    judge_model: str = ""
    parallelism: int = 1
    seed: int = 0
    max_concurrency: int = 8
    rate_per_sec: float | None = None
    transport_retries: int = 3
    retry_backoff: float = 1.0

    embed_provider: str = "hash"
    embed_dim: int = 16
    embed_model: str = ""
    embeddings_file: Path | None = None

    prices: dict[str, tuple[float, float]] = field(default_factory=dict)

    def validate(self) -> None:
        for name in _BUDGET_FIELDS:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.backend not in BACKENDS:
            raise ConfigError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.backend == "mock" and self.mock_script is None:
            raise ConfigError("backend 'mock' requires a mock_script path")
        if self.embed_provider not in EMBED_PROVIDERS:
            raise ConfigError(
                f"embed_provider must be one of {EMBED_PROVIDERS}, got {self.embed_provider!r}"
            )
        if self.embed_provider == "sidecar" and self.embeddings_file is None:
            raise ConfigError("embed_provider 'sidecar' requires an embeddings_file path")

    def snapshot(self) -> dict:
        """Config as written, minus the output directory, for run manifests."""
        snap: dict = {}
        for f in fields(self):
            if f.name in ("output_dir", "prices"):
                continue
            value = getattr(self, f.name)
            snap[f.name] = str(value) if isinstance(value, Path) else value
        snap["prices"] = {model: list(pair) for model, pair in sorted(self.prices.items())}
        return snap


def _get(cp: configparser.ConfigParser, section: str, option: str) -> str | None:
    if cp.has_option(section, option):
        value = cp.get(section, option).strip()
        return value or None
    return None


def load_config(path: str | Path) -> RunConfig:
    """Parse the INI config file; relative paths resolve against its directory."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser()
    try:
        cp.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    base = path.parent
    config = RunConfig()

    def resolve(raw: str) -> Path:
        p = Path(raw)
        return p if p.is_absolute() else base / p

    for option, attr in (
        ("papers", "papers_file"),
        ("outlines", "outlines_file"),
        ("store", "store_dir"),
        ("paper_index", "paper_index"),
        ("outline_index", "outline_index"),
        ("benchmark", "benchmark_file"),
        ("output", "output_dir"),
    ):
        raw = _get(cp, "paths", option)
        if raw is not None:
            setattr(config, attr, resolve(raw))

    int_options = {
        "outline_candidates", "section_paper_budget", "survey_exemplars",
        "section_exemplars", "prompt_title_budget", "subquery_cap",
        "subquery_depth", "section_references", "length_budget_words",
    }
    for option in int_options:
        raw = _get(cp, "budgets", option)
        if raw is not None:
            try:
                setattr(config, option, int(raw))
            except ValueError:
                raise ConfigError(f"budgets.{option} must be an integer, got {raw!r}") from None

    for option, attr, kind in (
        ("backend", "backend", str),
        ("model", "model", str),
        ("judge_model", "judge_model", str),
        ("parallelism", "parallelism", int),
        ("seed", "seed", int),
        ("max_concurrency", "max_concurrency", int),
        ("transport_retries", "transport_retries", int),
        ("retry_backoff", "retry_backoff", float),
        ("rate_per_sec", "rate_per_sec", float),
    ):
        raw = _get(cp, "gateway", option)
        if raw is not None:
            try:
                setattr(config, attr, kind(raw))
            except ValueError:
                raise ConfigError(f"gateway.{option} must be {kind.__name__}, got {raw!r}") from None
    raw = _get(cp, "gateway", "mock_script")
    if raw is not None:
        config.mock_script = resolve(raw)

    raw = _get(cp, "embeddings", "provider")
    if raw is not None:
        config.embed_provider = raw
    raw = _get(cp, "embeddings", "dim")
    if raw is not None:
        try:
            config.embed_dim = int(raw)
        except ValueError:
            raise ConfigError(f"embeddings.dim must be an integer, got {raw!r}") from None
    raw = _get(cp, "embeddings", "model")
    if raw is not None:
        config.embed_model = raw
    raw = _get(cp, "embeddings", "file")
    if raw is not None:
        config.embeddings_file = resolve(raw)

    if cp.has_section("prices"):
        for model, raw in cp.items("prices"):
            parts = [p.strip() for p in raw.split(",")]
            if len(parts) != 2:
                raise ConfigError(
                    f"prices.{model} must be '<input per M>, <output per M>', got {raw!r}"
                )
            try:
                config.prices[model] = (float(parts[0]), float(parts[1]))
            except ValueError:
                raise ConfigError(f"prices.{model}: not numbers: {raw!r}") from None

    config.validate()
    return config
