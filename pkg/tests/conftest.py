"""Shared fixtures: the 50-paper corpus, providers, and mock gateway builders."""

from __future__ import annotations

import json
from pathlib import Path

import pytest

from surveygen.corpus import Corpus
from surveygen.llm import Gateway, MockBackend, UsageLedger
from surveygen.vectorstore import (
    HashEmbeddingProvider,
    PrecomputedEmbeddingProvider,
    build_index,
)

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS50 = FIXTURES / "corpus50"


@pytest.fixture(scope="session")
def corpus50_dir() -> Path:
    return CORPUS50


@pytest.fixture()
def corpus50(corpus50_dir) -> Corpus:
    corpus = Corpus()
    report = corpus.ingest_papers(corpus50_dir / "papers.jsonl")
    assert not report.errors
    corpus.ingest_outlines(corpus50_dir / "outlines.jsonl")
    return corpus


@pytest.fixture()
def sidecar_provider(corpus50_dir) -> PrecomputedEmbeddingProvider:
    provider = PrecomputedEmbeddingProvider.from_file(corpus50_dir / "embeddings.sfemb")
    provider.fallback = HashEmbeddingProvider(dim=provider.dim)
    return provider


@pytest.fixture()
def paper_index(corpus50, sidecar_provider):
    return build_index(corpus50.records_of_kind("research"), sidecar_provider)


@pytest.fixture()
def outline_index(corpus50, sidecar_provider):
    surveys = [corpus50.papers[pid] for pid in corpus50.outlines]
    return build_index(surveys, sidecar_provider)


def make_gateway(entries: list[dict], **kwargs) -> Gateway:
    """Gateway over a scripted mock backend with retry sleeps disabled."""
    kwargs.setdefault("retry_backoff", 0.0)
    return Gateway(MockBackend(entries), ledger=UsageLedger(), **kwargs)


# --- the standard end-to-end mock script --------------------------------------

TOPIC = "retrieval-augmented generation"

SECTION_PLAN = [
    ("Introduction", "overview and motivation of retrieval-augmented generation",
     [("Motivation", "why retrieval helps generation"),
      ("Scope", "coverage boundaries of this survey")]),
    ("Retrieval Methods", "dense and sparse retrieval for grounded generation",
     [("Sparse Retrieval", "lexical matching approaches"),
      ("Dense Retrieval", "embedding-based retrieval")]),
    ("Generation and Grounding", "conditioning generators on retrieved evidence",
     [("Fusion Strategies", "combining evidence inside decoders"),
      ("Faithfulness", "grounded citation behavior")]),
    ("Conclusion", "open problems in retrieval-augmented generation",
     [("Summary", "takeaways and future work")]),
]


def standard_generate_entries() -> list[dict]:
    """Mock script driving one full generation run over the fixture corpus.

    Expansion, decomposition, and writing entries are matched on subsection
    titles so the script stays deterministic at any parallelism.
    """
    first_level = ["Title: Grounded Generation with Retrieval"]
    for n, (title, query, _) in enumerate(SECTION_PLAN, start=1):
        first_level.append(f"Section {n}: {title} | query: {query}")
    entries = [{"match": "Task: outline sections", "reply": "\n".join(first_level)}]
    for title, _, subs in SECTION_PLAN:
        reply = "\n".join(
            f"Subsection {j}: {sub_title} | description: {description}"
            for j, (sub_title, description) in enumerate(subs, start=1)
        )
        entries.append(
            {"match": f"Task: outline subsections | Section: {title}", "reply": reply}
        )
    for _, _, subs in SECTION_PLAN:
        for sub_title, description in subs:
            entries.append({
                "match": f"Task: decompose query | Subsection: {sub_title}",
                "reply": f"1. {description}\n2. methods and systems for {sub_title.lower()}",
            })
            entries.append({
                "match": f"Task: write subsection | Subsection: {sub_title}",
                "reply": (
                    f"{sub_title} is central to grounded systems [1]. Later work "
                    f"refined the approach [2], while [3] studied its limits. "
                    f"Results remain consistent across benchmarks [1]."
                ),
            })
    for _ in range(len(SECTION_PLAN) - 1):
        entries.append({"match": "Task: refine sections", "reply": "NO CHANGES"})
    return entries


def write_script(path: Path, entries: list[dict]) -> Path:
    path.write_text(json.dumps(entries, indent=2), encoding="utf-8")
    return path


def write_config(
    path: Path,
    corpus_dir: Path,
    output_dir: Path,
    script_path: Path,
    extra: dict | None = None,
) -> Path:
    """INI run config pointing at the fixture corpus and a mock script."""
    sections: dict[str, dict[str, str]] = {
        "paths": {
            "papers": str(corpus_dir / "papers.jsonl"),
            "outlines": str(corpus_dir / "outlines.jsonl"),
            "output": str(output_dir),
        },
        "gateway": {
            "backend": "mock",
            "mock_script": str(script_path),
            "model": "test-model",
            "retry_backoff": "0",
        },
        "embeddings": {
            "provider": "sidecar",
            "file": str(corpus_dir / "embeddings.sfemb"),
        },
    }
    for section, options in (extra or {}).items():
        sections.setdefault(section, {}).update(
            {key: str(value) for key, value in options.items()}
        )
    lines: list[str] = []
    for section, options in sections.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in options.items())
        lines.append("")
    path.write_text("\n".join(lines), encoding="utf-8")
    return path
