"""Per-subsection reference retrieval.

Three cooperating steps feed each subsection's writing stage:

1. query composition and LLM decomposition into focused sub-queries, scoped
   by the section-level paper memory;
2. per-sub-query similarity search restricted to the topic-level memory,
   never the full database;
3. temporal-aware reranking: hits are grouped into two-calendar-year windows,
   each window gets a quota proportional to its share of the pool, and the
   highest-cited papers fill each quota.  This balances established and
   emerging work instead of rewarding recency or raw similarity alone.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass
from typing import TYPE_CHECKING

from .errors import StructuredOutputError
from .llm import OUTLINE_PARAMS, Gateway, OutputParseError, PromptTemplate, ResponseFormat
from .vectorstore import EmbeddingProvider, RetrievalHit, embed_text, top_k_search

if TYPE_CHECKING:
    from .corpus import Corpus
    from .outline import PaperMemory, Subsection

logger = logging.getLogger(__name__)

# Reserved separator for composed queries; inputs are assumed not to contain it.
QUERY_SEPARATOR = " — "

_SUBQUERY_LINE_RE = re.compile(r"^\s*(\d+)[.)]\s*(.+?)\s*$")


@dataclass(frozen=True)
class RetrievalBudgets:
    """Knobs for the per-subsection retrieval pipeline."""

    sub_query_cap: int = 4
    per_query_depth: int = 40
    references: int = 60

    def __post_init__(self) -> None:
        for name in ("sub_query_cap", "per_query_depth", "references"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class SubQuery:
    section_index: int
    subsection_index: int
    position: int
    text: str


@dataclass(frozen=True)
class PaperHit:
    """A retrieved paper with everything reranking needs."""

    record_id: str
    similarity: float
    year: int | None
    citations: int


@dataclass(frozen=True)
class TemporalGroup:
    """Hits whose publication year falls in one two-calendar-year window.

    The window is (start, start + 1) anchored to even years; None collects
    undated hits, which only ever receive leftover quota.
    """

    window: tuple[int, int] | None
    members: tuple[PaperHit, ...]


@dataclass(frozen=True)
class Decomposition:
    queries: tuple[str, ...]
    used_fallback: bool


@dataclass(frozen=True)
class SubsectionRetrieval:
    selected: tuple[PaperHit, ...]
    manifest: dict


def compose_query(subsection: "Subsection") -> str:
    """Retrieval query for a subsection: description, then title.

    With an empty description the query degrades to the title alone; an empty
    title is an error.
    """
    title = subsection.title.strip()
    if not title:
        raise ValueError("subsection title must be non-empty")
    description = subsection.description.strip()
    if not description:
        return title
    return f"{description}{QUERY_SEPARATOR}{title}"


# --- decomposition -----------------------------------------------------------

DECOMPOSE_TEMPLATE = PromptTemplate(
    name="query-decomposition",
    preamble="You write focused literature-search queries.",
    body=(
        "Task: decompose query | Subsection: {title}\n"
        "Query: {query}\n"
        "\n"
        "Paper titles already retrieved for the enclosing section:\n"
        "{memory_titles}\n"
        "\n"
        "Break the query into at most {cap} focused sub-queries that together\n"
        "cover its scope, staying close to the themes in the listed papers.\n"
        'Reply with one sub-query per line: "N. <sub-query>".'
    ),
)


def _parse_sub_queries(text: str, final: bool) -> list[str]:
    queries: list[str] = []
    seen: set[str] = set()
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        m = _SUBQUERY_LINE_RE.match(stripped)
        if not m:
            continue
        query = m.group(2)
        key = query.casefold()
        if key in seen:
            continue
        seen.add(key)
        queries.append(query)
    if not queries:
        raise OutputParseError("no numbered sub-query lines found")
    return queries


SUBQUERY_FORMAT = ResponseFormat(
    name="sub-query list",
    instructions='One sub-query per line, numbered: "N. <sub-query>".',
    parse=_parse_sub_queries,
)


def decompose_query(
    query: str,
    section_memory: "PaperMemory",
    corpus: "Corpus",
    gateway: Gateway,
    cap: int,
    max_repairs: int = 1,
) -> Decomposition:
    """LLM decomposition of a subsection query, scoped by the section memory.

    If the model output stays unparsable after the repair re-prompt, falls
    back to the undecomposed query and flags the fallback.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    if not section_memory.ids:
        raise ValueError("section memory is empty")
    memory_titles = "\n".join(
        f"- {corpus.papers[record_id].title}" for record_id in section_memory.ids
    )
    title = query.split(QUERY_SEPARATOR)[-1]
    try:
        queries = gateway.complete_structured(
            DECOMPOSE_TEMPLATE,
            {
                "title": title,
                "query": query,
                "memory_titles": memory_titles,
                "cap": str(cap),
            },
            SUBQUERY_FORMAT,
            params=OUTLINE_PARAMS,
            stage="subquery",
            max_repairs=max_repairs,
        )
    except StructuredOutputError:
        logger.warning("decomposition failed for %r; falling back to the whole query", query)
        return Decomposition((query,), used_fallback=True)
    return Decomposition(tuple(queries[:cap]), used_fallback=False)


# --- memory-restricted search ------------------------------------------------


def retrieve_from_memory(
    sub_query: str,
    memory: "PaperMemory",
    provider: EmbeddingProvider,
    per_query_k: int,
) -> list[RetrievalHit]:
    """Top hits for a sub-query, computed only over the memory's entries."""
    if not memory.ids:
        raise ValueError("memory is empty")
    query = embed_text(sub_query, provider)
    return top_k_search(memory.index, query, per_query_k)


# --- temporal grouping and quota allocation -----------------------------------


def window_for_year(year: int) -> tuple[int, int]:
    """Two-calendar-year window anchored to even years (2018-19, 2020-21, ...)."""
    start = year - (year % 2)
    return (start, start + 1)


def group_by_window(hits: list[PaperHit] | tuple[PaperHit, ...]) -> list[TemporalGroup]:
    """Partition hits into disjoint windows, ascending; undated hits go last."""
    dated: dict[tuple[int, int], list[PaperHit]] = {}
    undated: list[PaperHit] = []
    for hit in hits:
        if hit.year is None:
            undated.append(hit)
        else:
            dated.setdefault(window_for_year(hit.year), []).append(hit)
    groups = [
        TemporalGroup(window, tuple(members))
        for window, members in sorted(dated.items())
    ]
    if undated:
        groups.append(TemporalGroup(None, tuple(undated)))
    return groups


def allocate_group_quotas(groups: list[TemporalGroup], budget: int) -> list[int]:
    """Per-window selection quotas: proportional shares, largest-remainder rounded.

    Each dated window's raw quota is its share of the dated pool times the
    effective budget; quotas are floored and leftover slots go to the largest
    fractional parts, ties to the older window.  The undated pseudo-window
    receives only whatever budget the dated pool cannot absorb.  The quotas
    always sum to min(budget, pool size) and never exceed a group's size.
    """
    if not groups:
        raise ValueError("no groups to allocate over")
    if budget < 1:
        raise ValueError("budget must be >= 1")
    sizes = [len(g.members) for g in groups]
    total = sum(sizes)
    effective = min(budget, total)
    dated = [i for i, g in enumerate(groups) if g.window is not None]
    undated = [i for i, g in enumerate(groups) if g.window is None]
    dated_total = sum(sizes[i] for i in dated)
    dated_budget = min(effective, dated_total)
    quotas = [0] * len(groups)
    if dated and dated_budget:
        raw = {i: sizes[i] * dated_budget / dated_total for i in dated}
        for i in dated:
            quotas[i] = math.floor(raw[i])
        leftover = dated_budget - sum(quotas[i] for i in dated)
        order = sorted(dated, key=lambda i: (-(raw[i] - math.floor(raw[i])), groups[i].window))
        while leftover > 0:
            progressed = False
            for i in order:
                if leftover == 0:
                    break
                if quotas[i] < sizes[i]:
                    quotas[i] += 1
                    leftover -= 1
                    progressed = True
            if not progressed:
                raise AssertionError("quota allocation could not place leftover slots")
    remaining = effective - sum(quotas)
    for i in undated:
        take = min(remaining, sizes[i])
        quotas[i] = take
        remaining -= take
    return quotas


def temporal_rerank(hits: list[PaperHit] | tuple[PaperHit, ...], budget: int) -> list[PaperHit]:
    """Select min(budget, len(hits)) papers balanced across two-year windows.

    Within each window papers are ranked by citation count descending, ties
    going to the newer year and then the ascending record id; the final list
    runs window-ascending.
    """
    if not hits:
        raise ValueError("cannot rerank an empty hit set")
    groups = group_by_window(hits)
    quotas = allocate_group_quotas(groups, budget)
    selected: list[PaperHit] = []
    for group, quota in zip(groups, quotas):
        ranked = sorted(
            group.members,
            key=lambda h: (-h.citations, -(h.year if h.year is not None else 0), h.record_id),
        )
        selected.extend(ranked[:quota])
    return selected


# --- the full per-subsection pipeline -----------------------------------------


def run_subsection_retrieval(
    subsection: "Subsection",
    section_index: int,
    section_memory: "PaperMemory",
    global_memory: "PaperMemory",
    corpus: "Corpus",
    provider: EmbeddingProvider,
    gateway: Gateway,
    budgets: RetrievalBudgets,
) -> SubsectionRetrieval:
    """compose -> decompose -> retrieve per sub-query -> dedupe -> rerank.

    Deduplication keeps the maximum similarity per paper.  The returned
    manifest records every intermediate step for auditing.
    """
    query = compose_query(subsection)
    decomposition = decompose_query(
        query, section_memory, corpus, gateway, budgets.sub_query_cap
    )
    sub_queries = [
        SubQuery(
            section_index=section_index,
            subsection_index=subsection.index,
            position=k,
            text=text,
        )
        for k, text in enumerate(decomposition.queries, start=1)
    ]
    per_query_hits: list[list[RetrievalHit]] = []
    best: dict[str, float] = {}
    for sub_query in sub_queries:
        hits = retrieve_from_memory(
            sub_query.text, global_memory, provider, budgets.per_query_depth
        )
        per_query_hits.append(hits)
        for hit in hits:
            if hit.record_id not in best or hit.score > best[hit.record_id]:
                best[hit.record_id] = hit.score
    pool = [
        PaperHit(
            record_id=record_id,
            similarity=score,
            year=corpus.papers[record_id].year,
            citations=corpus.papers[record_id].citations,
        )
        for record_id, score in sorted(best.items(), key=lambda kv: (-kv[1], kv[0]))
    ]
    selected = temporal_rerank(pool, budgets.references)
    groups = group_by_window(pool)
    quotas = allocate_group_quotas(groups, budgets.references)
    manifest = {
        "subsection": {
            "section": section_index,
            "index": subsection.index,
            "title": subsection.title,
            "query": query,
        },
        "sub_queries": [sq.text for sq in sub_queries],
        "used_fallback": decomposition.used_fallback,
        "per_query_hits": [
            [{"id": h.record_id, "score": h.score} for h in hits]
            for hits in per_query_hits
        ],
        "pool": [
            {
                "id": h.record_id,
                "similarity": h.similarity,
                "year": h.year,
                "citations": h.citations,
            }
            for h in pool
        ],
        "windows": [
            {
                "window": list(group.window) if group.window else None,
                "size": len(group.members),
                "quota": quota,
            }
            for group, quota in zip(groups, quotas)
        ],
        "selected": [h.record_id for h in selected],
    }
    return SubsectionRetrieval(tuple(selected), manifest)
