"""Two-level survey outline generation.

The outline stage retrieves topic context from both databases, drafts
top-level sections with per-section retrieval queries, expands each section
into subsections, and captures the retrieved paper sets as memories that
scope all later retrieval.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .corpus import Corpus, OutlineRecord
from .errors import OutlineError, RetrievalError
from .llm import OUTLINE_PARAMS, Gateway, OutputParseError, PromptTemplate, ResponseFormat
from .retrieval import compose_query
from .vectorstore import EmbeddingProvider, RetrievalHit, VectorIndex, embed_text, top_k_search

logger = logging.getLogger(__name__)

MIN_SECTIONS = 3


@dataclass(frozen=True)
class TopicRequest:
    """Per-run knobs for one survey topic."""

    topic: str
    outline_candidates: int = 1500
    section_paper_budget: int = 100
    survey_exemplars: int = 10
    section_exemplars: int = 5
    prompt_title_budget: int = 200

    def __post_init__(self) -> None:
        if not self.topic.strip():
            raise ValueError("topic must be non-empty")
        for name in (
            "outline_candidates",
            "section_paper_budget",
            "survey_exemplars",
            "section_exemplars",
            "prompt_title_budget",
        ):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class Subsection:
    index: int
    title: str
    description: str
    query: str


@dataclass
class Section:
    index: int
    title: str
    query: str
    subsections: list[Subsection] = field(default_factory=list)


@dataclass(frozen=True)
class OutlineTree:
    survey_title: str
    sections: tuple[Section, ...]

    def leaves(self) -> list[tuple[Section, Subsection]]:
        return [(s, sub) for s in self.sections for sub in s.subsections]


@dataclass(frozen=True)
class RetrievalContext:
    """Topic-level hits into the paper and outline databases."""

    papers: tuple[RetrievalHit, ...]
    outlines: tuple[RetrievalHit, ...]


@dataclass(frozen=True)
class PaperMemory:
    """An ordered paper subset, with its own searchable index slice."""

    scope: str
    ids: tuple[str, ...]
    index: VectorIndex


@dataclass(frozen=True)
class AssembledOutline:
    tree: OutlineTree
    global_memory: PaperMemory
    section_memories: dict[int, PaperMemory]


# --- retrieval ---------------------------------------------------------------


def retrieve_topic_context(
    request: TopicRequest,
    paper_index: VectorIndex,
    outline_index: VectorIndex,
    provider: EmbeddingProvider,
) -> RetrievalContext:
    """Top candidate papers and exemplar outlines for the topic."""
    if len(paper_index) == 0 or len(outline_index) == 0:
        raise RetrievalError("empty retrieval context: build both indexes first")
    query = embed_text(request.topic, provider)
    papers = top_k_search(paper_index, query, request.outline_candidates)
    outlines = top_k_search(outline_index, query, request.survey_exemplars)
    if not papers:
        raise RetrievalError("empty retrieval context: no papers retrieved for topic")
    return RetrievalContext(tuple(papers), tuple(outlines))


# --- first-level generation --------------------------------------------------

FIRST_LEVEL_TEMPLATE = PromptTemplate(
    name="first-level-outline",
    preamble=(
        "You plan academic survey papers. Reply only in the requested line format."
    ),
    body=(
        "Task: outline sections\n"
        "Topic: {topic}\n"
        "\n"
        "Outlines of published surveys on related topics:\n"
        "{exemplars}\n"
        "\n"
        "Retrieved papers on this topic ({shown} of {retrieved} shown):\n"
        "{titles}\n"
        "\n"
        "Design the top-level sections of a survey on this topic: at least\n"
        "{min_sections}, typically 6-8, starting with an introduction and ending\n"
        "with a conclusion. Give each section a retrieval query that specifies\n"
        "its scope and focus.\n"
        "Reply with one line per section, in order, formatted exactly as:\n"
        "Section N: <section title> | query: <retrieval query>\n"
        'You may start with a single line "Title: <survey title>".'
    ),
)

_TITLE_LINE_RE = re.compile(r"^\s*title\s*:\s*(.+?)\s*$", re.IGNORECASE)
_SECTION_LINE_RE = re.compile(
    r"^\s*section\s+\d+\s*:\s*(.+?)\s*\|\s*query\s*:\s*(.+?)\s*$", re.IGNORECASE
)
_SUBSECTION_LINE_RE = re.compile(
    r"^\s*subsection\s+[\d.]+\s*:\s*(.+?)\s*\|\s*description\s*:\s*(.*?)\s*$",
    re.IGNORECASE,
)


@dataclass(frozen=True)
class FirstLevelOutline:
    survey_title: str | None
    sections: tuple[Section, ...]


def _parse_first_level(text: str, final: bool) -> FirstLevelOutline:
    survey_title: str | None = None
    parsed: list[tuple[str, str]] = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        title_match = _TITLE_LINE_RE.match(stripped)
        if title_match and survey_title is None and not parsed:
            survey_title = title_match.group(1)
            continue
        m = _SECTION_LINE_RE.match(stripped)
        if m:
            title, query = m.group(1), m.group(2)
            if not title or not query:
                raise OutputParseError(f"section line missing title or query: {stripped!r}")
            parsed.append((title, query))
    if not parsed:
        raise OutputParseError("no section lines matched the required format")
    seen: set[str] = set()
    deduped: list[tuple[str, str]] = []
    duplicates: list[str] = []
    for title, query in parsed:
        key = title.casefold()
        if key in seen:
            duplicates.append(title)
            continue
        seen.add(key)
        deduped.append((title, query))
    if duplicates and not final:
        raise OutputParseError(f"duplicate section titles: {sorted(set(duplicates))}")
    if duplicates:
        logger.warning("deduplicated repeated section titles: %s", sorted(set(duplicates)))
    if len(deduped) < MIN_SECTIONS:
        raise OutputParseError(
            f"only {len(deduped)} sections; need at least {MIN_SECTIONS}"
        )
    sections = tuple(
        Section(index=i, title=title, query=query)
        for i, (title, query) in enumerate(deduped, start=1)
    )
    return FirstLevelOutline(survey_title, sections)


FIRST_LEVEL_FORMAT = ResponseFormat(
    name="first-level outline",
    instructions=(
        'One line per section: "Section N: <title> | query: <retrieval query>". '
        "At least 3 sections, no repeated titles."
    ),
    parse=_parse_first_level,
)


def _exemplar_outline_text(corpus: Corpus, hits: tuple[RetrievalHit, ...]) -> str:
    blocks: list[str] = []
    for n, hit in enumerate(hits, start=1):
        record: OutlineRecord | None = corpus.outlines.get(hit.record_id)
        if record is None:
            continue
        paper = corpus.papers[hit.record_id]
        lines = [f"Exemplar {n}: {paper.title}"]
        for i, heading in enumerate(record.headings, start=1):
            lines.append(f"  {i}. {heading.title}")
            for j, sub in enumerate(heading.subheadings, start=1):
                lines.append(f"    {i}.{j} {sub}")
        blocks.append("\n".join(lines))
    return "\n".join(blocks) if blocks else "(none)"


def _titles_text(corpus: Corpus, hits: tuple[RetrievalHit, ...], budget: int) -> str:
    lines = []
    for hit in hits[:budget]:
        record = corpus.papers[hit.record_id]
        lines.append(f"- {record.title} ({record.year})")
    return "\n".join(lines) if lines else "(none)"


def generate_first_level(
    request: TopicRequest,
    context: RetrievalContext,
    corpus: Corpus,
    gateway: Gateway,
) -> FirstLevelOutline:
    """Draft top-level sections, each carrying a scope-and-focus query."""
    if not context.papers:
        raise RetrievalError("empty retrieval context")
    shown = min(request.prompt_title_budget, len(context.papers))
    bindings = {
        "topic": request.topic,
        "exemplars": _exemplar_outline_text(corpus, context.outlines),
        "titles": _titles_text(corpus, context.papers, request.prompt_title_budget),
        "shown": str(shown),
        "retrieved": str(len(context.papers)),
        "min_sections": str(MIN_SECTIONS),
    }
    return gateway.complete_structured(
        FIRST_LEVEL_TEMPLATE,
        bindings,
        FIRST_LEVEL_FORMAT,
        params=OUTLINE_PARAMS,
        stage="outline",
        max_repairs=1,
    )


# --- section expansion -------------------------------------------------------

EXPAND_TEMPLATE = PromptTemplate(
    name="section-expansion",
    preamble=(
        "You plan academic survey papers. Reply only in the requested line format."
    ),
    body=(
        "Task: outline subsections | Section: {section_title}\n"
        "Topic: {topic}\n"
        "Section query: {section_query}\n"
        "\n"
        "Subsection patterns from related surveys:\n"
        "{exemplars}\n"
        "\n"
        "Papers relevant to this section ({shown} of {retrieved} shown):\n"
        "{titles}\n"
        "\n"
        "Break this section into subsections (usually 2-4). Reply with one line\n"
        "per subsection, formatted exactly as:\n"
        "Subsection N: <title> | description: <one sentence on its scope>"
    ),
)


def _parse_subsections(text: str, final: bool) -> list[tuple[str, str]]:
    parsed: list[tuple[str, str]] = []
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        m = _SUBSECTION_LINE_RE.match(stripped)
        if m:
            title, description = m.group(1), m.group(2)
            if not title:
                raise OutputParseError(f"subsection line missing title: {stripped!r}")
            parsed.append((title, description))
    if not parsed:
        raise OutputParseError("no subsection lines matched the required format")
    return parsed


SUBSECTION_FORMAT = ResponseFormat(
    name="subsection list",
    instructions=(
        'One line per subsection: "Subsection N: <title> | description: <scope>". '
        "At least one subsection."
    ),
    parse=_parse_subsections,
)


def expand_section(
    section: Section,
    request: TopicRequest,
    corpus: Corpus,
    paper_index: VectorIndex,
    outline_index: VectorIndex,
    provider: EmbeddingProvider,
    gateway: Gateway,
) -> tuple[list[Subsection], PaperMemory]:
    """Expand a section into subsections and capture its retrieval memory."""
    query = embed_text(section.query, provider)
    paper_hits = top_k_search(paper_index, query, request.section_paper_budget)
    outline_hits = top_k_search(outline_index, query, request.section_exemplars)
    shown = min(request.prompt_title_budget, len(paper_hits))
    bindings = {
        "section_title": section.title,
        "topic": request.topic,
        "section_query": section.query,
        "exemplars": _exemplar_outline_text(corpus, tuple(outline_hits)),
        "titles": _titles_text(corpus, tuple(paper_hits), request.prompt_title_budget),
        "shown": str(shown),
        "retrieved": str(len(paper_hits)),
    }
    parsed = gateway.complete_structured(
        EXPAND_TEMPLATE,
        bindings,
        SUBSECTION_FORMAT,
        params=OUTLINE_PARAMS,
        stage="outline",
        max_repairs=1,
    )
    subsections = []
    for j, (title, description) in enumerate(parsed, start=1):
        sub = Subsection(index=j, title=title, description=description, query="")
        sub.query = compose_query(sub)
        subsections.append(sub)
    memory_ids = tuple(hit.record_id for hit in paper_hits)
    memory = PaperMemory(
        scope=f"section:{section.index}",
        ids=memory_ids,
        index=paper_index.subset(memory_ids),
    )
    return subsections, memory


# --- assembly ----------------------------------------------------------------


def validate_tree(tree: OutlineTree) -> None:
    """Check structural invariants; raises OutlineError naming the bad node."""
    if len(tree.sections) < MIN_SECTIONS:
        raise OutlineError(f"outline has {len(tree.sections)} sections; need >= {MIN_SECTIONS}")
    seen: set[str] = set()
    for section in tree.sections:
        label = f"section {section.index} '{section.title}'"
        if not section.title.strip():
            raise OutlineError(f"{label}: empty title")
        if not section.query.strip():
            raise OutlineError(f"{label}: empty query")
        key = section.title.casefold()
        if key in seen:
            raise OutlineError(f"{label}: duplicate section title")
        seen.add(key)
        if not section.subsections:
            raise OutlineError(f"{label}: no subsections")
        for sub in section.subsections:
            if not sub.title.strip():
                raise OutlineError(f"{label}, subsection {sub.index}: empty title")
            if not sub.query.strip():
                raise OutlineError(
                    f"{label}, subsection {sub.index} '{sub.title}': empty query"
                )


def assemble_outline(
    request: TopicRequest,
    first_level: FirstLevelOutline,
    expansions: dict[int, tuple[list[Subsection], PaperMemory]],
    context: RetrievalContext,
    paper_index: VectorIndex,
) -> AssembledOutline:
    """Merge expanded sections into the final tree and build the memories."""
    sections = []
    section_memories: dict[int, PaperMemory] = {}
    for section in first_level.sections:
        if section.index not in expansions:
            raise OutlineError(f"section {section.index} '{section.title}' was not expanded")
        subsections, memory = expansions[section.index]
        sections.append(
            Section(
                index=section.index,
                title=section.title,
                query=section.query,
                subsections=list(subsections),
            )
        )
        section_memories[section.index] = memory
    title = first_level.survey_title or f"A Survey of {request.topic}"
    tree = OutlineTree(survey_title=title, sections=tuple(sections))
    validate_tree(tree)
    global_ids = tuple(hit.record_id for hit in context.papers)
    global_memory = PaperMemory(
        scope="global", ids=global_ids, index=paper_index.subset(global_ids)
    )
    return AssembledOutline(tree, global_memory, section_memories)


def export_outline(tree: OutlineTree) -> str:
    """Deterministic text rendering: titles, descriptions, and queries."""
    lines = [f"Survey: {tree.survey_title}", ""]
    for section in tree.sections:
        lines.append(f"{section.index}. {section.title}")
        lines.append(f"   query: {section.query}")
        for sub in section.subsections:
            lines.append(f"   {section.index}.{sub.index} {sub.title}")
            if sub.description:
                lines.append(f"       description: {sub.description}")
            lines.append(f"       query: {sub.query}")
    return "\n".join(lines) + "\n"
