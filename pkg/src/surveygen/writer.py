"""Survey writing: per-subsection drafts, assembly, refinement, rendering.

Drafts cite their supplied references by bracketed local number; assembly
renumbers everything into one deduplicated global bibliography.  Refinement
walks overlapping windows of two adjacent sections and fails open: a window
whose rewrite cannot be parsed, or that invents citation markers, is
discarded and the previous text kept.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field

from .corpus import Corpus, PaperRecord
from .errors import DraftError
from .llm import PROSE_PARAMS, ChatExchange, Gateway, PromptTemplate
from .outline import OutlineTree, Section, Subsection

logger = logging.getLogger(__name__)

MARKER_RE = re.compile(r"\[(\d+)\]")

RENDER_FORMATS = ("markdown", "text")


def extract_markers(text: str) -> list[int]:
    """All bracketed citation markers, in order of appearance (with repeats)."""
    return [int(m.group(1)) for m in MARKER_RE.finditer(text)]


@dataclass(frozen=True)
class SectionDraft:
    """One subsection's generated prose plus its citation bookkeeping."""

    section_index: int
    subsection_index: int
    text: str
    reference_ids: tuple[str, ...]
    cited_ids: tuple[str, ...]
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class BibliographyEntry:
    number: int
    record_id: str
    title: str
    year: int


@dataclass
class SubsectionText:
    index: int
    title: str
    text: str


@dataclass
class SectionText:
    index: int
    title: str
    subsections: list[SubsectionText] = field(default_factory=list)


@dataclass
class SurveyDocument:
    title: str
    outline: OutlineTree
    sections: list[SectionText]
    bibliography: list[BibliographyEntry]
    manifest: dict = field(default_factory=dict)

    def all_markers(self) -> list[int]:
        markers: list[int] = []
        for section in self.sections:
            for sub in section.subsections:
                markers.extend(extract_markers(sub.text))
        return markers


# --- drafting -----------------------------------------------------------------

WRITE_TEMPLATE = PromptTemplate(
    name="write-subsection",
    preamble=(
        "You write survey prose grounded strictly in the supplied references."
    ),
    body=(
        "Task: write subsection | Subsection: {title}\n"
        "Survey: {survey_title}\n"
        "Section: {section_title}\n"
        "Scope: {description}\n"
        "\n"
        "References (cite by bracketed number, e.g. [2]):\n"
        "{references}\n"
        "\n"
        "Write roughly {words} words of survey prose for this subsection.\n"
        "Cite only the listed references, by their bracketed numbers."
    ),
)

WRITE_REPAIR_TEMPLATE = PromptTemplate(
    name="write-subsection-repair",
    preamble=(
        "You write survey prose grounded strictly in the supplied references."
    ),
    body=(
        "Your draft cited reference numbers that do not exist: {bad}.\n"
        "Only numbers 1 to {count} are valid.\n"
        "\n"
        "Original request:\n"
        "{original}\n"
        "\n"
        "Rewrite the draft citing only valid reference numbers."
    ),
)

_ABSTRACT_CLIP = 280


def _references_block(references: list[PaperRecord]) -> str:
    lines = []
    for n, record in enumerate(references, start=1):
        abstract = record.abstract.replace("\n", " ")
        if len(abstract) > _ABSTRACT_CLIP:
            abstract = abstract[:_ABSTRACT_CLIP] + "..."
        lines.append(f"[{n}] {record.title} ({record.year}). {abstract}")
    return "\n".join(lines)


def _bad_markers(text: str, count: int) -> list[int]:
    return sorted({m for m in extract_markers(text) if m < 1 or m > count})


def write_subsection(
    survey_title: str,
    section: Section,
    subsection: Subsection,
    references: list[PaperRecord],
    gateway: Gateway,
    length_budget: int = 700,
) -> SectionDraft:
    """Generate one subsection's prose, enforcing the citation grammar.

    A draft citing an unknown reference number gets one repair re-prompt;
    persistent bad markers are an error listing them.
    """
    if not references:
        raise ValueError("references must be non-empty")
    bindings = {
        "title": subsection.title,
        "survey_title": survey_title,
        "section_title": section.title,
        "description": subsection.description or subsection.title,
        "references": _references_block(references),
        "words": str(length_budget),
    }
    exchanges: list[ChatExchange] = [
        gateway.complete(WRITE_TEMPLATE, bindings, PROSE_PARAMS, stage="writing")
    ]
    text = exchanges[-1].response.strip()
    bad = _bad_markers(text, len(references))
    if bad:
        logger.warning(
            "draft %d.%d cites unknown references %s; re-prompting",
            section.index, subsection.index, bad,
        )
        original = WRITE_TEMPLATE.render(bindings)
        exchanges.append(
            gateway.complete(
                WRITE_REPAIR_TEMPLATE,
                {
                    "bad": ", ".join(str(b) for b in bad),
                    "count": str(len(references)),
                    "original": original,
                },
                PROSE_PARAMS,
                stage="writing",
            )
        )
        text = exchanges[-1].response.strip()
        bad = _bad_markers(text, len(references))
        if bad:
            raise DraftError(
                f"draft for {section.index}.{subsection.index} '{subsection.title}' "
                f"cites unknown reference numbers {bad} after repair"
            )
    words = len(text.split())
    if not 0.8 * length_budget <= words <= 1.2 * length_budget:
        logger.debug(
            "draft %d.%d length %d words outside budget %d +-20%%",
            section.index, subsection.index, words, length_budget,
        )
    cited_local = sorted({m for m in extract_markers(text)})
    cited_ids = tuple(references[m - 1].id for m in cited_local)
    return SectionDraft(
        section_index=section.index,
        subsection_index=subsection.index,
        text=text,
        reference_ids=tuple(r.id for r in references),
        cited_ids=cited_ids,
        input_tokens=sum(e.input_tokens for e in exchanges),
        output_tokens=sum(e.output_tokens for e in exchanges),
    )


# --- assembly -----------------------------------------------------------------


def assemble_draft(
    drafts: list[SectionDraft], outline: OutlineTree, corpus: Corpus
) -> SurveyDocument:
    """Merge drafts in outline order under a single global bibliography.

    Local marker numbers are renumbered by first appearance in document
    order; papers cited from several subsections collapse to one entry.
    """
    by_coord = {(d.section_index, d.subsection_index): d for d in drafts}
    global_numbers: dict[str, int] = {}
    sections: list[SectionText] = []
    for section, subsection in outline.leaves():
        if (section.index, subsection.index) not in by_coord:
            raise DraftError(
                f"missing draft for subsection {section.index}.{subsection.index} "
                f"'{subsection.title}'"
            )
    for section in outline.sections:
        section_text = SectionText(index=section.index, title=section.title)
        for subsection in section.subsections:
            draft = by_coord[(section.index, subsection.index)]

            def renumber(match: re.Match) -> str:
                record_id = draft.reference_ids[int(match.group(1)) - 1]
                number = global_numbers.setdefault(record_id, len(global_numbers) + 1)
                return f"[{number}]"

            text = MARKER_RE.sub(renumber, draft.text)
            section_text.subsections.append(
                SubsectionText(index=subsection.index, title=subsection.title, text=text)
            )
        sections.append(section_text)
    bibliography = [
        BibliographyEntry(
            number=number,
            record_id=record_id,
            title=corpus.papers[record_id].title,
            year=corpus.papers[record_id].year,
        )
        for record_id, number in sorted(global_numbers.items(), key=lambda kv: kv[1])
    ]
    return SurveyDocument(
        title=outline.survey_title,
        outline=outline,
        sections=sections,
        bibliography=bibliography,
    )


# --- refinement ---------------------------------------------------------------

REFINE_TEMPLATE = PromptTemplate(
    name="refine-window",
    preamble=(
        "You edit survey drafts for flow. Preserve headings and never invent "
        "citations."
    ),
    body=(
        "Task: refine sections | Window: {first_title} / {second_title}\n"
        "\n"
        "{blocks}\n"
        "\n"
        "These two adjacent sections were written independently. Remove\n"
        "repeated material and smooth the transition between them. You may\n"
        "delete or rephrase but must keep every heading line unchanged and\n"
        "must not introduce citation markers that are not already present.\n"
        'Reply with the full revised text of both sections in the same\n'
        'format, or exactly "NO CHANGES" if nothing needs fixing.'
    ),
)

_SECTION_HEADER_RE = re.compile(r"^## (\d+)\. (.*)$")
_SUBSECTION_HEADER_RE = re.compile(r"^### (\d+)\.(\d+) (.*)$")


def _window_blocks(sections: list[SectionText]) -> str:
    lines: list[str] = []
    for section in sections:
        lines.append(f"## {section.index}. {section.title}")
        for sub in section.subsections:
            lines.append(f"### {section.index}.{sub.index} {sub.title}")
            lines.append(sub.text)
            lines.append("")
    return "\n".join(lines).rstrip("\n")


def _parse_window_reply(
    reply: str, expected: dict[tuple[int, int], SubsectionText]
) -> dict[tuple[int, int], str] | None:
    """Extract per-subsection text from a refinement reply; None if malformed."""
    texts: dict[tuple[int, int], list[str]] = {}
    current: tuple[int, int] | None = None
    for line in reply.splitlines():
        if _SECTION_HEADER_RE.match(line.strip()):
            current = None
            continue
        m = _SUBSECTION_HEADER_RE.match(line.strip())
        if m:
            current = (int(m.group(1)), int(m.group(2)))
            if current not in expected or current in texts:
                return None
            texts[current] = []
            continue
        if current is not None:
            texts[current].append(line)
    if set(texts) != set(expected):
        return None
    return {coord: "\n".join(lines).strip() for coord, lines in texts.items()}


def refine_survey(document: SurveyDocument, gateway: Gateway) -> SurveyDocument:
    """Sliding-window refinement over adjacent section pairs.

    Each accepted window replaces the pair's text; the final document's
    citation markers are always a subset of the draft's, and the bibliography
    is re-pruned to exactly the surviving citations.
    """
    sections = [
        SectionText(
            index=s.index,
            title=s.title,
            subsections=[SubsectionText(x.index, x.title, x.text) for x in s.subsections],
        )
        for s in document.sections
    ]
    windows_log: list[dict] = []
    for w in range(len(sections) - 1):
        pair = sections[w : w + 2]
        blocks = _window_blocks(pair)
        allowed = set()
        for section in pair:
            for sub in section.subsections:
                allowed.update(extract_markers(sub.text))
        exchange = gateway.complete(
            REFINE_TEMPLATE,
            {
                "first_title": pair[0].title,
                "second_title": pair[1].title,
                "blocks": blocks,
            },
            PROSE_PARAMS,
            stage="refine",
        )
        reply = exchange.response.strip()
        entry = {"window": [pair[0].index, pair[1].index], "outcome": "accepted"}
        if reply == "NO CHANGES":
            entry["outcome"] = "unchanged"
            windows_log.append(entry)
            continue
        expected = {
            (section.index, sub.index): sub
            for section in pair
            for sub in section.subsections
        }
        parsed = _parse_window_reply(reply, expected)
        if parsed is None:
            logger.warning(
                "refinement window %s/%s reply was malformed; keeping previous text",
                pair[0].title, pair[1].title,
            )
            entry["outcome"] = "discarded:unparsable"
            windows_log.append(entry)
            continue
        new_markers = set()
        for text in parsed.values():
            new_markers.update(extract_markers(text))
        invented = new_markers - allowed
        if invented:
            logger.warning(
                "refinement window %s/%s introduced markers %s; keeping previous text",
                pair[0].title, pair[1].title, sorted(invented),
            )
            entry["outcome"] = f"discarded:invented markers {sorted(invented)}"
            windows_log.append(entry)
            continue
        for section in pair:
            for sub in section.subsections:
                sub.text = parsed[(section.index, sub.index)]
        windows_log.append(entry)
    refined = SurveyDocument(
        title=document.title,
        outline=document.outline,
        sections=sections,
        bibliography=list(document.bibliography),
        manifest=dict(document.manifest),
    )
    refined.manifest["refinement_windows"] = windows_log
    return _prune_bibliography(refined)


def _prune_bibliography(document: SurveyDocument) -> SurveyDocument:
    """Drop uncited bibliography entries and renumber by first appearance."""
    surviving = []
    seen = set()
    for section in document.sections:
        for sub in section.subsections:
            for marker in extract_markers(sub.text):
                if marker not in seen:
                    seen.add(marker)
                    surviving.append(marker)
    by_number = {entry.number: entry for entry in document.bibliography}
    mapping = {old: new for new, old in enumerate(surviving, start=1)}
    if mapping == {n: n for n in mapping} and len(mapping) == len(document.bibliography):
        return document
    for section in document.sections:
        for sub in section.subsections:
            sub.text = MARKER_RE.sub(lambda m: f"[{mapping[int(m.group(1))]}]", sub.text)
    document.bibliography = [
        BibliographyEntry(
            number=mapping[old],
            record_id=by_number[old].record_id,
            title=by_number[old].title,
            year=by_number[old].year,
        )
        for old in surviving
    ]
    return document


# --- rendering ----------------------------------------------------------------


def render(document: SurveyDocument, fmt: str = "markdown") -> str:
    """Deterministic serialization of a survey document."""
    if fmt not in RENDER_FORMATS:
        raise ValueError(f"format must be one of {RENDER_FORMATS}, got {fmt!r}")
    lines: list[str] = []
    if fmt == "markdown":
        lines.append(f"# {document.title}")
        for section in document.sections:
            lines.append("")
            lines.append(f"## {section.index}. {section.title}")
            for sub in section.subsections:
                lines.append("")
                lines.append(f"### {section.index}.{sub.index} {sub.title}")
                if sub.text:
                    lines.append("")
                    lines.append(sub.text)
        lines.append("")
        lines.append("## References")
        lines.append("")
        for entry in document.bibliography:
            lines.append(f"[{entry.number}] {entry.title} ({entry.year})")
    else:
        lines.append(document.title)
        lines.append("=" * len(document.title))
        for section in document.sections:
            lines.append("")
            lines.append(f"{section.index}. {section.title}")
            for sub in section.subsections:
                lines.append("")
                lines.append(f"{section.index}.{sub.index} {sub.title}")
                if sub.text:
                    lines.append(sub.text)
        lines.append("")
        lines.append("References")
        lines.append("----------")
        for entry in document.bibliography:
            lines.append(f"[{entry.number}] {entry.title} ({entry.year})")
    return "\n".join(lines) + "\n"
