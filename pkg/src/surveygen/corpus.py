"""Literature corpus: line-delimited ingestion, validation, and summary stats.

Two record files feed the engine: research/survey paper metadata and the
heading outlines extracted from published surveys.  Both are UTF-8 files with
one JSON object per line.  Ingestion is single-writer; a fully ingested
Corpus is treated as immutable and is safe for concurrent readers.
"""

from __future__ import annotations

import datetime
import json
import logging
import re
import statistics
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CorpusError
from .llm import OUTLINE_PARAMS, Gateway, OutputParseError, PromptTemplate, ResponseFormat

logger = logging.getLogger(__name__)

KINDS = ("research", "survey")

PAPER_FIELDS = {"id", "title", "abstract", "date", "citations", "kind"}
OUTLINE_FIELDS = {"paper_id", "outline"}

MIN_YEAR = 1900

_DATE_RE = re.compile(r"^(\d{4})(?:-(\d{2}))?$")
_NUMBERED_HEADING_RE = re.compile(r"^\s*(\d+(?:\.\d+)*)[.)]?\s+(.+?)\s*$")


def _max_year() -> int:
    return datetime.date.today().year + 1


@dataclass(frozen=True)
class PaperRecord:
    """One literature item: identifiers, text, date, and citation count."""

    id: str
    title: str
    abstract: str
    year: int
    month: int | None
    citations: int
    kind: str
    citations_missing: bool = False

    @property
    def date_key(self) -> tuple[int, int]:
        """Orderable (year, month); a missing month counts as June."""
        return (self.year, self.month if self.month is not None else 6)

    @property
    def date_str(self) -> str:
        if self.month is None:
            return f"{self.year:04d}"
        return f"{self.year:04d}-{self.month:02d}"

    def to_json_line(self) -> str:
        payload = {
            "id": self.id,
            "title": self.title,
            "abstract": self.abstract,
            "date": self.date_str,
            "citations": self.citations,
            "kind": self.kind,
        }
        return json.dumps(payload, ensure_ascii=False, sort_keys=True)


def document_text(record: PaperRecord) -> str:
    """Text embedded for retrieval: title plus abstract."""
    return f"{record.title}\n{record.abstract}"


@dataclass(frozen=True)
class OutlineHeading:
    """A top-level heading and its (depth-2) subheadings."""

    title: str
    subheadings: tuple[str, ...] = ()


@dataclass(frozen=True)
class OutlineRecord:
    paper_id: str
    headings: tuple[OutlineHeading, ...]

    def to_json_line(self) -> str:
        nested = [
            [h.title, list(h.subheadings)] if h.subheadings else h.title
            for h in self.headings
        ]
        return json.dumps({"paper_id": self.paper_id, "outline": nested}, ensure_ascii=False)


@dataclass(frozen=True)
class IngestError:
    line: int
    message: str


@dataclass
class IngestReport:
    path: str
    accepted: int = 0
    skipped: int = 0
    errors: list[IngestError] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "path": self.path,
            "accepted": self.accepted,
            "skipped": self.skipped,
            "errors": [{"line": e.line, "message": e.message} for e in self.errors],
        }


def parse_paper_line(line: str) -> PaperRecord:
    """Parse and validate one paper record line; raises ValueError on bad records."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    unknown = set(obj) - PAPER_FIELDS
    if unknown:
        raise ValueError(f"unknown fields: {sorted(unknown)}")
    for name in ("id", "title", "abstract", "date", "kind"):
        if name not in obj:
            raise ValueError(f"missing field '{name}'")
        if not isinstance(obj[name], str):
            raise ValueError(f"field '{name}' must be a string")
    record_id = obj["id"].strip()
    title = obj["title"].strip()
    if not record_id:
        raise ValueError("empty id")
    if not title:
        raise ValueError("empty title")
    kind = obj["kind"]
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got {kind!r}")
    m = _DATE_RE.match(obj["date"])
    if not m:
        raise ValueError(f"date must be YYYY or YYYY-MM, got {obj['date']!r}")
    year = int(m.group(1))
    month = int(m.group(2)) if m.group(2) else None
    if not MIN_YEAR <= year <= _max_year():
        raise ValueError(f"year {year} outside [{MIN_YEAR}, {_max_year()}]")
    if month is not None and not 1 <= month <= 12:
        raise ValueError(f"month {month} outside [1, 12]")
    citations_missing = "citations" not in obj
    if citations_missing:
        citations = 0
    else:
        citations = obj["citations"]
        if isinstance(citations, bool) or not isinstance(citations, int):
            raise ValueError("citations must be an integer")
        if citations < 0:
            raise ValueError(f"citations must be >= 0, got {citations}")
    return PaperRecord(
        id=record_id,
        title=title,
        abstract=obj["abstract"],
        year=year,
        month=month,
        citations=citations,
        kind=kind,
        citations_missing=citations_missing,
    )


def _parse_outline_items(items: object) -> tuple[OutlineHeading, ...]:
    if not isinstance(items, list) or not items:
        raise ValueError("outline must be a non-empty list")
    headings: list[OutlineHeading] = []
    for item in items:
        if isinstance(item, str):
            title, subs = item, []
        elif isinstance(item, list) and len(item) == 2 and isinstance(item[1], list):
            title, subs = item
        else:
            raise ValueError("outline items must be strings or [title, [subheadings]] pairs")
        if not isinstance(title, str) or not title.strip():
            raise ValueError("headings must be non-empty strings")
        clean_subs = []
        for sub in subs:
            if isinstance(sub, list):
                raise ValueError("outline deeper than two levels")
            if not isinstance(sub, str) or not sub.strip():
                raise ValueError("headings must be non-empty strings")
            clean_subs.append(sub.strip())
        headings.append(OutlineHeading(title.strip(), tuple(clean_subs)))
    return tuple(headings)


def parse_outline_line(line: str) -> OutlineRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ValueError(f"not valid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise ValueError("record is not an object")
    unknown = set(obj) - OUTLINE_FIELDS
    if unknown:
        raise ValueError(f"unknown fields: {sorted(unknown)}")
    paper_id = obj.get("paper_id")
    if not isinstance(paper_id, str) or not paper_id.strip():
        raise ValueError("missing or empty paper_id")
    return OutlineRecord(paper_id.strip(), _parse_outline_items(obj.get("outline")))


@dataclass(frozen=True)
class Provenance:
    sources: tuple[str, ...]
    ingested_at: datetime.datetime


class Corpus:
    """Validated paper and outline records, keyed by id."""

    def __init__(self) -> None:
        self.papers: dict[str, PaperRecord] = {}
        self.outlines: dict[str, OutlineRecord] = {}
        self._sources: list[str] = []

    @property
    def provenance(self) -> Provenance:
        return Provenance(tuple(self._sources), datetime.datetime.now(datetime.timezone.utc))

    def ingest_papers(self, path: str | Path, kind_filter: str | None = None) -> IngestReport:
        """Ingest one paper record file.

        Malformed or duplicate records are collected as per-line errors and
        ingestion continues; an unreadable file is fatal.  Records not
        matching ``kind_filter`` are skipped, not errors.
        """
        if kind_filter is not None and kind_filter not in KINDS:
            raise ValueError(f"kind_filter must be one of {KINDS}")
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CorpusError(f"cannot read paper records from {path}: {exc}") from exc
        report = IngestReport(path=str(path))
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = parse_paper_line(line)
            except ValueError as exc:
                report.errors.append(IngestError(lineno, str(exc)))
                continue
            if kind_filter is not None and record.kind != kind_filter:
                report.skipped += 1
                continue
            if record.id in self.papers:
                report.errors.append(IngestError(lineno, f"duplicate id '{record.id}'"))
                continue
            self.papers[record.id] = record
            report.accepted += 1
        self._sources.append(str(path))
        if report.errors:
            logger.warning("%s: %d record errors during ingest", path, len(report.errors))
        return report

    def ingest_outlines(self, path: str | Path) -> IngestReport:
        """Ingest an outline record file; every paper_id must resolve to a survey."""
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise CorpusError(f"cannot read outline records from {path}: {exc}") from exc
        report = IngestReport(path=str(path))
        for lineno, line in enumerate(lines, start=1):
            if not line.strip():
                continue
            try:
                record = parse_outline_line(line)
            except ValueError as exc:
                report.errors.append(IngestError(lineno, str(exc)))
                continue
            paper = self.papers.get(record.paper_id)
            if paper is None:
                report.errors.append(
                    IngestError(lineno, f"paper_id '{record.paper_id}' not in corpus")
                )
                continue
            if paper.kind != "survey":
                report.errors.append(
                    IngestError(lineno, f"paper_id '{record.paper_id}' is not a survey record")
                )
                continue
            if record.paper_id in self.outlines:
                report.errors.append(
                    IngestError(lineno, f"duplicate outline for '{record.paper_id}'")
                )
                continue
            self.outlines[record.paper_id] = record
            report.accepted += 1
        self._sources.append(str(path))
        return report

    def records_of_kind(self, kind: str) -> list[PaperRecord]:
        return [r for r in self.papers.values() if r.kind == kind]

    def stats(self) -> "CorpusStats":
        kind_counts = {kind: 0 for kind in KINDS}
        year_histogram: dict[int, int] = {}
        for record in self.papers.values():
            kind_counts[record.kind] += 1
            year_histogram[record.year] = year_histogram.get(record.year, 0) + 1
        citations = sorted(r.citations for r in self.papers.values())
        if not citations:
            quantiles: dict[str, float] = {}
        elif len(citations) == 1:
            only = float(citations[0])
            quantiles = {"min": only, "p25": only, "median": only, "p75": only, "max": only}
        else:
            q1, q2, q3 = statistics.quantiles(citations, n=4, method="inclusive")
            quantiles = {
                "min": float(citations[0]),
                "p25": q1,
                "median": q2,
                "p75": q3,
                "max": float(citations[-1]),
            }
        return CorpusStats(kind_counts, dict(sorted(year_histogram.items())), quantiles)


@dataclass(frozen=True)
class CorpusStats:
    kind_counts: dict[str, int]
    year_histogram: dict[int, int]
    citation_quantiles: dict[str, float]

    @property
    def total(self) -> int:
        return sum(self.kind_counts.values())


# --- outline standardization -------------------------------------------------

STANDARDIZE_TEMPLATE = PromptTemplate(
    name="standardize-outline",
    preamble="You clean up heading lists extracted from survey papers.",
    body=(
        "Task: standardize outline\n"
        "\n"
        "Raw headings extracted from a survey paper:\n"
        "{raw}\n"
        "\n"
        "Rewrite these as a clean two-level outline, dropping noise and repeats.\n"
        'Use exactly one heading per line: "N. <heading>" for top-level headings\n'
        'and "N.M <heading>" for subheadings.'
    ),
)

_OUTLINE_FORMAT_HELP = (
    'One heading per line: "N. <heading>" for top-level headings, '
    '"N.M <heading>" for subheadings. No deeper nesting.'
)


def parse_numbered_outline(text: str) -> tuple[OutlineHeading, ...]:
    """Parse "1. Title" / "1.1 Subtitle" lines into a two-level tree.

    Numbering is stripped and headings are deduplicated case-insensitively
    (later duplicates merge their subheadings into the first occurrence).
    """
    sections: list[tuple[str, list[str]]] = []
    seen: dict[str, int] = {}
    for line in text.splitlines():
        stripped = line.strip()
        if not stripped or stripped.startswith("```"):
            continue
        m = _NUMBERED_HEADING_RE.match(stripped)
        if not m:
            raise OutputParseError(f"unnumbered heading line: {stripped!r}")
        depth = len(m.group(1).split("."))
        title = m.group(2).strip()
        if not title:
            raise OutputParseError("empty heading")
        if depth == 1:
            key = title.casefold()
            if key in seen:
                continue
            seen[key] = len(sections)
            sections.append((title, []))
        elif depth == 2:
            if not sections:
                raise OutputParseError(f"subheading before any top-level heading: {stripped!r}")
            subs = sections[-1][1]
            if title.casefold() not in (s.casefold() for s in subs):
                subs.append(title)
        else:
            raise OutputParseError(f"outline deeper than two levels: {stripped!r}")
    if not sections:
        raise OutputParseError("no heading lines found")
    return tuple(OutlineHeading(title, tuple(subs)) for title, subs in sections)


OUTLINE_TEXT_FORMAT = ResponseFormat(
    name="two-level outline",
    instructions=_OUTLINE_FORMAT_HELP,
    parse=lambda text, final: parse_numbered_outline(text),
)


def standardize_outline(raw: str, gateway: Gateway, max_repairs: int = 2) -> tuple[OutlineHeading, ...]:
    """Normalize raw extracted heading text into a two-level outline tree."""
    if not raw.strip():
        raise ValueError("raw outline text is empty")
    return gateway.complete_structured(
        STANDARDIZE_TEMPLATE,
        {"raw": raw},
        OUTLINE_TEXT_FORMAT,
        params=OUTLINE_PARAMS,
        stage="standardize",
        max_repairs=max_repairs,
    )
