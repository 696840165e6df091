"""Survey evaluation: coverage metrics, LLM-judged scores, win rates, kappa.

Coverage metrics are exact set arithmetic over normalized titles; the judged
scores use a 0-100 rubric with the score extracted from the reply's last
in-range number.  Pairwise comparison randomizes presentation order with a
recorded seed to cancel position bias.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigError, StructuredOutputError
from .llm import JUDGE_PARAMS, Gateway, OutputParseError, PromptTemplate, ResponseFormat

logger = logging.getLogger(__name__)

_NUMBER_RE = re.compile(r"-?\d+(?:\.\d+)?")
_BIB_LINE_RE = re.compile(r"^\[(\d+)\]\s+(.+?)(?:\s+\((\d{4})\))?\s*$")

CONTENT_DIMENSIONS = ("structure", "relevance", "coverage")
WIN_RATE_MODES = ("score", "comparative")


def normalize_title(title: str) -> str:
    """Casefold and strip punctuation/whitespace so titles match across styles."""
    return "".join(ch for ch in title.casefold() if ch.isalnum())


def _normalized_set(items: Iterable[str]) -> set[str]:
    return {t for t in (normalize_title(item) for item in items) if t}


def reference_coverage(survey_refs: Iterable[str], benchmark_refs: Iterable[str]) -> float:
    """Fraction of the survey's references found in the benchmark set.

    Matching happens on normalized titles (ids normalize to themselves), and
    both sides are deduplicated by normalization first.
    """
    cited = _normalized_set(survey_refs)
    if not cited:
        raise ValueError("survey reference set is empty")
    benchmark = _normalized_set(benchmark_refs)
    return len(cited & benchmark) / len(cited)


def input_coverage(retrieved: Iterable[str], benchmark_refs: Iterable[str]) -> float:
    """Fraction of retrieved papers that belong to the benchmark reference set."""
    pool = _normalized_set(retrieved)
    if not pool:
        raise ValueError("retrieved set is empty")
    benchmark = _normalized_set(benchmark_refs)
    return len(pool & benchmark) / len(pool)


# --- judged scores -------------------------------------------------------------

OUTLINE_JUDGE_TEMPLATE = PromptTemplate(
    name="judge-outline",
    preamble="You are a meticulous reviewer of academic survey outlines.",
    body=(
        "Task: score outline\n"
        "\n"
        "{outline}\n"
        "\n"
        "Score this survey outline from 0 to 100, weighing topic uniqueness\n"
        "(no duplicated or overlapping topics), structural balance (sections\n"
        "developed in proportion), hierarchical clarity, and logical\n"
        "organization.\n"
        "Reply with the score as a bare number on the final line."
    ),
)

CONTENT_JUDGE_TEMPLATE = PromptTemplate(
    name="judge-content",
    preamble="You are a meticulous reviewer of academic survey papers.",
    body=(
        "Task: score content | Dimension: {dimension}\n"
        "\n"
        "Reference survey written by domain experts:\n"
        "{gold}\n"
        "\n"
        "Survey under evaluation:\n"
        "{survey}\n"
        "\n"
        "Score the survey under evaluation on {dimension} from 0 to 100,\n"
        "using the reference survey as the quality bar.\n"
        "Reply with the score as a bare number on the final line."
    ),
)

SCORE_JUDGE_TEMPLATE = PromptTemplate(
    name="judge-score",
    preamble="You are a meticulous reviewer of academic survey papers.",
    body=(
        "Task: score survey\n"
        "\n"
        "{survey}\n"
        "\n"
        "Score this survey from 0 to 100 for overall quality.\n"
        "Reply with the score as a bare number on the final line."
    ),
)

COMPARE_TEMPLATE = PromptTemplate(
    name="judge-compare",
    preamble="You are a meticulous reviewer of academic survey papers.",
    body=(
        "Task: compare surveys\n"
        "\n"
        "Survey A:\n"
        "{a}\n"
        "\n"
        "Survey B:\n"
        "{b}\n"
        "\n"
        "Which survey is better overall?\n"
        'Reply with exactly "A" or "B" on the final line.'
    ),
)


def extract_score(text: str, low: float = 0.0, high: float = 100.0) -> float | None:
    """Last number within [low, high] anywhere in the reply; None if absent."""
    found = None
    for match in _NUMBER_RE.finditer(text):
        value = float(match.group(0))
        if low <= value <= high:
            found = value
    return found


def _parse_score(text: str, final: bool) -> float:
    value = extract_score(text)
    if value is None:
        raise OutputParseError("no number in [0, 100] found in the reply")
    return value


SCORE_FORMAT = ResponseFormat(
    name="judge score",
    instructions="A bare number between 0 and 100 on the final line.",
    parse=_parse_score,
)


def _parse_verdict(text: str, final: bool) -> str:
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines:
        raise OutputParseError("empty reply")
    verdict = lines[-1].strip(" .!\"'").upper()
    if verdict not in ("A", "B"):
        raise OutputParseError(f"final line is not A or B: {lines[-1]!r}")
    return verdict


VERDICT_FORMAT = ResponseFormat(
    name="comparison verdict",
    instructions='Exactly "A" or "B" on the final line.',
    parse=_parse_verdict,
)


def score_outline(outline_text: str, gateway: Gateway, max_repairs: int = 1) -> float:
    """Judge an outline on the 0-100 rubric; out-of-range replies get one repair."""
    return gateway.complete_structured(
        OUTLINE_JUDGE_TEMPLATE,
        {"outline": outline_text},
        SCORE_FORMAT,
        params=JUDGE_PARAMS,
        stage="judge",
        max_repairs=max_repairs,
    )


@dataclass(frozen=True)
class ContentScores:
    structure: float
    relevance: float
    coverage: float

    @property
    def average(self) -> float:
        return (self.structure + self.relevance + self.coverage) / 3

    def to_dict(self) -> dict:
        return {
            "structure": self.structure,
            "relevance": self.relevance,
            "coverage": self.coverage,
            "average": self.average,
        }


def score_content(
    survey_text: str, gold_text: str, gateway: Gateway, max_repairs: int = 1
) -> ContentScores:
    """Judge a survey against the gold reference on three dimensions."""
    scores = {}
    for dimension in CONTENT_DIMENSIONS:
        scores[dimension] = gateway.complete_structured(
            CONTENT_JUDGE_TEMPLATE,
            {"dimension": dimension, "gold": gold_text, "survey": survey_text},
            SCORE_FORMAT,
            params=JUDGE_PARAMS,
            stage="judge",
            max_repairs=max_repairs,
        )
    return ContentScores(**scores)


# --- win rates -------------------------------------------------------------------


@dataclass(frozen=True)
class WinRateReport:
    mode: str
    wins_a: float
    wins_b: float
    dropped: int
    total: int
    seed: int

    @property
    def judged(self) -> int:
        return self.total - self.dropped

    @property
    def fraction_a(self) -> float:
        return self.wins_a / self.judged if self.judged else 0.0

    @property
    def fraction_b(self) -> float:
        return self.wins_b / self.judged if self.judged else 0.0

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "wins_a": self.wins_a,
            "wins_b": self.wins_b,
            "dropped": self.dropped,
            "total": self.total,
            "fraction_a": self.fraction_a,
            "fraction_b": self.fraction_b,
            "seed": self.seed,
        }


def win_rate(
    pairs: Sequence[tuple[str, str]],
    mode: str,
    gateway: Gateway,
    seed: int = 0,
) -> WinRateReport:
    """Pairwise preference over (A, B) survey texts.

    Score mode judges each side independently (ties split 0.5/0.5);
    comparative mode shows both side by side, with presentation order
    randomized per pair from the recorded seed.  A pair whose judgment stays
    unusable after repair is dropped and reported.
    """
    if mode not in WIN_RATE_MODES:
        raise ValueError(f"mode must be one of {WIN_RATE_MODES}, got {mode!r}")
    if not pairs:
        raise ValueError("need at least one pair")
    rng = random.Random(seed)
    wins_a = wins_b = 0.0
    dropped = 0
    for a_text, b_text in pairs:
        flipped = rng.random() < 0.5
        try:
            if mode == "score":
                score_a = gateway.complete_structured(
                    SCORE_JUDGE_TEMPLATE, {"survey": a_text}, SCORE_FORMAT,
                    params=JUDGE_PARAMS, stage="judge", max_repairs=1,
                )
                score_b = gateway.complete_structured(
                    SCORE_JUDGE_TEMPLATE, {"survey": b_text}, SCORE_FORMAT,
                    params=JUDGE_PARAMS, stage="judge", max_repairs=1,
                )
                if score_a > score_b:
                    wins_a += 1.0
                elif score_b > score_a:
                    wins_b += 1.0
                else:
                    wins_a += 0.5
                    wins_b += 0.5
            else:
                first, second = (b_text, a_text) if flipped else (a_text, b_text)
                verdict = gateway.complete_structured(
                    COMPARE_TEMPLATE, {"a": first, "b": second}, VERDICT_FORMAT,
                    params=JUDGE_PARAMS, stage="judge", max_repairs=1,
                )
                a_won = (verdict == "B") if flipped else (verdict == "A")
                if a_won:
                    wins_a += 1.0
                else:
                    wins_b += 1.0
        except StructuredOutputError as exc:
            logger.warning("judge abstained on a pair; dropping it (%s)", exc)
            dropped += 1
    return WinRateReport(
        mode=mode, wins_a=wins_a, wins_b=wins_b, dropped=dropped,
        total=len(pairs), seed=seed,
    )


# --- inter-rater agreement --------------------------------------------------------


def cohen_kappa(ratings_a: Sequence, ratings_b: Sequence) -> float:
    """Chance-corrected agreement between two raters' categorical judgments."""
    if len(ratings_a) != len(ratings_b):
        raise ValueError(
            f"rating lists differ in length: {len(ratings_a)} vs {len(ratings_b)}"
        )
    n = len(ratings_a)
    if n == 0:
        raise ValueError("rating lists are empty")
    observed = sum(1 for a, b in zip(ratings_a, ratings_b) if a == b) / n
    categories = sorted(set(ratings_a) | set(ratings_b), key=repr)
    counts_a = {c: 0 for c in categories}
    counts_b = {c: 0 for c in categories}
    for a in ratings_a:
        counts_a[a] += 1
    for b in ratings_b:
        counts_b[b] += 1
    expected = sum((counts_a[c] * counts_b[c]) / (n * n) for c in categories)
    if expected == 1.0:
        if observed == 1.0:
            return 1.0
        raise ValueError("expected agreement is 1 with imperfect observed agreement")
    return (observed - expected) / (1.0 - expected)


# --- benchmark topics and reports ---------------------------------------------------


@dataclass(frozen=True)
class BenchmarkTopic:
    topic: str
    references: tuple[str, ...]
    gold_survey_path: Path


def load_benchmark(path: str | Path) -> dict[str, BenchmarkTopic]:
    """Benchmark topic file: one JSON object per line, paths relative to the file."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read benchmark file {path}: {exc}") from exc
    topics: dict[str, BenchmarkTopic] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
        topic = obj.get("topic")
        references = obj.get("references")
        gold = obj.get("gold_survey_path")
        if not topic or not isinstance(references, list) or not references or not gold:
            raise ConfigError(
                f"{path}:{lineno}: need topic, non-empty references, gold_survey_path"
            )
        topics[topic] = BenchmarkTopic(
            topic=topic,
            references=tuple(str(r) for r in references),
            gold_survey_path=(path.parent / gold).resolve(),
        )
    return topics


def parse_bibliography(survey_text: str) -> list[str]:
    """Titles from the rendered survey's reference list."""
    titles: list[str] = []
    in_refs = False
    for line in survey_text.splitlines():
        stripped = line.strip()
        if stripped.lstrip("# ").lower() == "references" or stripped.lower() == "references":
            in_refs = True
            continue
        if not in_refs or not stripped or set(stripped) == {"-"}:
            continue
        m = _BIB_LINE_RE.match(stripped)
        if m:
            titles.append(m.group(2))
    return titles


def extract_headings(survey_text: str) -> str:
    """Outline-shaped text recovered from a rendered survey's headings."""
    lines = [
        line.strip()
        for line in survey_text.splitlines()
        if line.startswith("#") and not line.strip().lstrip("# ").lower() == "references"
    ]
    return "\n".join(lines)
