"""End-to-end orchestration behind the CLI commands.

Everything here is deterministic given (corpus, config, mock script): run
manifests carry no timestamps, JSON is written with sorted keys, and merge
order is fixed by outline position rather than completion order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import evaluation, writer
from .config import RunConfig
from .corpus import Corpus, IngestReport
from .errors import ConfigError, CorpusError, RetrievalError
from .llm import (
    Gateway,
    HttpChatBackend,
    MockBackend,
    RemoteEmbeddingProvider,
    UsageLedger,
    estimate_tokens,
    report_cost,
)
from .outline import (
    AssembledOutline,
    TopicRequest,
    assemble_outline,
    expand_section,
    export_outline,
    generate_first_level,
    retrieve_topic_context,
)
from .retrieval import RetrievalBudgets, run_subsection_retrieval
from .vectorstore import (
    EmbeddingProvider,
    HashEmbeddingProvider,
    PrecomputedEmbeddingProvider,
    VectorIndex,
    build_index,
)

logger = logging.getLogger(__name__)

STORE_PAPERS = "papers.jsonl"
STORE_OUTLINES = "outlines.jsonl"


def _dump_json(path: Path, payload: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n",
        encoding="utf-8",
    )


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "topic"


def build_gateway(config: RunConfig) -> Gateway:
    if config.backend == "mock":
        backend = MockBackend.from_file(config.mock_script)
    else:
        backend = HttpChatBackend.from_env(dict(os.environ), model=config.model)
    return Gateway(
        backend,
        ledger=UsageLedger(prices=config.prices),
        max_concurrency=config.max_concurrency,
        rate_per_sec=config.rate_per_sec,
        transport_retries=config.transport_retries,
        retry_backoff=config.retry_backoff,
    )


def build_embedding_provider(config: RunConfig) -> EmbeddingProvider:
    if config.embed_provider == "hash":
        return HashEmbeddingProvider(dim=config.embed_dim)
    if config.embed_provider == "sidecar":
        provider = PrecomputedEmbeddingProvider.from_file(config.embeddings_file)
        if provider.dim != config.embed_dim:
            logger.warning(
                "sidecar dim %d overrides configured embed_dim %d",
                provider.dim, config.embed_dim,
            )
        provider.fallback = HashEmbeddingProvider(dim=provider.dim)
        return provider
    base_url = os.environ.get("SF_EMBED_BASE_URL")
    if not base_url:
        raise ConfigError("embed_provider 'remote' requires SF_EMBED_BASE_URL")
    return RemoteEmbeddingProvider(
        base_url,
        model=config.embed_model,
        dim=config.embed_dim,
        api_key=os.environ.get("SF_EMBED_API_KEY"),
    )


# --- ingest -------------------------------------------------------------------


def run_ingest(config: RunConfig, kind_filter: str | None = None) -> dict:
    """Validate the record files and merge them into the persistent store."""
    if config.store_dir is None:
        raise ConfigError("ingest requires paths.store in the config")
    store = Path(config.store_dir)
    corpus = Corpus()
    prior_papers = prior_outlines = 0
    if (store / STORE_PAPERS).is_file():
        corpus.ingest_papers(store / STORE_PAPERS)
        prior_papers = len(corpus.papers)
    if (store / STORE_OUTLINES).is_file():
        corpus.ingest_outlines(store / STORE_OUTLINES)
        prior_outlines = len(corpus.outlines)
    paper_report = corpus.ingest_papers(config.papers_file, kind_filter=kind_filter)
    outline_report: IngestReport | None = None
    if config.outlines_file and Path(config.outlines_file).is_file():
        outline_report = corpus.ingest_outlines(config.outlines_file)
    store.mkdir(parents=True, exist_ok=True)
    (store / STORE_PAPERS).write_text(
        "".join(r.to_json_line() + "\n" for r in corpus.papers.values()),
        encoding="utf-8",
    )
    (store / STORE_OUTLINES).write_text(
        "".join(r.to_json_line() + "\n" for r in corpus.outlines.values()),
        encoding="utf-8",
    )
    summary = {
        "store": str(store),
        "store_papers_before": prior_papers,
        "store_outlines_before": prior_outlines,
        "papers": paper_report.to_dict(),
        "outlines": outline_report.to_dict() if outline_report else None,
        "store_papers_total": len(corpus.papers),
        "store_outlines_total": len(corpus.outlines),
        "config": config.snapshot(),
    }
    config.output_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(config.output_dir / "ingest_report.json", summary)
    return summary


def load_corpus_for_run(config: RunConfig) -> Corpus:
    """Load the store when present, otherwise ingest the raw record files."""
    corpus = Corpus()
    store = Path(config.store_dir) if config.store_dir else None
    if store and (store / STORE_PAPERS).is_file():
        corpus.ingest_papers(store / STORE_PAPERS)
        if (store / STORE_OUTLINES).is_file():
            corpus.ingest_outlines(store / STORE_OUTLINES)
        return corpus
    report = corpus.ingest_papers(config.papers_file)
    if report.errors:
        logger.warning("%d record errors while loading corpus", len(report.errors))
    if config.outlines_file and Path(config.outlines_file).is_file():
        corpus.ingest_outlines(config.outlines_file)
    if not corpus.papers:
        raise CorpusError(f"no paper records loaded from {config.papers_file}")
    return corpus


# --- index --------------------------------------------------------------------


def build_indexes(
    corpus: Corpus, provider: EmbeddingProvider, config: RunConfig
) -> tuple[VectorIndex, VectorIndex]:
    """Paper index over research records; outline index over surveys with outlines."""
    if config.paper_index and Path(config.paper_index).is_file():
        paper_index = VectorIndex.load(config.paper_index)
        _check_index_resolves(paper_index, corpus, config.paper_index)
    else:
        paper_index = build_index(corpus.records_of_kind("research"), provider)
    if config.outline_index and Path(config.outline_index).is_file():
        outline_index = VectorIndex.load(config.outline_index)
        _check_index_resolves(outline_index, corpus, config.outline_index)
    else:
        survey_records = [corpus.papers[pid] for pid in corpus.outlines]
        outline_index = build_index(survey_records, provider)
    return paper_index, outline_index


def _check_index_resolves(index: VectorIndex, corpus: Corpus, path: Path) -> None:
    stale = [record_id for record_id in index.ids if record_id not in corpus.papers]
    if stale:
        raise RetrievalError(
            f"index {path} has {len(stale)} ids not in the corpus "
            f"(first: {stale[0]!r}); rebuild with the index command"
        )


def run_index(config: RunConfig) -> dict:
    """Build both indexes from the corpus and persist them as sidecar files."""
    if config.paper_index is None or config.outline_index is None:
        raise ConfigError("index requires paths.paper_index and paths.outline_index")
    corpus = load_corpus_for_run(config)
    provider = build_embedding_provider(config)
    paper_index = build_index(corpus.records_of_kind("research"), provider)
    survey_records = [corpus.papers[pid] for pid in corpus.outlines]
    outline_index = build_index(survey_records, provider)
    Path(config.paper_index).parent.mkdir(parents=True, exist_ok=True)
    Path(config.outline_index).parent.mkdir(parents=True, exist_ok=True)
    paper_index.save(config.paper_index)
    outline_index.save(config.outline_index)
    summary = {
        "paper_index": {"path": str(config.paper_index), "entries": len(paper_index)},
        "outline_index": {"path": str(config.outline_index), "entries": len(outline_index)},
        "dim": paper_index.dim,
        "config": config.snapshot(),
    }
    config.output_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(config.output_dir / "index_manifest.json", summary)
    return summary


# --- generate -----------------------------------------------------------------


@dataclass
class GenerateResult:
    bundle_dir: Path
    document: writer.SurveyDocument
    ledger: UsageLedger
    outline: AssembledOutline


def _script_sha256(config: RunConfig) -> str | None:
    if config.backend == "mock" and config.mock_script:
        return hashlib.sha256(Path(config.mock_script).read_bytes()).hexdigest()
    return None


def generate_survey(config: RunConfig, topic: str) -> GenerateResult:
    """The full engine: outline stage, per-subsection retrieval + writing, refinement."""
    corpus = load_corpus_for_run(config)
    provider = build_embedding_provider(config)
    gateway = build_gateway(config)
    paper_index, outline_index = build_indexes(corpus, provider, config)

    request = TopicRequest(
        topic=topic,
        outline_candidates=config.outline_candidates,
        section_paper_budget=config.section_paper_budget,
        survey_exemplars=config.survey_exemplars,
        section_exemplars=config.section_exemplars,
        prompt_title_budget=config.prompt_title_budget,
    )
    context = retrieve_topic_context(request, paper_index, outline_index, provider)
    first_level = generate_first_level(request, context, corpus, gateway)
    expansions = {}
    for section in first_level.sections:
        expansions[section.index] = expand_section(
            section, request, corpus, paper_index, outline_index, provider, gateway
        )
    assembled = assemble_outline(request, first_level, expansions, context, paper_index)
    tree = assembled.tree

    budgets = RetrievalBudgets(
        sub_query_cap=config.subquery_cap,
        per_query_depth=config.subquery_depth,
        references=config.section_references,
    )

    def content_job(section, subsection):
        retrieval = run_subsection_retrieval(
            subsection,
            section.index,
            assembled.section_memories[section.index],
            assembled.global_memory,
            corpus,
            provider,
            gateway,
            budgets,
        )
        if not retrieval.selected:
            raise RetrievalError(
                f"no references retrieved for {section.index}.{subsection.index}"
            )
        references = [corpus.papers[h.record_id] for h in retrieval.selected]
        draft = writer.write_subsection(
            tree.survey_title,
            section,
            subsection,
            references,
            gateway,
            length_budget=config.length_budget_words,
        )
        return draft, retrieval.manifest

    leaves = tree.leaves()
    with ThreadPoolExecutor(max_workers=config.parallelism) as pool:
        futures = [(s, sub, pool.submit(content_job, s, sub)) for s, sub in leaves]
        results = {
            (s.index, sub.index): future.result() for s, sub, future in futures
        }

    drafts = [results[(s.index, sub.index)][0] for s, sub in leaves]
    draft_document = writer.assemble_draft(drafts, tree, corpus)
    final_document = writer.refine_survey(draft_document, gateway)

    bundle = Path(config.output_dir)
    bundle.mkdir(parents=True, exist_ok=True)
    (bundle / "outline.txt").write_text(export_outline(tree), encoding="utf-8")
    draft_text = writer.render(draft_document, "markdown")
    final_text = writer.render(final_document, "markdown")
    (bundle / "draft.md").write_text(draft_text, encoding="utf-8")
    (bundle / "survey.md").write_text(final_text, encoding="utf-8")
    for (section_index, subsection_index), (_, manifest) in sorted(results.items()):
        _dump_json(
            bundle / "manifests" / f"section_{section_index:02d}_{subsection_index:02d}.json",
            manifest,
        )

    stages = {name: usage.to_dict() for name, usage in gateway.ledger.stage_totals().items()}
    tin, tout = gateway.ledger.totals()
    cost = None
    if config.model and config.model in gateway.ledger.prices:
        cost = report_cost(gateway.ledger, config.model)
    run_manifest = {
        "topic": topic,
        "seed": config.seed,
        "model": config.model,
        "script_sha256": _script_sha256(config),
        "config": config.snapshot(),
        "stages": stages,
        "totals": {"input_tokens": tin, "output_tokens": tout},
        "cost": cost,
        "truncation": {
            "outline_prompt_titles": {
                "shown": min(config.prompt_title_budget, len(context.papers)),
                "retrieved": len(context.papers),
            }
        },
        "documents": {
            "sections": len(tree.sections),
            "subsections": len(leaves),
            "bibliography": len(final_document.bibliography),
            "draft_tokens": estimate_tokens(draft_text),
            "final_tokens": estimate_tokens(final_text),
        },
        "refinement_windows": final_document.manifest.get("refinement_windows", []),
    }
    _dump_json(bundle / "run_manifest.json", run_manifest)
    return GenerateResult(bundle, final_document, gateway.ledger, assembled)


# --- evaluate -----------------------------------------------------------------


def _retrieved_titles_from_bundle(bundle_dir: Path, corpus: Corpus) -> list[str]:
    manifest_dir = bundle_dir / "manifests"
    if not manifest_dir.is_dir():
        raise CorpusError(f"no retrieval manifests under {bundle_dir}")
    ids: set[str] = set()
    for path in sorted(manifest_dir.glob("*.json")):
        manifest = json.loads(path.read_text(encoding="utf-8"))
        ids.update(manifest.get("selected", []))
    return [corpus.papers[i].title for i in sorted(ids) if i in corpus.papers]


def evaluate_survey(
    config: RunConfig,
    survey_path: str | Path,
    topic_id: str,
    bundle_dir: str | Path | None = None,
) -> Path:
    """Score one survey against a benchmark topic; writes and returns the report."""
    if config.benchmark_file is None:
        raise ConfigError("evaluate requires paths.benchmark in the config")
    topics = evaluation.load_benchmark(config.benchmark_file)
    if topic_id not in topics:
        raise ConfigError(
            f"unknown benchmark topic '{topic_id}'; have {sorted(topics)}"
        )
    topic = topics[topic_id]
    survey_path = Path(survey_path)
    try:
        survey_text = survey_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read survey {survey_path}: {exc}") from exc
    refs = evaluation.parse_bibliography(survey_text)
    if not refs:
        raise CorpusError(f"no reference list found in {survey_path}")
    try:
        ref_cov = evaluation.reference_coverage(refs, topic.references)
    except ValueError as exc:
        raise CorpusError(str(exc)) from exc

    input_cov = None
    if bundle_dir is not None:
        corpus = load_corpus_for_run(config)
        retrieved = _retrieved_titles_from_bundle(Path(bundle_dir), corpus)
        if retrieved:
            input_cov = evaluation.input_coverage(retrieved, topic.references)

    outline_path = (
        Path(bundle_dir) / "outline.txt" if bundle_dir is not None else None
    )
    if outline_path is not None and outline_path.is_file():
        outline_text = outline_path.read_text(encoding="utf-8")
    else:
        outline_text = evaluation.extract_headings(survey_text)
    try:
        gold_text = topic.gold_survey_path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(
            f"cannot read gold survey {topic.gold_survey_path}: {exc}"
        ) from exc

    gateway = build_gateway(config)
    outline_score = evaluation.score_outline(outline_text, gateway)
    content = evaluation.score_content(survey_text, gold_text, gateway)
    report = {
        "topic": topic_id,
        "survey": survey_path.name,
        "reference_coverage": ref_cov,
        "input_coverage": input_cov,
        "outline_score": outline_score,
        "content": content.to_dict(),
        "provenance": {
            "judge_model": config.judge_model or config.model,
            "seed": config.seed,
            "script_sha256": _script_sha256(config),
            "config": config.snapshot(),
            "prompt_digests": {
                t.name: t.digest()
                for t in (
                    evaluation.OUTLINE_JUDGE_TEMPLATE,
                    evaluation.CONTENT_JUDGE_TEMPLATE,
                )
            },
        },
    }
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out_path = config.output_dir / f"eval-{_slug(topic_id)}.json"
    _dump_json(out_path, report)
    return out_path


def compare_surveys(
    config: RunConfig, a_path: str | Path, b_path: str | Path, mode: str
) -> Path:
    """Pairwise win-rate comparison of two rendered surveys."""
    texts = []
    for path in (a_path, b_path):
        try:
            texts.append(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise CorpusError(f"cannot read survey {path}: {exc}") from exc
    gateway = build_gateway(config)
    result = evaluation.win_rate([(texts[0], texts[1])], mode, gateway, seed=config.seed)
    report = result.to_dict()
    report["a"] = Path(a_path).name
    report["b"] = Path(b_path).name
    report["provenance"] = {
        "judge_model": config.judge_model or config.model,
        "script_sha256": _script_sha256(config),
        "config": config.snapshot(),
        "prompt_digests": {
            t.name: t.digest()
            for t in (evaluation.SCORE_JUDGE_TEMPLATE, evaluation.COMPARE_TEMPLATE)
        },
    }
    config.output_dir.mkdir(parents=True, exist_ok=True)
    out_path = config.output_dir / f"compare-{mode}.json"
    _dump_json(out_path, report)
    return out_path
