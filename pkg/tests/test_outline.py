"""Outline stage: topic retrieval, section drafting, expansion, assembly."""

from __future__ import annotations

import math

import pytest

from surveygen.errors import OutlineError, RetrievalError, StructuredOutputError
from surveygen.outline import (
    OutlineTree,
    PaperMemory,
    Section,
    Subsection,
    TopicRequest,
    assemble_outline,
    expand_section,
    export_outline,
    generate_first_level,
    retrieve_topic_context,
    validate_tree,
)
from surveygen.vectorstore import (
    PrecomputedEmbeddingProvider,
    VectorIndex,
    read_embeddings,
)

from conftest import CORPUS50, make_gateway


def sections_reply(count, prefix="Topic"):
    return "\n".join(
        f"Section {n}: {prefix} {n} | query: scope of {prefix.lower()} {n}"
        for n in range(1, count + 1)
    )


def provider_with_topic_vector(topic, vector):
    """Sidecar lookup provider that also knows the topic query's vector."""
    dim, vectors = read_embeddings(CORPUS50 / "embeddings.sfemb")
    vectors[topic] = tuple(vector)
    return PrecomputedEmbeddingProvider(vectors, dim)


def rag_cluster_centroid():
    dim, vectors = read_embeddings(CORPUS50 / "embeddings.sfemb")
    members = [v for k, v in vectors.items() if k.startswith("rag-")]
    sums = [sum(col) / len(members) for col in zip(*members)]
    norm = math.sqrt(sum(v * v for v in sums))
    return [v / norm for v in sums]


# --- retrieve_topic_context -----------------------------------------------------


def test_default_budgets_match_configured_settings():
    request = TopicRequest(topic="anything")
    assert request.outline_candidates == 1500
    assert request.survey_exemplars == 10


def test_topic_near_cluster_retrieves_that_cluster_first(corpus50, paper_index, outline_index):
    topic = "retrieval-augmented generation"
    centroid = rag_cluster_centroid()
    provider = provider_with_topic_vector(topic, centroid)
    request = TopicRequest(topic=topic, outline_candidates=9)
    context = retrieve_topic_context(request, paper_index, outline_index, provider)
    assert all(hit.record_id.startswith("rag-") for hit in context.papers)
    # brute-force oracle over the sidecar vectors, restricted to research records
    dim, vectors = read_embeddings(CORPUS50 / "embeddings.sfemb")
    research = {r.id for r in corpus50.records_of_kind("research")}
    scored = sorted(
        (
            (-sum(a * b for a, b in zip(vec, centroid)), record_id)
            for record_id, vec in vectors.items()
            if record_id in research
        ),
    )[:9]
    assert [hit.record_id for hit in context.papers] == [rid for _, rid in scored]


def test_budget_larger_than_corpus_returns_everything(paper_index, outline_index, sidecar_provider):
    request = TopicRequest(topic="retrieval", outline_candidates=5000)
    context = retrieve_topic_context(request, paper_index, outline_index, sidecar_provider)
    assert len(context.papers) == len(paper_index)
    assert len(context.outlines) == len(outline_index)


def test_empty_index_errors(sidecar_provider, outline_index):
    empty = VectorIndex.from_entries([])
    with pytest.raises(RetrievalError, match="empty retrieval context"):
        retrieve_topic_context(
            TopicRequest(topic="x"), empty, outline_index, sidecar_provider
        )


def test_budgets_must_be_positive():
    with pytest.raises(ValueError):
        TopicRequest(topic="x", outline_candidates=0)


# --- generate_first_level --------------------------------------------------------


def topic_context(corpus50, paper_index, outline_index, sidecar_provider, **kwargs):
    request = TopicRequest(topic="retrieval-augmented generation", **kwargs)
    return request, retrieve_topic_context(request, paper_index, outline_index, sidecar_provider)


def test_six_sections_parsed(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway([{"match": "*", "reply": sections_reply(6)}])
    result = generate_first_level(request, context, corpus50, gateway)
    assert len(result.sections) == 6
    assert result.sections[0].query == "scope of topic 1"
    assert gateway.ledger.stage_totals()["outline"].calls == 1


def test_duplicate_titles_trigger_repair_then_dedupe(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    dup = (
        "Section 1: Intro | query: q1\n"
        "Section 2: Methods | query: q2\n"
        "Section 3: methods | query: q3\n"
        "Section 4: End | query: q4"
    )
    gateway = make_gateway([{"match": "*", "reply": dup}, {"match": "*", "reply": dup}])
    result = generate_first_level(request, context, corpus50, gateway)
    titles = [s.title for s in result.sections]
    assert titles == ["Intro", "Methods", "End"]
    assert gateway.ledger.stage_totals()["outline"].calls == 2  # one repair issued


def test_two_sections_error_after_exactly_one_repair(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway(
        [{"match": "*", "reply": sections_reply(2)}, {"match": "*", "reply": sections_reply(2)}]
    )
    with pytest.raises(StructuredOutputError, match="at least 3|only 2"):
        generate_first_level(request, context, corpus50, gateway)
    assert gateway.ledger.stage_totals()["outline"].calls == 2


def test_survey_title_line_is_captured(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    reply = "Title: Grounded Generation\n" + sections_reply(3)
    gateway = make_gateway([{"match": "*", "reply": reply}])
    result = generate_first_level(request, context, corpus50, gateway)
    assert result.survey_title == "Grounded Generation"


def test_prompt_truncates_titles_to_budget(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(
        corpus50, paper_index, outline_index, sidecar_provider, prompt_title_budget=5
    )
    captured = {}

    class Capture:
        def send(self, preamble, prompt, params):
            captured["prompt"] = prompt
            from surveygen.llm import BackendReply

            return BackendReply(sections_reply(3))

    from surveygen.llm import Gateway

    generate_first_level(request, context, corpus50, Gateway(Capture(), retry_backoff=0.0))
    assert "(5 of 45 shown)" in captured["prompt"]
    assert captured["prompt"].count("\n- ") == 5


# --- expand_section ---------------------------------------------------------------


def subsections_reply(specs):
    return "\n".join(
        f"Subsection {j}: {title} | description: {description}"
        for j, (title, description) in enumerate(specs, start=1)
    )


def test_expand_returns_subsections_and_memory(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request = TopicRequest(topic="retrieval", section_paper_budget=20)
    section = Section(index=2, title="Methods", query="retrieval methods")
    reply = subsections_reply(
        [("Sparse", "lexical"), ("Dense", "embeddings"), ("Hybrid", "both")]
    )
    gateway = make_gateway([{"match": "*", "reply": reply}])
    subsections, memory = expand_section(
        section, request, corpus50, paper_index, outline_index, sidecar_provider, gateway
    )
    assert [s.title for s in subsections] == ["Sparse", "Dense", "Hybrid"]
    assert subsections[0].query == "lexical — Sparse"
    assert memory.scope == "section:2"
    assert len(memory.ids) == 20
    assert set(memory.ids) <= set(paper_index.ids)
    assert memory.index.ids == memory.ids


def test_memory_size_equals_retrieved_count(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request = TopicRequest(topic="retrieval", section_paper_budget=500)
    section = Section(index=1, title="Intro", query="introduction")
    gateway = make_gateway([{"match": "*", "reply": subsections_reply([("A", "a")])}])
    _, memory = expand_section(
        section, request, corpus50, paper_index, outline_index, sidecar_provider, gateway
    )
    assert len(memory.ids) == len(paper_index)  # budget larger than the corpus


def test_section_memories_may_overlap(corpus50, paper_index, outline_index, sidecar_provider):
    request = TopicRequest(topic="retrieval", section_paper_budget=40)
    gateway = make_gateway(
        [
            {"match": "*", "reply": subsections_reply([("A", "a")])},
            {"match": "*", "reply": subsections_reply([("B", "b")])},
        ]
    )
    _, first = expand_section(
        Section(index=1, title="One", query="graph networks"),
        request, corpus50, paper_index, outline_index, sidecar_provider, gateway,
    )
    _, second = expand_section(
        Section(index=2, title="Two", query="graph models"),
        request, corpus50, paper_index, outline_index, sidecar_provider, gateway,
    )
    assert set(first.ids) & set(second.ids)


def test_expand_unparsable_after_repair_errors(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request = TopicRequest(topic="retrieval")
    section = Section(index=1, title="Intro", query="introduction")
    gateway = make_gateway([{"match": "*", "reply": "??"}, {"match": "*", "reply": "??"}])
    with pytest.raises(StructuredOutputError):
        expand_section(
            section, request, corpus50, paper_index, outline_index, sidecar_provider, gateway
        )


# --- assemble_outline ----------------------------------------------------------------


def build_expansions(sections, paper_index, subsections_per_section=3):
    expansions = {}
    for section in sections:
        subs = []
        for j in range(1, subsections_per_section + 1):
            sub = Subsection(
                index=j,
                title=f"{section.title} part {j}",
                description=f"part {j}",
                query=f"part {j} — {section.title} part {j}",
            )
            subs.append(sub)
        ids = paper_index.ids[:10]
        expansions[section.index] = (
            subs,
            PaperMemory(
                scope=f"section:{section.index}", ids=ids, index=paper_index.subset(ids)
            ),
        )
    return expansions


def test_assemble_six_by_three(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway([{"match": "*", "reply": sections_reply(6)}])
    first = generate_first_level(request, context, corpus50, gateway)
    expansions = build_expansions(first.sections, paper_index)
    assembled = assemble_outline(request, first, expansions, context, paper_index)
    assert len(assembled.tree.leaves()) == 18
    assert len(assembled.global_memory.ids) == min(
        request.outline_candidates, len(paper_index)
    )
    assert assembled.global_memory.ids == tuple(h.record_id for h in context.papers)
    assert set(assembled.section_memories) == {1, 2, 3, 4, 5, 6}


def test_assemble_rejects_empty_subsection_list(
    corpus50, paper_index, outline_index, sidecar_provider
):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway([{"match": "*", "reply": sections_reply(3)}])
    first = generate_first_level(request, context, corpus50, gateway)
    expansions = build_expansions(first.sections, paper_index)
    expansions[2] = ([], expansions[2][1])
    with pytest.raises(OutlineError, match="section 2.*no subsections"):
        assemble_outline(request, first, expansions, context, paper_index)


def test_assemble_is_deterministic(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)

    def build():
        gateway = make_gateway([{"match": "*", "reply": sections_reply(4)}])
        first = generate_first_level(request, context, corpus50, gateway)
        expansions = build_expansions(first.sections, paper_index)
        assembled = assemble_outline(request, first, expansions, context, paper_index)
        return export_outline(assembled.tree)

    assert build() == build()


def test_validate_tree_invariants():
    def leaf(j):
        return Subsection(index=j, title=f"t{j}", description="d", query="q")

    good = OutlineTree(
        survey_title="S",
        sections=tuple(
            Section(index=i, title=f"s{i}", query="q", subsections=[leaf(1)])
            for i in range(1, 4)
        ),
    )
    validate_tree(good)
    with pytest.raises(OutlineError, match="need >= 3"):
        validate_tree(OutlineTree(survey_title="S", sections=good.sections[:2]))
    bad_query = OutlineTree(
        survey_title="S",
        sections=(
            Section(index=1, title="a", query="q", subsections=[leaf(1)]),
            Section(index=2, title="b", query="", subsections=[leaf(1)]),
            Section(index=3, title="c", query="q", subsections=[leaf(1)]),
        ),
    )
    with pytest.raises(OutlineError, match="section 2 'b'"):
        validate_tree(bad_query)


def test_every_leaf_carries_nonempty_query(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway([{"match": "*", "reply": sections_reply(3)}])
    first = generate_first_level(request, context, corpus50, gateway)
    expansions = build_expansions(first.sections, paper_index)
    assembled = assemble_outline(request, first, expansions, context, paper_index)
    assert all(sub.query.strip() for _, sub in assembled.tree.leaves())


def test_export_outline_lists_queries(corpus50, paper_index, outline_index, sidecar_provider):
    request, context = topic_context(corpus50, paper_index, outline_index, sidecar_provider)
    gateway = make_gateway([{"match": "*", "reply": sections_reply(3)}])
    first = generate_first_level(request, context, corpus50, gateway)
    expansions = build_expansions(first.sections, paper_index, subsections_per_section=1)
    assembled = assemble_outline(request, first, expansions, context, paper_index)
    text = export_outline(assembled.tree)
    assert "1. Topic 1" in text
    assert "query: scope of topic 1" in text
    assert "1.1 Topic 1 part 1" in text
