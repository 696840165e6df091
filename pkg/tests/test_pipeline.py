"""End-to-end runs over the fixture corpus with the scripted mock gateway."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import pytest

from surveygen import cli
from surveygen.config import load_config
from surveygen.pipeline import generate_survey, run_ingest

from conftest import (
    CORPUS50,
    TOPIC,
    standard_generate_entries,
    write_config,
    write_script,
)


def make_run(tmp_path, name="run", extra=None, entries=None):
    script = write_script(tmp_path / f"{name}-script.json", entries or standard_generate_entries())
    out = tmp_path / f"{name}-out"
    config_path = write_config(tmp_path / f"{name}.ini", CORPUS50, out, script, extra=extra)
    return load_config(config_path), config_path


def bundle_digest(bundle: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(bundle.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(bundle)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


# --- generate ------------------------------------------------------------------


def test_generate_produces_full_bundle(tmp_path):
    config, _ = make_run(tmp_path)
    result = generate_survey(config, TOPIC)
    bundle = result.bundle_dir
    assert (bundle / "survey.md").is_file()
    assert (bundle / "draft.md").is_file()
    assert (bundle / "outline.txt").is_file()
    assert (bundle / "run_manifest.json").is_file()
    manifests = sorted((bundle / "manifests").glob("*.json"))
    assert len(manifests) == 7  # 2 + 2 + 2 + 1 subsections
    survey = (bundle / "survey.md").read_text(encoding="utf-8")
    assert survey.startswith("# Grounded Generation with Retrieval")
    assert "## References" in survey


def test_generate_markers_all_resolve(tmp_path):
    config, _ = make_run(tmp_path)
    result = generate_survey(config, TOPIC)
    document = result.document
    numbers = {entry.number for entry in document.bibliography}
    for marker in document.all_markers():
        assert marker in numbers


def test_generate_cited_ids_within_selected(tmp_path):
    config, _ = make_run(tmp_path)
    result = generate_survey(config, TOPIC)
    bundle = result.bundle_dir
    selected_by_coord = {}
    for path in (bundle / "manifests").glob("*.json"):
        manifest = json.loads(path.read_text(encoding="utf-8"))
        coord = (manifest["subsection"]["section"], manifest["subsection"]["index"])
        selected_by_coord[coord] = set(manifest["selected"])
    global_ids = set(result.outline.global_memory.ids)
    for path in (bundle / "manifests").glob("*.json"):
        manifest = json.loads(path.read_text(encoding="utf-8"))
        pool = {p["id"] for p in manifest["pool"]}
        assert pool <= global_ids
        assert set(manifest["selected"]) <= pool


def test_generate_bundle_hash_reproducible(tmp_path):
    _, config_path = make_run(tmp_path)
    digests = []
    for run in ("first", "second"):
        config = load_config(config_path)
        config.output_dir = tmp_path / run
        digests.append(bundle_digest(generate_survey(config, TOPIC).bundle_dir))
    assert digests[0] == digests[1]


def test_generate_parallelism_independent(tmp_path):
    config_serial, _ = make_run(tmp_path, "serial")
    config_parallel, _ = make_run(
        tmp_path, "parallel", extra={"gateway": {"parallelism": 4}}
    )
    serial = generate_survey(config_serial, TOPIC)
    parallel = generate_survey(config_parallel, TOPIC)
    assert (serial.bundle_dir / "survey.md").read_bytes() == (
        parallel.bundle_dir / "survey.md"
    ).read_bytes()
    assert (serial.bundle_dir / "draft.md").read_bytes() == (
        parallel.bundle_dir / "draft.md"
    ).read_bytes()


def test_generate_manifest_excludes_output_dir_and_records_seed(tmp_path):
    config, _ = make_run(tmp_path, extra={"gateway": {"seed": 9}})
    result = generate_survey(config, TOPIC)
    manifest = json.loads(
        (result.bundle_dir / "run_manifest.json").read_text(encoding="utf-8")
    )
    assert manifest["seed"] == 9
    assert "output_dir" not in manifest["config"]
    assert manifest["script_sha256"]
    assert manifest["truncation"]["outline_prompt_titles"]["retrieved"] == 45
    assert manifest["documents"]["subsections"] == 7


def test_generate_ledger_conservation(tmp_path):
    config, _ = make_run(tmp_path)
    result = generate_survey(config, TOPIC)
    exchanges = result.ledger.exchanges()
    tin, tout = result.ledger.totals()
    assert tin == sum(e.input_tokens for e in exchanges)
    assert tout == sum(e.output_tokens for e in exchanges)
    stages = result.ledger.stage_totals()
    assert set(stages) == {"outline", "subquery", "writing", "refine"}


# --- cli: ingest and index -------------------------------------------------------


def test_cli_ingest_reports_counts(tmp_path, capsys):
    _, config_path = make_run(tmp_path, extra={"paths": {"store": tmp_path / "store"}})
    code = cli.main(["-c", str(config_path), "ingest"])
    out = capsys.readouterr().out
    assert code == 0
    assert "papers: 50 accepted" in out
    assert "outlines: 5 accepted" in out
    assert (tmp_path / "store" / "papers.jsonl").is_file()


def test_cli_ingest_missing_file_exits_3(tmp_path, capsys):
    script = write_script(tmp_path / "s.json", [])
    config_path = write_config(
        tmp_path / "c.ini",
        tmp_path / "nowhere",
        tmp_path / "out",
        script,
        extra={"paths": {"store": tmp_path / "store"}},
    )
    code = cli.main(["-c", str(config_path), "ingest"])
    err = capsys.readouterr().err
    assert code == 3
    assert "nowhere" in err


def test_cli_repeat_ingest_zero_new(tmp_path, capsys):
    _, config_path = make_run(tmp_path, extra={"paths": {"store": tmp_path / "store"}})
    assert cli.main(["-c", str(config_path), "ingest"]) == 0
    capsys.readouterr()
    assert cli.main(["-c", str(config_path), "ingest"]) == 0
    out = capsys.readouterr().out
    assert "papers: 0 accepted" in out
    assert "store: 50 papers, 5 outlines" in out


def test_cli_ingest_requires_store(tmp_path, capsys):
    _, config_path = make_run(tmp_path)
    assert cli.main(["-c", str(config_path), "ingest"]) == 2


def test_cli_index_then_generate_uses_saved_indexes(tmp_path, capsys):
    extra = {
        "paths": {
            "store": tmp_path / "store",
            "paper_index": tmp_path / "idx" / "papers.sfemb",
            "outline_index": tmp_path / "idx" / "outlines.sfemb",
        }
    }
    _, config_path = make_run(tmp_path, extra=extra)
    assert cli.main(["-c", str(config_path), "ingest"]) == 0
    assert cli.main(["-c", str(config_path), "index"]) == 0
    out = capsys.readouterr().out
    assert "paper index: 45 entries" in out
    assert (tmp_path / "idx" / "papers.sfemb").is_file()
    assert cli.main(["-c", str(config_path), "generate", "--topic", TOPIC]) == 0


def test_cli_generate_empty_retrieval_exits_3(tmp_path, capsys):
    surveys_only = tmp_path / "surveys-only"
    surveys_only.mkdir()
    lines = [
        line
        for line in (CORPUS50 / "papers.jsonl").read_text(encoding="utf-8").splitlines()
        if '"kind": "survey"' in line
    ]
    (surveys_only / "papers.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    (surveys_only / "outlines.jsonl").write_text(
        (CORPUS50 / "outlines.jsonl").read_text(encoding="utf-8"), encoding="utf-8"
    )
    script = write_script(tmp_path / "s.json", standard_generate_entries())
    config_path = write_config(
        tmp_path / "c.ini", surveys_only, tmp_path / "out", script,
        extra={"embeddings": {"provider": "hash"}},
    )
    code = cli.main(["-c", str(config_path), "generate", "--topic", TOPIC])
    err = capsys.readouterr().err
    assert code == 3
    assert "empty retrieval context" in err


def test_cli_generate_gateway_error_exits_4(tmp_path, capsys):
    config_path = make_run(tmp_path, entries=[{"match": "*", "reply": "nonsense"}] * 2)[1]
    code = cli.main(["-c", str(config_path), "generate", "--topic", TOPIC])
    assert code == 4


def test_cli_missing_config_exits_2(tmp_path, capsys):
    assert cli.main(["-c", str(tmp_path / "ghost.ini"), "ingest"]) == 2


# --- cli: evaluate and compare -------------------------------------------------------


def judge_entries():
    return [
        {"match": "Task: score outline", "reply": "86"},
        {"match": "Dimension: structure", "reply": "73.82"},
        {"match": "Dimension: relevance", "reply": "79.62"},
        {"match": "Dimension: coverage", "reply": "75.59"},
    ]


@pytest.fixture()
def generated_bundle(tmp_path):
    config, _ = make_run(tmp_path, "gen")
    result = generate_survey(config, TOPIC)
    return result


def make_benchmark(tmp_path, references):
    gold = tmp_path / "gold.md"
    gold.write_text(
        "# Expert Survey\n\n## 1. Intro\n\nhand-written prose\n", encoding="utf-8"
    )
    bench = tmp_path / "benchmark.jsonl"
    bench.write_text(
        json.dumps(
            {"topic": "rag-topic", "references": references, "gold_survey_path": "gold.md"}
        )
        + "\n",
        encoding="utf-8",
    )
    return bench


def test_cli_evaluate_full_report(tmp_path, generated_bundle, capsys):
    from surveygen.evaluation import parse_bibliography

    survey_path = generated_bundle.bundle_dir / "survey.md"
    titles = parse_bibliography(survey_path.read_text(encoding="utf-8"))
    bench = make_benchmark(tmp_path, titles)
    script = write_script(tmp_path / "judge.json", judge_entries())
    config_path = write_config(
        tmp_path / "eval.ini", CORPUS50, tmp_path / "eval-out", script,
        extra={"paths": {"benchmark": bench}, "gateway": {"judge_model": "judge-1"}},
    )
    code = cli.main(
        [
            "-c", str(config_path), "evaluate",
            "--survey", str(survey_path),
            "--topic", "rag-topic",
            "--bundle", str(generated_bundle.bundle_dir),
        ]
    )
    assert code == 0
    report_path = tmp_path / "eval-out" / "eval-rag-topic.json"
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["reference_coverage"] == 1.0
    assert 0.0 <= report["input_coverage"] <= 1.0
    assert report["outline_score"] == 86.0
    assert report["content"]["average"] == pytest.approx(76.34, abs=0.005)
    assert report["provenance"]["judge_model"] == "judge-1"


def test_cli_evaluate_rerun_identical_report(tmp_path, generated_bundle, capsys):
    survey_path = generated_bundle.bundle_dir / "survey.md"
    bench = make_benchmark(tmp_path, ["Some Paper"])
    first_bytes = None
    for _ in range(2):
        script = write_script(tmp_path / "judge.json", judge_entries())
        config_path = write_config(
            tmp_path / "eval.ini", CORPUS50, tmp_path / "eval-out", script,
            extra={"paths": {"benchmark": bench}},
        )
        code = cli.main(
            ["-c", str(config_path), "evaluate", "--survey", str(survey_path),
             "--topic", "rag-topic"]
        )
        assert code == 0
        data = (tmp_path / "eval-out" / "eval-rag-topic.json").read_bytes()
        if first_bytes is None:
            first_bytes = data
        else:
            assert data == first_bytes


def test_cli_evaluate_unknown_topic_exits_2(tmp_path, generated_bundle, capsys):
    survey_path = generated_bundle.bundle_dir / "survey.md"
    bench = make_benchmark(tmp_path, ["Some Paper"])
    script = write_script(tmp_path / "judge.json", judge_entries())
    config_path = write_config(
        tmp_path / "eval.ini", CORPUS50, tmp_path / "eval-out", script,
        extra={"paths": {"benchmark": bench}},
    )
    code = cli.main(
        ["-c", str(config_path), "evaluate", "--survey", str(survey_path),
         "--topic", "nope"]
    )
    assert code == 2


def test_cli_compare_always_a(tmp_path, generated_bundle, capsys):
    survey = generated_bundle.bundle_dir / "survey.md"
    draft = generated_bundle.bundle_dir / "draft.md"
    entries = [{"match": "Task: score survey", "reply": "90"},
               {"match": "Task: score survey", "reply": "10"}]
    script = write_script(tmp_path / "cmp.json", entries)
    config_path = write_config(
        tmp_path / "cmp.ini", CORPUS50, tmp_path / "cmp-out", script
    )
    code = cli.main(
        ["-c", str(config_path), "compare", "--a", str(survey), "--b", str(draft),
         "--mode", "score"]
    )
    assert code == 0
    report = json.loads((tmp_path / "cmp-out" / "compare-score.json").read_text())
    assert report["fraction_a"] == 1.0
    assert report["fraction_b"] == 0.0
    assert report["wins_a"] + report["wins_b"] + report["dropped"] == report["total"]


def test_cli_compare_tie_splits(tmp_path, generated_bundle, capsys):
    survey = generated_bundle.bundle_dir / "survey.md"
    draft = generated_bundle.bundle_dir / "draft.md"
    entries = [{"match": "*", "reply": "70"}, {"match": "*", "reply": "70"}]
    script = write_script(tmp_path / "cmp.json", entries)
    config_path = write_config(tmp_path / "cmp.ini", CORPUS50, tmp_path / "cmp-out", script)
    code = cli.main(
        ["-c", str(config_path), "compare", "--a", str(survey), "--b", str(draft)]
    )
    assert code == 0
    report = json.loads((tmp_path / "cmp-out" / "compare-score.json").read_text())
    assert report["fraction_a"] == 0.5
    assert report["fraction_b"] == 0.5


# --- store round trip -----------------------------------------------------------------


def test_run_ingest_store_roundtrip(tmp_path):
    config, _ = make_run(tmp_path, extra={"paths": {"store": tmp_path / "store"}})
    summary = run_ingest(config)
    assert summary["papers"]["accepted"] == 50
    assert summary["store_papers_total"] == 50
    again = run_ingest(config)
    assert again["papers"]["accepted"] == 0
    assert again["store_papers_total"] == 50
    assert len(again["papers"]["errors"]) == 50
