#!/usr/bin/env python3
"""Regenerate the 50-paper test fixture corpus.

Five topical clusters of ten papers each (nine research + one survey), with a
16-d embedding sidecar whose vectors are built from per-cluster centroids so
retrieval tests can assert cluster locality.  Everything is seeded; rerunning
reproduces the committed files byte for byte.
"""

from __future__ import annotations

import json
import math
import random
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from surveygen.vectorstore import write_embeddings  # noqa: E402

OUT = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "corpus50"

DIM = 16
SEED = 20240801

CLUSTERS = {
    "det": {
        "topic": "3D object detection for autonomous driving",
        "phrases": [
            "LiDAR point cloud detection heads",
            "camera-only monocular 3D detection",
            "voxel feature encoding for detection",
            "multi-sensor fusion for 3D perception",
            "anchor-free 3D bounding box regression",
            "range-view representations for detection",
            "temporal aggregation in driving scenes",
            "self-supervised pretraining for perception",
            "long-tail object detection on roads",
        ],
    },
    "dif": {
        "topic": "generative diffusion models",
        "phrases": [
            "denoising score matching objectives",
            "latent-space diffusion for images",
            "classifier-free guidance tradeoffs",
            "fast ODE solvers for sampling",
            "diffusion models for audio synthesis",
            "text-conditioned image generation",
            "consistency distillation of samplers",
            "diffusion for molecule design",
            "video generation with space-time noise",
        ],
    },
    "gnn": {
        "topic": "graph neural networks",
        "phrases": [
            "message passing on heterogeneous graphs",
            "spectral filters for node classification",
            "graph attention with edge features",
            "scalable sampling for giant graphs",
            "oversmoothing in deep graph networks",
            "graph transformers with positional encoding",
            "temporal graphs for recommendation",
            "equivariant networks for molecules",
            "graph pooling for whole-graph tasks",
        ],
    },
    "llm": {
        "topic": "evaluation of large language models",
        "phrases": [
            "benchmark contamination measurement",
            "instruction-following evaluation suites",
            "factuality probes for generation",
            "reasoning chains under perturbation",
            "multilingual capability assessment",
            "long-context stress testing",
            "preference-based model comparison",
            "calibration of confidence estimates",
            "safety red-teaming protocols",
        ],
    },
    "rag": {
        "topic": "retrieval-augmented generation",
        "phrases": [
            "dense passage retrieval training",
            "query rewriting for retrieval",
            "fusion-in-decoder architectures",
            "retrieval index freshness tradeoffs",
            "citation-grounded answer synthesis",
            "hybrid sparse-dense retrieval",
            "retrieval for code generation",
            "adaptive retrieval triggering",
            "hallucination reduction via grounding",
        ],
    },
}

SURVEY_OUTLINES = {
    "det": [
        ["Introduction", ["Problem Setting", "Benchmarks"]],
        ["Sensor Modalities", ["LiDAR Methods", "Camera Methods", "Fusion Methods"]],
        ["Learning Paradigms", ["Supervised Pipelines", "Self-Supervision"]],
        "Conclusion",
    ],
    "dif": [
        ["Introduction", ["Background", "Scope"]],
        ["Model Families", ["Score-Based Models", "Latent Diffusion"]],
        ["Sampling and Speed", ["Solvers", "Distillation"]],
        ["Applications", ["Vision", "Audio", "Science"]],
        "Conclusion",
    ],
    "gnn": [
        ["Introduction", ["Notation", "Tasks"]],
        ["Architectures", ["Message Passing", "Attention", "Transformers"]],
        ["Scalability", ["Sampling", "Distributed Training"]],
        "Conclusion",
    ],
    "llm": [
        ["Introduction", ["Motivation"]],
        ["Evaluation Dimensions", ["Knowledge", "Reasoning", "Safety"]],
        ["Methodologies", ["Static Benchmarks", "Model-Based Judging"]],
        ["Open Problems", ["Contamination", "Robustness"]],
        "Conclusion",
    ],
    "rag": [
        ["Introduction", ["Why Retrieval"]],
        ["Retrievers", ["Sparse", "Dense", "Hybrid"]],
        ["Generators", ["Fusion Strategies", "Grounding"]],
        ["Evaluation", ["Faithfulness", "Attribution"]],
        "Conclusion",
    ],
}


def unit(vec: list[float]) -> list[float]:
    norm = math.sqrt(sum(v * v for v in vec))
    return [v / norm for v in vec]


def main() -> None:
    rng = random.Random(SEED)
    OUT.mkdir(parents=True, exist_ok=True)
    centroids = {
        tag: unit([rng.gauss(0.0, 1.0) for _ in range(DIM)]) for tag in CLUSTERS
    }
    papers = []
    embeddings = []
    outlines = []
    for tag, spec in CLUSTERS.items():
        for n in range(1, 11):
            record_id = f"{tag}-{n:03d}"
            year = 2014 + (n * 3 + len(tag) + ord(tag[0])) % 11
            month = (n * 2) % 12 + 1 if n % 2 == 0 else None
            citations = rng.randrange(0, 800)
            if n == 10:
                kind = "survey"
                title = f"A Survey of {spec['topic'].title()}"
                abstract = (
                    f"This survey reviews {spec['topic']}, organizing methods, "
                    "benchmarks, and open problems reported in the literature."
                )
            else:
                kind = "research"
                phrase = spec["phrases"][n - 1]
                title = f"{phrase.capitalize()} for {spec['topic']}"
                abstract = (
                    f"We study {phrase} in the context of {spec['topic']}. "
                    "Experiments on standard benchmarks show consistent gains "
                    "over prior approaches."
                )
            obj = {
                "id": record_id,
                "title": title,
                "abstract": abstract,
                "date": f"{year:04d}-{month:02d}" if month else f"{year:04d}",
                "citations": citations,
                "kind": kind,
            }
            if record_id == "det-003":
                del obj["citations"]  # exercises the missing-count -> 0 path
            papers.append(obj)
            vec = [
                4.0 * c + rng.gauss(0.0, 1.0)
                for c in centroids[tag]
            ]
            embeddings.append((record_id, unit(vec)))
        outlines.append({"paper_id": f"{tag}-010", "outline": SURVEY_OUTLINES[tag]})

    with open(OUT / "papers.jsonl", "w", encoding="utf-8") as fh:
        for obj in papers:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    with open(OUT / "outlines.jsonl", "w", encoding="utf-8") as fh:
        for obj in outlines:
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")
    write_embeddings(OUT / "embeddings.sfemb", DIM, embeddings)
    print(f"wrote {len(papers)} papers, {len(outlines)} outlines -> {OUT}")


if __name__ == "__main__":
    main()
