"""Benchmark harness: dataset loading, baseline vs optimized scoring, per-
category aggregation, CLIP-style relevance, and report rendering."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

from promptrefine import scene_graph as sg
from promptrefine.backends.base import ImageGenRequest, ImageRef
from promptrefine.pipeline import PipelineConfig, RunRecord, run_single
from promptrefine.reflection import build_dsg, evaluate_image

logger = logging.getLogger(__name__)

MODES = ("baseline", "optimized", "both")


class DuplicateItemId(ValueError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"duplicate item_id {item_id!r}")


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


@dataclass(frozen=True)
class DatasetItem:
    item_id: str
    category: str
    prompt: str
    graph: Optional[sg.SceneGraph] = None


@dataclass
class ItemResult:
    item_id: str
    category: str
    baseline_score: Optional[float] = None
    optimized_score: Optional[float] = None
    clip: Dict[str, float] = field(default_factory=dict)
    aesthetic: Dict[str, float] = field(default_factory=dict)
    error: Optional[str] = None

    @property
    def failed(self) -> bool:
        return self.error is not None


@dataclass
class BenchReport:
    mode: str
    items: List[ItemResult]
    category_means: Dict[str, Dict[str, Optional[float]]]
    overall: Dict[str, Optional[float]]
    failed_count: int

    def failed_items(self) -> List[ItemResult]:
        return [i for i in self.items if i.failed]


def load_dataset(path: Union[str, Path]) -> List[DatasetItem]:
    """Load a line-delimited dataset: one JSON record per line.

    Records carry ``item_id``, ``category``, ``prompt``, and optionally an
    inline ``graph`` in the graph-document schema.
    """
    items: List[DatasetItem] = []
    seen = set()
    text = Path(path).read_text(encoding="utf-8")
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            doc = json.loads(line)
        except json.JSONDecodeError as exc:
            raise sg.SchemaViolation(f"line {line_no}", f"invalid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise sg.SchemaViolation(f"line {line_no}", "record is not an object")
        for key in ("item_id", "category", "prompt"):
            if key not in doc or not isinstance(doc[key], str):
                raise sg.SchemaViolation(f"line {line_no}.{key}", "missing or non-string field")
        if not doc["prompt"].strip():
            raise sg.SchemaViolation(f"line {line_no}.prompt", "prompt is empty")
        if doc["item_id"] in seen:
            raise DuplicateItemId(doc["item_id"])
        seen.add(doc["item_id"])
        graph = None
        if doc.get("graph") is not None:
            try:
                graph = sg.graph_from_doc(doc["graph"])
            except sg.SchemaViolation as exc:
                raise sg.SchemaViolation(f"line {line_no}.graph.{exc.path}", exc.reason) from None
        items.append(
            DatasetItem(
                item_id=doc["item_id"],
                category=doc["category"],
                prompt=doc["prompt"],
                graph=graph,
            )
        )
    return items


def _baseline_only(item: DatasetItem, cfg: PipelineConfig):
    """Generate from the raw prompt and score it; no optimization pass."""
    graph = item.graph
    if graph is None:
        graph = build_dsg(
            item.prompt,
            cfg.backends.llm,
            cfg.template_set(),
            max_attempts=cfg.build_attempts,
            max_questions=cfg.max_questions,
        )
    ref = cfg.backends.t2i.generate_image(
        ImageGenRequest(prompt=item.prompt, seed=cfg.seed, width=cfg.width, height=cfg.height)
    )
    report = evaluate_image(ref, graph, cfg.backends.vqa)
    return report.score, ref


def _clip_pairings(result: ItemResult, item: DatasetItem, record: Optional[RunRecord],
                   baseline_ref: Optional[ImageRef], cfg: PipelineConfig) -> None:
    embedder = cfg.backends.embed
    if embedder is None:
        return
    try:
        if baseline_ref is not None:
            result.clip["baseline"] = clip_relevance(
                embedder.embed(item.prompt), embedder.embed(baseline_ref)
            )
        if record is not None and record.image_refs:
            final_ref = record.image_refs[-1][1]
            final_prompt = record.final_prompt()
            image_vec = embedder.embed(final_ref)
            result.clip["optimized_prompt"] = clip_relevance(
                embedder.embed(final_prompt), image_vec
            )
            result.clip["original_prompt"] = clip_relevance(
                embedder.embed(item.prompt), image_vec
            )
    except Exception as exc:  # noqa: BLE001 - relevance scoring is best-effort
        logger.warning("clip scoring failed for %s: %s", result.item_id, exc)


def run_benchmark(
    dataset: Sequence[DatasetItem],
    cfg: PipelineConfig,
    mode: str = "both",
    aesthetic_scorer: Optional[Callable[[ImageRef], float]] = None,
) -> BenchReport:
    """Score every dataset item; failures are recorded and excluded from means.

    Baseline scores images generated from the raw prompts; optimized runs the
    full pipeline and scores the final image. Items with embedded graphs skip
    graph construction.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    results: List[ItemResult] = []
    for item in dataset:
        result = ItemResult(item_id=item.item_id, category=item.category)
        record = None
        baseline_ref = None
        try:
            if mode == "baseline":
                result.baseline_score, baseline_ref = _baseline_only(item, cfg)
            else:
                record = run_single(item.prompt, cfg, graph=item.graph)
                if record.status != "completed":
                    raise RuntimeError(
                        f"pipeline failed at {record.failed_stage}: {record.error}"
                    )
                if record.reports:
                    result.baseline_score = record.reports[0].score
                    result.optimized_score = record.reports[-1].score
                if record.image_refs:
                    baseline_ref = record.image_refs[0][1]
            _clip_pairings(result, item, record, baseline_ref, cfg)
            if aesthetic_scorer is not None:
                if baseline_ref is not None:
                    result.aesthetic["baseline"] = float(aesthetic_scorer(baseline_ref))
                if record is not None and record.image_refs:
                    result.aesthetic["optimized"] = float(
                        aesthetic_scorer(record.image_refs[-1][1])
                    )
        except Exception as exc:  # noqa: BLE001 - one bad item must not sink the run
            result.error = f"{type(exc).__name__}: {exc}"
            logger.warning("item %s failed: %s", item.item_id, result.error)
        results.append(result)
    return aggregate(results, mode)


def _mean(values: List[float]) -> Optional[float]:
    return math.fsum(values) / len(values) if values else None


def aggregate(items: List[ItemResult], mode: str = "both") -> BenchReport:
    """Fold item results into per-category and overall means."""
    categories: Dict[str, List[ItemResult]] = {}
    for item in items:
        if not item.failed:
            categories.setdefault(item.category, []).append(item)
    category_means = {
        cat: {
            "baseline": _mean([i.baseline_score for i in members if i.baseline_score is not None]),
            "optimized": _mean(
                [i.optimized_score for i in members if i.optimized_score is not None]
            ),
            "count": len(members),
        }
        for cat, members in sorted(categories.items())
    }
    ok = [i for i in items if not i.failed]
    overall = {
        "baseline": _mean([i.baseline_score for i in ok if i.baseline_score is not None]),
        "optimized": _mean([i.optimized_score for i in ok if i.optimized_score is not None]),
    }
    return BenchReport(
        mode=mode,
        items=items,
        category_means=category_means,
        overall=overall,
        failed_count=sum(1 for i in items if i.failed),
    )


def clip_relevance(text_vec: Sequence[float], image_vec: Sequence[float], w: float = 100.0) -> float:
    """Scaled, zero-clipped cosine similarity between two embeddings."""
    if w <= 0:
        raise ValueError("w must be positive")
    if len(text_vec) != len(image_vec):
        raise DimensionMismatch(f"dimensions differ: {len(text_vec)} vs {len(image_vec)}")
    dot = math.fsum(a * b for a, b in zip(text_vec, image_vec))
    norm_a = math.sqrt(math.fsum(a * a for a in text_vec))
    norm_b = math.sqrt(math.fsum(b * b for b in image_vec))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroVector("embeddings must be nonzero")
    return w * max(dot / (norm_a * norm_b), 0.0)


def _cell(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{100.0 * value:.1f}"


def render_report(report: BenchReport, format: str = "markdown") -> str:
    """Deterministic table: one row per mode, one column per category plus average."""
    if format not in ("markdown", "csv"):
        raise ValueError("format must be 'markdown' or 'csv'")
    categories = list(report.category_means)
    header = ["method"] + categories + ["average"]
    rows = []
    for method in ("baseline", "optimized"):
        if report.mode != "both" and method != report.mode:
            continue
        row = [method]
        for cat in categories:
            row.append(_cell(report.category_means[cat][method]))
        row.append(_cell(report.overall[method]))
        rows.append(row)

    if format == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()

    lines = [
        "| " + " | ".join(header) + " |",
        "| " + " | ".join("---" for _ in header) + " |",
    ]
    for row in rows:
        lines.append("| " + " | ".join(row) + " |")
    return "\n".join(lines) + "\n"
