"""Self-reflection: build the question graph for a prompt, then evaluate a
generated image against it with entailment-based pruning."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable

from promptrefine import scene_graph as sg
from promptrefine.backends.base import Backend, ImageRef, VqaRequest
from promptrefine.templates import StageExhausted, TemplateSet, run_stage

logger = logging.getLogger(__name__)


class AnswerValue(str, Enum):
    YES = "yes"
    NO = "no"
    PRUNED_NO = "pruned_no"


class AnswerSource(str, Enum):
    VQA = "vqa"
    PRUNED = "pruned"


@dataclass(frozen=True)
class Answer:
    value: AnswerValue
    source: AnswerSource

    def __post_init__(self):
        if (self.value is AnswerValue.PRUNED_NO) != (self.source is AnswerSource.PRUNED):
            raise ValueError(f"inconsistent answer: {self.value} from {self.source}")


YES = Answer(AnswerValue.YES, AnswerSource.VQA)
NO = Answer(AnswerValue.NO, AnswerSource.VQA)
PRUNED_NO = Answer(AnswerValue.PRUNED_NO, AnswerSource.PRUNED)


@dataclass(frozen=True)
class ReflectionReport:
    """Per-question answers for one image, the missing set, and the score."""

    graph: sg.SceneGraph
    answers: Dict[int, Answer]
    missing_ids: FrozenSet[int]
    score: float
    vqa_call_count: int

    def __post_init__(self):
        ids = set(self.graph.question_ids())
        if set(self.answers) != ids:
            raise ValueError("answers must cover every question id exactly")
        expect_missing = {
            i for i, a in self.answers.items() if a.value is not AnswerValue.YES
        }
        if set(self.missing_ids) != expect_missing:
            raise ValueError("missing_ids inconsistent with answers")
        if self.vqa_call_count != sum(
            1 for a in self.answers.values() if a.source is AnswerSource.VQA
        ):
            raise ValueError("vqa_call_count inconsistent with answers")
        if abs(self.score - _score(self.answers)) > 1e-12:
            raise ValueError("score inconsistent with answers")


def _score(answers: Dict[int, Answer]) -> float:
    if not answers:
        return 1.0
    yes = sum(1 for a in answers.values() if a.value is AnswerValue.YES)
    return yes / len(answers)


def render_tuples_stage_input(prompt: str) -> str:
    return prompt


def render_questions_stage_input(prompt: str, tuples: Iterable[sg.ConceptTuple]) -> str:
    return f"Prompt: {prompt}\nTuples:\n{sg.render_tuples(tuples)}"


def render_dependencies_stage_input(prompt: str, tuples: Iterable[sg.ConceptTuple]) -> str:
    return f"Prompt: {prompt}\nTuples:\n{sg.render_tuples(tuples)}"


def build_dsg(
    prompt: str,
    llm: Backend,
    templates: TemplateSet,
    max_attempts: int = 3,
    max_questions: int = sg.MAX_QUESTIONS,
) -> sg.SceneGraph:
    """Three staged text-model calls: tuples, then questions, then dependencies.

    Each stage's output is parsed and validated; invalid output re-invokes that
    stage up to max_attempts before StageExhausted.
    """
    if not prompt.strip():
        raise ValueError("prompt must be non-empty")

    tuples, _ = run_stage(
        llm,
        templates.stage("tuples"),
        render_tuples_stage_input(prompt),
        sg.parse_tuples,
        max_attempts=max_attempts,
    )

    def parse_matching_questions(raw: str):
        questions = sg.parse_questions(raw)
        if sorted(q.id for q in questions) != [t.id for t in tuples]:
            raise sg.CountMismatch(
                f"question ids {sorted(q.id for q in questions)} "
                f"do not cover tuple ids 1..{len(tuples)}"
            )
        return questions

    questions, _ = run_stage(
        llm,
        templates.stage("questions"),
        render_questions_stage_input(prompt, tuples),
        parse_matching_questions,
        max_attempts=max_attempts,
    )

    def parse_and_assemble(raw: str):
        edges = sg.parse_dependencies(raw)
        return sg.build_graph(prompt, tuples, questions, edges, max_questions=max_questions)

    graph, _ = run_stage(
        llm,
        templates.stage("dependencies"),
        render_dependencies_stage_input(prompt, tuples),
        parse_and_assemble,
        max_attempts=max_attempts,
    )
    return graph


def evaluate_image(image: ImageRef, graph: sg.SceneGraph, vqa: Backend) -> ReflectionReport:
    """Answer the graph's questions about an image in topological order.

    A No answer marks every dependent question as missing without querying it.
    """
    answers: Dict[int, Answer] = {}
    calls = 0
    for qid in sg.topological_order(graph):
        if qid in answers:
            continue  # pruned by an earlier No
        question = graph.question_by_id(qid)
        is_yes = vqa.answer_binary(VqaRequest(image=image, question=question.text))
        calls += 1
        if is_yes:
            answers[qid] = YES
        else:
            answers[qid] = NO
            for dep in sg.descendants(graph, qid):
                if dep not in answers:
                    answers[dep] = PRUNED_NO
    missing = frozenset(i for i, a in answers.items() if a.value is not AnswerValue.YES)
    return ReflectionReport(
        graph=graph,
        answers=answers,
        missing_ids=missing,
        score=_score(answers),
        vqa_call_count=calls,
    )


def alignment_score(report: ReflectionReport) -> float:
    """The fraction of questions answered yes; recomputed as a consistency check."""
    recomputed = _score(report.answers)
    if abs(recomputed - report.score) > 1e-12:
        raise ValueError(f"report score {report.score} != recomputed {recomputed}")
    return report.score
