"""Concept scene-graph data model, line grammars, and DAG operations.

A prompt is decomposed into atomic concept tuples, one binary question per
tuple, and a dependency DAG over the questions. The three line grammars here
are the canonical interchange format emitted by the text-model stages:

    tuples:        <id> | <category> - <detail> (<content>)
    questions:     <id> | <question text>
    dependencies:  <child_id> | <parent_id>[, <parent_id>...]   (0 = no parents)
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Sequence, Set, Tuple

# Guard against runaway model output; override via build_graph(max_questions=...).
MAX_QUESTIONS = 200


class GraphError(ValueError):
    """Base class for grammar and graph validation failures."""


class MalformedLine(GraphError):
    def __init__(self, line_no: int, line: str, reason: str = ""):
        self.line_no = line_no
        self.line = line
        detail = f": {reason}" if reason else ""
        super().__init__(f"malformed line {line_no}{detail}: {line!r}")


class DuplicateId(GraphError):
    def __init__(self, dup_id: int):
        self.dup_id = dup_id
        super().__init__(f"duplicate id {dup_id}")


class NonContiguousIds(GraphError):
    def __init__(self, ids: Sequence[int]):
        self.ids = sorted(ids)
        super().__init__(f"ids are not contiguous from 1: {self.ids}")


class UnknownCategory(GraphError):
    def __init__(self, category: str):
        self.category = category
        super().__init__(f"unknown category {category!r}")


class SelfDependency(GraphError):
    def __init__(self, node_id: int):
        self.node_id = node_id
        super().__init__(f"question {node_id} depends on itself")


class CycleDetected(GraphError):
    def __init__(self, cycle: Sequence[int]):
        self.cycle = list(cycle)
        super().__init__("dependency cycle: " + " -> ".join(str(i) for i in self.cycle))


class DanglingEdge(GraphError):
    def __init__(self, missing_id: int):
        self.missing_id = missing_id
        super().__init__(f"edge references unknown question id {missing_id}")


class CountMismatch(GraphError):
    pass


class UnknownId(GraphError):
    def __init__(self, missing_id: int):
        self.missing_id = missing_id
        super().__init__(f"unknown question id {missing_id}")


class GraphTooLarge(GraphError):
    def __init__(self, count: int, limit: int):
        super().__init__(f"graph has {count} questions, limit is {limit}")


class SchemaViolation(GraphError):
    def __init__(self, path: str, reason: str):
        self.path = path
        self.reason = reason
        super().__init__(f"{path}: {reason}")


class Category(str, Enum):
    """The four kinds of atomic concept."""

    ENTITY = "entity"
    ATTRIBUTE = "attribute"
    RELATION = "relation"
    ACTION = "action"


@dataclass(frozen=True)
class ConceptTuple:
    """One atomic semantic unit extracted from a prompt."""

    id: int
    category: Category
    detail: str
    content: str

    def __post_init__(self):
        if self.id < 1:
            raise GraphError(f"tuple id must be >= 1, got {self.id}")
        if not isinstance(self.category, Category):
            raise UnknownCategory(str(self.category))
        if not self.content.strip():
            raise GraphError(f"tuple {self.id} has empty content")

    def render(self) -> str:
        return f"{self.id} | {self.category.value} - {self.detail} ({self.content})"


@dataclass(frozen=True)
class Question:
    """A binary verification question for one concept tuple."""

    id: int
    text: str
    tuple_id: int

    def __post_init__(self):
        if self.id < 1:
            raise GraphError(f"question id must be >= 1, got {self.id}")
        if not self.text.strip():
            raise GraphError(f"question {self.id} has empty text")

    def render(self) -> str:
        return f"{self.id} | {self.text}"


@dataclass(frozen=True, order=True)
class DependencyEdge:
    """Entailment dependency: the child question presumes the parent holds."""

    parent: int
    child: int

    def __post_init__(self):
        if self.parent == self.child:
            raise SelfDependency(self.parent)


@dataclass(frozen=True)
class SceneGraph:
    """Validated concept graph for one prompt. Immutable; build via build_graph."""

    source_prompt: str
    tuples: Tuple[ConceptTuple, ...]
    questions: Tuple[Question, ...]
    edges: FrozenSet[DependencyEdge]

    def question_ids(self) -> List[int]:
        return [q.id for q in self.questions]

    def question_by_id(self, qid: int) -> Question:
        for q in self.questions:
            if q.id == qid:
                return q
        raise UnknownId(qid)

    def tuple_by_id(self, tid: int) -> ConceptTuple:
        for t in self.tuples:
            if t.id == tid:
                return t
        raise UnknownId(tid)

    def children(self) -> Dict[int, List[int]]:
        adj: Dict[int, List[int]] = {q.id: [] for q in self.questions}
        for e in sorted(self.edges):
            adj[e.parent].append(e.child)
        return adj

    def max_id(self) -> int:
        return max((t.id for t in self.tuples), default=0)


def _split_lines(raw: str) -> List[Tuple[int, str]]:
    """Non-blank lines with their 1-based line numbers."""
    out = []
    for no, line in enumerate(raw.splitlines(), start=1):
        if line.strip():
            out.append((no, line))
    return out


def parse_tuple_line(line: str, line_no: int = 0) -> ConceptTuple:
    """Parse one `<id> | <category> - <detail> (<content>)` line."""
    head, sep, rest = line.partition("|")
    if not sep:
        raise MalformedLine(line_no, line, "missing '|' separator")
    head = head.strip()
    if not head.isdigit():
        raise MalformedLine(line_no, line, "id is not a positive integer")
    tid = int(head)
    if tid < 1:
        raise MalformedLine(line_no, line, "id must be >= 1")
    cat_part, dash, qualifier = rest.partition("-")
    if not dash:
        raise MalformedLine(line_no, line, "missing '-' between category and detail")
    cat_text = cat_part.strip()
    try:
        category = Category(cat_text.lower())
    except ValueError:
        raise UnknownCategory(cat_text) from None
    qualifier = qualifier.strip()
    open_idx = qualifier.find("(")
    if open_idx < 0 or not qualifier.endswith(")"):
        raise MalformedLine(line_no, line, "content must be enclosed in parentheses")
    detail = qualifier[:open_idx].strip()
    content = qualifier[open_idx + 1 : -1].strip()
    if not content:
        raise MalformedLine(line_no, line, "empty content")
    return ConceptTuple(id=tid, category=category, detail=detail, content=content)


def parse_tuples(raw: str) -> List[ConceptTuple]:
    """Parse a tuple block. Ids must be unique and contiguous from 1."""
    tuples = []
    seen: Set[int] = set()
    for no, line in _split_lines(raw):
        t = parse_tuple_line(line, no)
        if t.id in seen:
            raise DuplicateId(t.id)
        seen.add(t.id)
        tuples.append(t)
    if tuples and sorted(seen) != list(range(1, len(tuples) + 1)):
        raise NonContiguousIds(seen)
    return tuples


def parse_questions(raw: str) -> List[Question]:
    """Parse a question block of `<id> | <question text>` lines."""
    questions = []
    seen: Set[int] = set()
    for no, line in _split_lines(raw):
        head, sep, text = line.partition("|")
        if not sep:
            raise MalformedLine(no, line, "missing '|' separator")
        head = head.strip()
        if not head.isdigit():
            raise MalformedLine(no, line, "id is not a positive integer")
        qid = int(head)
        if qid < 1:
            raise MalformedLine(no, line, "id must be >= 1")
        text = text.strip()
        if not text:
            raise MalformedLine(no, line, "empty question text")
        if qid in seen:
            raise DuplicateId(qid)
        seen.add(qid)
        questions.append(Question(id=qid, text=text, tuple_id=qid))
    return questions


def parse_dependencies(raw: str) -> Set[DependencyEdge]:
    """Parse a dependency block. `<id> | 0` declares a root (no parents)."""
    edges: Set[DependencyEdge] = set()
    for no, line in _split_lines(raw):
        head, sep, rest = line.partition("|")
        if not sep:
            raise MalformedLine(no, line, "missing '|' separator")
        head = head.strip()
        if not head.isdigit():
            raise MalformedLine(no, line, "child id is not a positive integer")
        child = int(head)
        if child < 1:
            raise MalformedLine(no, line, "child id must be >= 1")
        parts = [p.strip() for p in rest.split(",")]
        if not parts or any(not p.isdigit() for p in parts):
            raise MalformedLine(no, line, "parent list must be comma-separated integers")
        parents = [int(p) for p in parts]
        if 0 in parents:
            if len(parents) > 1:
                raise MalformedLine(no, line, "'0' (no parents) cannot be combined with parent ids")
            continue
        for parent in parents:
            if parent == child:
                raise SelfDependency(child)
            edges.add(DependencyEdge(parent=parent, child=child))
    return edges


def render_tuples(tuples: Iterable[ConceptTuple]) -> str:
    return "\n".join(t.render() for t in sorted(tuples, key=lambda t: t.id))


def render_questions(questions: Iterable[Question]) -> str:
    return "\n".join(q.render() for q in sorted(questions, key=lambda q: q.id))


def render_dependencies(question_ids: Iterable[int], edges: Iterable[DependencyEdge]) -> str:
    parents: Dict[int, List[int]] = {qid: [] for qid in question_ids}
    for e in edges:
        parents.setdefault(e.child, []).append(e.parent)
    lines = []
    for qid in sorted(parents):
        ps = sorted(parents[qid])
        lines.append(f"{qid} | " + (", ".join(str(p) for p in ps) if ps else "0"))
    return "\n".join(lines)


def _find_cycle(ids: Sequence[int], children: Dict[int, List[int]]) -> List[int]:
    """Return one cycle path (first node repeated at the end), or []."""
    WHITE, GRAY, BLACK = 0, 1, 2
    color = {i: WHITE for i in ids}
    parent: Dict[int, int] = {}
    for start in sorted(ids):
        if color[start] != WHITE:
            continue
        stack: List[Tuple[int, Iterable[int]]] = [(start, iter(children[start]))]
        color[start] = GRAY
        while stack:
            node, it = stack[-1]
            advanced = False
            for child in it:
                if color[child] == GRAY:
                    # back edge: walk predecessors to recover the loop
                    cycle = [child, node]
                    cur = node
                    while cur != child:
                        cur = parent[cur]
                        cycle.append(cur)
                    cycle.reverse()
                    return cycle
                if color[child] == WHITE:
                    color[child] = GRAY
                    parent[child] = node
                    stack.append((child, iter(children[child])))
                    advanced = True
                    break
            if not advanced:
                color[node] = BLACK
                stack.pop()
    return []


def build_graph(
    prompt: str,
    tuples: Sequence[ConceptTuple],
    questions: Sequence[Question],
    edges: Iterable[DependencyEdge],
    max_questions: int = MAX_QUESTIONS,
) -> SceneGraph:
    """Assemble and fully validate a SceneGraph from parsed parts."""
    tuples = tuple(sorted(tuples, key=lambda t: t.id))
    questions = tuple(sorted(questions, key=lambda q: q.id))
    edge_set = frozenset(edges)

    if len(questions) > max_questions:
        raise GraphTooLarge(len(questions), max_questions)
    if len(tuples) != len(questions):
        raise CountMismatch(f"{len(tuples)} tuples vs {len(questions)} questions")

    tuple_ids = [t.id for t in tuples]
    question_ids = [q.id for q in questions]
    for ids in (tuple_ids, question_ids):
        seen: Set[int] = set()
        for i in ids:
            if i in seen:
                raise DuplicateId(i)
            seen.add(i)
    if tuple_ids != list(range(1, len(tuples) + 1)):
        raise NonContiguousIds(tuple_ids)
    if tuple_ids != question_ids:
        raise CountMismatch(f"tuple ids {tuple_ids} do not match question ids {question_ids}")
    for q in questions:
        if q.tuple_id != q.id:
            raise CountMismatch(f"question {q.id} is bound to tuple {q.tuple_id}")

    id_set = set(question_ids)
    for e in edge_set:
        for endpoint in (e.parent, e.child):
            if endpoint not in id_set:
                raise DanglingEdge(endpoint)

    graph = SceneGraph(source_prompt=prompt, tuples=tuples, questions=questions, edges=edge_set)
    cycle = _find_cycle(question_ids, graph.children())
    if cycle:
        raise CycleDetected(cycle)
    return graph


def topological_order(graph: SceneGraph) -> List[int]:
    """Question ids with every parent before its children.

    Deterministic: ready nodes are emitted generation by generation, ascending
    id within each generation.
    """
    ids = graph.question_ids()
    indegree = {i: 0 for i in ids}
    children = graph.children()
    for e in graph.edges:
        indegree[e.child] += 1
    order: List[int] = []
    ready = sorted(i for i in ids if indegree[i] == 0)
    while ready:
        next_ready: List[int] = []
        for node in ready:
            order.append(node)
            for child in children[node]:
                indegree[child] -= 1
                if indegree[child] == 0:
                    next_ready.append(child)
        ready = sorted(next_ready)
    return order


def descendants(graph: SceneGraph, qid: int) -> Set[int]:
    """Transitive closure of children of qid, excluding qid itself."""
    if qid not in set(graph.question_ids()):
        raise UnknownId(qid)
    children = graph.children()
    out: Set[int] = set()
    stack = list(children[qid])
    while stack:
        node = stack.pop()
        if node in out:
            continue
        out.add(node)
        stack.extend(children[node])
    return out


def graph_to_doc(graph: SceneGraph) -> dict:
    return {
        "source_prompt": graph.source_prompt,
        "tuples": [
            {"id": t.id, "category": t.category.value, "detail": t.detail, "content": t.content}
            for t in sorted(graph.tuples, key=lambda t: t.id)
        ],
        "questions": [
            {"id": q.id, "text": q.text} for q in sorted(graph.questions, key=lambda q: q.id)
        ],
        "edges": [[e.parent, e.child] for e in sorted(graph.edges)],
    }


def serialize_graph(graph: SceneGraph) -> str:
    """Canonical, byte-stable JSON document for a graph."""
    return json.dumps(graph_to_doc(graph), indent=2, ensure_ascii=False) + "\n"


def _expect(doc: dict, key: str, kind, path: str):
    if key not in doc:
        raise SchemaViolation(f"{path}.{key}" if path else key, "missing field")
    value = doc[key]
    if not isinstance(value, kind) or isinstance(value, bool):
        want = kind[0].__name__ if isinstance(kind, tuple) else kind.__name__
        raise SchemaViolation(f"{path}.{key}" if path else key, f"expected {want}")
    return value


def graph_from_doc(doc: dict, max_questions: int = MAX_QUESTIONS) -> SceneGraph:
    if not isinstance(doc, dict):
        raise SchemaViolation("", "document is not an object")
    prompt = _expect(doc, "source_prompt", str, "")
    raw_tuples = _expect(doc, "tuples", list, "")
    raw_questions = _expect(doc, "questions", list, "")
    raw_edges = _expect(doc, "edges", list, "")

    tuples = []
    for i, item in enumerate(raw_tuples):
        path = f"tuples[{i}]"
        if not isinstance(item, dict):
            raise SchemaViolation(path, "expected object")
        tid = _expect(item, "id", int, path)
        cat_text = _expect(item, "category", str, path)
        detail = _expect(item, "detail", str, path)
        content = _expect(item, "content", str, path)
        try:
            category = Category(cat_text.lower())
        except ValueError:
            raise UnknownCategory(cat_text) from None
        tuples.append(ConceptTuple(id=tid, category=category, detail=detail, content=content))

    questions = []
    for i, item in enumerate(raw_questions):
        path = f"questions[{i}]"
        if not isinstance(item, dict):
            raise SchemaViolation(path, "expected object")
        qid = _expect(item, "id", int, path)
        text = _expect(item, "text", str, path)
        questions.append(Question(id=qid, text=text, tuple_id=qid))

    edges = set()
    for i, item in enumerate(raw_edges):
        path = f"edges[{i}]"
        if (
            not isinstance(item, list)
            or len(item) != 2
            or not all(isinstance(v, int) and not isinstance(v, bool) for v in item)
        ):
            raise SchemaViolation(path, "expected [parent, child] integer pair")
        edges.add(DependencyEdge(parent=item[0], child=item[1]))

    return build_graph(prompt, tuples, questions, edges, max_questions=max_questions)


def parse_graph(text: str, max_questions: int = MAX_QUESTIONS) -> SceneGraph:
    """Parse and validate a graph document. Inverse of serialize_graph."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaViolation("", f"invalid JSON: {exc}") from None
    return graph_from_doc(doc, max_questions=max_questions)
