import random

import pytest

from promptrefine.backends import MockBackend, UnparseableAnswer
from promptrefine.reflection import (
    NO,
    PRUNED_NO,
    YES,
    Answer,
    AnswerSource,
    AnswerValue,
    ReflectionReport,
    alignment_score,
    build_dsg,
    evaluate_image,
    render_questions_stage_input,
)
from promptrefine.scene_graph import parse_questions, parse_tuples
from promptrefine.templates import (
    StageExhausted,
    default_template_set,
    load_template_set,
)

from fixtures import (
    MOTORCYCLE_DEPENDENCIES,
    MOTORCYCLE_PROMPT,
    MOTORCYCLE_QUESTIONS,
    MOTORCYCLE_TUPLES,
    PNG_WHITE,
    chain_graph,
    motorcycle_graph,
    random_dag,
)
from oracles import bf_prune_simulation


@pytest.fixture(scope="module")
def templates():
    return default_template_set()


def scripted_llm(tuples=MOTORCYCLE_TUPLES, questions=MOTORCYCLE_QUESTIONS, deps=MOTORCYCLE_DEPENDENCIES):
    return (
        MockBackend(name="llm")
        .script_text("*", tuples, preamble="*Decompose*")
        .script_text("*", questions, preamble="*yes/no verification questions*")
        .script_text("*", deps, preamble="*presume*")
    )


def image(tmp_path):
    from promptrefine.backends import ImageRef

    p = tmp_path / "img.png"
    p.write_bytes(PNG_WHITE)
    return ImageRef.from_file(p)


def vqa_for(answers):
    """Mock VQA answering exact question texts of chain_graph questions."""
    backend = MockBackend(name="vqa")
    for qid, value in answers.items():
        backend.script_vqa(f"Is there thing {qid}?", value)
    return backend


class TestAnswerTypes:
    def test_pruned_requires_pruned_source(self):
        with pytest.raises(ValueError):
            Answer(AnswerValue.PRUNED_NO, AnswerSource.VQA)
        with pytest.raises(ValueError):
            Answer(AnswerValue.YES, AnswerSource.PRUNED)

    def test_report_invariants_enforced(self):
        g = chain_graph("p", 2, set())
        with pytest.raises(ValueError):
            ReflectionReport(
                graph=g,
                answers={1: YES, 2: YES},
                missing_ids=frozenset({2}),
                score=1.0,
                vqa_call_count=2,
            )
        with pytest.raises(ValueError):
            ReflectionReport(
                graph=g,
                answers={1: YES},
                missing_ids=frozenset(),
                score=1.0,
                vqa_call_count=1,
            )


class TestBuildDsg:
    def test_motorcycle_three_stage_fixture(self, templates):
        # DERIVED: the scripted blocks assemble into the validated fixture graph.
        llm = scripted_llm()
        graph = build_dsg(MOTORCYCLE_PROMPT, llm, templates)
        assert graph == motorcycle_graph()
        # three stages, one call each
        assert len(llm.journal) == 3

    def test_stage_order_is_tuples_questions_dependencies(self, templates):
        llm = scripted_llm()
        build_dsg(MOTORCYCLE_PROMPT, llm, templates)
        excerpts = [r.response_excerpt for r in llm.journal.records()]
        assert "entity" in excerpts[0]
        assert excerpts[1].startswith("1 | Is there")
        assert excerpts[2].startswith("1 | 0")

    def test_questions_stage_sees_prompt_and_tuples(self, templates):
        seen = render_questions_stage_input(
            MOTORCYCLE_PROMPT, parse_tuples(MOTORCYCLE_TUPLES)
        )
        llm = (
            MockBackend(name="llm")
            .script_text("*", MOTORCYCLE_TUPLES, preamble="*Decompose*")
            .script_text(seen, MOTORCYCLE_QUESTIONS, preamble="*yes/no verification questions*")
            .script_text("*", MOTORCYCLE_DEPENDENCIES, preamble="*presume*")
        )
        build_dsg(MOTORCYCLE_PROMPT, llm, templates)

    def test_invalid_tuple_output_retried(self, templates):
        llm = scripted_llm()
        llm._text[0].responses = ["garbage", "more garbage", MOTORCYCLE_TUPLES]
        graph = build_dsg(MOTORCYCLE_PROMPT, llm, templates, max_attempts=3)
        assert graph == motorcycle_graph()
        assert len(llm.journal) == 5  # 3 tuple attempts + questions + dependencies

    def test_all_attempts_invalid_raises_stage_exhausted(self, templates):
        llm = MockBackend(name="llm").script_text("*", "garbage")
        with pytest.raises(StageExhausted) as exc:
            build_dsg(MOTORCYCLE_PROMPT, llm, templates, max_attempts=3)
        assert exc.value.stage == "tuples"
        assert exc.value.attempts == 3

    def test_question_id_mismatch_retries_question_stage(self, templates):
        llm = scripted_llm()
        llm._text[1].responses = ["1 | Only one question?", MOTORCYCLE_QUESTIONS]
        graph = build_dsg(MOTORCYCLE_PROMPT, llm, templates)
        assert graph == motorcycle_graph()

    def test_cyclic_dependencies_retry_dependency_stage(self, templates):
        llm = scripted_llm()
        llm._text[2].responses = [
            "1 | 2\n2 | 1\n3 | 0\n4 | 0\n5 | 0",
            MOTORCYCLE_DEPENDENCIES,
        ]
        graph = build_dsg(MOTORCYCLE_PROMPT, llm, templates)
        assert graph == motorcycle_graph()

    def test_empty_prompt_rejected(self, templates):
        with pytest.raises(ValueError):
            build_dsg("  ", MockBackend(), templates)


class TestEvaluateImage:
    def test_pruned_fixture(self, tmp_path):
        # DERIVED: pruned set equals descendants(3) per the reachability oracle.
        g = motorcycle_graph()
        vqa = (
            MockBackend(name="vqa")
            .script_vqa("Is there a motorcycle?", "yes")
            .script_vqa("Is the motorcycle blue?", "yes")
            .script_vqa("Is there a fence?", "no")
        )
        report = evaluate_image(image(tmp_path), g, vqa)
        assert report.answers == {1: YES, 2: YES, 3: NO, 4: PRUNED_NO, 5: PRUNED_NO}
        assert report.missing_ids == {3, 4, 5}
        assert report.score == pytest.approx(0.4)
        assert report.vqa_call_count == 3
        queried, pruned, missing, score = bf_prune_simulation(
            g.question_ids(),
            [(e.parent, e.child) for e in g.edges],
            {1: "yes", 2: "yes", 3: "no", 4: "yes", 5: "yes"},
        )
        assert pruned == {4, 5} and missing == report.missing_ids

    def test_all_yes(self, tmp_path):
        g = motorcycle_graph()
        vqa = MockBackend(name="vqa").script_vqa("*", "yes")
        report = evaluate_image(image(tmp_path), g, vqa)
        assert report.missing_ids == frozenset()
        assert report.score == 1.0
        assert report.vqa_call_count == 5

    def test_single_question_no(self, tmp_path):
        g = chain_graph("p", 1, set())
        vqa = MockBackend(name="vqa").script_vqa("*", "no")
        report = evaluate_image(image(tmp_path), g, vqa)
        assert report.missing_ids == {1}
        assert report.score == 0.0
        assert report.vqa_call_count == 1

    def test_empty_graph_scores_one(self, tmp_path):
        g = chain_graph("p", 0, set())
        report = evaluate_image(image(tmp_path), g, MockBackend(name="vqa"))
        assert report.score == 1.0
        assert report.vqa_call_count == 0

    def test_pruned_questions_never_reach_backend(self, tmp_path):
        g = motorcycle_graph()
        vqa = MockBackend(name="vqa").script_vqa("Is there*", "no").script_vqa("*", "yes")
        report = evaluate_image(image(tmp_path), g, vqa)
        # 1 and 3 answered no; everything else pruned, so exactly 2 calls
        assert report.vqa_call_count == 2
        assert len(vqa.journal) == 2
        asked = {r.digest for r in vqa.journal.records()}
        assert len(asked) == 2

    def test_multi_parent_conflict_prunes(self, tmp_path):
        # 5 depends on both 1 and 3; a no on 3 prunes it even though 1 is yes
        g = motorcycle_graph()
        vqa = (
            MockBackend(name="vqa")
            .script_vqa("Is there a fence?", "no")
            .script_vqa("*", "yes")
        )
        report = evaluate_image(image(tmp_path), g, vqa)
        assert report.answers[5] == PRUNED_NO

    def test_matches_oracle_on_random_dags(self, tmp_path):
        rng = random.Random(42)
        img = image(tmp_path)
        for _ in range(100):
            ids, pairs = random_dag(rng)
            g = chain_graph("p", len(ids), pairs)
            script = {i: rng.choice(["yes", "no"]) for i in ids}
            report = evaluate_image(img, g, vqa_for(script))
            queried, pruned, missing, score = bf_prune_simulation(ids, pairs, script)
            got_pruned = {i for i, a in report.answers.items() if a == PRUNED_NO}
            assert got_pruned == pruned
            assert report.missing_ids == missing
            assert report.score == pytest.approx(score)
            assert report.vqa_call_count == len(queried)

    def test_pruning_equals_forced_full_evaluation(self, tmp_path):
        # forcing every descendant of a no to no, then evaluating everything,
        # must give the same score as pruned evaluation
        rng = random.Random(9)
        img = image(tmp_path)
        for _ in range(60):
            ids, pairs = random_dag(rng, max_nodes=10)
            g = chain_graph("p", len(ids), pairs)
            script = {i: rng.choice(["yes", "no"]) for i in ids}
            report = evaluate_image(img, g, vqa_for(script))
            _, pruned, _, _ = bf_prune_simulation(ids, pairs, script)
            forced = {i: ("no" if i in pruned else script[i]) for i in ids}
            full_yes = sum(1 for v in forced.values() if v == "yes")
            assert report.score == pytest.approx(full_yes / len(ids))

    def test_deterministic_given_scripts(self, tmp_path):
        g = motorcycle_graph()
        img = image(tmp_path)
        reports = []
        for _ in range(2):
            vqa = MockBackend(name="vqa").script_vqa("Is there a fence?", "no").script_vqa("*", "yes")
            reports.append(evaluate_image(img, g, vqa))
        assert reports[0] == reports[1]

    def test_unparseable_answer_propagates(self, tmp_path):
        g = chain_graph("p", 2, set())
        vqa = MockBackend(name="vqa").script_vqa("*", "hard to say")
        with pytest.raises(UnparseableAnswer):
            evaluate_image(image(tmp_path), g, vqa)


class TestAlignmentScore:
    def _report(self, yes, no, pruned):
        n = yes + no + pruned
        edges = set()
        # give pruned questions a no-answered parent (question 1 must be a no)
        if pruned:
            assert no >= 1
            edges = {(1, i) for i in range(yes + no + 1, n + 1)}
        g = chain_graph("p", n, edges)
        answers = {}
        for i in range(1, n + 1):
            if i <= yes:
                answers[i] = YES
            elif i <= yes + no:
                answers[i] = NO
            else:
                answers[i] = PRUNED_NO
        # move the no-answered parent to id 1 when pruning is involved
        if pruned:
            answers[1], answers[yes + 1] = answers[yes + 1], answers[1]
        missing = frozenset(i for i, a in answers.items() if a is not YES)
        calls = sum(1 for a in answers.values() if a is not PRUNED_NO)
        score = yes / n if n else 1.0
        return ReflectionReport(g, answers, missing, score, calls)

    def test_six_of_eight(self):
        assert alignment_score(self._report(6, 2, 0)) == pytest.approx(0.75)

    def test_empty_graph_convention(self):
        g = chain_graph("p", 0, set())
        report = ReflectionReport(g, {}, frozenset(), 1.0, 0)
        assert alignment_score(report) == 1.0

    def test_two_yes_two_no_one_pruned(self):
        assert alignment_score(self._report(2, 2, 1)) == pytest.approx(0.4)


class TestTemplateData:
    def test_default_set_has_all_stages(self, templates):
        for stage in ("tuples", "questions", "dependencies", "expansion", "regeneration", "decoration"):
            st = templates.stage(stage)
            assert st.preamble
            assert len(st.exemplars) >= 10

    def test_bundled_dsg_exemplars_parse_and_build(self, templates):
        from promptrefine.scene_graph import build_graph, parse_dependencies

        tuple_shots = templates.stage("tuples").exemplars
        question_shots = templates.stage("questions").exemplars
        dep_shots = templates.stage("dependencies").exemplars
        for (prompt, t_out), (_, q_out), (_, d_out) in zip(tuple_shots, question_shots, dep_shots):
            graph = build_graph(
                prompt, parse_tuples(t_out), parse_questions(q_out), parse_dependencies(d_out)
            )
            assert graph.question_ids()

    def test_bundled_expansion_exemplars_parse(self, templates):
        from promptrefine.scene_graph import parse_tuple_line

        for _, out in templates.stage("expansion").exemplars:
            for no, line in enumerate(out.splitlines(), 1):
                if line.strip():
                    parse_tuple_line(line, no)

    def test_bundled_regeneration_outputs_pass_validators(self, templates):
        for _, out in templates.stage("regeneration").exemplars:
            assert out.strip()
            assert "|" not in out
            assert len(out) <= 480

    def test_missing_stage_raises(self, tmp_path):
        from promptrefine.templates import TemplateError

        stage_dir = tmp_path / "tuples"
        (stage_dir / "examples").mkdir(parents=True)
        (stage_dir / "preamble.txt").write_text("p")
        ts = load_template_set(tmp_path)
        with pytest.raises(TemplateError):
            ts.stage("questions")
