import base64
import json

import pytest
import yaml

from promptrefine.cli import main
from promptrefine.config import ConfigError, load_config
from promptrefine.scene_graph import graph_to_doc, parse_graph

from fixtures import (
    DECORATED_MOTORCYCLE,
    FENCE_EXPANSION,
    MOTORCYCLE_DEPENDENCIES,
    MOTORCYCLE_PROMPT,
    MOTORCYCLE_QUESTIONS,
    MOTORCYCLE_TUPLES,
    PNG_BLACK,
    PNG_WHITE,
    REGENERATED_MOTORCYCLE,
    motorcycle_graph,
)


def write_script(tmp_path, *, t2i_error=False, llm_garbage=False):
    text = [
        {"match": "*", "preamble": "*Decompose*", "response": MOTORCYCLE_TUPLES},
        {
            "match": "*",
            "preamble": "*yes/no verification questions*",
            "response": MOTORCYCLE_QUESTIONS,
        },
        {"match": "*", "preamble": "*presume*", "response": MOTORCYCLE_DEPENDENCIES},
        {"match": "*", "preamble": "*enrich prompts*", "response": FENCE_EXPANSION},
        {"match": "*", "preamble": "*compose prompts*", "response": REGENERATED_MOTORCYCLE},
        {
            "match": "*",
            "preamble": "*aesthetic keywords*",
            "response": "best quality, soft lighting",
        },
    ]
    if llm_garbage:
        text = [{"match": "*", "response": "garbage"}]
    doc = {
        "text": text,
        "vqa": [
            {"match": "Is there a fence?", "responses": ["no", "yes"]},
            {"match": "*", "response": "yes"},
        ],
        "image": [
            {
                "match": MOTORCYCLE_PROMPT,
                "response": {"error": "transport"} if t2i_error
                else base64.b64encode(PNG_WHITE).decode(),
            },
            {"match": "*", "response": base64.b64encode(PNG_BLACK).decode()},
        ],
    }
    path = tmp_path / "script.json"
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def write_config(tmp_path, script_name="script.json", pipeline=None):
    doc = {
        "backends": {
            "llm": {"type": "mock", "script": script_name},
            "vqa": {"type": "mock", "script": script_name},
            "t2i": {"type": "mock", "script": script_name},
        },
        "pipeline": {"seed": 42, "width": 64, "height": 64, **(pipeline or {})},
    }
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(doc), encoding="utf-8")
    return path


class TestLoadConfig:
    def test_mock_backends_built(self, tmp_path):
        write_script(tmp_path)
        cfg = load_config(write_config(tmp_path))
        assert cfg.seed == 42
        assert cfg.backends.embed is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.yaml")

    def test_missing_backend_section(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"backends": {"llm": {"type": "mock"}}}))
        with pytest.raises(ConfigError) as exc:
            load_config(path)
        assert "vqa" in str(exc.value)

    def test_unknown_backend_type(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(
            yaml.safe_dump(
                {"backends": {r: {"type": "smoke-signals"} for r in ("llm", "vqa", "t2i")}}
            )
        )
        with pytest.raises(ConfigError):
            load_config(path)

    def test_http_requires_endpoint(self, tmp_path):
        path = tmp_path / "config.yaml"
        path.write_text(
            yaml.safe_dump({"backends": {r: {"type": "http"} for r in ("llm", "vqa", "t2i")}})
        )
        with pytest.raises(ConfigError):
            load_config(path)

    def test_env_interpolation(self, tmp_path, monkeypatch):
        monkeypatch.setenv("TEST_TOKEN", "sekrit")
        doc = {
            "backends": {
                "llm": {"type": "http", "endpoint": "http://h", "auth_token": "${TEST_TOKEN}"},
                "vqa": {"type": "mock"},
                "t2i": {"type": "mock"},
            }
        }
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        cfg = load_config(path)
        assert cfg.backends.llm.config.auth_token == "sekrit"

    def test_missing_env_var(self, tmp_path, monkeypatch):
        monkeypatch.delenv("NOT_SET_ANYWHERE", raising=False)
        doc = {
            "backends": {
                "llm": {"type": "http", "endpoint": "http://h", "auth_token": "${NOT_SET_ANYWHERE}"},
                "vqa": {"type": "mock"},
                "t2i": {"type": "mock"},
            }
        }
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        with pytest.raises(ConfigError) as exc:
            load_config(path)
        assert "NOT_SET_ANYWHERE" in str(exc.value)

    def test_bad_pipeline_value(self, tmp_path):
        write_script(tmp_path)
        path = write_config(tmp_path, pipeline={"rounds": 0})
        with pytest.raises(ConfigError):
            load_config(path)

    def test_custom_templates_dir(self, tmp_path):
        write_script(tmp_path)
        tdir = tmp_path / "templates" / "tuples"
        tdir.mkdir(parents=True)
        (tdir / "preamble.txt").write_text("Decompose the prompt.")
        doc = yaml.safe_load(write_config(tmp_path).read_text())
        doc["templates"] = {"dir": "templates"}
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump(doc))
        cfg = load_config(path)
        assert cfg.templates.stage("tuples").preamble == "Decompose the prompt."


class TestCliOptimize:
    def test_full_run(self, tmp_path, capsys):
        write_script(tmp_path)
        config = write_config(tmp_path)
        out = tmp_path / "runs"
        code = main(
            ["optimize", "--prompt", MOTORCYCLE_PROMPT, "--config", str(config), "--out", str(out)]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert DECORATED_MOTORCYCLE in captured.out
        assert "completed" in captured.out
        run_dirs = list(out.iterdir())
        assert len(run_dirs) == 1
        assert (run_dirs[0] / "record.json").is_file()

    def test_config_error_exit_code(self, tmp_path):
        assert main(["optimize", "--prompt", "x", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_backend_failure_exit_code(self, tmp_path):
        write_script(tmp_path, t2i_error=True)
        config = write_config(tmp_path)
        code = main(["optimize", "--prompt", MOTORCYCLE_PROMPT, "--config", str(config)])
        assert code == 3

    def test_stage_exhausted_exit_code(self, tmp_path):
        write_script(tmp_path, llm_garbage=True)
        config = write_config(tmp_path)
        code = main(["optimize", "--prompt", MOTORCYCLE_PROMPT, "--config", str(config)])
        assert code == 4

    def test_no_decorate_flag(self, tmp_path, capsys):
        script = json.loads(write_script(tmp_path).read_text())
        # without decoration the final image comes from the regenerated prompt
        script["image"] = [
            {"match": MOTORCYCLE_PROMPT, "response": base64.b64encode(PNG_WHITE).decode()},
            {"match": "*", "response": base64.b64encode(PNG_BLACK).decode()},
        ]
        (tmp_path / "script.json").write_text(json.dumps(script))
        config = write_config(tmp_path)
        code = main(
            ["optimize", "--prompt", MOTORCYCLE_PROMPT, "--config", str(config), "--no-decorate"]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert REGENERATED_MOTORCYCLE in captured.out
        assert DECORATED_MOTORCYCLE not in captured.out


class TestCliDsgAndReflect:
    def test_dsg_prints_graph_document(self, tmp_path, capsys):
        write_script(tmp_path)
        config = write_config(tmp_path)
        code = main(["dsg", "--prompt", MOTORCYCLE_PROMPT, "--config", str(config)])
        assert code == 0
        captured = capsys.readouterr()
        assert parse_graph(captured.out) == motorcycle_graph()

    def test_reflect_scores_image(self, tmp_path, capsys):
        write_script(tmp_path)
        config = write_config(tmp_path)
        image = tmp_path / "existing.png"
        image.write_bytes(PNG_BLACK)
        code = main(
            ["reflect", "--prompt", MOTORCYCLE_PROMPT, "--image", str(image), "--config", str(config)]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "score:" in captured.out
        assert "Is there a motorcycle?" in captured.out


class TestCliRunBench:
    def _dataset(self, tmp_path):
        lines = []
        for tag in ("a", "b"):
            graph = motorcycle_graph()
            lines.append(
                json.dumps(
                    {
                        "item_id": f"item-{tag}",
                        "category": "desk",
                        "prompt": MOTORCYCLE_PROMPT,
                        "graph": graph_to_doc(graph),
                    }
                )
            )
        # distinct ids, same prompt; graphs embedded so no LLM is needed
        path = tmp_path / "data.jsonl"
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path

    def test_baseline_markdown(self, tmp_path, capsys):
        write_script(tmp_path)
        config = write_config(tmp_path)
        dataset = self._dataset(tmp_path)
        code = main(
            [
                "run-bench",
                "--dataset",
                str(dataset),
                "--config",
                str(config),
                "--mode",
                "baseline",
                "--format",
                "markdown",
            ]
        )
        assert code == 0
        captured = capsys.readouterr()
        assert "| method | desk | average |" in captured.out

    def test_limit_and_output_files(self, tmp_path, capsys):
        write_script(tmp_path)
        config = write_config(tmp_path)
        dataset = self._dataset(tmp_path)
        out = tmp_path / "bench-out"
        code = main(
            [
                "run-bench",
                "--dataset",
                str(dataset),
                "--config",
                str(config),
                "--mode",
                "baseline",
                "--format",
                "csv",
                "--limit",
                "1",
                "--out",
                str(out),
            ]
        )
        assert code == 0
        assert (out / "bench-report.csv").is_file()
        items = json.loads((out / "bench-items.json").read_text())
        assert len(items) == 1
