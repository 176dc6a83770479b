"""Config file loading: backends, pipeline knobs, template dir, keyword file.

YAML (JSON works too), with ``${VAR}`` environment interpolation in string
values so secrets stay out of config files::

    backends:
      llm:  {type: http, endpoint: "https://api.example.com/v1",
             model: qwen2-7b-instruct, auth_token: "${LLM_TOKEN}"}
      vqa:  {type: http, endpoint: "...", model: qwen2-vl-7b}
      t2i:  {type: http, endpoint: "...", model: flux-dev}
      embed: {type: http, endpoint: "...", model: clip-vit, embed_dim: 512}
    pipeline:
      rounds: 1
      seed: 1234
    templates:
      dir: ./my-templates        # optional, bundled set used by default
    keywords:
      file: ./my-keywords.json   # optional
"""

from __future__ import annotations

import os
import re
from pathlib import Path
from typing import Optional, Union

import yaml

from promptrefine.backends import BackendConfig, HttpBackend, MockBackend
from promptrefine.optimizer import load_keyword_table
from promptrefine.pipeline import Backends, PipelineConfig
from promptrefine.templates import TemplateError, load_template_set

_ENV_VAR = re.compile(r"\$\{(\w+)\}")


class ConfigError(Exception):
    pass


def _interpolate(value, path: str):
    if isinstance(value, str):

        def sub(match):
            name = match.group(1)
            if name not in os.environ:
                raise ConfigError(f"{path}: environment variable {name} is not set")
            return os.environ[name]

        return _ENV_VAR.sub(sub, value)
    if isinstance(value, dict):
        return {k: _interpolate(v, f"{path}.{k}") for k, v in value.items()}
    if isinstance(value, list):
        return [_interpolate(v, f"{path}[{i}]") for i, v in enumerate(value)]
    return value


def _build_backend(section: dict, role: str, image_dir: Optional[Path], base_dir: Path):
    if not isinstance(section, dict):
        raise ConfigError(f"backends.{role} must be a mapping")
    kind = section.get("type", "http")
    known = {
        "endpoint",
        "model",
        "auth_token",
        "timeout",
        "max_retries",
        "rate_limit",
        "backoff_base",
        "embed_dim",
        "supports_embedding",
    }
    cfg_kwargs = {k: v for k, v in section.items() if k in known}
    if role == "embed":
        cfg_kwargs.setdefault("supports_embedding", True)
    try:
        cfg = BackendConfig(**cfg_kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"backends.{role}: {exc}") from exc
    if kind == "http":
        if not cfg.endpoint:
            raise ConfigError(f"backends.{role}: http backend needs an endpoint")
        return HttpBackend(cfg, image_dir=image_dir)
    if kind == "mock":
        script = section.get("script")
        if script:
            script_path = Path(script)
            if not script_path.is_absolute():
                script_path = base_dir / script_path
            backend = MockBackend.from_file(script_path, image_dir=image_dir, name=role)
            backend.config = cfg if cfg.model else backend.config
            return backend
        return MockBackend(image_dir=image_dir, name=role)
    raise ConfigError(f"backends.{role}: unknown type {kind!r}")


def load_config(path: Union[str, Path], out_dir: Optional[Path] = None) -> PipelineConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    doc = _interpolate(doc, path.name)
    base_dir = path.parent

    backends_doc = doc.get("backends")
    if not isinstance(backends_doc, dict):
        raise ConfigError("config needs a 'backends' section")
    for role in ("llm", "vqa", "t2i"):
        if role not in backends_doc:
            raise ConfigError(f"backends.{role} is required")

    pipeline_doc = doc.get("pipeline", {}) or {}
    if not isinstance(pipeline_doc, dict):
        raise ConfigError("'pipeline' section must be a mapping")
    workdir = pipeline_doc.pop("workdir", None)
    image_dir = Path(workdir) / "images" if workdir else None

    backends = Backends(
        llm=_build_backend(backends_doc["llm"], "llm", image_dir, base_dir),
        vqa=_build_backend(backends_doc["vqa"], "vqa", image_dir, base_dir),
        t2i=_build_backend(backends_doc["t2i"], "t2i", image_dir, base_dir),
        embed=(
            _build_backend(backends_doc["embed"], "embed", image_dir, base_dir)
            if "embed" in backends_doc
            else None
        ),
    )

    templates = None
    templates_doc = doc.get("templates") or {}
    if templates_doc.get("dir"):
        tdir = Path(templates_doc["dir"])
        if not tdir.is_absolute():
            tdir = base_dir / tdir
        try:
            templates = load_template_set(tdir)
        except TemplateError as exc:
            raise ConfigError(str(exc)) from exc

    keywords = None
    keywords_doc = doc.get("keywords") or {}
    if keywords_doc.get("file"):
        kfile = Path(keywords_doc["file"])
        if not kfile.is_absolute():
            kfile = base_dir / kfile
        try:
            keywords = load_keyword_table(kfile)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"keyword file {kfile}: {exc}") from exc

    try:
        return PipelineConfig(
            backends=backends,
            templates=templates,
            keywords=keywords,
            out_dir=out_dir,
            **pipeline_doc,
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"pipeline section: {exc}") from exc
