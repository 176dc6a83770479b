"""Optional smoke test against real endpoints.

Point PROMPTREFINE_LIVE_CONFIG at a config file with reachable http backends
to enable it. Asserts completion only, never scores.
"""

import os

import pytest

from promptrefine.config import load_config
from promptrefine.pipeline import run_single

LIVE_CONFIG = os.environ.get("PROMPTREFINE_LIVE_CONFIG")

pytestmark = pytest.mark.skipif(
    not LIVE_CONFIG, reason="set PROMPTREFINE_LIVE_CONFIG to run the live smoke test"
)


def test_one_prompt_completes(tmp_path):
    cfg = load_config(LIVE_CONFIG, out_dir=tmp_path)
    record = run_single("a blue motorcycle parked beside a white fence", cfg)
    assert record.status == "completed", record.error
    assert record.image_refs
    assert record.reports
