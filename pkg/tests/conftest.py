import math
from pathlib import Path

import pytest

from gatemix.backend import GenerationTrace, MockBackend
from gatemix.evalharness import load_benchmark

FIXTURES = Path(__file__).parent / "fixtures"


def make_trace(text: str, s: float, c: float, mode: str) -> GenerationTrace:
    """Trace whose similarity score is exactly s and confidence exactly c."""
    cos = 2.0 * s - 1.0
    return GenerationTrace(
        text=text,
        token_logprobs=(math.log(c),),
        img_rep=(1.0, 0.0),
        txt_rep=(cos, math.sqrt(max(0.0, 1.0 - cos * cos))),
        prompt_mode=mode,
    )


@pytest.fixture()
def easy_hard_backend():
    return MockBackend.from_json(FIXTURES / "easy_hard_script.json")


@pytest.fixture()
def easy_hard_instances():
    instances, errors = load_benchmark(FIXTURES / "easy_hard_benchmark.jsonl")
    assert not errors
    return instances


@pytest.fixture()
def sweep_backend():
    return MockBackend.from_json(FIXTURES / "sweep_script.json")


@pytest.fixture()
def sweep_instances():
    instances, errors = load_benchmark(FIXTURES / "sweep_benchmark.jsonl")
    assert not errors
    return instances
