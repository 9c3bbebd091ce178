from __future__ import annotations

from pathlib import Path

import pytest

from fedrag.sim import SimConfig, build_sim

FIXTURE_DIR = Path(__file__).parent / "fixtures"
CORPORA = tuple(str(FIXTURE_DIR / f"silo{i}.jsonl") for i in range(4))
QUESTIONS_PATH = FIXTURE_DIR / "questions10.jsonl"


def make_sim_config(**overrides) -> SimConfig:
    kwargs = {"corpora": CORPORA, "seed": 7}
    kwargs.update(overrides)
    return SimConfig(**kwargs)


@pytest.fixture
def sim_federation():
    return build_sim(make_sim_config())


@pytest.fixture
def fixture_snippet_texts() -> list[str]:
    import json

    texts = []
    for path in CORPORA:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    texts.append(json.loads(line)["text"])
    return texts
