import json

import pytest

from lance.backend import load_mock
from lance.corpus import SeedRecord


@pytest.fixture
def make_mock(tmp_path):
    """Factory: write a script of entries and load a mock backend from it."""

    def _make(entries, seed=0, name="script.json"):
        path = tmp_path / name
        path.write_text(json.dumps({"entries": entries}), encoding="utf-8")
        return load_mock(path, seed)

    return _make


@pytest.fixture
def seed_record():
    def _make(instruction="explain how to fold paper cranes step by step",
              response="start with a square sheet then follow the eight classic folds in order",
              **kwargs):
        return SeedRecord(instruction=instruction, response=response, **kwargs)

    return _make
