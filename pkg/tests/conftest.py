import json

import pytest

from vqarephrase.datamodel import ImageRef
from vqarephrase.model_client import MockBackend, ModelClient
from vqarephrase.prompts import PromptRegistry
from vqarephrase.synthetic import make_mock_table, write_bundle


@pytest.fixture(scope="session")
def registry() -> PromptRegistry:
    return PromptRegistry.load()


@pytest.fixture(scope="session")
def chat_registry() -> PromptRegistry:
    return PromptRegistry.load(style="chat")


@pytest.fixture
def image() -> ImageRef:
    return ImageRef.from_source("img_0001", "images/img_0001.jpg")


@pytest.fixture
def default_table() -> dict:
    return make_mock_table()


def make_client(table: dict, **kwargs) -> tuple[ModelClient, MockBackend]:
    backend = MockBackend(table)
    return ModelClient(backend, **kwargs), backend


@pytest.fixture
def client_and_backend(default_table):
    return make_client(default_table)


@pytest.fixture
def synthetic_bundle(tmp_path):
    """(dataset.jsonl path, mock_table.json path) with 25 instances."""
    return write_bundle(tmp_path / "inputs", count=25, seed=0)


def write_table(tmp_path, table: dict, name: str = "table.json"):
    path = tmp_path / name
    path.write_text(json.dumps(table), encoding="utf-8")
    return path
