"""Shared sidecar test fixtures."""
from __future__ import annotations

import pytest
from fastapi.testclient import TestClient

from lm_sidecar.service import create_app


@pytest.fixture(scope="session")
def client() -> TestClient:
    return TestClient(create_app(model_name="byte-rnn-32", context_len=512))


@pytest.fixture(scope="session")
def unloaded_client() -> TestClient:
    return TestClient(create_app(model_name="no-such-model"))
