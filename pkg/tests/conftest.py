from __future__ import annotations

from pathlib import Path

import pytest

from mmleak.extraction import parse_codebase

FIXTURES = Path(__file__).parent / "fixtures"
CORPUS = FIXTURES / "corpus"
CORPUS_SINKS = ("freerdp_settings_set_pointer_len",)


@pytest.fixture(scope="session")
def corpus():
    return parse_codebase(CORPUS)


@pytest.fixture
def fixtures_dir():
    return FIXTURES
