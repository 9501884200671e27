import pytest


@pytest.fixture(autouse=True)
def _isolated_cache_env(monkeypatch):
    # Tests choose cache directories explicitly; never inherit one.
    monkeypatch.delenv("MIXPREC_CACHE_DIR", raising=False)
