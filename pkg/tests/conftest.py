import pytest


@pytest.fixture(autouse=True)
def isolated_environment(monkeypatch, tmp_path_factory):
    """Keep log files and stage cache databases out of the checkout."""
    monkeypatch.setenv("PEEL_LOG_DIR", str(tmp_path_factory.getbasetemp() / "logs"))
    monkeypatch.setenv("PEEL_LOG_LEVEL", "WARNING")
    monkeypatch.delenv("PEEL_DB_STRING", raising=False)
