import pytest

from config import load_settings, resolve_num_threads
from error_handler import InputError


def test_defaults(monkeypatch, tmp_path):
    for name in ("GPS_NUM_THREADS", "GPS_LOG_LEVEL", "GPS_LOG_FILE"):
        monkeypatch.delenv(name, raising=False)
    settings = load_settings(dotenv_path=str(tmp_path / "missing.env"))
    assert settings.num_threads == 1
    assert settings.log_level == "INFO"
    assert settings.log_file is None


def test_environment_and_overrides(monkeypatch, tmp_path):
    monkeypatch.setenv("GPS_NUM_THREADS", "4")
    monkeypatch.setenv("GPS_LOG_LEVEL", "DEBUG")
    settings = load_settings(dotenv_path=str(tmp_path / "missing.env"))
    assert (settings.num_threads, settings.log_level) == (4, "DEBUG")
    assert load_settings(num_threads=2, log_level="WARNING").num_threads == 2
    assert resolve_num_threads() == 4
    assert resolve_num_threads(3) == 3


def test_dotenv_file(monkeypatch, tmp_path):
    monkeypatch.delenv("GPS_NUM_THREADS", raising=False)
    env = tmp_path / ".env"
    env.write_text("GPS_NUM_THREADS=3\n")
    assert load_settings(dotenv_path=str(env)).num_threads == 3
    monkeypatch.delenv("GPS_NUM_THREADS", raising=False)


@pytest.mark.parametrize("raw", ["0", "-2", "many"])
def test_invalid_thread_count(monkeypatch, raw):
    monkeypatch.setenv("GPS_NUM_THREADS", raw)
    with pytest.raises(InputError):
        resolve_num_threads()
