import pytest

from mfd.core.config import get_settings
from mfd.core.errors import DataValidationError, EstimationError, MfdError, ParameterError, PositivityError, log_and_raise
from mfd.core.logging import get_logger


def test_settings_follow_environment(monkeypatch):
    assert get_settings().MFD_SEED is None
    monkeypatch.setenv("MFD_SEED", "42")
    monkeypatch.setenv("MFD_JOBS", "4")
    s = get_settings()
    assert s.MFD_SEED == 42
    assert s.MFD_JOBS == 4
    assert get_settings() is s


def test_error_taxonomy():
    assert issubclass(PositivityError, DataValidationError)
    assert issubclass(DataValidationError, ValueError)
    assert issubclass(ParameterError, MfdError)
    assert issubclass(EstimationError, RuntimeError)
    err = DataValidationError("bad value", line=7)
    assert err.line == 7
    assert str(err) == "line 7: bad value"


def test_log_and_raise_reraises():
    with pytest.raises(ParameterError, match="alpha"):
        log_and_raise(get_logger("test"), ParameterError("alpha out of range"))
