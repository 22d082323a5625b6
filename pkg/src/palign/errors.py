"""Exception hierarchy. Every error carries a stable string code."""


class PalignError(Exception):
    code = "E_PALIGN"

    def __init__(self, message: str = ""):
        super().__init__(f"{self.code}: {message}" if message else self.code)
        self.message = message


class NumericError(PalignError):
    code = "E_NUMERIC"


class DegenerateVectorError(PalignError):
    code = "E_DEGENERATE_VECTOR"


class ConfigError(PalignError):
    code = "E_CONFIG"


class CalibrationError(PalignError):
    code = "E_CALIBRATION"


class SupportError(PalignError):
    code = "E_SUPPORT"


class ReportIOError(PalignError):
    code = "E_IO"


# Diagnostic counter keys (never raised, only counted).
PROB_FLOOR = "E_PROB_FLOOR"
UNIFORM_FALLBACK = "uniform_fallback"
