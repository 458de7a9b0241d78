"""
Error handling for gpsubspace
Exception hierarchy, exit-code mapping, and logging of failures with context
"""

import traceback
import logging
import json
import inspect
from datetime import datetime
from typing import Dict, Any, Optional, Tuple


def configure_logging(level: str = "INFO", log_file: Optional[str] = None) -> None:
    """
    Configure root logging for the command-line entry point

    Parameters:
    -----------
    level : str
        Logging level name, e.g. "INFO" or "DEBUG"
    log_file : str, optional
        Path of a log file written in addition to stderr
    """
    handlers = [logging.StreamHandler()]
    if log_file:
        handlers.append(logging.FileHandler(log_file))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True
    )


class GpsError(Exception):
    """Base class of every error raised by gpsubspace"""

    exit_code = 1

    def __init__(self, message: str = "", context: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.context = context or {}


class InputError(GpsError):
    """Malformed input files, non-finite values, invalid arguments"""

    exit_code = 2


class ShapeError(GpsError):
    """Dimension and shape disagreements"""

    exit_code = 3


class NumericalError(GpsError):
    """Numerical breakdowns in a factorization or iteration"""

    exit_code = 1


class MalformedInputError(InputError):
    pass


class NonFiniteError(InputError):
    pass


class NotOrthonormalError(InputError):
    pass


class NotPSDError(InputError):
    pass


class EmptySampleError(InputError):
    pass


class TruncationOutOfRangeError(InputError):
    pass


class InsufficientNeighborsError(InputError):
    pass


class ConfigError(InputError):
    pass


class DimensionMismatchError(ShapeError):
    pass


class ShapeMismatchError(ShapeError):
    pass


class BaseMismatchError(ShapeError):
    pass


class BadDimensionError(ShapeError):
    pass


class RankDeficientError(NumericalError):
    pass


class CutLocusError(NumericalError):
    pass


class DegenerateWeightsError(NumericalError):
    pass


class SingularCorrelationError(NumericalError):
    pass


class DegenerateSpectrumError(NumericalError):
    pass


class SingularStepError(NumericalError):
    pass


class ZeroNormError(NumericalError):
    pass


class ErrorHandler:
    """
    Handles, logs, and formats errors for the CLI and the benchmark runner
    """

    def __init__(self, logger_name: str = "gpsubspace"):
        """Initialize the error handler with a specific logger"""
        self.logger = logging.getLogger(logger_name)

    def log_error(self, error: Exception, context: Optional[Dict[str, Any]] = None) -> None:
        """
        Log an error with context information

        Parameters:
        -----------
        error : Exception
            The exception object
        context : Dict[str, Any], optional
            Additional context information about where the error occurred
        """
        frame = inspect.currentframe().f_back
        func_name = frame.f_code.co_name if frame else "unknown_function"
        line_no = frame.f_lineno if frame else 0

        self.logger.error(
            f"Error in {func_name} (line {line_no}): {str(error) or type(error).__name__}"
        )

        # Expected failures carry their own context; only unexpected ones get a traceback
        if not isinstance(error, GpsError) and error.__traceback__ is not None:
            self.logger.error("".join(traceback.format_tb(error.__traceback__)))

        merged = dict(getattr(error, "context", {}) or {})
        if context:
            merged.update(context)
        if merged:
            self.logger.error(f"Context: {json.dumps(merged, default=str)}")

    def handle_error(self, error: Exception, context: Optional[Dict[str, Any]] = None) -> Dict[str, Any]:
        """
        Handle an error, log it, and return a formatted error response

        Parameters:
        -----------
        error : Exception
            The exception object
        context : Dict[str, Any], optional
            Additional context information about where the error occurred

        Returns:
        --------
        Dict[str, Any]
            Formatted error response
        """
        self.log_error(error, context)

        error_type = type(error).__name__
        error_msg = str(error) or f"{error_type} raised without a message"

        response = {
            "status": "error",
            "error": error_msg,
            "error_type": error_type,
            "exit_code": self.exit_code_for(error),
            "timestamp": datetime.now().isoformat()
        }

        merged = dict(getattr(error, "context", {}) or {})
        if context:
            merged.update(context)
        if merged:
            response["context"] = {k: str(v) for k, v in merged.items()}

        return response

    @staticmethod
    def exit_code_for(error: BaseException) -> int:
        """Exit code of the CLI contract: 0 ok, 1 internal, 2 input parse, 3 shape"""
        if isinstance(error, GpsError):
            return error.exit_code
        return 1

    def format_cli_error(self, error: Exception) -> Tuple[Dict[str, Any], int]:
        """
        Format an error for the command-line interface

        Parameters:
        -----------
        error : Exception
            The exception object

        Returns:
        --------
        Tuple[Dict[str, Any], int]
            Tuple containing the error response and the process exit code
        """
        error_response = self.handle_error(error)
        return error_response, error_response["exit_code"]


# Create a global instance of the error handler
error_handler = ErrorHandler()
