"""Summary-guided memory-leak detection for C/C++ sources."""

from .extraction import Codebase, FunctionRecord, parse_codebase
from .summaries import FunctionSummary, HintsFile, Role, read_hints, write_hints
from .cfg import Cfg, build_cfg
from .summary_validation import validate_summaries
from .feasibility import check_leak_feasible, filter_warnings, scan_function
from .estimators import LeakDetector, SummaryValidator

__version__ = "0.1.0"

__all__ = [
    "Cfg",
    "Codebase",
    "FunctionRecord",
    "FunctionSummary",
    "HintsFile",
    "LeakDetector",
    "Role",
    "SummaryValidator",
    "build_cfg",
    "check_leak_feasible",
    "filter_warnings",
    "parse_codebase",
    "read_hints",
    "scan_function",
    "validate_summaries",
    "write_hints",
]
