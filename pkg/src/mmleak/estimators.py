"""Estimator-style wrappers for use from notebooks and scripts.

``LeakDetector.fit`` learns validated summaries from a codebase;
``predict`` scans functions with them.  ``SummaryValidator.transform``
maps candidate summaries to validation verdicts.
"""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence, Union

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analyzer_bridge import LeakWarning
from .cfg import ALLOC_PRIMITIVES, DEFAULT_PATH_CAP, FREE_PRIMITIVES, Primitives
from .extraction import Codebase, ExtractionConfig, FunctionRecord, RecordKind, parse_codebase, prefilter
from .feasibility import scan_function
from .llm_client import HeuristicClassifier
from .summaries import FunctionSummary, HintsFile
from .summary_validation import MAX_DEPTH, ValidationConfig, ValidationVerdict, validate_summaries, validated_hints

CodebaseLike = Union[Codebase, str, Path]


def _as_codebase(X: CodebaseLike) -> Codebase:
    if isinstance(X, Codebase):
        return X
    return parse_codebase(X, ExtractionConfig())


class _ConfigMixin:
    def _primitives(self) -> Primitives:
        return Primitives(tuple(self.alloc_primitives), tuple(self.free_primitives), tuple(self.sinks))

    def _validation_config(self) -> ValidationConfig:
        return ValidationConfig(self.max_depth, self.path_cap, accept_field_frees=self.accept_field_frees, primitives=self._primitives())


class SummaryValidator(_ConfigMixin, TransformerMixin, BaseEstimator):
    def __init__(
        self,
        max_depth: int = MAX_DEPTH,
        path_cap: int = DEFAULT_PATH_CAP,
        accept_field_frees: bool = False,
        alloc_primitives: Sequence[str] = ALLOC_PRIMITIVES,
        free_primitives: Sequence[str] = FREE_PRIMITIVES,
        sinks: Sequence[str] = (),
    ):
        self.max_depth = max_depth
        self.path_cap = path_cap
        self.accept_field_frees = accept_field_frees
        self.alloc_primitives = alloc_primitives
        self.free_primitives = free_primitives
        self.sinks = sinks

    def fit(self, X: CodebaseLike, y=None):
        self.codebase_ = _as_codebase(X)
        return self

    def transform(self, summaries: Sequence[FunctionSummary]) -> List[ValidationVerdict]:
        check_is_fitted(self, "codebase_")
        return validate_summaries(summaries, self.codebase_, self._validation_config())


class LeakDetector(_ConfigMixin, BaseEstimator):
    """Infer and validate summaries on ``fit``; report per-branch leaks on ``predict``.

    ``hints`` are extra summaries (for example hand-written ones for library
    functions) validated together with the inferred candidates.
    """

    def __init__(
        self,
        sinks: Sequence[str] = (),
        max_depth: int = MAX_DEPTH,
        path_cap: int = DEFAULT_PATH_CAP,
        accept_field_frees: bool = False,
        alloc_primitives: Sequence[str] = ALLOC_PRIMITIVES,
        free_primitives: Sequence[str] = FREE_PRIMITIVES,
        hints: Optional[HintsFile] = None,
    ):
        self.sinks = sinks
        self.max_depth = max_depth
        self.path_cap = path_cap
        self.accept_field_frees = accept_field_frees
        self.alloc_primitives = alloc_primitives
        self.free_primitives = free_primitives
        self.hints = hints

    def fit(self, X: CodebaseLike, y=None):
        cb = _as_codebase(X)
        clf = HeuristicClassifier(cb, self._primitives(), self.max_depth)
        candidates = [s for r in prefilter(cb) for s in clf.classify(r)]
        if self.hints is not None:
            candidates.extend(self.hints.summaries())
        self.codebase_ = cb
        self.verdicts_ = validate_summaries(candidates, cb, self._validation_config())
        self.hints_ = validated_hints(self.verdicts_)
        return self

    def predict(self, X: Optional[Union[CodebaseLike, Sequence[FunctionRecord]]] = None) -> List[LeakWarning]:
        check_is_fitted(self, "hints_")
        if X is None:
            records = self.codebase_.records
        elif isinstance(X, (Codebase, str, Path)):
            records = _as_codebase(X).records
        else:
            records = list(X)
        prims = self._primitives()
        out: List[LeakWarning] = []
        for r in records:
            if r.kind is RecordKind.FUNCTION:
                out.extend(scan_function(r, self.hints_, prims))
        return out

    def fit_predict(self, X: CodebaseLike, y=None) -> List[LeakWarning]:
        return self.fit(X).predict()
