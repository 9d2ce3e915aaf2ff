import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from mmleak.estimators import LeakDetector, SummaryValidator
from mmleak.summaries import FunctionSummary, HintsFile
from mmleak.summary_validation import Outcome

from conftest import CORPUS, CORPUS_SINKS


def test_leak_detector_on_corpus(corpus):
    det = LeakDetector(sinks=CORPUS_SINKS).fit(corpus)
    assert "freerdp_certificate_clone" in det.hints_.allocators()
    found = sorted((w.function, w.line) for w in det.predict())
    assert found == [("X509_policy_check", 66), ("freerdp_settings_set_certificate", 18)]


def test_fit_from_path_and_fit_predict():
    found = LeakDetector(sinks=CORPUS_SINKS).fit_predict(str(CORPUS))
    assert len(found) == 2


def test_without_sink_the_success_path_is_flagged_too(corpus):
    found = LeakDetector().fit(corpus).predict([corpus.lookup("freerdp_settings_set_certificate")])
    assert len(found) == 1  # one warning per allocation site


def test_params_and_clone():
    det = LeakDetector(sinks=("s",), max_depth=4)
    assert det.get_params()["max_depth"] == 4
    twin = clone(det)
    assert twin.get_params() == det.get_params() and twin is not det
    with pytest.raises(NotFittedError):
        det.predict()


def test_extra_hints_are_validated(corpus):
    extra = HintsFile.from_summaries([FunctionSummary.deallocator("certificate_free_int", 0)])
    det = LeakDetector(hints=extra).fit(corpus)
    assert "certificate_free_int" not in det.hints_.hints
    det = LeakDetector(hints=extra, accept_field_frees=True).fit(corpus)
    assert det.hints_.freed_args("certificate_free_int") == [0]


def test_summary_validator(corpus):
    sv = SummaryValidator().fit(corpus)
    verdicts = sv.transform([FunctionSummary.allocator("dup_name"), FunctionSummary.allocator("process_buffer")])
    assert [v.outcome for v in verdicts] == [Outcome.VALID, Outcome.REJECTED]
    with pytest.raises(NotFittedError):
        SummaryValidator().transform([])
