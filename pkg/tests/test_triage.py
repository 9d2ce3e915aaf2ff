import pytest

from mmleak.analyzer_bridge import LeakWarning, Source, Status, TraceStep
from mmleak.extraction import SourceSpan
from mmleak.triage import (
    MARKER,
    TriageParseError,
    build_triage_prompt,
    group_by_function,
    parse_triage_verdict,
    triage_function,
)

FILE = "freerdp/settings.c"
SOURCE = """BOOL set(rdpSettings *settings, size_t id, const rdpCertificate *src)
{
\trdpCertificate *cert = freerdp_certificate_clone(src);
\tif (!cert)
\t\tgoto out_fail;
\tif (!freerdp_settings_set_pointer_len(settings, id, cert, 1))
\t\tgoto out_fail;
\treturn TRUE;
out_fail:
\treturn FALSE;
}"""
FIRST = 8

TRUE_SHAPE = '{"verdict": true, "confidence": 0.9, "reason": "leak on error path", "bug_indices": [1]}'
FALSE_SHAPE = '{"verdict": false, "confidence": 0.8, "reason": "callee frees", "bug_indices": []}'
MISSING = '{"verdict": true, "bug_indices": [1]}'


def warning(line, alloc=10, trace=()):
    return LeakWarning(
        Source.CODEQL,
        FILE,
        "set",
        line,
        message="memory may not be freed",
        allocation_site=SourceSpan(FILE, alloc, alloc),
        trace=[TraceStep(SourceSpan(FILE, ln, ln), txt) for ln, txt in trace],
        status=Status.RETAINED,
    )


def test_prompt_single_warning_with_two_step_trace():
    w = warning(17, trace=[(10, "allocated"), (13, "setter fails")])
    prompt = build_triage_prompt([w], SOURCE, "FreeRDP", FIRST)
    assert "**Project:** FreeRDP" in prompt and "**Function:** set" in prompt
    assert "1. Line 17: memory may not be freed" in prompt
    assert f"{FILE}:10: allocated" in prompt and f"{FILE}:13: setter fails" in prompt
    assert "`rdpCertificate *cert = freerdp_certificate_clone(src);`" in prompt
    assert prompt.count(MARKER) == 1
    assert f"\treturn FALSE;  {MARKER}" in prompt
    assert "{source" not in prompt and "{bug_type_desc}" not in prompt


def test_prompt_two_warnings():
    prompt = build_triage_prompt([warning(17), warning(15)], SOURCE, "FreeRDP", FIRST)
    assert "1. Line 17" in prompt and "2. Line 15" in prompt
    assert prompt.count(MARKER) == 2


def test_out_of_range_line_keeps_issue_and_reports():
    diags = []
    prompt = build_triage_prompt([warning(99)], SOURCE, "FreeRDP", FIRST, diags)
    assert "1. Line 99" in prompt
    assert prompt.count(MARKER) == 0
    assert len(diags) == 1 and "99" in diags[0]


def test_prompt_requires_single_function():
    other = LeakWarning(Source.CODEQL, FILE, "other", 3)
    with pytest.raises(ValueError):
        build_triage_prompt([warning(17), other], SOURCE, "p")
    with pytest.raises(ValueError):
        build_triage_prompt([], SOURCE, "p")


def test_parse_true_shape():
    v = parse_triage_verdict(TRUE_SHAPE)
    assert v.verdict is True and v.bug_indices == (1,) and v.confidence == 0.9


def test_parse_false_shape():
    v = parse_triage_verdict(FALSE_SHAPE)
    assert v.verdict is False and v.bug_indices == ()


def test_parse_missing_keys_fails():
    with pytest.raises(TriageParseError):
        parse_triage_verdict(MISSING)


@pytest.mark.parametrize(
    "resp",
    [
        '{"verdict": "yes", "confidence": 0.9, "reason": "r", "bug_indices": [1]}',
        '{"verdict": true, "confidence": 1.5, "reason": "r", "bug_indices": [1]}',
        '{"verdict": true, "confidence": 0.5, "reason": 3, "bug_indices": [1]}',
        '{"verdict": true, "confidence": 0.5, "reason": "r", "bug_indices": ["1"]}',
        '{"verdict": false, "confidence": 0.5, "reason": "r", "bug_indices": [1]}',
        '{"verdict": true, "confidence": 0.5, "reason": "r", "bug_indices": [3]}',
        "not json",
    ],
)
def test_parse_rejects_ill_typed(resp):
    with pytest.raises(TriageParseError):
        parse_triage_verdict(resp, n_issues=2)


def test_parse_ignores_surrounding_text():
    assert parse_triage_verdict("Here you go:\n" + TRUE_SHAPE + "\nthanks").verdict


def test_triage_function_statuses():
    ws = [warning(17), warning(15)]
    out = triage_function(ws, SOURCE, "p", lambda _: '{"verdict": true, "confidence": 0.7, "reason": "second", "bug_indices": [2]}', FIRST)
    assert [(w.status, w.verdict) for w in out] == [(Status.TRIAGED, "false"), (Status.TRIAGED, "true")]

    out = triage_function(ws, SOURCE, "p", lambda _: FALSE_SHAPE, FIRST)
    assert [(w.status, w.verdict) for w in out] == [(Status.TRIAGED, "false")] * 2

    out = triage_function(ws, SOURCE, "p", lambda _: MISSING, FIRST)
    assert [(w.status, w.verdict) for w in out] == [(Status.UNTRIAGED, None)] * 2
    assert "unparseable" in out[0].notes


def test_transport_failure_is_untriaged():
    def boom(_):
        raise TimeoutError("slow")

    out = triage_function([warning(17)], SOURCE, "p", boom, FIRST)
    assert out[0].status is Status.UNTRIAGED and "slow" in out[0].notes


def test_group_by_function():
    ws = [warning(17), LeakWarning(Source.CODEQL, FILE, "g", 3), warning(15)]
    groups = group_by_function(ws)
    assert [len(v) for v in groups.values()] == [2, 1]
