import json

import pytest

from mmleak.extraction import (
    ExtractionConfig,
    ExtractionError,
    FunctionRecord,
    RecordKind,
    SourceSpan,
    dump_codebase,
    load_codebase,
    parse_codebase,
    parse_source,
    prefilter,
    write_index,
)

from conftest import CORPUS
from helpers import codebase_from


def test_minimal_main():
    records, _, diags = parse_source("int main(void){return 0;}", "m.c")
    assert len(records) == 1 and not diags
    r = records[0]
    assert (r.name, r.return_type, r.params, r.kind) == ("main", "int", (), RecordKind.FUNCTION)
    assert r.span == SourceSpan("m.c", 1, 1)


def test_clone_callees(corpus):
    clone = corpus.lookup("freerdp_certificate_clone")
    assert "freerdp_certificate_new" in clone.callees
    assert clone.callees[0] == "freerdp_certificate_new"
    assert clone.return_type == "rdpCertificate *"
    assert clone.params == (("certificate", "const rdpCertificate *"),)
    assert "freerdp_certificate_new" in corpus.call_graph_edges["freerdp_certificate_clone"]


def test_typedef_pointer_aliases(tmp_path):
    cb = codebase_from(tmp_path, {"t.h": "typedef struct S* SPtr;\ntypedef SPtr Handle;\ntypedef int Count;\ntypedef struct S Plain;\n"})
    table = cb.alias_table
    assert table.is_pointer_type("SPtr") and table.is_pointer_type("Handle") and table.is_pointer_type("const Handle")
    assert not table.is_pointer_type("Count") and not table.is_pointer_type("Plain")
    assert table.is_pointer_type("Plain *")


def test_typedef_cycle_is_broken(tmp_path):
    cb = codebase_from(tmp_path, {"c.h": "typedef B A;\ntypedef A B;\nint f(A x){ return 0; }\n"})
    assert any("cycle" in d for d in cb.diagnostics)
    assert not cb.alias_table.is_pointer_type("A")


def test_macros_are_recorded(corpus):
    macros = [r for r in corpus.records if r.kind is RecordKind.MACRO]
    assert [m.name for m in macros] == ["XMALLOC", "XFREE", "LOG_MSG"]
    assert macros[0].params == (("n", ""),) and macros[0].callees == ("malloc",)


def test_syntax_errors_are_not_fatal(tmp_path):
    cb = codebase_from(tmp_path, {"ok.c": "int ok(void){ return 1; }\n", "bad.c": "int broken( { ;;\nint fine(void){ return 2; }\n"})
    assert cb.lookup("ok") is not None and cb.lookup("fine") is not None
    assert any(d.startswith("bad.c") for d in cb.diagnostics)


def test_binary_file_skipped(tmp_path):
    (tmp_path / "blob.c").write_bytes(b"\x00\x01\x02")
    (tmp_path / "a.c").write_text("int a(void){ return 0; }\n")
    cb = parse_codebase(tmp_path)
    assert [r.name for r in cb.records] == ["a"]
    assert any("binary" in d for d in cb.diagnostics)


def test_conditional_compilation_diagnostic(tmp_path):
    cb = codebase_from(tmp_path, {"p.c": "#ifdef FAST\nint f(void){ return 1; }\n#else\nint f(void){ return 2; }\n#endif\n"})
    assert len([r for r in cb.records if r.name == "f"]) == 2
    assert any("conditional-compilation" in d for d in cb.diagnostics)


def test_cpp_sources(tmp_path):
    src = "namespace n {\nstruct W { int *p; };\nW *make() { return new W(); }\nvoid drop(W *w) { delete w; }\n}\n"
    cb = codebase_from(tmp_path, {"w.cpp": src})
    assert {r.name for r in cb.records} >= {"make", "drop"}
    assert cb.lookup("make").language == "cpp"


def test_unreadable_root(tmp_path):
    with pytest.raises(ExtractionError):
        parse_codebase(tmp_path / "missing")
    with pytest.raises(ExtractionError):
        parse_codebase(tmp_path)  # no sources


def test_lookup_prefers_file(tmp_path):
    cb = codebase_from(tmp_path, {"a.c": "static int h(void){ return 1; }\n", "b.c": "static int h(void){ return 2; }\n"})
    assert cb.lookup("h", "b.c").span.file == "b.c"
    assert cb.function_at("a.c", 1).name == "h"


# -- prefilter -----------------------------------------------------------------


def rec(name, ret="int", params=(), kind=RecordKind.FUNCTION):
    return FunctionRecord(name, ret, tuple(params), "", (), kind, SourceSpan("x.c", 1, 1))


def test_prefilter_rules(tmp_path):
    cb = codebase_from(tmp_path, {"x.c": "int x(void){ return 0; }\n"})
    from dataclasses import replace

    cb = replace(
        cb,
        records=(
            rec("main", "char *"),
            rec("add", "int", [("a", "int"), ("b", "int")]),
            rec("LOG_MSG", "", [], RecordKind.MACRO),
            rec("mk", "char *"),
            rec("test_mk", "char *"),
            rec("sink", "void", [("p", "void *")]),
        ),
    )
    assert [r.name for r in prefilter(cb)] == ["LOG_MSG", "mk", "sink"]


def test_prefilter_on_corpus_is_deterministic():
    runs = [json.dumps([r.to_dict() for r in prefilter(parse_codebase(CORPUS))]).encode() for _ in range(3)]
    assert runs[0] == runs[1] == runs[2]
    names = [r["name"] for r in json.loads(runs[0])]
    assert "main" not in names and not any("test" in n for n in names)
    assert {"XMALLOC", "XFREE", "LOG_MSG"} <= set(names)


def test_custom_entry_points_and_test_marker(corpus):
    names = [r.name for r in prefilter(corpus, ExtractionConfig(entry_points=("dup_name",), test_substring="clone"))]
    assert "dup_name" not in names and "freerdp_certificate_clone" not in names
    assert "test_make_buffer" in names


# -- persistence ------------------------------------------------------------------


def test_index_and_dump_round_trip(corpus, tmp_path):
    written = write_index(corpus, tmp_path / "index")
    # certificate.h holds only declarations, so it has no records and no index file
    assert sorted(p.relative_to(tmp_path / "index").as_posix() for p in written) == [
        "freerdp/certificate.c.jsonl",
        "freerdp/settings.c.jsonl",
        "openssl/pcy_tree.c.jsonl",
        "util/buffers.c.jsonl",
    ]
    lines = (tmp_path / "index" / "util/buffers.c.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["records"] == len(lines) - 1
    dump_codebase(corpus, tmp_path / "cb.json")
    back = load_codebase(tmp_path / "cb.json")
    assert back.records == corpus.records
    assert back.alias_table.aliases == corpus.alias_table.aliases
    assert back.alias_table.is_pointer_type("rdpCertificate *") and not back.alias_table.is_pointer_type("rdpCertificate")


def test_load_malformed_index(tmp_path):
    (tmp_path / "cb.json").write_text("{ nope")
    with pytest.raises(ExtractionError, match="1:3"):
        load_codebase(tmp_path / "cb.json")
