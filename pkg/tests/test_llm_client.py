import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import pytest

from mmleak.llm_client import (
    CacheMiss,
    ClientConfig,
    CompletionExchange,
    HeuristicClassifier,
    PermanentError,
    TransientError,
    cache_key,
    complete,
    heuristic_classify,
    store_exchange,
)
from mmleak.summaries import FunctionSummary, Provenance

from helpers import codebase_from


class Stub:
    """Chat-completions stub answering from a queue of (status, body) pairs."""

    def __init__(self, replies):
        self.replies = list(replies)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers["Content-Length"])
                stub.requests.append((dict(self.headers), json.loads(self.rfile.read(n))))
                status, body = stub.replies.pop(0) if len(stub.replies) > 1 else stub.replies[0]
                data = json.dumps(body).encode() if not isinstance(body, bytes) else body
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def log_message(self, *args):
                pass

        self.server = HTTPServer(("127.0.0.1", 0), Handler)
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)

    @property
    def url(self):
        return f"http://127.0.0.1:{self.server.server_port}/v1/chat/completions"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def reply(text):
    return 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}


def test_config_validation():
    with pytest.raises(ValueError):
        ClientConfig(timeout=0)
    with pytest.raises(ValueError):
        ClientConfig(max_retries=-1)
    with pytest.raises(ValueError):
        ClientConfig(mode="sometimes")


def test_cache_key_depends_on_model_and_prompt():
    assert cache_key("p", "m") != cache_key("p", "n") != cache_key("q", "m")
    assert len(cache_key("p", "m")) == 64


def test_replay_hit_makes_no_request(tmp_path):
    cfg = ClientConfig(endpoint="http://127.0.0.1:9/none", mode="replay", cache_dir=str(tmp_path))
    store_exchange(cfg, CompletionExchange("hello", "world", cache_key("hello", cfg.model_id)))
    assert complete(cfg, "hello") == "world"


def test_replay_miss(tmp_path):
    cfg = ClientConfig(mode="replay", cache_dir=str(tmp_path))
    with pytest.raises(CacheMiss):
        complete(cfg, "never seen")


def test_record_mode_against_stub(tmp_path, monkeypatch):
    monkeypatch.setenv("MMLEAK_API_KEY", "sekrit")
    with Stub([reply('{"hints": []}')]) as stub:
        cfg = ClientConfig(endpoint=stub.url, model_id="gen", mode="record", cache_dir=str(tmp_path))
        assert complete(cfg, "classify me") == '{"hints": []}'
        headers, body = stub.requests[0]
        assert body["model"] == "gen" and body["temperature"] == 0
        assert body["messages"] == [{"role": "user", "content": "classify me"}]
        assert headers["Authorization"] == "Bearer sekrit"
        # the second call is served from the cache
        assert complete(cfg, "classify me") == '{"hints": []}'
        assert len(stub.requests) == 1
    entry = json.loads((tmp_path / f"{cache_key('classify me', 'gen')}.json").read_text())
    assert entry["response"] == '{"hints": []}' and entry["prompt"] == "classify me"


def test_transient_errors_are_retried(tmp_path):
    with Stub([(503, {"error": "busy"}), (429, {"error": "slow down"}), reply("ok")]) as stub:
        cfg = ClientConfig(endpoint=stub.url, mode="live", max_retries=3)
        assert complete(cfg, "p", backoff=0) == "ok"
        assert len(stub.requests) == 3


def test_retries_exhausted(tmp_path):
    with Stub([(500, {"error": "down"})]) as stub:
        cfg = ClientConfig(endpoint=stub.url, mode="live", max_retries=1)
        with pytest.raises(TransientError):
            complete(cfg, "p", backoff=0)
        assert len(stub.requests) == 2


def test_permanent_errors_not_retried():
    with Stub([(401, {"error": "bad key"})]) as stub:
        cfg = ClientConfig(endpoint=stub.url, mode="live", max_retries=3)
        with pytest.raises(PermanentError):
            complete(cfg, "p", backoff=0)
        assert len(stub.requests) == 1
    with Stub([(200, {"unexpected": True})]) as stub:
        with pytest.raises(PermanentError):
            complete(ClientConfig(endpoint=stub.url, mode="live"), "p")


def test_unreachable_endpoint_is_transient():
    cfg = ClientConfig(endpoint="http://127.0.0.1:9/v1", mode="live", max_retries=0, timeout=2)
    with pytest.raises(TransientError):
        complete(cfg, "p")


# -- offline classifier -------------------------------------------------------------------


def test_direct_primitive_allocator(tmp_path):
    cb = codebase_from(tmp_path, {"a.c": "void *mk(size_t n){ return malloc(n); }\n"})
    out = heuristic_classify(cb.lookup("mk"), cb)
    assert out == [FunctionSummary.allocator("mk")] and out[0].provenance is Provenance.HEURISTIC


def test_no_memory_behavior(tmp_path):
    cb = codebase_from(tmp_path, {"a.c": "int f(int x){ return x + 1; }\n"})
    assert heuristic_classify(cb.lookup("f"), cb) == []


def test_free_chain(corpus):
    clf = HeuristicClassifier(corpus)
    assert clf.classify(corpus.lookup("freerdp_certificate_free")) == [FunctionSummary.deallocator("freerdp_certificate_free", 0)]
    assert clf.classify(corpus.lookup("freerdp_certificate_clone")) == [FunctionSummary.allocator("freerdp_certificate_clone")]
    # frees a field of its argument only
    assert clf.classify(corpus.lookup("certificate_free_int")) == []


def test_macros_classified(corpus):
    clf = HeuristicClassifier(corpus)
    assert clf.classify(corpus.lookup("XMALLOC")) == [FunctionSummary.allocator("XMALLOC")]
    assert clf.classify(corpus.lookup("XFREE")) == [FunctionSummary.deallocator("XFREE", 0)]
    assert clf.classify(corpus.lookup("LOG_MSG")) == []


def test_returns_argument_is_not_allocator(tmp_path):
    cb = codebase_from(tmp_path, {"a.c": "char *id(char *p){ return p; }\nstatic char buf[8];\nchar *stat(void){ return buf; }\n"})
    assert heuristic_classify(cb.lookup("id"), cb) == []
    assert heuristic_classify(cb.lookup("stat"), cb) == []


def test_recursive_classification_terminates(tmp_path):
    src = "void *a(int n){ if (n) return b(n); return malloc(1); }\nvoid *b(int n){ return a(n - 1); }\n"
    cb = codebase_from(tmp_path, {"r.c": src})
    clf = HeuristicClassifier(cb)
    assert clf.classify(cb.lookup("b")) == [FunctionSummary.allocator("b")]
