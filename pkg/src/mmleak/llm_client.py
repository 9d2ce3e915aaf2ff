"""Completion client with a record/replay cache, plus an offline classifier.

The transport speaks the common chat-completions JSON shape::

    POST <endpoint>
    {"model": ..., "temperature": ..., "messages": [{"role": "user", "content": prompt}]}
    -> {"choices": [{"message": {"content": "..."}}]}

Exchanges are cached as one JSON file per sha256(model_id + NUL + prompt).
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Set

from .cfg import CfgError, NodeKind, Primitives, build_cfg
from .extraction import Codebase, FunctionRecord, RecordKind
from .summaries import FunctionSummary, Provenance
from .summary_validation import MAX_DEPTH, alias_closure

log = logging.getLogger(__name__)

MODES = ("live", "record", "replay")


class ClientError(RuntimeError):
    pass


class TransientError(ClientError):
    """Timeouts, rate limits and server errors; worth retrying later."""


class PermanentError(ClientError):
    """Authentication or request errors that retrying will not fix."""


class CacheMiss(ClientError):
    pass


@dataclass
class ClientConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model_id: str = "generation"
    api_key_env: str = "MMLEAK_API_KEY"
    timeout: float = 60.0
    max_retries: int = 3
    temperature: float = 0.0
    mode: str = "record"
    cache_dir: Optional[str] = None

    def __post_init__(self):
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


# the light model proposes summaries, the strong one reviews warnings
DEFAULT_PROFILES = {
    "generation": ClientConfig(model_id="generation"),
    "triage": ClientConfig(model_id="triage"),
}


@dataclass(frozen=True)
class CompletionExchange:
    prompt: str
    response: str
    cache_key: str


def cache_key(prompt: str, model_id: str) -> str:
    return hashlib.sha256(model_id.encode("utf-8") + b"\0" + prompt.encode("utf-8")).hexdigest()


_write_lock = threading.Lock()


def _cache_path(config: ClientConfig, key: str) -> Optional[Path]:
    return Path(config.cache_dir) / f"{key}.json" if config.cache_dir else None


def load_exchange(config: ClientConfig, prompt: str) -> Optional[CompletionExchange]:
    key = cache_key(prompt, config.model_id)
    path = _cache_path(config, key)
    if path is None or not path.exists():
        return None
    doc = json.loads(path.read_text(encoding="utf-8"))
    return CompletionExchange(doc["prompt"], doc["response"], key)


def store_exchange(config: ClientConfig, exchange: CompletionExchange) -> None:
    path = _cache_path(config, exchange.cache_key)
    if path is None:
        return
    doc = {"model_id": config.model_id, "prompt": exchange.prompt, "response": exchange.response}
    with _write_lock:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
        tmp.replace(path)


def _post(config: ClientConfig, prompt: str) -> str:
    body = json.dumps(
        {
            "model": config.model_id,
            "temperature": config.temperature,
            "messages": [{"role": "user", "content": prompt}],
        }
    ).encode("utf-8")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get(config.api_key_env)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    req = urllib.request.Request(config.endpoint, data=body, headers=headers, method="POST")
    try:
        with urllib.request.urlopen(req, timeout=config.timeout) as resp:
            doc = json.loads(resp.read().decode("utf-8"))
    except urllib.error.HTTPError as exc:
        if exc.code == 429 or exc.code >= 500:
            raise TransientError(f"HTTP {exc.code} from {config.endpoint}") from exc
        raise PermanentError(f"HTTP {exc.code} from {config.endpoint}") from exc
    except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
        raise TransientError(f"{config.endpoint}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise PermanentError(f"{config.endpoint}: response is not JSON") from exc
    try:
        return doc["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as exc:
        raise PermanentError(f"{config.endpoint}: unexpected response shape") from exc


def complete(config: ClientConfig, prompt: str, backoff: float = 1.0) -> str:
    if config.mode != "live":
        hit = load_exchange(config, prompt)
        if hit is not None:
            return hit.response
        if config.mode == "replay":
            raise CacheMiss(f"no recorded response for prompt {cache_key(prompt, config.model_id)[:12]}")
    attempt = 0
    while True:
        try:
            text = _post(config, prompt)
            break
        except TransientError:
            if attempt >= config.max_retries:
                raise
            time.sleep(backoff * 2**attempt)
            attempt += 1
    if config.mode == "record":
        store_exchange(config, CompletionExchange(prompt, text, cache_key(prompt, config.model_id)))
    return text


# -- offline classifier -----------------------------------------------------


class HeuristicClassifier:
    """Rule-based stand-in for the summarization model.

    A function is an allocator when it returns, directly or through an
    identifier alias, the result of an allocation primitive or of another
    function classified as an allocator.  It is a deallocator of argument i
    when parameter i (or an identifier alias) is passed to a release primitive
    or to a classified deallocator.  Callees are classified on demand up to
    ``max_depth`` levels deep.
    """

    def __init__(self, codebase: Codebase, primitives: Optional[Primitives] = None, max_depth: int = MAX_DEPTH):
        self.codebase = codebase
        self.prims = primitives or Primitives()
        self.max_depth = max_depth
        self._memo: Dict[str, List[FunctionSummary]] = {}
        self._active: Set[str] = set()

    def classify(self, record: FunctionRecord) -> List[FunctionSummary]:
        return self._classify(record, 1)

    def _callee(self, name: str, depth: int) -> List[FunctionSummary]:
        if depth > self.max_depth or name in self._active:
            return []
        if name in self._memo:
            return self._memo[name]
        rec = self.codebase.lookup(name)
        return self._classify(rec, depth) if rec is not None else []

    def _is_allocator(self, name: Optional[str], depth: int) -> bool:
        if name is None:
            return False
        return name in self.prims.alloc or any(s.arg is None for s in self._callee(name, depth))

    def _frees_arg(self, name: Optional[str], j: int, depth: int) -> bool:
        if name is None:
            return False
        if name in self.prims.free:
            return j == 0
        return any(s.arg == j for s in self._callee(name, depth))

    def _classify(self, record: FunctionRecord, depth: int) -> List[FunctionSummary]:
        if record.name in self._memo:
            return self._memo[record.name]
        try:
            cfg = build_cfg(record, primitives=self.prims)
        except CfgError:
            self._memo[record.name] = []
            return []
        self._active.add(record.name)
        try:
            out: List[FunctionSummary] = []
            is_macro = record.kind is RecordKind.MACRO
            if is_macro or self.codebase.alias_table.is_pointer_type(record.return_type):
                returned = {cfg.nodes[r].value for r in cfg.returns()}
                for n in cfg.nodes:
                    if n.kind is NodeKind.ALLOC or (n.kind is NodeKind.CALL and self._is_allocator(n.callee, depth + 1)):
                        if n.returned or (n.target and returned & alias_closure(cfg, [n.target]).self_aliases):
                            out.append(FunctionSummary.allocator(record.name, provenance=Provenance.HEURISTIC))
                            break
            for i, (pname, ptype) in enumerate(record.params):
                if not (is_macro or self.codebase.alias_table.is_pointer_type(ptype)):
                    continue
                aliases = alias_closure(cfg, [pname]).self_aliases
                for n in cfg.nodes:
                    if n.kind is NodeKind.FREE and n.value in aliases:
                        hit = True
                    elif n.kind is NodeKind.CALL:
                        hit = any(a in aliases and self._frees_arg(n.callee, j, depth + 1) for j, a in enumerate(n.args))
                    else:
                        hit = False
                    if hit:
                        out.append(FunctionSummary.deallocator(record.name, i, provenance=Provenance.HEURISTIC))
                        break
        finally:
            self._active.discard(record.name)
        self._memo[record.name] = out
        return out


def heuristic_classify(record: FunctionRecord, codebase: Codebase, primitives: Optional[Primitives] = None) -> List[FunctionSummary]:
    return HeuristicClassifier(codebase, primitives).classify(record)
