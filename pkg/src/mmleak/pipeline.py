"""Stage orchestration over on-disk artifacts.

Every stage reads the artifacts of earlier stages from the output directory
and writes its own.  A manifest records, per stage, a digest of its inputs
and of its outputs; a stage whose inputs and outputs are unchanged is
skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import yaml

from . import analyzer_bridge as bridge
from .analyzer_bridge import LeakWarning, Status
from .cfg import ALLOC_PRIMITIVES, DEFAULT_PATH_CAP, FREE_PRIMITIVES, Primitives
from .extraction import DEFAULT_EXTENSIONS, Codebase, ExtractionConfig, dump_codebase, load_codebase, parse_codebase, prefilter, write_index
from .feasibility import filter_warnings, scan_function
from .llm_client import ClientConfig, ClientError, HeuristicClassifier, complete
from .solver import DEFAULT_CONFLICT_BUDGET
from .summaries import (
    BATCH_SIZE,
    HintsFile,
    batched,
    build_batch_prompt,
    parse_hints_response,
    read_hints,
    select_callees,
    write_hints,
)
from .triage import group_by_function, mark_untriaged, triage_function
from .summary_validation import MAX_DEPTH, ValidationConfig, rejection_report, validate_summaries, validated_hints

log = logging.getLogger(__name__)

STAGES = ("extract", "summarize", "validate", "emit", "scan", "filter", "triage", "report")
MANIFEST = "manifest.json"

ARTIFACTS = {
    "extract": ("codebase.json", "candidates.json"),
    "summarize": ("hints.json", "summarize_diagnostics.txt"),
    "validate": ("validated_hints.json", "rejections.tsv"),
    "emit": ("codeql/qlpack.yml", "codeql/models/memory.model.yml", "infer_flags.txt"),
    "scan": ("warnings_internal.json",),
    "filter": ("warnings_filtered.json",),
    "triage": ("warnings_triaged.json",),
    "report": ("report.json", "report.txt"),
}
# artifacts a stage reads; the first producer named is the stage to run first
INPUTS = {
    "extract": (),
    "summarize": ("codebase.json", "candidates.json"),
    "validate": ("codebase.json", "hints.json"),
    "emit": ("validated_hints.json",),
    "scan": ("codebase.json", "validated_hints.json"),
    "filter": ("codebase.json", "validated_hints.json", "warnings_internal.json"),
    "triage": ("codebase.json", "warnings_filtered.json"),
    "report": (),
}


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    root: str = "."
    out_dir: str = "mmleak-out"
    project: str = ""
    extensions: Tuple[str, ...] = DEFAULT_EXTENSIONS
    alloc_primitives: Tuple[str, ...] = ALLOC_PRIMITIVES
    free_primitives: Tuple[str, ...] = FREE_PRIMITIVES
    sinks: Tuple[str, ...] = ()
    test_substring: str = "test"
    entry_points: Tuple[str, ...] = ("main", "wmain")
    path_cap: int = DEFAULT_PATH_CAP
    max_depth: int = MAX_DEPTH
    conflict_budget: int = DEFAULT_CONFLICT_BUDGET
    share_conditions: bool = True
    accept_field_frees: bool = False
    batch_size: int = BATCH_SIZE
    classifier: str = "heuristic"  # or "model"
    profiles: Dict[str, dict] = field(default_factory=dict)
    offline: bool = False
    cache_dir: Optional[str] = None
    extra_hints: Optional[str] = None
    codeql_results: Optional[str] = None
    infer_results: Optional[str] = None
    codeql_rules: Tuple[str, ...] = bridge.CODEQL_LEAK_RULES
    infer_bug_types: Tuple[str, ...] = bridge.INFER_LEAK_TYPES
    suppress: Tuple[str, ...] = ()
    jobs: Optional[int] = None

    def __post_init__(self):
        for name in ("extensions", "alloc_primitives", "free_primitives", "sinks", "entry_points", "codeql_rules", "infer_bug_types", "suppress"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.max_depth < 1 or self.path_cap < 1 or self.conflict_budget <= 0 or self.batch_size < 1:
            raise ValueError("depth, path cap, batch size and solver budget must be positive")
        if self.classifier not in ("heuristic", "model"):
            raise ValueError("classifier must be 'heuristic' or 'model'")

    @classmethod
    def from_file(cls, path, **overrides) -> "PipelineConfig":
        path = Path(path)
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(doc, dict):
            raise ValueError(f"{path}: configuration must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known - {"project_name"})
        if unknown:
            raise ValueError(f"{path}: unknown configuration keys {unknown}")
        if "project_name" in doc:
            doc.setdefault("project", doc.pop("project_name"))
        for key in ("root", "out_dir", "cache_dir", "extra_hints", "codeql_results", "infer_results"):
            if doc.get(key) is not None and not os.path.isabs(doc[key]):
                doc[key] = str(path.parent / doc[key])
        doc.setdefault("root", str(path.parent))
        doc.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**doc)

    @property
    def primitives(self) -> Primitives:
        return Primitives(self.alloc_primitives, self.free_primitives, self.sinks)

    def client(self, profile: str) -> ClientConfig:
        opts = dict(self.profiles.get(profile, {}))
        opts.setdefault("model_id", profile)
        opts.setdefault("cache_dir", self.cache_dir or str(Path(self.out_dir) / "llm-cache"))
        if self.offline:
            opts["mode"] = "replay"
        return ClientConfig(**opts)

    def fingerprint(self, stage: str) -> dict:
        d = asdict(self)
        d.pop("jobs")
        d.pop("out_dir")
        d["stage"] = stage
        return d


def _digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _file_digest(path: Path) -> Optional[str]:
    return _digest(path.read_bytes()) if path.exists() else None


class Pipeline:
    def __init__(self, config: PipelineConfig, ask: Optional[Dict[str, Callable[[str], str]]] = None):
        self.config = config
        self.out = Path(config.out_dir)
        self.diagnostics: List[str] = []
        # optional per-profile completion callables, mainly for tests
        self._ask = ask or {}
        self.skipped: List[str] = []

    # -- bookkeeping -------------------------------------------------------
    def path(self, name: str) -> Path:
        return self.out / name

    def _manifest(self) -> dict:
        p = self.path(MANIFEST)
        return json.loads(p.read_text(encoding="utf-8")) if p.exists() else {}

    def _input_digest(self, stage: str) -> str:
        h = hashlib.sha256(json.dumps(self.config.fingerprint(stage), sort_keys=True, default=str).encode())
        if stage == "extract":
            root = Path(self.config.root)
            for p in sorted(root.rglob("*")):
                if p.is_file() and p.suffix in self.config.extensions:
                    h.update(str(p.relative_to(root)).encode() + b"\0" + p.read_bytes())
        for name in INPUTS[stage]:
            h.update(name.encode() + b"\0" + (_file_digest(self.path(name)) or "-").encode())
        if stage == "summarize" and self.config.extra_hints:
            h.update((_file_digest(Path(self.config.extra_hints)) or "-").encode())
        if stage == "filter":
            for extra in (self.config.codeql_results, self.config.infer_results):
                if extra:
                    h.update((_file_digest(Path(extra)) or "-").encode())
        if stage == "report":
            for name in ARTIFACTS["validate"] + ARTIFACTS["summarize"] + ARTIFACTS["scan"] + ARTIFACTS["filter"] + ARTIFACTS["triage"] + ("candidates.json", "codebase.json"):
                h.update(name.encode() + b"\0" + (_file_digest(self.path(name)) or "-").encode())
        if stage in ("summarize", "triage") and not self.config.offline and self.config.classifier == "model":
            # live model output is not a function of the inputs
            h.update(os.urandom(8))
        return h.hexdigest()

    def _outputs_digest(self, stage: str) -> Dict[str, Optional[str]]:
        return {name: _file_digest(self.path(name)) for name in ARTIFACTS[stage]}

    def _require(self, stage: str) -> None:
        for name in INPUTS[stage]:
            if not self.path(name).exists():
                producer = next(s for s, outs in ARTIFACTS.items() if name in outs)
                raise PipelineError(f"stage '{stage}' needs {name}; run '{producer}' first")

    def run(self, stages: Sequence[str]) -> dict:
        unknown = [s for s in stages if s not in STAGES]
        if unknown:
            raise PipelineError(f"unknown stage(s): {', '.join(unknown)}")
        self.out.mkdir(parents=True, exist_ok=True)
        for stage in [s for s in STAGES if s in stages]:
            self._require(stage)
            manifest = self._manifest()
            inputs = self._input_digest(stage)
            prev = manifest.get(stage)
            if prev and prev.get("inputs") == inputs and prev.get("outputs") == self._outputs_digest(stage):
                log.info("%s: up to date", stage)
                self.skipped.append(stage)
                continue
            log.info("%s: running", stage)
            getattr(self, "stage_" + stage)()
            manifest = self._manifest()
            manifest[stage] = {"inputs": inputs, "outputs": self._outputs_digest(stage)}
            self.path(MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return self.counters()

    # -- shared loaders ----------------------------------------------------
    def codebase(self) -> Codebase:
        return load_codebase(self.path("codebase.json"))

    def _write_warnings(self, name: str, warnings: Sequence[LeakWarning]) -> None:
        bridge.write_report(warnings, self.path(name))

    def _read_warnings(self, name: str) -> List[LeakWarning]:
        return bridge.read_report(self.path(name))[0]

    def _map(self, fn, items):
        with ThreadPoolExecutor(max_workers=self.config.jobs or os.cpu_count() or 1) as pool:
            return list(pool.map(fn, items))

    # -- stages ------------------------------------------------------------
    def stage_extract(self) -> None:
        c = self.config
        ecfg = ExtractionConfig(c.extensions, c.test_substring, c.entry_points, c.jobs)
        cb = parse_codebase(c.root, ecfg)
        dump_codebase(cb, self.path("codebase.json"))
        write_index(cb, self.path("index"))
        names = [f"{r.span.file}:{r.name}" for r in prefilter(cb, ecfg)]
        self.path("candidates.json").write_text(json.dumps(names, indent=2) + "\n", encoding="utf-8")

    def _candidates(self, cb: Codebase):
        keys = json.loads(self.path("candidates.json").read_text(encoding="utf-8"))
        out = []
        for key in keys:
            file, name = key.rsplit(":", 1)
            rec = cb.lookup(name, file)
            if rec is not None:
                out.append(rec)
        return out

    def stage_summarize(self) -> None:
        c = self.config
        cb = self.codebase()
        records = self._candidates(cb)
        diags: List[str] = []
        summaries = []
        if c.classifier == "heuristic" or c.offline:
            clf = HeuristicClassifier(cb, c.primitives, c.max_depth)
            for r in records:
                summaries.extend(clf.classify(r))
        else:
            client = c.client("generation")
            ask = self._ask.get("generation") or (lambda p: complete(client, p))
            for batch in batched(records, c.batch_size):
                prompt = build_batch_prompt([(r, select_callees(r, cb)) for r in batch])
                try:
                    response = ask(prompt)
                except ClientError as exc:
                    diags.append(f"batch starting at {batch[0].name} skipped: {exc}")
                    continue
                found, problems = parse_hints_response(response, [r.name for r in batch])
                summaries.extend(found)
                diags.extend(problems)
        if c.extra_hints:
            summaries.extend(read_hints(c.extra_hints).summaries())
        write_hints(summaries, self.path("hints.json"))
        self.path("summarize_diagnostics.txt").write_text("".join(d + "\n" for d in diags), encoding="utf-8")
        self.diagnostics.extend(diags)

    def stage_validate(self) -> None:
        c = self.config
        vcfg = ValidationConfig(c.max_depth, c.path_cap, c.conflict_budget, c.accept_field_frees, c.primitives)
        hints = read_hints(self.path("hints.json"))
        verdicts = validate_summaries(hints.summaries(), self.codebase(), vcfg)
        write_hints(validated_hints(verdicts), self.path("validated_hints.json"), with_validated=True)
        self.path("rejections.tsv").write_text(rejection_report(verdicts), encoding="utf-8")

    def stage_emit(self, hints: Optional[HintsFile] = None) -> None:
        hints = hints or read_hints(self.path("validated_hints.json"))
        bridge.write_codeql_pack(hints, self.path("codeql"))
        bridge.write_infer_flags(hints, self.path("infer_flags.txt"))

    def stage_scan(self) -> None:
        cb = self.codebase()
        hints = read_hints(self.path("validated_hints.json"))
        prims = self.config.primitives
        funcs = [r for r in cb.records if r.kind.value == "Function"]
        diags: List[List[str]] = [[] for _ in funcs]
        results = self._map(lambda i: scan_function(funcs[i], hints, prims, diags[i]), range(len(funcs)))
        warnings = [w for ws in results for w in ws]
        self.diagnostics.extend(d for ds in diags for d in ds)
        self._write_warnings("warnings_internal.json", warnings)

    def _external_warnings(self) -> List[List[LeakWarning]]:
        c = self.config
        lists = []
        if c.codeql_results:
            lists.append(bridge.ingest_codeql_results(c.codeql_results, c.codeql_rules, self.diagnostics))
        if c.infer_results:
            lists.append(bridge.ingest_infer_results(c.infer_results, c.infer_bug_types, self.diagnostics))
        return lists

    def stage_filter(self) -> None:
        internal = self._read_warnings("warnings_internal.json")
        merged = bridge.merge_warnings([internal] + self._external_warnings())
        hints = read_hints(self.path("validated_hints.json"))
        retained, discarded = filter_warnings(merged.warnings, self.codebase(), hints, self.config.primitives)
        self._write_warnings("warnings_filtered.json", retained + discarded)

    def stage_triage(self) -> None:
        c = self.config
        cb = self.codebase()
        warnings = self._read_warnings("warnings_filtered.json")
        kept = [w for w in warnings if w.status is Status.RETAINED]
        out = [w for w in warnings if w.status is not Status.RETAINED]
        client = c.client("triage")
        ask = self._ask.get("triage") or (lambda p: complete(client, p))
        for (file, function), group in group_by_function(kept).items():
            if function in c.suppress:
                out.extend(w.advance(Status.TRIAGED, verdict="false", notes="suppressed by configuration") for w in group)
                continue
            rec = cb.lookup(function, file)
            if rec is None:
                out.extend(mark_untriaged(group, "function source unavailable"))
                continue
            out.extend(triage_function(group, rec.body, c.project or Path(c.root).name, ask, rec.span.start_line, self.diagnostics))
        out.sort(key=lambda w: (w.file, w.function, w.line, w.alloc_line or 0))
        self._write_warnings("warnings_triaged.json", out)

    def counters(self) -> Dict[str, Optional[int]]:
        def load(name):
            p = self.path(name)
            return json.loads(p.read_text(encoding="utf-8")) if p.exists() else None

        cb = load("codebase.json")
        cands = load("candidates.json")
        hints = load("hints.json")
        valid = load("validated_hints.json")
        filtered = load("warnings_filtered.json")
        triaged = load("warnings_triaged.json")
        n_valid = None
        if valid is not None:
            n_valid = sum(1 for es in valid["hints"].values() for e in es if e.get("validated"))
        return {
            "extracted": len(cb["records"]) if cb else None,
            "candidates": len(cands) if cands is not None else None,
            "summaries": sum(len(v) for v in hints["hints"].values()) if hints else None,
            "validated": n_valid,
            "warnings": len(filtered["warnings"]) if filtered else None,
            "after_feasibility": sum(1 for w in filtered["warnings"] if w["status"] == Status.RETAINED.value) if filtered else None,
            "after_triage": sum(
                1
                for w in triaged["warnings"]
                if w["status"] == Status.UNTRIAGED.value or (w["status"] == Status.TRIAGED.value and w["verdict"] == "true")
            )
            if triaged
            else None,
        }

    def findings(self) -> List[LeakWarning]:
        for name in ("warnings_triaged.json", "warnings_filtered.json", "warnings_internal.json"):
            if self.path(name).exists():
                ws = self._read_warnings(name)
                return [
                    w
                    for w in ws
                    if w.status in (Status.RAW, Status.RETAINED, Status.UNTRIAGED)
                    or (w.status is Status.TRIAGED and w.verdict == "true")
                ]
        return []

    def stage_report(self) -> None:
        counters = {k: (v if v is not None else 0) for k, v in self.counters().items()}
        findings = self.findings()
        bridge.write_report(findings, self.path("report.json"), counters)
        lines = [f"{k:>18}: {v}" for k, v in counters.items()]
        text = "\n".join(lines) + "\n\n" + bridge.render_table(findings)
        self.path("report.txt").write_text(text, encoding="utf-8")


def run_pipeline(config: PipelineConfig, stages: Sequence[str] = STAGES, ask=None) -> Tuple[Pipeline, dict]:
    p = Pipeline(config, ask)
    counters = p.run(stages)
    return p, counters
