"""Allocator/deallocator summaries: model, prompts, response parsing, hints.json I/O."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from .extraction import Codebase, FunctionRecord, RecordKind

MAX_CALLEES = 5
BATCH_SIZE = 20
PROMPT_VERSION = "v1"

_ARG_TARGET = re.compile(r"arg(\d+)")


class HintsFormatError(ValueError):
    pass


class Role(str, Enum):
    ALLOCATOR = "Allocator"
    DEALLOCATOR = "Deallocator"


class Provenance(str, Enum):
    MODEL = "ModelGenerated"
    HEURISTIC = "Heuristic"
    MANUAL = "Manual"


@dataclass(frozen=True, order=True)
class FunctionSummary:
    """``(name, role, target)`` with ``arg=None`` meaning the return value.

    Equality and ordering ignore provenance and the validation flag so that
    merged hints compare by content.
    """

    name: str
    role: Role
    arg: Optional[int] = None
    provenance: Provenance = field(default=Provenance.MANUAL, compare=False)
    validated: bool = field(default=False, compare=False)

    def __post_init__(self):
        if self.role is Role.ALLOCATOR and self.arg is not None:
            raise ValueError(f"{self.name}: Allocator summaries must target the return value")
        if self.role is Role.DEALLOCATOR and (self.arg is None or self.arg < 0):
            raise ValueError(f"{self.name}: Deallocator summaries must target an argument")

    @property
    def target(self) -> str:
        return "return" if self.arg is None else f"arg{self.arg}"

    @classmethod
    def allocator(cls, name: str, **kw) -> "FunctionSummary":
        return cls(name, Role.ALLOCATOR, None, **kw)

    @classmethod
    def deallocator(cls, name: str, arg: int = 0, **kw) -> "FunctionSummary":
        return cls(name, Role.DEALLOCATOR, arg, **kw)

    def to_dict(self, with_validated: bool = False) -> dict:
        d = {"name": self.name, "role": self.role.value, "target": self.target}
        if with_validated:
            d["validated"] = self.validated
        return d


def parse_target(role: Role, target: str) -> Optional[int]:
    """Map a ``target`` string to an argument index (``None`` for return).

    Raises ValueError when the target does not fit the role.
    """
    if role is Role.ALLOCATOR:
        if target != "return":
            raise ValueError(f"Allocator target must be 'return', got {target!r}")
        return None
    m = _ARG_TARGET.fullmatch(target)
    if not m:
        raise ValueError(f"Deallocator target must be 'argN', got {target!r}")
    return int(m.group(1))


@dataclass
class HintsFile:
    hints: Dict[str, List[FunctionSummary]] = field(default_factory=dict)

    @classmethod
    def from_summaries(cls, summaries: Iterable[FunctionSummary]) -> "HintsFile":
        merged: Dict[FunctionSummary, FunctionSummary] = {}
        for s in summaries:
            prev = merged.get(s)
            if prev is None or (s.validated and not prev.validated):
                merged[s] = s
        out: Dict[str, List[FunctionSummary]] = {}
        for s in sorted(merged.values()):
            out.setdefault(s.name, []).append(s)
        return cls(dict(sorted(out.items())))

    def summaries(self) -> List[FunctionSummary]:
        return [s for name in sorted(self.hints) for s in self.hints[name]]

    def allocators(self) -> List[str]:
        return sorted({s.name for s in self.summaries() if s.role is Role.ALLOCATOR})

    def deallocators(self) -> Dict[str, List[int]]:
        out: Dict[str, List[int]] = {}
        for s in self.summaries():
            if s.role is Role.DEALLOCATOR:
                out.setdefault(s.name, []).append(s.arg)
        return out

    def is_allocator(self, name: str) -> bool:
        return any(s.role is Role.ALLOCATOR for s in self.hints.get(name, ()))

    def freed_args(self, name: str) -> List[int]:
        return [s.arg for s in self.hints.get(name, ()) if s.role is Role.DEALLOCATOR]

    def conflicts(self) -> List[str]:
        """Names whose deallocator summaries disagree on the freed argument."""
        return sorted(n for n, args in self.deallocators().items() if len(args) > 1)

    def only_validated(self) -> "HintsFile":
        return HintsFile.from_summaries(s for s in self.summaries() if s.validated)

    def __len__(self) -> int:
        return sum(len(v) for v in self.hints.values())


def write_hints(summaries, path, with_validated: bool = False) -> None:
    hints = summaries if isinstance(summaries, HintsFile) else HintsFile.from_summaries(summaries)
    doc = {
        "hints": {
            name: [s.to_dict(with_validated) for s in entries] for name, entries in sorted(hints.hints.items())
        }
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def read_hints(path) -> HintsFile:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise HintsFormatError(f"{path}: cannot read hints file ({exc})") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HintsFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("hints"), dict):
        raise HintsFormatError(f"{path}: top level must be an object with a 'hints' object")
    summaries = []
    for key, entries in doc["hints"].items():
        if not isinstance(entries, list):
            raise HintsFormatError(f"{path}: hints.{key} must be a list")
        for i, entry in enumerate(entries):
            where = f"{path}: hints.{key}[{i}]"
            if not isinstance(entry, dict):
                raise HintsFormatError(f"{where} must be an object")
            try:
                role = Role(entry["role"])
                arg = parse_target(role, entry["target"])
                name = entry.get("name", key)
                validated = entry.get("validated", False)
                if not isinstance(name, str) or not isinstance(validated, bool):
                    raise ValueError("ill-typed name or validated flag")
            except (KeyError, ValueError, TypeError) as exc:
                raise HintsFormatError(f"{where}: {exc}") from exc
            summaries.append(FunctionSummary(name, role, arg, Provenance.MANUAL, validated))
    return HintsFile.from_summaries(summaries)


def load_template(name: str) -> str:
    return resources.files("mmleak").joinpath("prompts").joinpath(f"{name}_{PROMPT_VERSION}.txt").read_text(encoding="utf-8")


def fill_template(template: str, values: Dict[str, str]) -> str:
    # placeholders are substituted in one pass so inserted code is never rescanned
    pattern = re.compile("|".join(re.escape("{" + k + "}") for k in values))
    return pattern.sub(lambda m: values[m.group(0)[1:-1]], template)


def format_parameters(record: FunctionRecord) -> str:
    if record.kind is RecordKind.MACRO:
        return ", ".join(n for n, _ in record.params)
    if not record.params:
        return "void"
    return ", ".join(f"{t} {n}".strip() for n, t in record.params)


def select_callees(record: FunctionRecord, codebase: Codebase, limit: int = MAX_CALLEES) -> List[FunctionRecord]:
    """Up to ``limit`` callees defined in the codebase, in first-occurrence order."""
    out = []
    for name in record.callees:
        if name == record.name:
            continue
        callee = codebase.lookup(name)
        if callee is not None:
            out.append(callee)
        if len(out) == limit:
            break
    return out


def build_classification_prompt(record: FunctionRecord, callee_records: Sequence[FunctionRecord]) -> str:
    if len(callee_records) > MAX_CALLEES:
        raise ValueError(f"at most {MAX_CALLEES} callees may be supplied")
    context = ""
    if callee_records:
        blocks = [f"\n### `{c.name}`\n```c\n{c.body}\n```" for c in callee_records]
        context = "\n## Context: direct callees\n" + "\n".join(blocks) + "\n"
    return fill_template(
        load_template("classify"),
        {
            "func_name": record.name,
            "return_type": record.return_type,
            "parameters": format_parameters(record),
            "code": record.body,
            "context": context,
        },
    )


def build_batch_prompt(items: Sequence[Tuple[FunctionRecord, Sequence[FunctionRecord]]]) -> str:
    """Concatenate per-function prompts; the model answers with one combined hints object."""
    if len(items) == 1:
        return build_classification_prompt(*items[0])
    parts = [f"You will analyze {len(items)} functions. Each is delimited by BEGIN/END markers."]
    for i, (record, callees) in enumerate(items, 1):
        parts.append(f"===== BEGIN FUNCTION {i}: {record.name} =====")
        parts.append(build_classification_prompt(record, callees))
        parts.append(f"===== END FUNCTION {i}: {record.name} =====")
    parts.append(
        "Return ONE JSON object with a single `hints` array covering every function above; "
        'use `{"hints": []}` if none apply.'
    )
    return "\n\n".join(parts) + "\n"


def batched(records: Sequence, size: int = BATCH_SIZE) -> List[list]:
    return [list(records[i : i + size]) for i in range(0, len(records), size)]


def extract_json_object(text: str, required: Sequence[str]) -> Optional[dict]:
    """First JSON object in ``text`` carrying every key in ``required``."""
    decoder = json.JSONDecoder()
    for m in re.finditer(r"\{", text):
        try:
            obj, _ = decoder.raw_decode(text, m.start())
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict) and all(k in obj for k in required):
            return obj
    return None


def parse_hints_response(response: str, expected_names) -> Tuple[List[FunctionSummary], List[str]]:
    diagnostics: List[str] = []
    doc = extract_json_object(response or "", ("hints",))
    if doc is None or not isinstance(doc["hints"], list):
        return [], ["no JSON object with a 'hints' list in response"]
    expected = set(expected_names)
    out: List[FunctionSummary] = []
    for i, entry in enumerate(doc["hints"]):
        if not isinstance(entry, dict):
            diagnostics.append(f"hints[{i}]: not an object")
            continue
        name, role, target = entry.get("name"), entry.get("role"), entry.get("target")
        if not all(isinstance(v, str) for v in (name, role, target)):
            diagnostics.append(f"hints[{i}]: name, role and target must be strings")
            continue
        if name not in expected:
            diagnostics.append(f"hints[{i}]: {name!r} was not in the request")
            continue
        try:
            role_enum = Role(role)
        except ValueError:
            diagnostics.append(f"hints[{i}]: unknown role {role!r}")
            continue
        try:
            arg = parse_target(role_enum, target)
        except ValueError as exc:
            diagnostics.append(f"hints[{i}]: {exc}")
            continue
        out.append(FunctionSummary(name, role_enum, arg, Provenance.MODEL))
    return out, diagnostics


def mark_validated(summary: FunctionSummary, validated: bool = True) -> FunctionSummary:
    return replace(summary, validated=validated)
