from __future__ import annotations

from mmleak.cfg import Primitives, build_cfg
from mmleak.extraction import parse_source


def record_of(src: str, name: str = None, path: str = "t.c"):
    records, _, _ = parse_source(src, path)
    if name is None:
        return records[0]
    return next(r for r in records if r.name == name)


def cfg_of(src: str, name: str = None, hints=None, sinks=(), **kw):
    return build_cfg(record_of(src, name), hints, Primitives(sinks=tuple(sinks)), **kw)


def labels(cfg):
    return [n.label() for n in cfg.nodes]


def edge_set(cfg):
    return {(e.src, e.dst, e.polarity.value) for e in cfg.edges}


def codebase_from(tmp_path, files):
    """Write ``{relative name: source}`` under ``tmp_path`` and parse it."""
    from mmleak.extraction import parse_codebase

    for name, text in files.items():
        target = tmp_path / name
        target.parent.mkdir(parents=True, exist_ok=True)
        target.write_text(text)
    return parse_codebase(tmp_path)
