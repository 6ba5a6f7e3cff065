"""Plain-text run manifest: effective config snapshot plus a metric table.

Floats are written with ``repr`` so that parsing the file back reproduces
every value exactly. Missing metrics are written as ``-``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .train import LogRow

HEADER = "# boundaryseg run manifest v1"
COLUMNS = [f.name for f in fields(LogRow)]


@dataclass
class RunManifest:
    config: dict
    seed: int
    rows: list = field(default_factory=list)

    def to_text(self) -> str:
        lines = [HEADER, "[config]", f"seed = {self.seed}"]
        lines += [f"{k} = {_fmt(v)}" for k, v in self.config.items() if k != "seed"]
        lines += ["[metrics]", "\t".join(COLUMNS)]
        for row in self.rows:
            lines.append("\t".join(_fmt(getattr(row, c)) for c in COLUMNS))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunManifest":
        lines = text.splitlines()
        if not lines or lines[0] != HEADER:
            raise ValueError("not a run manifest")
        section = None
        config, rows = {}, []
        for ln in lines[1:]:
            if ln in ("[config]", "[metrics]"):
                section = ln
                continue
            if section == "[config]":
                key, _, value = ln.partition(" = ")
                config[key] = _parse(value)
            elif section == "[metrics]":
                if ln == "\t".join(COLUMNS):
                    continue
                cells = ln.split("\t")
                if len(cells) != len(COLUMNS):
                    raise ValueError(f"metric row has {len(cells)} cells, expected {len(COLUMNS)}")
                rows.append(LogRow(**{c: _parse(v) for c, v in zip(COLUMNS, cells)}))
        seed = config.pop("seed")
        return cls(config, seed, rows)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(s: str):
    if s == "-":
        return None
    if s in ("true", "false"):
        return s == "true"
    if "," in s:
        return tuple(_parse(x) for x in s.split(","))
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s
