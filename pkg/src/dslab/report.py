"""Table writers and run manifests.

Tables are written atomically (temp file then rename) so a crashed run never
leaves a half-written CSV behind.  Floats use ``repr`` so identical inputs
give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path


def _cell(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    if v is None:
        return ""
    return v


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if hasattr(v, "item"):
        return v.item()
    return v


def atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def format_table(columns, rows, fmt: str = "csv") -> bytes:
    """Serialise rows (sequences or dicts) as CSV or a JSON list of records."""
    records = [[r[c] for c in columns] if isinstance(r, dict) else list(r) for r in rows]
    if fmt == "json":
        objs = [{c: _jsonable(v) for c, v in zip(columns, rec)} for rec in records]
        return (json.dumps(objs, indent=1) + "\n").encode()
    if fmt != "csv":
        raise ValueError(f"unknown table format {fmt!r}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_cell(v) for v in rec])
    return buf.getvalue().encode()


def read_table(path: Path) -> list[dict]:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        return json.loads(text)
    return list(csv.DictReader(io.StringIO(text)))


def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class OutputFile:
    path: str
    bytes: int
    sha256: str


@dataclass
class RunManifest:
    tool_version: str
    command: str
    master_seed: int | None
    config_echo: dict
    outputs: list[OutputFile] = field(default_factory=list)
    wall_time_seconds: float = 0.0
    status: str = "ok"
    notes: list[str] = field(default_factory=list)

    def add(self, path: Path, root: Path) -> None:
        path = Path(path)
        self.outputs.append(OutputFile(str(path.relative_to(root)), path.stat().st_size, sha256(path)))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, default=_jsonable) + "\n"

    def verify(self, root: Path) -> list[str]:
        """Paths whose size or checksum no longer match."""
        bad = []
        for out in self.outputs:
            p = Path(root) / out.path
            if not p.exists() or p.stat().st_size != out.bytes or sha256(p) != out.sha256:
                bad.append(out.path)
        return bad


class OutputDir:
    """Collects emitted files for the manifest."""

    def __init__(self, root: Path, fmt: str = "csv"):
        self.root = Path(root)
        self.fmt = fmt
        self.written: list[Path] = []

    def table(self, stem: str, columns, rows) -> Path:
        path = self.root / f"{stem}.{self.fmt}"
        atomic_write(path, format_table(columns, rows, self.fmt))
        self.written.append(path)
        return path

    def json(self, name: str, obj) -> Path:
        path = self.root / name
        atomic_write(path, (json.dumps(obj, indent=1, default=_jsonable) + "\n").encode())
        self.written.append(path)
        return path

    def text(self, name: str, text: str) -> Path:
        path = self.root / name
        atomic_write(path, text.encode())
        self.written.append(path)
        return path

    def manifest(self, manifest: RunManifest) -> Path:
        for p in self.written:
            manifest.add(p, self.root)
        path = self.root / "manifest.json"
        atomic_write(path, manifest.to_json().encode())
        return path
