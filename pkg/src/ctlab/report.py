"""Versioned JSON run reports.

Reports hold only deterministic content so two runs of one config are
byte-identical; wall-clock timing goes to a ``.timing.json`` sidecar.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

SCHEMA_VERSION = 1


class ReportError(ValueError):
    pass


@dataclass
class RunReport:
    kind: str
    scenario: str
    scenario_hash: str
    seed: int
    metrics: dict = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=2, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        data = json.loads(text)
        version = data.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ReportError(f"unsupported report schema version {version!r}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise ReportError(str(exc)) from None


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w") as fp:
            fp.write(text)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def timing_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".timing.json")


def write_report(report: RunReport, path, wall_clock: float | None = None) -> Path:
    path = Path(path)
    _atomic_write(path, report.to_json())
    if wall_clock is not None:
        _atomic_write(timing_path(path), json.dumps({"wall_clock_s": round(wall_clock, 3)}) + "\n")
    return path


def read_report(path) -> RunReport:
    return RunReport.from_json(Path(path).read_text())
