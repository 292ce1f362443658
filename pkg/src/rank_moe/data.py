"""Interaction records and their JSON-lines file format."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Iterator

from .encoders import ROLES


class DataError(ValueError):
    """Malformed or inconsistent dataset content."""


@dataclass
class InteractionRecord:
    recruiter_id: str
    role: str
    query_id: str
    talent_id: str
    job_id: str
    jd_text: str
    resume_text: str
    history_talent_ids: list[str] = field(default_factory=list)  # newest first
    session_id: str = ""
    label_click: int = 0
    label_apply: int = 0
    label_relevant: int = 0
    timestamp: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise DataError(f"role must be one of {ROLES}, got {self.role!r}")
        for name in ("label_click", "label_apply", "label_relevant"):
            if getattr(self, name) not in (0, 1):
                raise DataError(f"{name} must be 0 or 1")
        if self.label_apply > self.label_click:
            raise DataError(f"funnel violation in session {self.session_id!r}: apply without click")

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "InteractionRecord":
        names = [f.name for f in fields(cls)]
        missing = [n for n in names if n not in d]
        if missing:
            raise DataError(f"record missing fields {missing}")
        return cls(**{n: d[n] for n in names})


FIELD_ORDER = tuple(f.name for f in fields(InteractionRecord))


def write_records(path: str | Path, records: Iterable[InteractionRecord]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(r.to_json())
            fh.write("\n")


def iter_records(path: str | Path) -> Iterator[InteractionRecord]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield InteractionRecord.from_dict(json.loads(line))
            except (json.JSONDecodeError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc


def read_records(path: str | Path) -> list[InteractionRecord]:
    return list(iter_records(path))
