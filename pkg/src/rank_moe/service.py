"""Batch re-ranking over line-delimited JSON.

Each request line is a JSON object::

    {"recruiter_id": "...", "role": "SA", "query_id": "...", "jd_text": "...",
     "job_id": "...",                       # optional
     "history_talent_ids": ["...", ...],
     "candidates": [{"talent_id": "...", "resume_text": "..."}, ...]}

and the reply is one line ``{"results": [...]}`` ordered by descending
final score (ties by ascending talent id), or ``{"code": ..., "error": ...}``.
"""

from __future__ import annotations

import json
import logging
import socketserver
import threading
from typing import Any

from .data import DataError, InteractionRecord
from .pipeline import RankingModel

log = logging.getLogger(__name__)

MAX_LINE_BYTES = 4 << 20
SIGNIFICANT_DIGITS = 9


class RequestError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _round(x: float) -> float:
    return float(f"{x:.{SIGNIFICANT_DIGITS}g}")


def _field(obj: dict, name: str, kind: type, default: Any = None) -> Any:
    if name not in obj:
        if default is not None:
            return default
        raise RequestError("missing_field", f"request is missing {name!r}")
    value = obj[name]
    if not isinstance(value, kind):
        raise RequestError("bad_field", f"{name!r} must be {kind.__name__}")
    return value


def parse_request(obj: Any) -> list[InteractionRecord]:
    """Turns a decoded request into one record per candidate."""
    if not isinstance(obj, dict):
        raise RequestError("bad_request", "request must be a JSON object")
    recruiter = _field(obj, "recruiter_id", str)
    role = _field(obj, "role", str)
    query = _field(obj, "query_id", str)
    jd_text = _field(obj, "jd_text", str, "")
    job = _field(obj, "job_id", str, "")
    history = _field(obj, "history_talent_ids", list, [])
    if not all(isinstance(h, str) for h in history):
        raise RequestError("bad_field", "history_talent_ids must be strings")
    candidates = _field(obj, "candidates", list)
    if not candidates:
        raise RequestError("empty_candidates", "candidates must be nonempty")
    records = []
    seen = set()
    for c in candidates:
        if not isinstance(c, dict):
            raise RequestError("bad_field", "each candidate must be an object")
        tid = _field(c, "talent_id", str)
        if tid in seen:
            raise RequestError("duplicate_candidate", f"talent {tid!r} listed twice")
        seen.add(tid)
        try:
            records.append(
                InteractionRecord(
                    recruiter_id=recruiter, role=role, query_id=query, talent_id=tid, job_id=job,
                    jd_text=jd_text, resume_text=_field(c, "resume_text", str, ""),
                    history_talent_ids=list(history),
                )
            )
        except DataError as exc:
            raise RequestError("bad_field", str(exc)) from exc
    return records


class RankingService:
    """Scores requests against one frozen model; safe to share across threads."""

    def __init__(self, model: RankingModel):
        self.model = model

    def rank(self, obj: Any) -> dict:
        records = parse_request(obj)
        rows = self.model.predict_encoded(self.model.encode(records))
        results = []
        for r, (p_ctr, p_cvr, p_relv, score) in zip(records, rows):
            results.append(
                {
                    "talent_id": r.talent_id,
                    "p_ctr": _round(p_ctr),
                    "p_cvr": _round(p_cvr),
                    "p_relv": None if p_relv != p_relv else _round(p_relv),
                    "final_score": _round(score),
                }
            )
        results.sort(key=lambda d: (-d["final_score"], d["talent_id"]))
        return {"results": results}

    def handle_line(self, line: str | bytes) -> str:
        """One request line in, one response line out (without newline). Never raises."""
        try:
            if isinstance(line, bytes):
                line = line.decode("utf-8")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RequestError("bad_json", f"malformed JSON: {exc.msg} at column {exc.colno}") from exc
            reply = self.rank(obj)
        except RequestError as exc:
            reply = {"code": exc.code, "error": str(exc)}
        except UnicodeDecodeError:
            reply = {"code": "bad_encoding", "error": "request is not valid UTF-8"}
        except Exception as exc:  # keep the connection alive whatever happens
            log.exception("internal error")
            reply = {"code": "internal", "error": f"{type(exc).__name__}: {exc}"}
        return json.dumps(reply, ensure_ascii=False, separators=(",", ":"), allow_nan=False)


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        service: RankingService = self.server.service
        while True:
            line = self.rfile.readline(MAX_LINE_BYTES + 1)
            if not line:
                break
            if len(line) > MAX_LINE_BYTES and not line.endswith(b"\n"):
                # drain the rest of the oversized line before replying
                while line and not line.endswith(b"\n"):
                    line = self.rfile.readline(MAX_LINE_BYTES)
                reply = json.dumps({"code": "line_too_long", "error": f"request exceeds {MAX_LINE_BYTES} bytes"})
            elif not line.strip():
                continue
            else:
                reply = service.handle_line(line)
            self.wfile.write(reply.encode("utf-8") + b"\n")
            self.wfile.flush()


class RankServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: RankingService):
        super().__init__(address, _Handler)
        self.service = service

    @property
    def port(self) -> int:
        return self.server_address[1]


def start_background(service: RankingService, host: str = "127.0.0.1", port: int = 0) -> tuple[RankServer, threading.Thread]:
    """Starts a server on a daemon thread; returns it so callers can shut it down."""
    server = RankServer((host, port), service)
    thread = threading.Thread(target=server.serve_forever, name="rank-server", daemon=True)
    thread.start()
    return server, thread
