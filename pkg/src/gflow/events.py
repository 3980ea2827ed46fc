"""Append-only event log: the controller's single source of truth.

One log file per job, one JSON object per line:

    {"seq": 1, "time": "0", "job_id": "j1", "sample_id": null,
     "event": "job_submitted", "payload": {...}}

`seq` is a gapless 1-based counter and `time` is an exact rational number of
hours since job start (serialized as a string). Appends can optionally fsync.
Reading tolerates a torn tail: the valid prefix is returned together with
the position of the first malformed record so callers can recover or
truncate.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .rational import frac_str

REQUIRED_FIELDS = ("seq", "time", "job_id", "event", "payload")


@dataclass(frozen=True)
class Event:
    seq: int
    time: Fraction
    job_id: str
    sample_id: str | None
    event: str
    payload: dict


@dataclass(frozen=True)
class CorruptInfo:
    line: int          # 1-based line of the first malformed record
    reason: str
    offset: int        # byte offset where that record starts


def jsonable(value):
    """Recursively convert payload values to JSON-safe types (Fraction -> str)."""
    if isinstance(value, Fraction):
        return frac_str(value)
    if isinstance(value, dict):
        return {k: jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    return value


def encode_event(event: Event) -> bytes:
    record = {
        "seq": event.seq,
        "time": frac_str(event.time),
        "job_id": event.job_id,
        "sample_id": event.sample_id,
        "event": event.event,
        "payload": jsonable(event.payload),
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def _decode_record(data: dict, prev: Event | None) -> Event:
    for field in REQUIRED_FIELDS:
        if field not in data:
            raise ValueError(f"missing field {field!r}")
    seq = data["seq"]
    if not isinstance(seq, int):
        raise ValueError("seq must be an integer")
    expected = 1 if prev is None else prev.seq + 1
    if seq != expected:
        raise ValueError(f"seq {seq} breaks continuity (expected {expected})")
    try:
        time = Fraction(str(data["time"]))
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"bad time {data['time']!r}") from exc
    if prev is not None and time < prev.time:
        raise ValueError("time went backwards")
    if prev is not None and data["job_id"] != prev.job_id:
        raise ValueError("job_id changed mid-log")
    sample_id = data.get("sample_id")
    if sample_id is not None and not isinstance(sample_id, str):
        raise ValueError("sample_id must be a string or null")
    if not isinstance(data["payload"], dict):
        raise ValueError("payload must be an object")
    return Event(seq, time, str(data["job_id"]), sample_id, str(data["event"]), data["payload"])


def read_events(path: str | Path) -> tuple[list[Event], CorruptInfo | None]:
    """Read the valid prefix of a log; report the first malformed record."""
    events: list[Event] = []
    offset = 0
    path = Path(path)
    if not path.exists():
        return events, None
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            start = offset
            offset += len(raw)
            stripped = raw.strip()
            if not stripped:
                continue
            if not raw.endswith(b"\n"):
                return events, CorruptInfo(line_no, "truncated final record", start)
            try:
                data = json.loads(stripped.decode("utf-8"))
                if not isinstance(data, dict):
                    raise ValueError("record is not an object")
                event = _decode_record(data, events[-1] if events else None)
            except (ValueError, UnicodeDecodeError) as exc:
                return events, CorruptInfo(line_no, str(exc), start)
            events.append(event)
    return events, None


def truncate_to_valid_prefix(path: str | Path, corrupt: CorruptInfo) -> None:
    """Cut a torn tail so subsequent appends produce a well-formed log."""
    with open(path, "r+b") as fh:
        fh.truncate(corrupt.offset)


class EventLog:
    """Writer that assigns sequence numbers and keeps time monotone."""

    def __init__(self, path: str | Path, *, fsync: bool = False, start_seq: int = 1, start_time: Fraction = Fraction(0)):
        self.path = Path(path)
        self.fsync = fsync
        self.hook = None  # called with each Event after it is durably written
        self._next_seq = start_seq
        self._last_time = start_time
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    @classmethod
    def resume(cls, path: str | Path, *, fsync: bool = False) -> tuple["EventLog", list[Event]]:
        """Open an existing log for appending, truncating any torn tail."""
        events, corrupt = read_events(path)
        if corrupt is not None:
            truncate_to_valid_prefix(path, corrupt)
        start_seq = events[-1].seq + 1 if events else 1
        start_time = events[-1].time if events else Fraction(0)
        return cls(path, fsync=fsync, start_seq=start_seq, start_time=start_time), events

    def append(self, *, time: Fraction, job_id: str, event: str, sample_id: str | None = None, payload: dict | None = None) -> Event:
        time = max(Fraction(time), self._last_time)  # keep the log monotone even if the wall clock steps back
        record = Event(self._next_seq, time, job_id, sample_id, event, payload or {})
        self._fh.write(encode_event(record))
        self._fh.flush()
        if self.fsync:
            os.fsync(self._fh.fileno())
        self._next_seq += 1
        self._last_time = time
        if self.hook is not None:
            self.hook(record)
        return record

    def close(self) -> None:
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
