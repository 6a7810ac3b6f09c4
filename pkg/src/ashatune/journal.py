"""Append-only experiment journal and content-addressed checkpoint store.

Every tuning decision (sample, promote, dispatch, result, drop, width
extension) is journaled before the corresponding state change is applied, so
replaying the journal reconstructs the exact experiment state at any point --
promotions are read back, never re-decided, which pins down the
nondeterminism introduced by asynchronous workers.

On-disk format: a sequence of length-prefixed records. Each record is a
4-byte big-endian payload length, the payload (canonical JSON: sorted keys,
no extra whitespace, UTF-8), and a 4-byte big-endian CRC32 of the payload.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

EXPERIMENT_CREATED = "experiment-created"
CONFIG_SAMPLED = "config-sampled"
JOB_DISPATCHED = "job-dispatched"
RESULT_RECORDED = "result-recorded"
CONFIG_PROMOTED = "config-promoted"
JOB_DROPPED = "job-dropped"
WIDTH_EXTENDED = "width-extended"

EVENT_KINDS = (
    EXPERIMENT_CREATED,
    CONFIG_SAMPLED,
    JOB_DISPATCHED,
    RESULT_RECORDED,
    CONFIG_PROMOTED,
    JOB_DROPPED,
    WIDTH_EXTENDED,
)

_LEN = struct.Struct(">I")


class JournalIntegrityError(ValueError):
    def __init__(self, sequence_no: int, reason: str):
        self.sequence_no = sequence_no
        super().__init__(f"journal integrity failure at sequence {sequence_no}: {reason}")


class DanglingReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class JournalEvent:
    sequence_no: int
    kind: str
    timestamp: float
    payload: dict[str, Any]

    def to_json(self) -> bytes:
        doc = {
            "seq": self.sequence_no,
            "kind": self.kind,
            "ts": self.timestamp,
            "payload": self.payload,
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "JournalEvent":
        doc = json.loads(raw)
        return cls(
            sequence_no=doc["seq"],
            kind=doc["kind"],
            timestamp=doc["ts"],
            payload=doc["payload"],
        )


def encode_record(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload + _LEN.pack(zlib.crc32(payload))


class Journal:
    """Single-writer append-only event log, optionally file-backed.

    Appends are durable (flush + fsync) before returning, satisfying the
    write-ahead discipline: callers journal first, then mutate state.
    """

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path is not None else None
        self.events: list[JournalEvent] = []
        # (config_id, rung, bracket_s) with a recorded result, for reference checks
        self._results: set[tuple[int, int, int]] = set()
        self._fh = None
        if self.path is not None:
            if self.path.exists():
                for ev in read_events(self.path):
                    self._admit(ev)
            self._fh = open(self.path, "ab")

    def _admit(self, event: JournalEvent) -> None:
        self.events.append(event)
        if event.kind == RESULT_RECORDED:
            p = event.payload
            self._results.add((p["config_id"], p["rung"], p["bracket_s"]))

    def _check_references(self, kind: str, payload: dict) -> None:
        if kind not in EVENT_KINDS:
            raise DanglingReferenceError(f"unknown event kind {kind!r}")
        if kind == EXPERIMENT_CREATED and self.events:
            raise DanglingReferenceError("experiment-created must be the first event")
        if kind != EXPERIMENT_CREATED and not self.events:
            raise DanglingReferenceError("journal must start with experiment-created")
        if kind == CONFIG_PROMOTED:
            key = (payload["config_id"], payload["from_rung"], payload["bracket_s"])
            if key not in self._results:
                raise DanglingReferenceError(
                    f"promotion of config {key[0]} from rung {key[1]} has no prior result"
                )

    def append(self, kind: str, payload: dict, timestamp: float = 0.0) -> int:
        self._check_references(kind, payload)
        event = JournalEvent(
            sequence_no=len(self.events), kind=kind, timestamp=timestamp, payload=payload
        )
        if self._fh is not None:
            self._fh.write(encode_record(event.to_json()))
            self._fh.flush()
            os.fsync(self._fh.fileno())
        self._admit(event)
        return event.sequence_no

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[JournalEvent]:
        return iter(self.events)

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def read_events(path: str | Path) -> list[JournalEvent]:
    """Read and verify a journal file; raises JournalIntegrityError naming the
    first bad sequence number on corruption or gaps."""
    events: list[JournalEvent] = []
    raw = Path(path).read_bytes()
    off = 0
    seq = 0
    while off < len(raw):
        if off + _LEN.size > len(raw):
            raise JournalIntegrityError(seq, "truncated length prefix")
        (length,) = _LEN.unpack_from(raw, off)
        off += _LEN.size
        if off + length + _LEN.size > len(raw):
            raise JournalIntegrityError(seq, "truncated record")
        payload = raw[off : off + length]
        off += length
        (crc,) = _LEN.unpack_from(raw, off)
        off += _LEN.size
        if zlib.crc32(payload) != crc:
            raise JournalIntegrityError(seq, "checksum mismatch")
        try:
            event = JournalEvent.from_json(payload)
        except (json.JSONDecodeError, KeyError) as exc:
            raise JournalIntegrityError(seq, f"unparseable payload: {exc}") from exc
        if event.sequence_no != seq:
            raise JournalIntegrityError(seq, f"expected sequence {seq}, found {event.sequence_no}")
        events.append(event)
        seq += 1
    return events


def export_events(journal: Journal, fmt: str) -> str:
    """Render the journal as 'csv' (result rows for plotting) or 'jsonlines'."""
    if fmt == "jsonlines":
        return "\n".join(ev.to_json().decode() for ev in journal) + "\n"
    if fmt == "csv":
        lines = ["wall_time,config_id,rung,bracket,loss"]
        for ev in journal:
            if ev.kind != RESULT_RECORDED:
                continue
            p = ev.payload
            lines.append(
                f"{ev.timestamp},{p['config_id']},{p['rung']},{p['bracket_s']},{p['loss']}"
            )
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown export format {fmt!r}")


@dataclass(frozen=True)
class CheckpointRef:
    digest: str
    size: int


class CheckpointCorruptionError(IOError):
    pass


class CheckpointStore:
    """Content-addressed blob store under one experiment directory.

    Blob contents are producer-defined opaque bytes; the store only guarantees
    that what was written is what is read back (digest verified on read).
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, blob: bytes) -> CheckpointRef:
        digest = hashlib.sha256(blob).hexdigest()
        path = self.root / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(blob)
            tmp.replace(path)
        return CheckpointRef(digest=digest, size=len(blob))

    def get(self, ref: CheckpointRef | str) -> bytes:
        digest = ref.digest if isinstance(ref, CheckpointRef) else ref
        blob = (self.root / digest).read_bytes()
        if hashlib.sha256(blob).hexdigest() != digest:
            raise CheckpointCorruptionError(f"checkpoint {digest} failed digest verification")
        return blob

    def has(self, digest: str) -> bool:
        return (self.root / digest).exists()


def replay(journal: Journal | list[JournalEvent], upto: Optional[int] = None):
    """Reconstruct the experiment state encoded by the journal.

    Promotions and samples are applied exactly as journaled. `upto` replays
    only the first `upto` events (prefix replay).
    """
    from .experiment import Experiment  # local import: experiment builds on journal

    events = list(journal)
    if upto is not None:
        events = events[:upto]
    if not events:
        raise ValueError("cannot replay an empty journal")
    if events[0].kind != EXPERIMENT_CREATED:
        raise JournalIntegrityError(0, "journal must start with experiment-created")
    exp = Experiment.from_spec_doc(events[0].payload["spec"], journal=None)
    for ev in events[1:]:
        exp.apply_event(ev)
    return exp


def resume(journal: Journal, additional_n: int = 0):
    """Replay the journal into a live experiment attached to the same journal,
    optionally widening bottom rungs to admit `additional_n` more configs."""
    exp = replay(journal)
    exp.attach_journal(journal)
    if additional_n:
        exp.extend_width(additional_n)
    return exp
