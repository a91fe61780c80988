"""Simulation trace format.

A trace is a newline-delimited text file, one hex-encoded event per line.
Events are encoded with the same primitives as the wire format so the file
is deterministic byte for byte: identical seed and script give an identical
trace. The audit command refolds a trace without access to the live run.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, List

from .. import codec
from ..errors import CodecError


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    step: int
    kind: str
    actor: str = ""
    peer: str = ""
    amount: int = 0
    aux: int = 0  # counters, indices, window sizes
    note: str = ""
    data: bytes = b""  # encoded frame or payment key, when relevant


def encode_event(ev: TraceEvent) -> bytes:
    w = codec.ByteWriter()
    w.u64(ev.seq)
    w.u32(ev.step)
    w.string(ev.kind)
    w.string(ev.actor)
    w.string(ev.peer)
    w.u64(ev.amount)
    w.u64(ev.aux)
    w.string(ev.note)
    w.lp_bytes(ev.data)
    return w.getvalue()


def decode_event(data: bytes) -> TraceEvent:
    r = codec.ByteReader(data)
    ev = TraceEvent(
        seq=r.u64(),
        step=r.u32(),
        kind=r.string(),
        actor=r.string(),
        peer=r.string(),
        amount=r.u64(),
        aux=r.u64(),
        note=r.string(),
        data=r.lp_bytes(),
    )
    r.expect_end()
    return ev


def dump_trace(events: Iterable[TraceEvent]) -> str:
    return "".join(encode_event(ev).hex() + "\n" for ev in events)


def load_trace(text: str) -> List[TraceEvent]:
    events = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            raw = bytes.fromhex(line)
        except ValueError:
            raise CodecError("malformed", f"trace line {lineno} is not hex")
        events.append(decode_event(raw))
    return events
