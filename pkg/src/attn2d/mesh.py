"""Deterministic message-passing simulator for a square processor grid.

Every processor runs the same Python program against a Proc endpoint. The
scheduler serializes execution: exactly one processor thread runs at a time,
control changes hands only at blocking points (a receive whose message has
not been posted, a wait on an async handle), and the round-robin visit order
is fixed. Two runs of the same program over the same inputs therefore
produce bit-identical results and ledgers.

Messages carry value copies; word counts are the scalar element counts of
the payload arrays, independent of precision. A ledger entry is charged
when an exchange completes. Misuse -- reading a buffer before its wait,
waiting a handle twice, leaking a handle, undelivered messages -- raises
SimulationFault; a cycle in which no processor can advance raises
DeadlockError with one line per blocked processor.
"""

from __future__ import annotations

import copy
import threading
from collections import deque
from contextlib import contextmanager
from dataclasses import dataclass, field
from math import isqrt
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConfigError, DeadlockError, SimulationFault

PHASE_FWD = "attention_fwd"
PHASE_BWD = "attention_bwd"
PHASE_LAYOUT = "layout"
PHASE_INTERNAL = "collective_internal"
PHASES = (PHASE_FWD, PHASE_BWD, PHASE_LAYOUT, PHASE_INTERNAL)


class ProcCoord(NamedTuple):
    r: int
    c: int

    def __str__(self) -> str:
        return f"p{self.r}{self.c}" if max(self.r, self.c) < 10 else f"p({self.r},{self.c})"


@dataclass(frozen=True)
class ProcGrid:
    """Square grid of p = side * side processors."""

    p: int

    def __post_init__(self):
        if self.p < 1:
            raise ConfigError(f"grid needs at least one processor, got {self.p}")
        if isqrt(self.p) ** 2 != self.p:
            raise ConfigError(f"grid size must be a perfect square, got {self.p}")

    @property
    def side(self) -> int:
        return isqrt(self.p)

    def coords(self) -> list[ProcCoord]:
        return [ProcCoord(r, c) for r in range(self.side) for c in range(self.side)]

    def rank(self, coord: ProcCoord) -> int:
        return coord.r * self.side + coord.c

    def coord_of_rank(self, rank: int) -> ProcCoord:
        return ProcCoord(rank // self.side, rank % self.side)

    def row_group(self, r: int) -> list[ProcCoord]:
        return [ProcCoord(r, j) for j in range(self.side)]

    def col_group(self, c: int) -> list[ProcCoord]:
        return [ProcCoord(i, c) for i in range(self.side)]


def payload_words(payload) -> int:
    """Scalar element count of all arrays in a payload tree."""
    if isinstance(payload, np.ndarray):
        return int(payload.size)
    if isinstance(payload, (tuple, list)):
        return sum(payload_words(x) for x in payload)
    raise SimulationFault(f"payloads are arrays or tuples of arrays, got {type(payload)!r}")


def payload_copy(payload):
    if isinstance(payload, np.ndarray):
        return payload.copy()
    if isinstance(payload, tuple):
        return tuple(payload_copy(x) for x in payload)
    if isinstance(payload, list):
        return [payload_copy(x) for x in payload]
    return copy.deepcopy(payload)


@dataclass
class _Counter:
    words_sent: int = 0
    words_recv: int = 0
    msgs_sent: int = 0
    msgs_recv: int = 0


class CommLedger:
    """Exact per-processor communication counters, split by phase and op."""

    def __init__(self):
        self._rows: dict[tuple[ProcCoord, str, str], _Counter] = {}

    def _row(self, coord: ProcCoord, phase: str, op: str) -> _Counter:
        key = (coord, phase, op)
        row = self._rows.get(key)
        if row is None:
            row = self._rows[key] = _Counter()
        return row

    def charge_exchange(self, coord: ProcCoord, phase: str, op: str,
                        words_out: int, words_in: int):
        row = self._row(coord, phase, op)
        row.words_sent += words_out
        row.msgs_sent += 1
        row.words_recv += words_in
        row.msgs_recv += 1

    def charge_send(self, coord: ProcCoord, phase: str, op: str, words: int):
        row = self._row(coord, phase, op)
        row.words_sent += words
        row.msgs_sent += 1

    def charge_recv(self, coord: ProcCoord, phase: str, op: str, words: int):
        row = self._row(coord, phase, op)
        row.words_recv += words
        row.msgs_recv += 1

    def _sum(self, metric: str, coord=None, phase=None, op=None) -> int:
        total = 0
        for (co, ph, o), row in self._rows.items():
            if coord is not None and co != coord:
                continue
            if phase is not None and ph != phase:
                continue
            if op is not None and o != op:
                continue
            total += getattr(row, metric)
        return total

    def words_sent(self, coord=None, phase=None, op=None) -> int:
        return self._sum("words_sent", coord, phase, op)

    def words_recv(self, coord=None, phase=None, op=None) -> int:
        return self._sum("words_recv", coord, phase, op)

    def msgs_sent(self, coord=None, phase=None, op=None) -> int:
        return self._sum("msgs_sent", coord, phase, op)

    def msgs_recv(self, coord=None, phase=None, op=None) -> int:
        return self._sum("msgs_recv", coord, phase, op)

    def totals(self) -> dict:
        return {
            "words_sent": self.words_sent(),
            "words_recv": self.words_recv(),
            "msgs_sent": self.msgs_sent(),
            "msgs_recv": self.msgs_recv(),
        }

    def assert_conserved(self):
        t = self.totals()
        if t["words_sent"] != t["words_recv"] or t["msgs_sent"] != t["msgs_recv"]:
            raise SimulationFault(f"ledger does not conserve traffic: {t}")

    def merge_from(self, other: "CommLedger"):
        for (coord, phase, op), row in other._rows.items():
            mine = self._row(coord, phase, op)
            mine.words_sent += row.words_sent
            mine.words_recv += row.words_recv
            mine.msgs_sent += row.msgs_sent
            mine.msgs_recv += row.msgs_recv

    def to_dict(self) -> dict:
        per_proc = []
        for (coord, phase, op), row in sorted(
                self._rows.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
            per_proc.append({
                "r": coord.r, "c": coord.c, "phase": phase, "op": op,
                "words_sent": row.words_sent, "words_recv": row.words_recv,
                "msgs_sent": row.msgs_sent, "msgs_recv": row.msgs_recv,
            })
        return {"per_proc": per_proc, "totals": self.totals()}


class RecvBuffer:
    """Landing slot of an async exchange. Valid between wait and free."""

    __slots__ = ("_payload", "_state", "_owner", "_stream", "_sim")

    def __init__(self, sim, owner: ProcCoord, stream: str):
        self._payload = None
        self._state = "pending"
        self._owner = owner
        self._stream = stream
        self._sim = sim
        sim._buffer_opened(owner, stream)

    @property
    def value(self):
        if self._state == "pending":
            raise SimulationFault(
                f"{self._owner}: read of stream {self._stream!r} buffer before wait")
        if self._state == "freed":
            raise SimulationFault(
                f"{self._owner}: read of stream {self._stream!r} buffer after free")
        return self._payload

    def free(self):
        if self._state == "freed":
            raise SimulationFault(f"{self._owner}: buffer freed twice")
        self._state = "freed"
        self._payload = None
        self._sim._buffer_closed(self._owner, self._stream)


@dataclass
class AsyncHandle:
    """One outstanding async exchange; must be waited exactly once."""

    owner: ProcCoord
    to: ProcCoord
    frm: ProcCoord
    tag: str
    stream: str
    phase: str
    op: str
    words_out: int
    buffer: RecvBuffer
    waited: bool = False
    seq: int = 0


class _Aborted(Exception):
    pass


class _Runtime:
    __slots__ = ("coord", "thread", "resume_evt", "finished", "blocked_on",
                 "result", "error", "proc")

    def __init__(self, coord: ProcCoord):
        self.coord = coord
        self.thread: threading.Thread | None = None
        self.resume_evt = threading.Event()
        self.finished = False
        self.blocked_on: str | None = None
        self.result = None
        self.error: BaseException | None = None
        self.proc: "Proc" | None = None


class Proc:
    """Per-processor endpoint handed to SPMD programs."""

    def __init__(self, sim: "_Simulator", rt: _Runtime):
        self._sim = sim
        self._rt = rt
        self.coord = rt.coord
        self.grid = sim.grid
        self._phase = PHASE_INTERNAL
        self._open_handles: set[int] = set()
        self._next_handle = 0

    # -- phases -----------------------------------------------------------

    @contextmanager
    def phase(self, name: str):
        if name not in PHASES:
            raise ConfigError(f"unknown ledger phase {name!r}")
        prev, self._phase = self._phase, name
        try:
            yield
        finally:
            self._phase = prev

    # -- low-level primitives ----------------------------------------------

    def send(self, payload, to: ProcCoord, tag: str, op: str = "send"):
        words = payload_words(payload)
        self._sim._post(self.coord, ProcCoord(*to), tag, payload_copy(payload))
        self._sim.ledger.charge_send(self.coord, self._phase, op, words)

    def recv(self, frm: ProcCoord, tag: str, op: str = "recv"):
        payload = self._blocking_pop(ProcCoord(*frm), tag)
        self._sim.ledger.charge_recv(self.coord, self._phase, op, payload_words(payload))
        return payload

    def _blocking_pop(self, frm: ProcCoord, tag: str):
        chan = self._sim._channel(frm, self.coord, tag)
        while not chan:
            self._rt.blocked_on = f"recv(from={frm}, tag={tag!r})"
            self._sim._yield_control(self._rt)
        self._rt.blocked_on = None
        self._sim._progress += 1
        return chan.popleft()

    # -- paired exchange -----------------------------------------------------

    def send_recv(self, payload, to: ProcCoord, frm: ProcCoord, tag: str,
                  op: str = "send_recv"):
        """Post payload toward `to`, then block for the message from `frm`.

        A self-exchange (to == frm == own coord) moves no words and returns
        a copy of the payload.
        """
        to, frm = ProcCoord(*to), ProcCoord(*frm)
        if to == self.coord and frm == self.coord:
            return payload_copy(payload)
        words_out = payload_words(payload)
        self._sim._post(self.coord, to, tag, payload_copy(payload))
        incoming = self._blocking_pop(frm, tag)
        self._sim.ledger.charge_exchange(
            self.coord, self._phase, op, words_out, payload_words(incoming))
        return incoming

    def async_send_recv(self, payload, to: ProcCoord, frm: ProcCoord, tag: str,
                        stream: str, op: str = "async_send_recv"):
        """Start a paired exchange; returns (buffer, handle).

        The outgoing copy is visible to the peer immediately, but the
        incoming buffer is valid only after wait(handle), and the ledger is
        charged at that completion.
        """
        to, frm = ProcCoord(*to), ProcCoord(*frm)
        buffer = RecvBuffer(self._sim, self.coord, stream)
        handle = AsyncHandle(
            owner=self.coord, to=to, frm=frm, tag=tag, stream=stream,
            phase=self._phase, op=op, words_out=payload_words(payload),
            buffer=buffer, seq=self._next_handle,
        )
        self._next_handle += 1
        if to == self.coord and frm == self.coord:
            buffer._payload = payload_copy(payload)  # self-exchange: free of charge
            handle.words_out = 0
        else:
            self._sim._post(self.coord, to, tag, payload_copy(payload))
        self._open_handles.add(handle.seq)
        return buffer, handle

    def wait(self, handle: AsyncHandle):
        """Complete an async exchange; returns the received payload."""
        if handle.owner != self.coord:
            raise SimulationFault(f"{self.coord}: waiting on {handle.owner}'s handle")
        if handle.waited:
            raise SimulationFault(f"{self.coord}: handle for tag {handle.tag!r} waited twice")
        if handle.buffer._payload is None and not (handle.to == handle.frm == self.coord):
            incoming = self._blocking_pop(handle.frm, handle.tag)
            handle.buffer._payload = incoming
            self._sim.ledger.charge_exchange(
                self.coord, handle.phase, handle.op,
                handle.words_out, payload_words(incoming))
        handle.waited = True
        handle.buffer._state = "ready"
        self._open_handles.discard(handle.seq)
        return handle.buffer._payload

    # -- collectives ---------------------------------------------------------

    def all_gather(self, payload, group: list[ProcCoord], tag: str,
                   op: str = "all_gather"):
        """Ring all-gather; returns the concatenation in group order.

        Each member forwards the newest shard it holds around the ring, so
        it sends (and receives) len(group)-1 shards in total.
        """
        group = [ProcCoord(*g) for g in group]
        g = len(group)
        pos = group.index(self.coord)
        parts: list = [None] * g
        parts[pos] = payload_copy(payload)
        cur = payload
        for step in range(1, g):
            cur = self.send_recv(cur, to=group[(pos + 1) % g], frm=group[(pos - 1) % g],
                                 tag=f"{tag}/hop", op=op)
            parts[(pos - step) % g] = cur
        return _concat_parts(parts)

    def reduce_scatter(self, data, group: list[ProcCoord], reducer: Callable,
                       slices: list[np.ndarray], tag: str, op: str = "reduce_scatter"):
        """Ring reduce-scatter of row slices of `data`.

        slices[j] gives the local row indices whose fully reduced values end
        up at group position j. Each member walks the ring sending the
        accumulating foreign slices to its left neighbor, folding its own
        contribution in with `reducer(local, incoming)`, and after
        len(group)-1 hops holds exactly its own slice.
        """
        group = [ProcCoord(*g) for g in group]
        g = len(group)
        pos = group.index(self.coord)
        if g == 1:
            return _extract_rows(data, slices[0])
        left = group[(pos - 1) % g]
        right = group[(pos + 1) % g]
        cur = _extract_rows(data, slices[(pos + 1) % g])
        for i in range(2, g + 1):
            cur = self.send_recv(cur, to=left, frm=right, tag=f"{tag}/hop", op=op)
            cur = reducer(_extract_rows(data, slices[(pos + i) % g]), cur)
        return cur


def _concat_parts(parts: list):
    if isinstance(parts[0], np.ndarray):
        return np.concatenate(parts, axis=0)
    return tuple(np.concatenate([p[i] for p in parts], axis=0)
                 for i in range(len(parts[0])))


def _extract_rows(data, rows: np.ndarray):
    if isinstance(data, np.ndarray):
        return data[rows]
    return tuple(x[rows] for x in data)


@dataclass
class SpmdRun:
    """Outcome of one run_spmd call."""

    results: dict
    ledger: CommLedger
    buffer_peaks: dict = field(default_factory=dict)


class _Simulator:
    def __init__(self, grid: ProcGrid, program: Callable, ledger: CommLedger | None):
        self.grid = grid
        self.ledger = ledger if ledger is not None else CommLedger()
        self._program = program
        self._channels: dict[tuple[ProcCoord, ProcCoord, str], deque] = {}
        self._progress = 0
        self._yield_evt = threading.Event()
        self._aborting = False
        self._buffers_live: dict[tuple[ProcCoord, str], int] = {}
        self.buffer_peaks: dict[tuple[ProcCoord, str], int] = {}
        self._rts = [_Runtime(c) for c in grid.coords()]
        for rt in self._rts:
            rt.proc = Proc(self, rt)

    # -- channels ------------------------------------------------------------

    def _channel(self, src: ProcCoord, dst: ProcCoord, tag: str) -> deque:
        key = (src, dst, tag)
        chan = self._channels.get(key)
        if chan is None:
            chan = self._channels[key] = deque()
        return chan

    def _post(self, src: ProcCoord, dst: ProcCoord, tag: str, payload):
        if not (0 <= dst.r < self.grid.side and 0 <= dst.c < self.grid.side):
            raise SimulationFault(f"{src}: send to {dst} which is outside the grid")
        self._channel(src, dst, tag).append(payload)
        self._progress += 1

    # -- buffer accounting ----------------------------------------------------

    def _buffer_opened(self, coord: ProcCoord, stream: str):
        key = (coord, stream)
        live = self._buffers_live.get(key, 0) + 1
        self._buffers_live[key] = live
        if live > self.buffer_peaks.get(key, 0):
            self.buffer_peaks[key] = live

    def _buffer_closed(self, coord: ProcCoord, stream: str):
        self._buffers_live[(coord, stream)] -= 1

    # -- scheduling -------------------------------------------------------------

    def _yield_control(self, rt: _Runtime):
        self._yield_evt.set()
        rt.resume_evt.wait()
        rt.resume_evt.clear()
        if self._aborting:
            raise _Aborted()

    def _entry(self, rt: _Runtime):
        rt.resume_evt.wait()
        rt.resume_evt.clear()
        if not self._aborting:
            try:
                rt.result = self._program(rt.proc)
            except _Aborted:
                pass
            except Exception as exc:  # surfaced by run() on the main thread
                rt.error = exc
        rt.finished = True
        self._progress += 1
        self._yield_evt.set()

    def _step(self, rt: _Runtime):
        rt.resume_evt.set()
        self._yield_evt.wait()
        self._yield_evt.clear()

    def _abort(self):
        self._aborting = True
        for rt in self._rts:
            if not rt.finished and rt.thread is not None:
                rt.resume_evt.set()
                rt.thread.join(timeout=5)

    def run(self) -> SpmdRun:
        for rt in self._rts:
            rt.thread = threading.Thread(
                target=self._entry, args=(rt,), daemon=True,
                name=f"proc-{rt.coord.r}-{rt.coord.c}")
            rt.thread.start()
        try:
            while True:
                before = self._progress
                pending = False
                for rt in self._rts:
                    if rt.finished:
                        continue
                    pending = True
                    self._step(rt)
                    if rt.error is not None:
                        err = rt.error
                        self._abort()
                        raise err
                if not pending:
                    break
                if self._progress == before:
                    blocked = {str(rt.coord): rt.blocked_on or "blocked (no reason recorded)"
                               for rt in self._rts if not rt.finished}
                    if blocked:
                        self._abort()
                        raise DeadlockError(blocked)
        finally:
            if not self._aborting and any(not rt.finished for rt in self._rts):
                self._abort()
        self._audit()
        return SpmdRun(
            results={rt.coord: rt.result for rt in self._rts},
            ledger=self.ledger,
            buffer_peaks=dict(self.buffer_peaks),
        )

    def _audit(self):
        undelivered = {key: len(chan) for key, chan in self._channels.items() if chan}
        if undelivered:
            what = ", ".join(f"{src}->{dst} tag={tag!r} x{n}"
                             for (src, dst, tag), n in undelivered.items())
            raise SimulationFault(f"run ended with undelivered messages: {what}")
        leaked = {str(rt.coord): len(rt.proc._open_handles)
                  for rt in self._rts if rt.proc._open_handles}
        if leaked:
            raise SimulationFault(f"run ended with unwaited async handles: {leaked}")
        self.ledger.assert_conserved()


def run_spmd(grid: ProcGrid, program: Callable, ledger: CommLedger | None = None) -> SpmdRun:
    """Run `program(proc)` on every grid processor under the deterministic
    scheduler; returns per-processor results, the ledger, and the per-stream
    receive-buffer high-water marks."""
    return _Simulator(grid, program, ledger).run()
