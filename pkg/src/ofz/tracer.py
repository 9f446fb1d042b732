"""Block-coverage tracer.

Tracing happens at interpreter level: a callback fires on every block
entry and keeps a per-run visited set, so each block is logged once, in
first-visit order, no matter how often a loop re-enters it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from . import isa
from .cfg import BasicBlock, Edge
from .isa import OutcomeKind, ProgramImage, Snapshot


@dataclass(frozen=True)
class TraceLog:
    blocks: tuple[int, ...]
    outcome: OutcomeKind
    instructions_executed: int = 0


@dataclass
class TracerImage:
    image: ProgramImage
    block_starts: frozenset[int]
    snapshot: Snapshot
    is_start: bytes

    def __len__(self):
        return len(self.block_starts)


def build_tracer(image: ProgramImage, blocks: Mapping[int, BasicBlock] | Iterable[int]) -> TracerImage:
    starts = frozenset(blocks)
    table = bytearray(len(image.code))
    for s in starts:
        table[s] = 1
    return TracerImage(image.copy(), starts, isa.take_snapshot(image), bytes(table))


def trace(tracer: TracerImage, data: bytes, budget=None) -> TraceLog:
    seen = set()
    order = []

    def on_block(pc):
        if pc not in seen:
            seen.add(pc)
            order.append(pc)

    snap = tracer.snapshot
    kind, n, _ = isa.run_traced(snap.image_bytes, snap.entry, data, isa._limit(budget),
                                tracer.is_start, on_block)
    return TraceLog(tuple(order), kind, n)


def trace_edges(tracer: TracerImage, data: bytes, budget=None) -> set[Edge]:
    """Every (previous block, next block) transition of one execution.

    Verification oracle only; not used on the fuzzing hot path.
    """
    edges = set()
    prev = None

    def on_block(pc):
        nonlocal prev
        if prev is not None:
            edges.add(Edge(prev, pc))
        prev = pc

    snap = tracer.snapshot
    isa.run_traced(snap.image_bytes, snap.entry, data, isa._limit(budget),
                   tracer.is_start, on_block)
    return edges


def write_trace_csv(path, log: TraceLog):
    Path(path).write_text("".join(f"{b:#x}\n" for b in log.blocks), encoding="utf-8")


def read_trace_csv(path) -> tuple[int, ...]:
    return tuple(int(line, 16) for line in Path(path).read_text(encoding="utf-8").split())
