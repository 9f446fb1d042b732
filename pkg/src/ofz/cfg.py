"""Static basic-block recovery, critical-edge detection and splitting.

The ISA has no indirect control flow, so recursive descent from the entry
point is both sound and complete. Unreachable bytes are never assigned to
a block.

The entry block is treated as having one extra, implicit predecessor (the
program start). Without it, an edge ``a -> entry`` where ``a`` branches two
ways and ``entry`` has one static predecessor could not be recovered from
block coverage, since the entry block is always covered.
"""

from __future__ import annotations

import csv
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, NamedTuple

from . import isa
from .isa import MalformedImage, ProgramImage


class ImageTooLarge(ValueError):
    pass


class CriticalEdgesPresent(ValueError):
    pass


class Terminator(str, Enum):
    FALLTHROUGH = "fallthrough"
    JMP = "jmp"
    CONDJMP = "condjmp"
    HALT = "halt"
    ABORT = "abort"


class Edge(NamedTuple):
    src: int
    dest: int


@dataclass(frozen=True)
class BasicBlock:
    start: int
    length: int
    terminator: Terminator
    # CondJmp: (taken, fallthrough); Jmp/Fallthrough: (target,); Halt/Abort: ()
    successors: tuple[int, ...] = ()

    @property
    def end(self) -> int:
        return self.start + self.length


@dataclass(frozen=True)
class ControlFlowGraph:
    entry: int
    blocks: Mapping[int, BasicBlock]
    edges: frozenset[Edge] = field(default=frozenset())

    @classmethod
    def from_blocks(cls, entry: int, blocks: Mapping[int, BasicBlock]) -> ControlFlowGraph:
        if entry not in blocks:
            raise MalformedImage("entry block missing from block table")
        edges = set()
        for b in blocks.values():
            for s in b.successors:
                if s not in blocks:
                    raise MalformedImage(f"successor {s:#x} of block {b.start:#x} is not a block start")
                edges.add(Edge(b.start, s))
        return cls(entry, dict(blocks), frozenset(edges))

    def successors(self, start: int) -> set[int]:
        return set(self.blocks[start].successors)

    def predecessors(self) -> dict[int, set[int]]:
        preds = {s: set() for s in self.blocks}
        for e in self.edges:
            preds[e.dest].add(e.src)
        return preds

    def out_degree(self) -> dict[int, int]:
        return {s: len(set(b.successors)) for s, b in self.blocks.items()}

    def in_degree(self) -> dict[int, int]:
        """Distinct predecessors, plus one for the implicit entry edge."""
        deg = {s: 0 for s in self.blocks}
        for e in self.edges:
            deg[e.dest] += 1
        deg[self.entry] += 1
        return deg

    def block_starts(self) -> frozenset[int]:
        return frozenset(self.blocks)

    def reachable(self) -> set[int]:
        seen = {self.entry}
        todo = deque([self.entry])
        while todo:
            for s in self.blocks[todo.popleft()].successors:
                if s not in seen:
                    seen.add(s)
                    todo.append(s)
        return seen


def discover_blocks(image: ProgramImage) -> dict[int, BasicBlock]:
    """Recover every block reachable from the entry point, keyed by start offset."""
    code = image.code
    insns: dict[int, tuple[int, int, int | None]] = {}
    leaders = {image.entry}
    work = [image.entry]
    while work:
        pc = work.pop()
        while pc not in insns:
            op, size, target = isa.decode(code, pc)
            insns[pc] = (op, size, target)
            if op in (isa.HALT, isa.ABORT):
                break
            if target is not None:
                if not 0 <= target < len(code):
                    raise MalformedImage(f"branch at {pc:#x} targets {target:#x} outside code")
                leaders.add(target)
                work.append(target)
                if op == isa.JMP:
                    break
                leaders.add(pc + size)
            pc += size
    # overlapping decodes mean some branch landed mid-operand
    starts = sorted(insns)
    for a, b in zip(starts, starts[1:]):
        if a + insns[a][1] > b:
            raise MalformedImage(f"instruction at {b:#x} overlaps the one at {a:#x}")

    blocks = {}
    for lead in leaders:
        pc = lead
        while True:
            op, size, target = insns[pc]
            nxt = pc + size
            if op == isa.HALT:
                term, succ = Terminator.HALT, ()
            elif op == isa.ABORT:
                term, succ = Terminator.ABORT, ()
            elif op == isa.JMP:
                term, succ = Terminator.JMP, (target,)
            elif op in isa.COND_BRANCHES:
                term, succ = Terminator.CONDJMP, (target, nxt)
            elif nxt in leaders:
                term, succ = Terminator.FALLTHROUGH, (nxt,)
            else:
                pc = nxt
                continue
            blocks[lead] = BasicBlock(lead, nxt - lead, term, succ)
            break
    return dict(sorted(blocks.items()))


def build_cfg(image: ProgramImage) -> ControlFlowGraph:
    return ControlFlowGraph.from_blocks(image.entry, discover_blocks(image))


def find_critical_edges(cfg: ControlFlowGraph) -> frozenset[Edge]:
    outs = cfg.out_degree()
    ins = cfg.in_degree()
    return frozenset(e for e in cfg.edges if outs[e.src] >= 2 and ins[e.dest] >= 2)


def split_critical_edges(image: ProgramImage, cfg: ControlFlowGraph):
    """Split every critical edge with a tail-appended dummy ``JMP`` block.

    Returns ``(new_image, new_cfg, dummy_map)`` where ``dummy_map`` maps each
    dummy block start to the original edge it stands for. When only the
    taken arm of a conditional branch is critical, the branch is retargeted
    at the dummy. A critical fall-through arm cannot be retargeted in place,
    so the conditional branch itself is moved to a tail stub
    ``Jcc X; JMP fallthrough`` and the original site becomes ``JMP stub``;
    the stub's own fall-through ``JMP`` is then the dummy for that arm.
    """
    critical = find_critical_edges(cfg)
    if not critical:
        return image.copy(), cfg, {}
    code = bytearray(image.code)
    by_src = defaultdict(set)
    for e in critical:
        by_src[e.src].add(e.dest)
    dummy_map: dict[int, Edge] = {}

    def put_jmp(at: int, op: int, target: int):
        try:
            code[at:at + 3] = bytes([op]) + isa.encode_rel(at + 3, target)
        except OverflowError as exc:
            raise ImageTooLarge(str(exc)) from None

    for src in sorted(by_src):
        block = cfg.blocks[src]
        if block.terminator is not Terminator.CONDJMP:
            raise AssertionError(f"critical edge from non-branching block {src:#x}")
        site = block.end - 3
        op = code[site]
        taken, fall = block.successors
        dests = by_src[src]
        if fall not in dests:
            dummy = len(code)
            code.extend(b"\0\0\0")
            put_jmp(dummy, isa.JMP, taken)
            put_jmp(site, op, dummy)
            dummy_map[dummy] = Edge(src, taken)
            continue
        stub = len(code)
        code.extend(bytes(6))
        put_jmp(stub + 3, isa.JMP, fall)
        dummy_map[stub + 3] = Edge(src, fall)
        branch_to = taken
        if taken in dests:
            branch_to = len(code)
            code.extend(b"\0\0\0")
            put_jmp(branch_to, isa.JMP, taken)
            dummy_map[branch_to] = Edge(src, taken)
        put_jmp(stub, op, branch_to)
        put_jmp(site, isa.JMP, stub)

    new_image = ProgramImage(code, image.entry, image.input_len_max)
    new_cfg = build_cfg(new_image)
    return new_image, new_cfg, dict(sorted(dummy_map.items()))


def infer_edge_coverage(covered: Iterable[int], cfg: ControlFlowGraph) -> frozenset[Edge]:
    """Edges implied by a set of covered blocks on a critical-edge-free graph."""
    if find_critical_edges(cfg):
        raise CriticalEdgesPresent("split critical edges before inferring edge coverage")
    covered = set(covered)
    outs = cfg.out_degree()
    ins = cfg.in_degree()
    return frozenset(
        e for e in cfg.edges
        if e.src in covered and e.dest in covered and (outs[e.src] == 1 or ins[e.dest] == 1)
    )


BLOCK_CSV_HEADER = ["start", "len", "terminator", "succ1", "succ2"]


def _hex(v: int) -> str:
    return f"{v:#x}"


def block_rows(blocks: Mapping[int, BasicBlock]) -> list[list[str]]:
    rows = []
    for start in sorted(blocks):
        b = blocks[start]
        succ = [_hex(s) for s in b.successors] + ["", ""]
        rows.append([_hex(b.start), str(b.length), b.terminator.value, succ[0], succ[1]])
    return rows


def write_block_csv(path, blocks: Mapping[int, BasicBlock]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(BLOCK_CSV_HEADER)
        w.writerows(block_rows(blocks))


def read_block_csv(path) -> dict[int, BasicBlock]:
    blocks = {}
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            succ = tuple(int(row[k], 16) for k in ("succ1", "succ2") if row[k])
            start = int(row["start"], 16)
            blocks[start] = BasicBlock(start, int(row["len"]), Terminator(row["terminator"]), succ)
    return blocks
