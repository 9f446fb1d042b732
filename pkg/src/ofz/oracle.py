"""Interest oracle: a trap-patched copy of the target.

Every block that has not been covered yet starts with ``TRAP``. An input
that reaches one of them stops at the trap and is flagged as
coverage-increasing; everything else runs the exact instructions of the
original program. After a coverage-increasing input has been traced, its
newly covered blocks get their original first byte back ("unmodify") so
they never fire again.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping

from . import isa
from .cfg import BasicBlock
from .isa import OutcomeKind, ProgramImage, Snapshot
from .tracer import TraceLog


class UnknownBlock(KeyError):
    pass


class VerdictKind(str, Enum):
    COVERAGE_INCREASING = "coverage_increasing"
    NOT_INTERESTING = "not_interesting"
    CRASH = "crash"
    TIMEOUT = "timeout"


_VERDICT = {
    OutcomeKind.TRAP: VerdictKind.COVERAGE_INCREASING,
    OutcomeKind.CLEAN_EXIT: VerdictKind.NOT_INTERESTING,
    OutcomeKind.CRASH: VerdictKind.CRASH,
    OutcomeKind.TIMEOUT: VerdictKind.TIMEOUT,
}


@dataclass(frozen=True, slots=True)
class InterestVerdict:
    kind: VerdictKind
    trap_addr: int | None = None
    instructions_executed: int = 0


@dataclass
class GlobalCoverage:
    covered: set[int] = field(default_factory=set)

    def __len__(self):
        return len(self.covered)

    def __contains__(self, start):
        return start in self.covered

    def merge(self, blocks: Iterable[int], excluded=frozenset()) -> list[int]:
        """Add unseen blocks; return the newly covered ones in trace order."""
        new = [b for b in blocks if b not in self.covered and b not in excluded]
        self.covered.update(new)
        return new


@dataclass
class OracleImage:
    image: ProgramImage
    patch_map: dict[int, int]
    excluded: frozenset[int]
    block_starts: frozenset[int]
    snapshot: Snapshot | None = None

    @property
    def running(self) -> bool:
        return self.snapshot is not None


def build_oracle(image: ProgramImage, blocks: Mapping[int, BasicBlock] | Iterable[int],
                 excluded: Iterable[int] = ()) -> OracleImage:
    starts = frozenset(blocks)
    excluded = frozenset(excluded)
    if not excluded <= starts:
        raise UnknownBlock(f"excluded offsets {sorted(excluded - starts)} are not block starts")
    patched = image.copy()
    patch_map = {}
    for start in sorted(starts - excluded):
        patch_map[start] = isa.patch_byte(patched, start, isa.TRAP)
    oracle = OracleImage(patched, patch_map, excluded, starts)
    start_forkserver(oracle)
    return oracle


def start_forkserver(oracle: OracleImage):
    oracle.snapshot = isa.take_snapshot(oracle.image)


def stop_forkserver(oracle: OracleImage):
    oracle.snapshot = None


def check_interesting(oracle: OracleImage, data: bytes, budget=None) -> InterestVerdict:
    snap = oracle.snapshot
    if snap is None:
        raise RuntimeError("oracle forkserver is stopped")
    kind, n, addr = isa.run(snap.image_bytes, snap.entry, data, isa._limit(budget))
    return InterestVerdict(_VERDICT[kind], addr, n)


def restore_blocks(oracle: OracleImage, cov: GlobalCoverage, log: TraceLog) -> int:
    """Put original bytes back for every block of ``log`` not yet globally covered."""
    for b in log.blocks:
        if b not in oracle.block_starts:
            raise UnknownBlock(f"traced address {b:#x} is not a known block start")
    new = cov.merge(log.blocks, oracle.excluded)
    code = oracle.image.code
    for b in new:
        code[b] = oracle.patch_map.pop(b)
    return len(new)


def unmodify(oracle: OracleImage, cov: GlobalCoverage, log: TraceLog) -> int:
    stop_forkserver(oracle)
    restored = restore_blocks(oracle, cov, log)
    start_forkserver(oracle)
    return restored


def write_coverage_csv(path, cov: GlobalCoverage):
    Path(path).write_text("".join(f"{b:#x}\n" for b in sorted(cov.covered)), encoding="utf-8")


def read_coverage_csv(path) -> GlobalCoverage:
    text = Path(path).read_text(encoding="utf-8")
    return GlobalCoverage({int(line, 16) for line in text.split()})
