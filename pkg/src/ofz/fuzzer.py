"""Mutational fuzzing loop with interchangeable coverage-tracing strategies.

``oracle`` mode runs every test case on the trap-patched oracle and only
traces the ones that hit a trap. ``trace-all`` traces every test case and
diffs the trace against global coverage. ``hybrid`` picks one of the two
per test case from the rolling rate of coverage-increasing test cases.
``baseline`` collects no coverage at all and exists as a timing floor.

Given the same rng seed, ``oracle``, ``trace-all`` and ``hybrid`` sessions
see the same test-case stream and make the same queueing decisions.
"""

from __future__ import annotations

import hashlib
import random
import time
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import isa
from .cfg import discover_blocks
from .isa import OutcomeKind, ProgramImage
from .oracle import GlobalCoverage, OracleImage, VerdictKind, build_oracle, check_interesting, unmodify
from .tracer import TraceLog, TracerImage, build_tracer, trace

RNG_NAME = "python-random-mt19937"
RNG_VERSION = 1
MAX_CRASHES_PER_BUCKET = 8

MUTATIONS = ("bitflip", "replace", "insert", "delete", "arith16", "duplicate", "splice")
ARITH_MAX = 35


class InvalidSeed(ValueError):
    pass


class NotACrash(ValueError):
    pass


class Mode(str, Enum):
    BASELINE = "baseline"
    TRACE_ALL = "trace-all"
    ORACLE = "oracle"
    HYBRID = "hybrid"


@dataclass(frozen=True)
class TracingMode:
    kind: Mode
    threshold: float = 0.01
    window: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "kind", Mode(self.kind))
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError("hybrid threshold must lie in [0, 1]")
        if self.window < 1:
            raise ValueError("hybrid window must be >= 1")

    def __str__(self):
        return self.kind.value


BASELINE = TracingMode(Mode.BASELINE)
TRACE_ALL = TracingMode(Mode.TRACE_ALL)
ORACLE = TracingMode(Mode.ORACLE)


def hybrid(threshold: float, window: int = 1000) -> TracingMode:
    return TracingMode(Mode.HYBRID, threshold, window)


@dataclass(frozen=True)
class TestCase:
    data: bytes
    id: int = -1
    parent: int | None = None
    mutation: str = "seed"

    __test__ = False  # not a pytest class


@dataclass
class SeedEntry:
    testcase: TestCase
    new_blocks: int = 0

    @property
    def cov_tag(self) -> bool:
        return self.new_blocks > 0


@dataclass
class FuzzStats:
    executed: int = 0
    coverage_increasing: int = 0
    crashes_total: int = 0
    crashes_unique: int = 0
    timeouts: int = 0
    covered_blocks: int = 0
    total_blocks: int = 0
    traced: int = 0
    queued: int = 0
    # wall-clock accumulators; excluded from counters() because they vary run to run
    time_ns: dict[str, int] = field(default_factory=lambda: {
        "exec": 0, "trace": 0, "unmodify": 0, "mutate": 0})

    def counters(self) -> dict[str, int]:
        return {k: getattr(self, k) for k in (
            "executed", "coverage_increasing", "crashes_total", "crashes_unique",
            "timeouts", "covered_blocks", "total_blocks", "traced", "queued")}


@dataclass(frozen=True, slots=True)
class Step:
    """What happened to one test case; handed to the optional observer."""

    testcase: TestCase
    route: str  # "oracle", "trace" or "exec"
    outcome: OutcomeKind | VerdictKind
    instructions: int
    coverage_increasing: bool
    new_blocks: int


@dataclass
class FuzzResult:
    stats: FuzzStats
    queue: list[SeedEntry]
    crashes: dict[str, list[TestCase]]
    coverage: GlobalCoverage
    covinc_ids: list[int]
    oracle: OracleImage | None
    stream: list[bytes] | None = None


# -- mutation ---------------------------------------------------------------

def bit_flip(data: bytes, pos: int, bit: int) -> bytes:
    out = bytearray(data)
    out[pos] ^= 1 << bit
    return bytes(out)


def mutate(seed: bytes, rng: random.Random, queue: Sequence[bytes] = (),
           max_len: int = isa.DEFAULT_INPUT_LEN_MAX, tc_id: int = -1,
           parent: int | None = None) -> TestCase:
    """Apply one randomly chosen mutation to ``seed``.

    Degenerate picks fall back rather than fail: delete on a one-byte seed
    inserts instead, growth at ``max_len`` replaces instead, arith16 on a
    one-byte seed and splice without a usable partner bit-flip instead.
    The result is never empty and never longer than ``max_len``.
    """
    if not seed:
        raise ValueError("cannot mutate an empty seed")
    buf = bytearray(seed[:max_len])
    op = MUTATIONS[rng.randrange(len(MUTATIONS))]
    if op == "delete" and len(buf) < 2:
        op = "insert"
    if op in ("insert", "duplicate") and len(buf) >= max_len:
        op = "replace"
    if op == "arith16" and len(buf) < 2:
        op = "bitflip"
    partner = None
    if op == "splice":
        if queue:
            partner = queue[rng.randrange(len(queue))]
        if not partner or partner == seed:
            op = "bitflip"

    n = len(buf)
    if op == "bitflip":
        pos = rng.randrange(n)
        buf[pos] ^= 1 << rng.randrange(8)
    elif op == "replace":
        buf[rng.randrange(n)] = rng.randrange(256)
    elif op == "insert":
        buf.insert(rng.randrange(n + 1), rng.randrange(256))
    elif op == "delete":
        del buf[rng.randrange(n)]
    elif op == "arith16":
        pos = rng.randrange(n - 1)
        delta = rng.randint(1, ARITH_MAX) * (1 if rng.random() < 0.5 else -1)
        word = (buf[pos] | buf[pos + 1] << 8) + delta
        buf[pos] = word & 0xFF
        buf[pos + 1] = (word >> 8) & 0xFF
    elif op == "duplicate":
        start = rng.randrange(n)
        length = rng.randint(1, min(n - start, 8))
        at = rng.randrange(n + 1)
        buf[at:at] = buf[start:start + length]
        del buf[max_len:]
    elif op == "splice":
        cut = rng.randrange(1, n + 1)
        buf = buf[:cut] + bytearray(partner[rng.randrange(len(partner)):])
        del buf[max_len:]
    return TestCase(bytes(buf), tc_id, parent, op)


# -- triage -----------------------------------------------------------------

def crash_bucket(blocks: Iterable[int]) -> str:
    key = ",".join(f"{b:x}" for b in sorted(set(blocks)))
    return hashlib.sha1(key.encode()).hexdigest()[:16]


def triage_crash(target: ProgramImage | TracerImage, testcase: TestCase | bytes, budget=None) -> str:
    """Bucket id for a crashing input: a hash of the set of blocks it visited."""
    tracer = target if isinstance(target, TracerImage) else build_tracer(target, discover_blocks(target))
    data = testcase.data if isinstance(testcase, TestCase) else testcase
    log = trace(tracer, data, budget)
    if log.outcome is not OutcomeKind.CRASH:
        raise NotACrash(f"input ended with {log.outcome.value}, not a crash")
    return crash_bucket(log.blocks)


# -- loop -------------------------------------------------------------------

class Fuzzer:
    def __init__(self, image: ProgramImage, mode: TracingMode, seeds: Sequence[bytes],
                 budget=None, rng_seed: int = 0, excluded: Iterable[int] = (),
                 keep_stream: bool = False, observer: Callable[[Step], None] | None = None):
        self.image = image
        self.mode = mode
        self.limit = isa._limit(budget)
        self.rng = random.Random(rng_seed)
        self.observer = observer
        self.blocks = discover_blocks(image)
        self.excluded = frozenset(excluded)
        self.pristine = isa.take_snapshot(image)
        self.tracer = build_tracer(image, self.blocks)
        self.oracle = None
        if mode.kind in (Mode.ORACLE, Mode.HYBRID):
            self.oracle = build_oracle(image, self.blocks, self.excluded)
        self.coverage = GlobalCoverage()
        self.stats = FuzzStats(total_blocks=len(self.blocks))
        self.queue: list[SeedEntry] = []
        self.crashes: dict[str, list[TestCase]] = {}
        self.covinc_ids: list[int] = []
        self.stream = [] if keep_stream else None
        self._cursor = 0
        self._window = deque(maxlen=mode.window)
        self._window_hits = 0

        if not seeds:
            raise InvalidSeed("at least one seed is required")
        for i, s in enumerate(seeds):
            s = bytes(s)
            if not s:
                raise InvalidSeed(f"seed {i} is empty")
            if len(s) > image.input_len_max:
                raise InvalidSeed(f"seed {i} exceeds input_len_max")
            out = isa.execute(self.pristine, s, self.limit)
            if out.kind in (OutcomeKind.TIMEOUT, OutcomeKind.TRAP):
                raise InvalidSeed(f"seed {i} ends with {out.kind.value} on the pristine image")
            self.queue.append(SeedEntry(TestCase(s, -(i + 1), None, "seed")))
        self._queue_data = [e.testcase.data for e in self.queue]

    def _use_tracing(self) -> bool:
        kind = self.mode.kind
        if kind is Mode.TRACE_ALL:
            return True
        if kind is Mode.ORACLE:
            return False
        # empty window counts as rate 1.0 so a fresh session starts traced
        rate = self._window_hits / len(self._window) if self._window else 1.0
        return rate >= self.mode.threshold

    def _record_rate(self, hit: bool):
        w = self._window
        if len(w) == w.maxlen:
            self._window_hits -= w[0]
        w.append(hit)
        self._window_hits += hit

    def next_testcase(self) -> TestCase:
        parent_idx = self._cursor % len(self.queue)
        self._cursor += 1
        t0 = time.perf_counter_ns()
        tc = mutate(self.queue[parent_idx].testcase.data, self.rng, self._queue_data,
                    self.image.input_len_max, self.stats.executed, parent_idx)
        self.stats.time_ns["mutate"] += time.perf_counter_ns() - t0
        return tc

    def process(self, tc: TestCase) -> Step:
        stats = self.stats
        clock = time.perf_counter_ns
        log = None
        new = 0
        if self.mode.kind is Mode.BASELINE:
            t0 = clock()
            kind, n, _ = isa.run(self.pristine.image_bytes, self.pristine.entry, tc.data, self.limit)
            stats.time_ns["exec"] += clock() - t0
            route, outcome = "exec", kind
        elif self._use_tracing():
            t0 = clock()
            log = trace(self.tracer, tc.data, self.limit)
            t1 = clock()
            stats.traced += 1
            if self.oracle is not None:
                # hybrid: keep the oracle in sync, restarting it only on new coverage
                covered, excluded = self.coverage.covered, self.excluded
                if any(b not in covered and b not in excluded for b in log.blocks):
                    new = unmodify(self.oracle, self.coverage, log)
            else:
                new = len(self.coverage.merge(log.blocks, self.excluded))
            stats.time_ns["trace"] += t1 - t0
            stats.time_ns["unmodify"] += clock() - t1
            route, outcome, n = "trace", log.outcome, log.instructions_executed
        else:
            t0 = clock()
            verdict = check_interesting(self.oracle, tc.data, self.limit)
            t1 = clock()
            stats.time_ns["exec"] += t1 - t0
            route, n = "oracle", verdict.instructions_executed
            if verdict.kind is VerdictKind.COVERAGE_INCREASING:
                log = trace(self.tracer, tc.data, self.limit)
                t2 = clock()
                stats.traced += 1
                new = unmodify(self.oracle, self.coverage, log)
                stats.time_ns["trace"] += t2 - t1
                stats.time_ns["unmodify"] += clock() - t2
                outcome = log.outcome
            else:
                outcome = {VerdictKind.NOT_INTERESTING: OutcomeKind.CLEAN_EXIT,
                           VerdictKind.CRASH: OutcomeKind.CRASH,
                           VerdictKind.TIMEOUT: OutcomeKind.TIMEOUT}[verdict.kind]

        stats.executed += 1
        hit = new > 0
        if self.mode.kind is Mode.HYBRID:
            self._record_rate(hit)
        if hit:
            stats.coverage_increasing += 1
            self.covinc_ids.append(tc.id)
        if outcome is OutcomeKind.CRASH:
            stats.crashes_total += 1
            if log is None:
                log = trace(self.tracer, tc.data, self.limit)
            bucket = crash_bucket(log.blocks)
            saved = self.crashes.setdefault(bucket, [])
            if len(saved) < MAX_CRASHES_PER_BUCKET:
                saved.append(tc)
            stats.crashes_unique = len(self.crashes)
        elif outcome is OutcomeKind.TIMEOUT:
            stats.timeouts += 1
        elif hit:
            self.queue.append(SeedEntry(tc, new))
            self._queue_data.append(tc.data)
            stats.queued += 1
        stats.covered_blocks = len(self.coverage)
        if self.stream is not None:
            self.stream.append(tc.data)
        step = Step(tc, route, outcome, n, hit, new)
        if self.observer is not None:
            self.observer(step)
        return step

    def run(self, max_testcases: int | None = None, wall_time: float | None = None) -> FuzzResult:
        if max_testcases is None and wall_time is None:
            raise ValueError("give a test-case count or a wall-time limit")
        deadline = None if wall_time is None else time.monotonic() + wall_time
        while max_testcases is None or self.stats.executed < max_testcases:
            if deadline is not None and time.monotonic() >= deadline:
                break
            self.process(self.next_testcase())
        return self.result()

    def result(self) -> FuzzResult:
        return FuzzResult(self.stats, self.queue, self.crashes, self.coverage,
                          self.covinc_ids, self.oracle, self.stream)


def fuzz_loop(image: ProgramImage, mode: TracingMode, seeds: Sequence[bytes], budget=None,
              max_testcases: int | None = None, wall_time: float | None = None,
              rng_seed: int = 0, **kwargs) -> FuzzResult:
    fuzzer = Fuzzer(image, mode, seeds, budget, rng_seed, **kwargs)
    return fuzzer.run(max_testcases, wall_time)


def write_corpus(result: FuzzResult, out_dir):
    """Lay out ``queue/``, ``crashes/`` and the deterministic summary CSVs."""
    out = Path(out_dir)
    (out / "queue").mkdir(parents=True, exist_ok=True)
    (out / "crashes").mkdir(exist_ok=True)
    for seq, entry in enumerate(result.queue):
        tag = "+cov" if entry.cov_tag else "orig"
        (out / "queue" / f"id_{seq:06d}_{tag}").write_bytes(entry.testcase.data)
    for bucket, cases in sorted(result.crashes.items()):
        d = out / "crashes" / f"bucket_{bucket}"
        d.mkdir(exist_ok=True)
        for tc in cases:
            (d / f"id_{tc.id:06d}").write_bytes(tc.data)
    with open(out / "stats.csv", "w", encoding="utf-8", newline="") as f:
        f.write("key,value\n")
        for k, v in result.stats.counters().items():
            f.write(f"{k},{v}\n")
    with open(out / "covinc.csv", "w", encoding="utf-8", newline="") as f:
        f.write("testcase_id\n")
        f.writelines(f"{i}\n" for i in result.covinc_ids)
    with open(out / "coverage.csv", "w", encoding="utf-8", newline="") as f:
        f.writelines(f"{b:#x}\n" for b in sorted(result.coverage.covered))
