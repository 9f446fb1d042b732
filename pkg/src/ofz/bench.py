"""Dataset recording, timed replay under each tracing mode, and overhead reports.

Replay times only the work spent executing or tracing each test case
(plus oracle maintenance for coverage-increasing ones); setup such as CFG
recovery and oracle construction happens before the clock starts.
"""

from __future__ import annotations

import csv
import gc
import struct
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from . import isa
from .cfg import discover_blocks
from .fuzzer import Fuzzer, Mode, TracingMode
from .isa import OutcomeKind, ProgramImage
from .oracle import (GlobalCoverage, VerdictKind, build_oracle, check_interesting,
                     restore_blocks, start_forkserver, stop_forkserver)
from .stats import DEFAULT_TRIM, CrossoverModel, trimmed_mean
from .tracer import build_tracer, trace

DATASET_MAGIC = b"OFDS"
COMPONENTS = ("trace_ns", "stop_ns", "unmodify_ns", "start_ns")
TIMING_COLUMNS = ["trial", "testcase_id", "mode", "verdict", "total_ns", *COMPONENTS]
REPORT_COLUMNS = ["mode", "relative_time", "rate", "trace_frac", "stop_frac",
                  "unmodify_frac", "start_frac"]


class ChecksumMismatch(ValueError):
    pass


class MismatchedDatasets(ValueError):
    pass


@dataclass
class Dataset:
    records: list[bytes]
    image_checksum: str
    rng_seed: int
    mode: str = Mode.TRACE_ALL.value

    def __len__(self):
        return len(self.records)


def record_dataset(image: ProgramImage, seeds: Sequence[bytes], rng_seed: int, n: int,
                   budget=None) -> Dataset:
    """Fuzz ``n`` test cases in trace-all mode and keep every one, in order."""
    if n < 1:
        raise ValueError("dataset needs at least one test case")
    fz = Fuzzer(image, TracingMode(Mode.TRACE_ALL), seeds, budget, rng_seed, keep_stream=True)
    fz.run(max_testcases=n)
    return Dataset(fz.stream, image.checksum(), rng_seed, Mode.TRACE_ALL.value)


def dump_dataset(ds: Dataset) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<I", len(ds.records))]
    for r in ds.records:
        parts.append(struct.pack("<I", len(r)))
        parts.append(r)
    return b"".join(parts)


def parse_dataset(blob: bytes) -> list[bytes]:
    if blob[:4] != DATASET_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    (count,) = struct.unpack_from("<I", blob, 4)
    pos = 8
    records = []
    for _ in range(count):
        (length,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        if pos + length > len(blob):
            raise ValueError("dataset file truncated")
        records.append(blob[pos:pos + length])
        pos += length
    if pos != len(blob):
        raise ValueError("trailing bytes after dataset records")
    return records


def _meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def write_dataset(path, ds: Dataset):
    Path(path).write_bytes(dump_dataset(ds))
    _meta_path(path).write_text(
        f"image_checksum={ds.image_checksum}\nrng_seed={ds.rng_seed}\nmode={ds.mode}\n"
        f"count={len(ds.records)}\n", encoding="utf-8")


def read_dataset(path) -> Dataset:
    records = parse_dataset(Path(path).read_bytes())
    meta = {}
    mp = _meta_path(path)
    if mp.exists():
        for line in mp.read_text(encoding="utf-8").splitlines():
            if "=" in line:
                k, v = line.split("=", 1)
                meta[k] = v
    return Dataset(records, meta.get("image_checksum", ""), int(meta.get("rng_seed", 0)),
                   meta.get("mode", Mode.TRACE_ALL.value))


@dataclass(frozen=True, slots=True)
class TimingRecord:
    trial: int
    testcase_id: int
    mode: str
    total_ns: int
    verdict: str | None = None
    trace_ns: int | None = None
    stop_ns: int | None = None
    unmodify_ns: int | None = None
    start_ns: int | None = None

    @property
    def has_components(self) -> bool:
        return self.trace_ns is not None


_CLEAN_VERDICT = {
    OutcomeKind.CLEAN_EXIT: VerdictKind.NOT_INTERESTING.value,
    OutcomeKind.CRASH: VerdictKind.CRASH.value,
    OutcomeKind.TIMEOUT: VerdictKind.TIMEOUT.value,
}
_CI = VerdictKind.COVERAGE_INCREASING.value


def replay_trial(dataset: Dataset, image: ProgramImage, mode: TracingMode, trial: int = 0,
                 budget=None) -> list[TimingRecord]:
    """Replay every test case once under ``mode`` and time each one."""
    if dataset.image_checksum and dataset.image_checksum != image.checksum():
        raise ChecksumMismatch("dataset was recorded against a different image")
    limit = isa._limit(budget)
    name = mode.kind.value
    blocks = discover_blocks(image)
    pristine = isa.take_snapshot(image)
    tracer = build_tracer(image, blocks)
    oracle = None
    if mode.kind in (Mode.ORACLE, Mode.HYBRID):
        oracle = build_oracle(image, blocks)
    cov = GlobalCoverage()
    window = deque(maxlen=mode.window)
    hits = 0
    clock = time.perf_counter_ns
    out = []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i, data in enumerate(dataset.records):
            kind = mode.kind
            if kind is Mode.HYBRID:
                rate = hits / len(window) if window else 1.0
                kind = Mode.TRACE_ALL if rate >= mode.threshold else Mode.ORACLE
            if kind is Mode.BASELINE:
                t0 = clock()
                isa.execute(pristine, data, limit)
                t1 = clock()
                rec = TimingRecord(trial, i, name, t1 - t0)
            elif kind is Mode.TRACE_ALL:
                t0 = clock()
                log = trace(tracer, data, limit)
                if oracle is not None and any(b not in cov.covered for b in log.blocks):
                    new = restore_blocks(oracle, cov, log)
                    stop_forkserver(oracle)
                    start_forkserver(oracle)
                else:
                    new = len(cov.merge(log.blocks))
                t1 = clock()
                rec = TimingRecord(trial, i, name, t1 - t0, _CI if new else _CLEAN_VERDICT[log.outcome])
            else:
                t0 = clock()
                v = check_interesting(oracle, data, limit)
                t1 = clock()
                if v.kind is VerdictKind.COVERAGE_INCREASING:
                    log = trace(tracer, data, limit)
                    t2 = clock()
                    stop_forkserver(oracle)
                    t3 = clock()
                    restore_blocks(oracle, cov, log)
                    t4 = clock()
                    start_forkserver(oracle)
                    t5 = clock()
                    rec = TimingRecord(trial, i, name, t5 - t0, _CI, t2 - t1, t3 - t2, t4 - t3, t5 - t4)
                else:
                    rec = TimingRecord(trial, i, name, t1 - t0, v.kind.value)
            if mode.kind is Mode.HYBRID:
                hit = rec.verdict == _CI
                if len(window) == window.maxlen:
                    hits -= window[0]
                window.append(hit)
                hits += hit
            out.append(rec)
    finally:
        if gc_was_enabled:
            gc.enable()
    return out


def _replay_job(args):
    return replay_trial(*args)


def replay(dataset: Dataset, image: ProgramImage, mode: TracingMode, trials: int = 1,
           budget=None, jobs: int = 1) -> list[list[TimingRecord]]:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if dataset.image_checksum and dataset.image_checksum != image.checksum():
        raise ChecksumMismatch("dataset was recorded against a different image")
    work = [(dataset, image, mode, t, budget) for t in range(trials)]
    if jobs <= 1:
        return [_replay_job(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_replay_job, work))


def _fmt(v) -> str:
    return "" if v is None else str(v)


def write_timing_csv(path, records: Iterable[TimingRecord]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in records:
            w.writerow([r.trial, r.testcase_id, r.mode, _fmt(r.verdict), r.total_ns,
                        *(_fmt(getattr(r, c)) for c in COMPONENTS)])


def read_timing_csv(path) -> list[TimingRecord]:
    def opt(s):
        return int(s) if s != "" else None

    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            out.append(TimingRecord(int(row["trial"]), int(row["testcase_id"]), row["mode"],
                                    int(row["total_ns"]), row["verdict"] or None,
                                    *(opt(row[c]) for c in COMPONENTS)))
    return out


def group_trials(records: Iterable[TimingRecord]) -> dict[str, list[list[TimingRecord]]]:
    """Regroup flat records into ``{mode: [trial0_records, trial1_records, ...]}``."""
    by_mode: dict[str, dict[int, list[TimingRecord]]] = {}
    for r in records:
        by_mode.setdefault(r.mode, {}).setdefault(r.trial, []).append(r)
    return {m: [sorted(t[k], key=lambda r: r.testcase_id) for k in sorted(t)]
            for m, t in by_mode.items()}


def rate_curve(verdicts: Sequence, stride: int = 1) -> list[tuple[int, float]]:
    """Cumulative coverage-increasing rate after each ``stride`` test cases.

    Accepts booleans or verdict strings/enums. The final point is always
    included.
    """
    if not verdicts:
        raise ValueError("rate_curve needs at least one verdict")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    hits = 0
    points = []
    n = len(verdicts)
    for i, v in enumerate(verdicts, 1):
        if v is True or v == _CI or v is VerdictKind.COVERAGE_INCREASING:
            hits += 1
        if i % stride == 0 or i == n:
            points.append((i, hits / i))
    return points


def per_testcase(trials: Sequence[Sequence[TimingRecord]], attr: str = "total_ns",
                 trim: float = DEFAULT_TRIM) -> dict[int, float]:
    """Trimmed mean across trials for every test case id that has ``attr``."""
    samples: dict[int, list[int]] = {}
    for trial in trials:
        for r in trial:
            v = getattr(r, attr)
            if v is not None:
                samples.setdefault(r.testcase_id, []).append(v)
    return {i: trimmed_mean(s, trim) for i, s in samples.items()}


@dataclass(frozen=True)
class ModeReport:
    mode: str
    relative_time: float
    mean_ns: float
    rate: float | None
    fractions: dict[str, float] | None = None


@dataclass
class OverheadReport:
    baseline_mean_ns: float
    modes: dict[str, ModeReport] = field(default_factory=dict)

    def relative_time(self, mode: str) -> float:
        return self.modes[mode].relative_time


def _ids(trials) -> list[list[int]]:
    return [[r.testcase_id for r in t] for t in trials]


def overhead_report(records: Mapping[str, Sequence[Sequence[TimingRecord]]],
                    trim: float = DEFAULT_TRIM, baseline: str = Mode.BASELINE.value) -> OverheadReport:
    """Relative execution time of every mode against ``baseline``.

    Per test case, trials are collapsed with a trimmed mean; the mean over
    test cases is then divided by the baseline's. Component fractions are
    averaged over coverage-increasing test cases and normalised to sum to 1.
    """
    if baseline not in records:
        raise MismatchedDatasets(f"no {baseline!r} records to compare against")
    base_ids = _ids(records[baseline])
    base = per_testcase(records[baseline], trim=trim)
    base_mean = sum(base.values()) / len(base)
    rep = OverheadReport(base_mean)
    for mode, trials in records.items():
        ids = _ids(trials)
        if any(i != base_ids[0] for i in ids + base_ids):
            raise MismatchedDatasets(f"{mode!r} records cover different test cases than baseline")
        totals = per_testcase(trials, trim=trim)
        mean = sum(totals.values()) / len(totals)
        verdicts = [r.verdict for r in trials[0]]
        rate = None
        if any(v is not None for v in verdicts):
            rate = sum(v == _CI for v in verdicts) / len(verdicts)
        fractions = None
        comps = {c: per_testcase(trials, c, trim) for c in COMPONENTS}
        if comps["trace_ns"]:
            means = {c: sum(v.values()) / len(v) for c, v in comps.items()}
            whole = sum(means.values())
            if whole > 0:
                fractions = {c.replace("_ns", "_frac"): means[c] / whole for c in COMPONENTS}
        relative = 1.0 if mode == baseline else mean / base_mean
        rep.modes[mode] = ModeReport(mode, relative, mean, rate, fractions)
    return rep


def fit_crossover(records: Mapping[str, Sequence[Sequence[TimingRecord]]],
                  trim: float = DEFAULT_TRIM) -> CrossoverModel:
    """Estimate the linear cost model from baseline, trace-all and oracle replays."""
    base = per_testcase(records[Mode.BASELINE.value], trim=trim)
    traced = per_testcase(records[Mode.TRACE_ALL.value], trim=trim)
    oracle_trials = records[Mode.ORACLE.value]
    oracle = per_testcase(oracle_trials, trim=trim)
    ci_ids = {r.testcase_id for r in oracle_trials[0] if r.verdict == _CI}
    if not ci_ids:
        raise ValueError("oracle replay saw no coverage-increasing test cases")
    extra = [oracle[i] - base[i] for i in ci_ids]
    return CrossoverModel(sum(base.values()) / len(base), sum(traced.values()) / len(traced),
                          sum(extra) / len(extra))


def write_report_csv(path, rep: OverheadReport):
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for mode in sorted(rep.modes):
            m = rep.modes[mode]
            fr = m.fractions or {}
            w.writerow([mode, f"{m.relative_time:.6f}", "" if m.rate is None else f"{m.rate:.8f}",
                        *(("" if k not in fr else f"{fr[k]:.6f}")
                          for k in ("trace_frac", "stop_frac", "unmodify_frac", "start_frac"))])


def write_rate_curve_csv(path, points: Sequence[tuple[int, float]]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        f.write("index,rate\n")
        f.writelines(f"{i},{r:.10f}\n" for i, r in points)
