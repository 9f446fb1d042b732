import random

import pytest
from hypothesis import given, strategies as st

from ofz import cfg, isa, programs
from ofz.fuzzer import (BASELINE, ORACLE, TRACE_ALL, Fuzzer, InvalidSeed, Mode, NotACrash,
                        TracingMode, bit_flip, crash_bucket, fuzz_loop, hybrid, mutate,
                        triage_crash, write_corpus)
from ofz.tracer import build_tracer, trace

SEED = [bytes(16)]


def test_bit_flip_low_bit():
    assert bit_flip(b"\x00", 0, 0) == b"\x01"


def test_delete_on_single_byte_falls_back_to_insert():
    rng = random.Random(0)
    ops = set()
    for i in range(400):
        tc = mutate(b"Z", rng, (), 256, i)
        assert tc.data
        ops.add(tc.mutation)
    assert "delete" not in ops and "arith16" not in ops
    assert "insert" in ops


def test_growth_at_max_len_replaces():
    rng = random.Random(1)
    for i in range(300):
        tc = mutate(b"abcd", rng, [b"wxyz1234"], 4, i)
        assert 1 <= len(tc.data) <= 4
        assert tc.mutation not in ("insert", "duplicate")


def test_mutate_rejects_empty_seed():
    with pytest.raises(ValueError):
        mutate(b"", random.Random(0))


def test_mutate_golden_rng_seed_7_on_AAAA():
    rng = random.Random(7)
    got = [(t.data, t.mutation) for t in (mutate(b"AAAA", rng, [b"AAAA", b"xyz"], 256, i, 0)
                                          for i in range(8))]
    assert got == [
        (b"A\xcaAAA", "insert"), (b"AAAAA", "duplicate"), (b"AA@A", "bitflip"),
        (b"DAAA", "arith16"), (b"AAA", "delete"), (b"AAA.", "replace"),
        (b"IAAA", "bitflip"), (b"AAAAAAAA", "duplicate"),
    ]


@given(seed=st.binary(min_size=1, max_size=40), s=st.integers(0, 2 ** 32), max_len=st.integers(1, 64))
def test_mutate_is_deterministic_and_bounded(seed, s, max_len):
    a = mutate(seed, random.Random(s), [b"qq", seed], max_len)
    b = mutate(seed, random.Random(s), [b"qq", seed], max_len)
    assert a == b
    assert 1 <= len(a.data) <= max_len


def test_tracing_mode_validation():
    with pytest.raises(ValueError):
        TracingMode(Mode.HYBRID, threshold=1.5)
    with pytest.raises(ValueError):
        TracingMode(Mode.HYBRID, window=0)
    assert str(hybrid(0.5, 10)) == "hybrid"


def test_invalid_seeds_rejected():
    img = isa.load_image(bytes([isa.JMP, 0xFD, 0xFF]))
    with pytest.raises(InvalidSeed):
        Fuzzer(img, ORACLE, [b"x"], budget=100)
    img2, _ = programs.maze(8, 0)
    with pytest.raises(InvalidSeed):
        Fuzzer(img2, ORACLE, [b""])
    with pytest.raises(InvalidSeed):
        Fuzzer(img2, ORACLE, [])
    with pytest.raises(InvalidSeed):
        Fuzzer(img2, ORACLE, [bytes(img2.input_len_max + 1)])


def test_single_block_program_has_one_coverage_increasing_case():
    img = isa.load_image(bytes([isa.HALT]))
    r = fuzz_loop(img, ORACLE, SEED, max_testcases=500, rng_seed=0)
    assert r.stats.coverage_increasing == 1
    assert r.covinc_ids == [0]
    assert r.stats.traced == 1


@pytest.mark.parametrize("kind,size", [("maze", 48), ("parser", 40), ("checksum", 24)])
def test_oracle_and_trace_all_agree(kind, size):
    img, _ = programs.generate(kind, size, 2)
    a = fuzz_loop(img, ORACLE, SEED, max_testcases=5000, rng_seed=9)
    b = fuzz_loop(img, TRACE_ALL, SEED, max_testcases=5000, rng_seed=9)
    assert a.covinc_ids == b.covinc_ids
    assert a.coverage == b.coverage
    assert [e.testcase for e in a.queue] == [e.testcase for e in b.queue]
    assert a.stats.counters() | {"traced": 0} == b.stats.counters() | {"traced": 0}
    assert a.stats.traced < b.stats.traced == 5000


@pytest.mark.parametrize("threshold,twin", [(1.0, ORACLE), (0.0, TRACE_ALL)])
def test_hybrid_extremes_match_pure_modes(threshold, twin):
    img, _ = programs.parser(32, 4)
    h = fuzz_loop(img, hybrid(threshold, 50), SEED, max_testcases=3000, rng_seed=4)
    p = fuzz_loop(img, twin, SEED, max_testcases=3000, rng_seed=4)
    assert h.covinc_ids == p.covinc_ids and h.coverage == p.coverage
    assert [e.testcase for e in h.queue] == [e.testcase for e in p.queue]


def test_hybrid_switches_to_oracle_when_rate_drops():
    img, _ = programs.maze(64, 1)
    routes = []
    f = Fuzzer(img, hybrid(0.05, 20), SEED, rng_seed=1, observer=lambda s: routes.append(s.route))
    f.run(3000)
    assert routes[0] == "trace"
    assert "oracle" in routes
    assert routes[-1] == "oracle"


def test_baseline_collects_no_coverage():
    img, _ = programs.maze(32, 0)
    r = fuzz_loop(img, BASELINE, SEED, max_testcases=1000, rng_seed=0)
    assert r.stats.coverage_increasing == 0 and len(r.coverage) == 0 and r.queue[0].testcase.id == -1
    assert len(r.queue) == 1


def test_queue_admission_requires_new_blocks():
    img, _ = programs.parser(40, 1)
    steps = []
    f = Fuzzer(img, ORACLE, SEED, rng_seed=2, observer=steps.append)
    r = f.run(4000)
    admitted = {e.testcase.id for e in r.queue if e.testcase.id >= 0}
    expected = {s.testcase.id for s in steps
                if s.new_blocks > 0 and s.outcome is isa.OutcomeKind.CLEAN_EXIT}
    assert admitted == expected
    assert all(e.cov_tag == (e.new_blocks > 0) for e in r.queue)
    assert r.stats.coverage_increasing <= r.stats.executed
    assert r.stats.covered_blocks <= r.stats.total_blocks


def test_golden_maze_crashes_at_rng_seed_3():
    img, truth = programs.maze(64, 3)
    r = fuzz_loop(img, ORACLE, SEED, max_testcases=50_000, rng_seed=3)
    assert r.stats.crashes_unique == 2
    assert sorted(r.crashes) == ["2b826da44ee007d0", "83608f5fa0620f26"]
    assert r.stats.counters() == {
        "executed": 50000, "coverage_increasing": 19, "crashes_total": 68, "crashes_unique": 2,
        "timeouts": 0, "covered_blocks": 47, "total_blocks": 64, "traced": 19, "queued": 17}
    # every saved crasher reaches one of the planted abort blocks
    t = build_tracer(img, truth.blocks)
    for cases in r.crashes.values():
        for tc in cases:
            assert set(trace(t, tc.data).blocks) & set(truth.crash_sites)


def test_triage_same_input_same_bucket_and_known_crashers():
    img, truth = programs.maze(32, 5)
    assert len(truth.crash_inputs) == 2
    a, b = truth.crash_inputs
    crashers = [a, a + b"x", a + b"yy", b, b + b"z"]
    buckets = {triage_crash(img, c) for c in crashers}
    assert len(buckets) == 2
    assert triage_crash(img, a) == triage_crash(build_tracer(img, truth.blocks), a)
    with pytest.raises(NotACrash):
        triage_crash(img, bytes(40))


def test_two_paths_to_one_abort_are_different_buckets():
    a = isa.Assembler()
    a.loadin(0, 0); a.loadi(1, 1); a.cmp(0, 1); a.jz("right")
    a.label("left"); a.loadi(2, 0); a.jmp("boom")
    a.label("right"); a.loadi(2, 1)
    a.label("boom"); a.abort()
    img = isa.load_image(a.assemble())
    assert triage_crash(img, b"\x00") != triage_crash(img, b"\x01")


def test_crash_bucket_depends_on_set_only():
    assert crash_bucket([3, 1, 2, 2]) == crash_bucket([1, 2, 3])


def test_write_corpus_layout(tmp_path):
    img, _ = programs.maze(32, 3)
    r = fuzz_loop(img, ORACLE, SEED, max_testcases=20_000, rng_seed=3)
    write_corpus(r, tmp_path)
    names = sorted(p.name for p in (tmp_path / "queue").iterdir())
    assert names[0] == "id_000000_orig"
    assert all(n.endswith("_+cov") for n in names[1:])
    assert len(names) == len(r.queue)
    buckets = list((tmp_path / "crashes").iterdir())
    assert len(buckets) == r.stats.crashes_unique
    assert all(b.name.startswith("bucket_") for b in buckets)
    stats = (tmp_path / "stats.csv").read_text().splitlines()
    assert stats[0] == "key,value" and "executed,20000" in stats


def test_rerun_is_identical():
    img, _ = programs.checksum(32, 7)
    a = fuzz_loop(img, ORACLE, SEED, max_testcases=3000, rng_seed=1)
    b = fuzz_loop(img, ORACLE, SEED, max_testcases=3000, rng_seed=1)
    assert a.stats.counters() == b.stats.counters() and a.covinc_ids == b.covinc_ids


def test_wall_time_stop():
    img, _ = programs.maze(16, 0)
    r = fuzz_loop(img, ORACLE, SEED, wall_time=0.05)
    assert r.stats.executed > 0
    with pytest.raises(ValueError):
        fuzz_loop(img, ORACLE, SEED)


def test_unmodified_oracle_after_session():
    img, truth = programs.parser(48, 3)
    r = fuzz_loop(img, ORACLE, SEED, max_testcases=5000, rng_seed=5)
    o = r.oracle
    assert not set(o.patch_map) & r.coverage.covered
    assert all(o.image.code[b] == img.code[b] for b in r.coverage.covered)
    assert all(o.image.code[b] == isa.TRAP for b in o.patch_map)
    assert set(o.patch_map) | r.coverage.covered == set(cfg.discover_blocks(img))
