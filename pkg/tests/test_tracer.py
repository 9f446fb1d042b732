import itertools
import random

from hypothesis import given, strategies as st

from ofz import cfg, isa, programs
from ofz.cfg import Edge
from ofz.tracer import build_tracer, read_trace_csv, trace, trace_edges, write_trace_csv
from refvm import ref_edges, ref_execute, ref_first_visit
from shapes import diamond, self_loop, straight3


def test_single_block_tracer():
    img = isa.load_image(bytes([isa.HALT]))
    t = build_tracer(img, cfg.discover_blocks(img))
    assert len(t) == 1
    log = trace(t, b"")
    assert log.blocks == (0,) and log.outcome is isa.OutcomeKind.CLEAN_EXIT


def test_straight_line_trace_and_edges():
    img, starts = straight3()
    t = build_tracer(img, cfg.discover_blocks(img))
    assert list(trace(t, b"").blocks) == starts
    assert trace_edges(t, b"") == {Edge(starts[0], starts[1]), Edge(starts[1], starts[2])}


def test_loop_block_logged_once():
    img, lab = self_loop()
    t = build_tracer(img, cfg.discover_blocks(img))
    full = ref_execute(img.code, img.entry, b"", 10 ** 6, frozenset(t.block_starts))
    assert full.blocks.count(lab["b2"]) == 1000
    log = trace(t, b"")
    assert log.blocks == (lab["b1"], lab["b2"], lab["b3"], lab["b4"])
    assert Edge(lab["b2"], lab["b2"]) in trace_edges(t, b"")


def test_diamond_visits_exactly_one_arm():
    img, lab = diamond()
    t = build_tracer(img, cfg.discover_blocks(img))
    then_arm = trace(t, b"\x07").blocks
    else_arm = trace(t, b"\x08").blocks
    assert then_arm == (lab["b1"], lab["b3"], lab["b4"])
    assert else_arm == (lab["b1"], lab["b2"], lab["b4"])


def test_trace_outcome_matches_pristine_execution():
    img, truth = programs.parser(32, 5)
    t = build_tracer(img, truth.blocks)
    rng = random.Random(1)
    for _ in range(300):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 30)))
        out = isa.execute(img, data)
        log = trace(t, data)
        assert (log.outcome, log.instructions_executed) == (out.kind, out.instructions_executed)


def test_small_maze_exhaustive_inputs_cover_reachable_set():
    img, truth = programs.maze(9, 6)
    g = cfg.ControlFlowGraph.from_blocks(img.entry, truth.blocks)
    t = build_tracer(img, truth.blocks)
    # every comparison constant plus a value that matches none of them
    keys = set()
    for b in truth.blocks.values():
        pc = b.start
        while pc < b.end:
            op, size, _ = isa.decode(img.code, pc)
            if op == isa.LOADI and img.code[pc + 1] == 1:
                keys.add(img.code[pc + 2])
            pc += size
    seen = set()
    # four internal nodes, so no path tests more than four input bytes
    for combo in itertools.product([0, *sorted(keys)], repeat=4):
        seen.update(trace(t, bytes(combo)).blocks)
    assert seen == g.reachable() == set(truth.blocks)


def test_trace_csv_round_trip(tmp_path):
    img, truth = programs.maze(20, 2)
    log = trace(build_tracer(img, truth.blocks), truth.crash_inputs[0])
    p = tmp_path / "t.csv"
    write_trace_csv(p, log)
    assert read_trace_csv(p) == log.blocks
    assert p.read_text().splitlines()[0] == f"{log.blocks[0]:#x}"


@given(seed=st.integers(0, 50_000), data=st.binary(max_size=16))
def test_trace_matches_instruction_level_log(seed, data):
    img = programs.random_program(random.Random(seed))
    blocks = cfg.discover_blocks(img)
    t = build_tracer(img, blocks)
    ref = ref_execute(img.code, img.entry, data, isa.DEFAULT_BUDGET, frozenset(blocks))
    log = trace(t, data)
    assert list(log.blocks) == ref_first_visit(ref.blocks)
    assert len(set(log.blocks)) == len(log.blocks)
    assert log.blocks[0] == img.entry
    assert trace_edges(t, data) == ref_edges(ref.blocks)
    assert trace(t, data) == log
