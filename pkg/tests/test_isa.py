import random

import pytest
from hypothesis import given, strategies as st

from ofz import isa, programs
from ofz.isa import OutcomeKind
from refvm import ref_execute
from shapes import guarded_abort


def test_minimal_halt_program():
    img = isa.load_image(bytes([isa.HALT]), 0)
    out = isa.execute(img, b"anything")
    assert out.kind is OutcomeKind.CLEAN_EXIT
    assert out.instructions_executed == 1
    assert out.trap_addr is None


@pytest.mark.parametrize("code,entry", [(b"", 0), (bytes([isa.HALT]), 1), (bytes([isa.HALT]), -1)])
def test_load_rejects_empty_or_bad_entry(code, entry):
    with pytest.raises(isa.MalformedImage):
        isa.load_image(code, entry)


def test_load_rejects_trap_at_entry():
    with pytest.raises(isa.MalformedImage):
        isa.load_image(bytes([isa.TRAP]), 0)


def test_first_trap_fetch_reports_its_address():
    # JMP +1 skips the HALT and lands on the trap at offset 4
    img = isa.load_image(bytes([isa.JMP, 1, 0, isa.HALT, isa.TRAP]), 0)
    out = isa.execute(img, b"")
    assert out.kind is OutcomeKind.TRAP
    assert out.trap_addr == 4
    assert img.code[out.trap_addr] == isa.TRAP
    assert out.instructions_executed == 1


def test_guarded_abort_program_hand_traced():
    img = guarded_abort()
    # LOADIN, LOADI, CMP, JZ taken, ABORT
    crash = isa.execute(img, b"\x42")
    assert crash.kind is OutcomeKind.CRASH and crash.instructions_executed == 5
    ok = isa.execute(img, b"\x41")
    assert ok.kind is OutcomeKind.CLEAN_EXIT and ok.instructions_executed == 5
    ref = ref_execute(img.code, img.entry, b"\x42", 100)
    assert (ref.kind, ref.steps) == ("crash", 5)


def test_loadin_past_end_reads_zero():
    a = isa.Assembler()
    a.loadin(0, 200); a.loadi(1, 0); a.cmp(0, 1); a.jz("z"); a.abort()
    a.label("z"); a.halt()
    assert isa.execute(isa.load_image(a.assemble()), b"").kind is OutcomeKind.CLEAN_EXIT


def test_out_of_range_fetch_is_crash():
    img = isa.load_image(bytes([isa.JMP, 0x10, 0x00, isa.HALT]))
    assert isa.execute(img, b"").kind is OutcomeKind.CRASH
    back = isa.load_image(bytes([isa.JMP]) + isa.encode_rel(3, -5) + bytes([isa.HALT]))
    out = isa.execute(back, b"")
    assert out.kind is OutcomeKind.CRASH and out.instructions_executed == 1


def test_budget_timeout_counts_exactly_budget():
    img = isa.load_image(bytes([isa.JMP, 0xFD, 0xFF]))  # JMP to itself
    out = isa.execute(img, b"", isa.ExecBudget(1234))
    assert out.kind is OutcomeKind.TIMEOUT
    assert out.instructions_executed == 1234


def test_budget_must_be_positive():
    img = isa.load_image(bytes([isa.HALT]))
    with pytest.raises(ValueError):
        isa.execute(img, b"", 0)


def test_input_longer_than_max_rejected():
    img = isa.load_image(bytes([isa.HALT]), input_len_max=4)
    with pytest.raises(ValueError):
        isa.execute(img, b"12345")


def test_snapshot_round_trip_and_isolation():
    img, _ = programs.maze(16, 1)
    snap = isa.take_snapshot(img)
    assert isa.take_snapshot(isa.restore(snap)) == snap
    before = bytes(img.code)
    for addr in (0, 5, 9):
        isa.patch_byte(img, addr, isa.TRAP)
    assert bytes(isa.restore(snap).code) == before
    # executing from the snapshot never sees later patches
    assert isa.execute(snap, b"").kind is not OutcomeKind.TRAP


def test_many_executions_from_one_snapshot_are_identical():
    img, _ = programs.parser(24, 2)
    snap = isa.take_snapshot(img)
    data = bytes(random.Random(5).randrange(256) for _ in range(32))
    first = isa.execute(snap, data)
    assert all(isa.execute(snap, data) == first for _ in range(10_000))


def test_patch_byte_involution_and_bounds():
    img, _ = programs.maze(8, 0)
    before = bytes(img.code)
    orig = isa.patch_byte(img, 3, 0xAA)
    isa.patch_byte(img, 3, orig)
    assert bytes(img.code) == before
    with pytest.raises(isa.AddressOutOfRange):
        isa.patch_byte(img, len(img.code), isa.TRAP)


def test_patching_every_block_start_always_traps():
    img, truth = programs.maze(12, 4)
    for start in truth.blocks:
        isa.patch_byte(img, start, isa.TRAP)
    rng = random.Random(0)
    for _ in range(200):
        data = bytes(rng.randrange(256) for _ in range(rng.randrange(1, 20)))
        assert isa.execute(img, data).kind is OutcomeKind.TRAP


def test_one_byte_patch_on_any_instruction_decodes_as_trap():
    img, truth = programs.checksum(16, 3)
    for start, block in truth.blocks.items():
        pc = start
        while pc < block.end:
            _, size, _ = isa.decode(img.code, pc)
            patched = bytearray(img.code)
            patched[pc] = isa.TRAP
            kind, n, addr = isa.run(patched, pc, b"", 10)
            assert kind is OutcomeKind.TRAP and addr == pc and n == 0
            pc += size


def test_image_file_round_trip(tmp_path):
    img, _ = programs.maze(10, 2)
    path = tmp_path / "m.ofz"
    isa.write_image(path, img)
    blob = path.read_bytes()
    assert blob[:4] == b"OFZ1"
    assert int.from_bytes(blob[4:8], "little") == img.entry
    assert int.from_bytes(blob[8:12], "little") == len(img.code)
    assert isa.read_image(path) == img


@pytest.mark.parametrize("blob", [b"OFZ", b"XXXX" + bytes(8) + b"\x01",
                                  b"OFZ1" + (0).to_bytes(4, "little") + (5).to_bytes(4, "little") + b"\x01"])
def test_parse_image_rejects_bad_files(blob):
    with pytest.raises(isa.MalformedImage):
        isa.parse_image(blob)


def test_decode_rejects_malformed():
    with pytest.raises(isa.MalformedImage):
        isa.decode(bytes([0x77]), 0)
    with pytest.raises(isa.MalformedImage):
        isa.decode(bytes([isa.JMP, 0]), 0)
    with pytest.raises(isa.MalformedImage):
        isa.decode(bytes([isa.MOV, 9, 0]), 0)
    with pytest.raises(isa.MalformedImage):
        isa.decode(bytes([isa.TRAP]), 0)


def test_encode_rel_overflow():
    with pytest.raises(OverflowError):
        isa.encode_rel(0, 0x9000)


def test_assembler_undefined_label():
    a = isa.Assembler()
    a.jmp("nowhere")
    with pytest.raises(ValueError):
        a.assemble()


_opcode = st.sampled_from([isa.HALT, isa.ABORT, isa.TRAP, isa.JMP, isa.JZ, isa.JNZ, isa.LOADIN,
                           isa.LOADI, isa.ADD, isa.SUB, isa.XOR, isa.CMP, isa.MOV, 0x00, 0x7F])
_raw_code = st.lists(st.one_of(_opcode, st.integers(0, 9), st.integers(0, 255)), min_size=1, max_size=48)


@given(code=_raw_code, data=st.binary(max_size=12), limit=st.integers(1, 300))
def test_matches_reference_interpreter_on_arbitrary_bytes(code, data, limit):
    if code[0] == isa.TRAP:
        code[0] = isa.HALT
    img = isa.load_image(bytes(code))
    out = isa.execute(img, data, limit)
    ref = ref_execute(img.code, img.entry, data, limit)
    assert (out.kind.value, out.instructions_executed, out.trap_addr) == (ref.kind, ref.steps, ref.trap_addr)


@given(code=_raw_code, data=st.binary(max_size=12), limit=st.integers(1, 200))
def test_timeout_iff_budget_exhausted_without_exit(code, data, limit):
    if code[0] == isa.TRAP:
        code[0] = isa.HALT
    out = isa.execute(isa.load_image(bytes(code)), data, limit)
    assert out.instructions_executed <= limit
    if out.kind is OutcomeKind.TIMEOUT:
        assert out.instructions_executed == limit
    if out.instructions_executed < limit:
        assert out.kind is not OutcomeKind.TIMEOUT


@given(code=_raw_code, data=st.binary(max_size=12), limit=st.integers(1, 200), extra=st.integers(1, 500))
def test_raising_budget_only_resolves_timeouts(code, data, limit, extra):
    if code[0] == isa.TRAP:
        code[0] = isa.HALT
    img = isa.load_image(bytes(code))
    low = isa.execute(img, data, limit)
    high = isa.execute(img, data, limit + extra)
    if low.kind is not OutcomeKind.TIMEOUT:
        assert high == low


@given(seed=st.integers(0, 10_000), data=st.binary(max_size=24))
def test_generated_programs_match_reference(seed, data):
    img = programs.random_program(random.Random(seed))
    out = isa.execute(img, data)
    ref = ref_execute(img.code, img.entry, data, isa.DEFAULT_BUDGET)
    assert (out.kind.value, out.instructions_executed) == (ref.kind, ref.steps)


@given(seed=st.integers(0, 10_000), data=st.binary(max_size=24))
def test_execution_is_deterministic(seed, data):
    img = programs.random_program(random.Random(seed))
    assert isa.execute(img, data) == isa.execute(img, data)
