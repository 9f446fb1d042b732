"""Deterministic bytecode VM used as the fuzzing target.

Every opcode is one byte and operands follow inline, so overwriting the
first byte of any instruction with ``TRAP`` always yields a decodable
interrupt regardless of instruction size.

Encoding (all multi-byte fields little-endian)::

    HALT                    01
    ABORT                   02
    JMP   rel16             10 lo hi     target = next_pc + rel
    JZ    rel16             11 lo hi
    JNZ   rel16             12 lo hi
    LOADIN reg, idx8        20 r  i      reg = input[i] or 0 past the end
    LOADI  reg, imm8        21 r  v
    ADD    ra, rb           30 a  b      ra = (ra + rb) & 0xff, sets Z
    SUB    ra, rb           31 a  b      ra = (ra - rb) & 0xff, sets Z
    XOR    ra, rb           32 a  b      ra = ra ^ rb, sets Z
    CMP    ra, rb           33 a  b      Z = (ra == rb)
    MOV    ra, rb           34 a  b      ra = rb, flags untouched
    TRAP                    CC           reserved for the interest oracle
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

HALT = 0x01
ABORT = 0x02
JMP = 0x10
JZ = 0x11
JNZ = 0x12
LOADIN = 0x20
LOADI = 0x21
ADD = 0x30
SUB = 0x31
XOR = 0x32
CMP = 0x33
MOV = 0x34
TRAP = 0xCC

MNEMONICS = {
    HALT: "HALT", ABORT: "ABORT", JMP: "JMP", JZ: "JZ", JNZ: "JNZ",
    LOADIN: "LOADIN", LOADI: "LOADI", ADD: "ADD", SUB: "SUB", XOR: "XOR",
    CMP: "CMP", MOV: "MOV", TRAP: "TRAP",
}
# total encoded size per opcode
INSN_SIZE = {
    HALT: 1, ABORT: 1, TRAP: 1,
    JMP: 3, JZ: 3, JNZ: 3,
    LOADIN: 3, LOADI: 3, ADD: 3, SUB: 3, XOR: 3, CMP: 3, MOV: 3,
}
BRANCHES = (JMP, JZ, JNZ)
COND_BRANCHES = (JZ, JNZ)
REG_OPERANDS = {LOADIN: 1, LOADI: 1, ADD: 2, SUB: 2, XOR: 2, CMP: 2, MOV: 2}

NUM_REGS = 8
DEFAULT_BUDGET = 1_000_000
DEFAULT_INPUT_LEN_MAX = 256

IMAGE_MAGIC = b"OFZ1"
_HEADER = struct.Struct("<4sII")


class MalformedImage(ValueError):
    pass


class AddressOutOfRange(IndexError):
    pass


class OutcomeKind(str, Enum):
    CLEAN_EXIT = "clean_exit"
    CRASH = "crash"
    TIMEOUT = "timeout"
    TRAP = "trap"


@dataclass(frozen=True, slots=True)
class ExecOutcome:
    kind: OutcomeKind
    instructions_executed: int
    trap_addr: int | None = None


@dataclass(frozen=True)
class ExecBudget:
    max_instructions: int = DEFAULT_BUDGET

    def __post_init__(self):
        if self.max_instructions <= 0:
            raise ValueError("max_instructions must be positive")


@dataclass(eq=False)
class ProgramImage:
    """A patchable program: code bytes plus entry offset."""

    code: bytearray
    entry: int
    input_len_max: int = DEFAULT_INPUT_LEN_MAX

    def __len__(self) -> int:
        return len(self.code)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProgramImage):
            return NotImplemented
        return (self.code == other.code and self.entry == other.entry
                and self.input_len_max == other.input_len_max)

    def copy(self) -> ProgramImage:
        return ProgramImage(bytearray(self.code), self.entry, self.input_len_max)

    def checksum(self) -> str:
        return hashlib.sha256(dump_image(self)).hexdigest()


@dataclass(frozen=True)
class Snapshot:
    """Immutable copy of an image; executing from it never sees later patches."""

    image_bytes: bytes
    entry: int
    input_len_max: int = DEFAULT_INPUT_LEN_MAX


def load_image(code, entry: int = 0, input_len_max: int = DEFAULT_INPUT_LEN_MAX) -> ProgramImage:
    code = bytearray(code)
    if not code:
        raise MalformedImage("empty code")
    if not 0 <= entry < len(code):
        raise MalformedImage(f"entry {entry:#x} outside code of length {len(code)}")
    if code[entry] == TRAP:
        raise MalformedImage("entry instruction is the reserved trap opcode")
    return ProgramImage(code, entry, input_len_max)


def take_snapshot(image: ProgramImage) -> Snapshot:
    return Snapshot(bytes(image.code), image.entry, image.input_len_max)


def restore(snapshot: Snapshot) -> ProgramImage:
    return ProgramImage(bytearray(snapshot.image_bytes), snapshot.entry, snapshot.input_len_max)


def patch_byte(image: ProgramImage, addr: int, value: int) -> int:
    """Overwrite one byte and return the byte it displaced."""
    if not 0 <= addr < len(image.code):
        raise AddressOutOfRange(f"patch address {addr:#x} outside image")
    original = image.code[addr]
    image.code[addr] = value
    return original


def _limit(budget) -> int:
    if budget is None:
        return DEFAULT_BUDGET
    if isinstance(budget, ExecBudget):
        return budget.max_instructions
    if budget <= 0:
        raise ValueError("budget must be positive")
    return int(budget)


def execute(image: ProgramImage | Snapshot, data: bytes, budget=None) -> ExecOutcome:
    """Run ``image`` on ``data`` until it halts, crashes, traps or exhausts the budget."""
    if isinstance(image, Snapshot):
        code, entry, max_len = image.image_bytes, image.entry, image.input_len_max
    else:
        code, entry, max_len = image.code, image.entry, image.input_len_max
    if len(data) > max_len:
        raise ValueError(f"input of {len(data)} bytes exceeds input_len_max={max_len}")
    kind, n, addr = run(code, entry, data, _limit(budget))
    return ExecOutcome(kind, n, addr)


# Outcome kinds bound to module globals for the hot loops below.
_CLEAN, _CRASH, _TIMEOUT, _TRAP = (OutcomeKind.CLEAN_EXIT, OutcomeKind.CRASH,
                                   OutcomeKind.TIMEOUT, OutcomeKind.TRAP)


# Negative branch targets are redirected here so the fault surfaces on the
# next fetch, exactly like a target past the end of the code.
_FAULT_PC = 1 << 40


def run(code, pc: int, data: bytes, limit: int):
    """Plain interpreter loop. Returns ``(kind, instructions, trap_addr)``.

    Faulting register or code indices surface as IndexError and become
    crashes; negative jump targets are checked explicitly since Python
    would otherwise wrap them.
    """
    regs = [0] * NUM_REGS
    zf = False
    n = 0
    ndata = len(data)
    try:
        while n < limit:
            op = code[pc]
            if op == 0x20:  # LOADIN
                i = code[pc + 2]
                regs[code[pc + 1]] = data[i] if i < ndata else 0
                pc += 3
            elif op == 0x33:  # CMP
                zf = regs[code[pc + 1]] == regs[code[pc + 2]]
                pc += 3
            elif op == 0x21:  # LOADI
                regs[code[pc + 1]] = code[pc + 2]
                pc += 3
            elif op == 0x11 or op == 0x12:  # JZ / JNZ
                if zf == (op == 0x11):
                    rel = code[pc + 1] | (code[pc + 2] << 8)
                    if rel & 0x8000:
                        rel -= 0x10000
                    pc += 3 + rel
                    if pc < 0:
                        pc = _FAULT_PC
                else:
                    pc += 3
            elif op == 0x10:  # JMP
                rel = code[pc + 1] | (code[pc + 2] << 8)
                if rel & 0x8000:
                    rel -= 0x10000
                pc += 3 + rel
                if pc < 0:
                    pc = _FAULT_PC
            elif op == 0x30:  # ADD
                a = code[pc + 1]
                v = (regs[a] + regs[code[pc + 2]]) & 0xFF
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x31:  # SUB
                a = code[pc + 1]
                v = (regs[a] - regs[code[pc + 2]]) & 0xFF
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x32:  # XOR
                a = code[pc + 1]
                v = regs[a] ^ regs[code[pc + 2]]
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x34:  # MOV
                regs[code[pc + 1]] = regs[code[pc + 2]]
                pc += 3
            elif op == 0x01:  # HALT
                return _CLEAN, n + 1, None
            elif op == 0xCC:  # TRAP
                return _TRAP, n, pc
            elif op == 0x02:  # ABORT
                return _CRASH, n + 1, None
            else:
                return _CRASH, n, None
            n += 1
    except IndexError:
        return _CRASH, n, None
    return _TIMEOUT, n, None


def run_traced(code, pc: int, data: bytes, limit: int, is_start, on_block):
    """Interpreter loop with a callback fired on every basic-block entry.

    ``is_start`` is indexable by code offset and truthy at block starts.
    Semantics are identical to :func:`run`; only the callback differs.
    """
    regs = [0] * NUM_REGS
    zf = False
    n = 0
    ndata = len(data)
    try:
        while n < limit:
            if is_start[pc]:
                on_block(pc)
            op = code[pc]
            if op == 0x20:  # LOADIN
                i = code[pc + 2]
                regs[code[pc + 1]] = data[i] if i < ndata else 0
                pc += 3
            elif op == 0x33:  # CMP
                zf = regs[code[pc + 1]] == regs[code[pc + 2]]
                pc += 3
            elif op == 0x21:  # LOADI
                regs[code[pc + 1]] = code[pc + 2]
                pc += 3
            elif op == 0x11 or op == 0x12:  # JZ / JNZ
                if zf == (op == 0x11):
                    rel = code[pc + 1] | (code[pc + 2] << 8)
                    if rel & 0x8000:
                        rel -= 0x10000
                    pc += 3 + rel
                    if pc < 0:
                        pc = _FAULT_PC
                else:
                    pc += 3
            elif op == 0x10:  # JMP
                rel = code[pc + 1] | (code[pc + 2] << 8)
                if rel & 0x8000:
                    rel -= 0x10000
                pc += 3 + rel
                if pc < 0:
                    pc = _FAULT_PC
            elif op == 0x30:  # ADD
                a = code[pc + 1]
                v = (regs[a] + regs[code[pc + 2]]) & 0xFF
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x31:  # SUB
                a = code[pc + 1]
                v = (regs[a] - regs[code[pc + 2]]) & 0xFF
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x32:  # XOR
                a = code[pc + 1]
                v = regs[a] ^ regs[code[pc + 2]]
                regs[a] = v
                zf = v == 0
                pc += 3
            elif op == 0x34:  # MOV
                regs[code[pc + 1]] = regs[code[pc + 2]]
                pc += 3
            elif op == 0x01:  # HALT
                return _CLEAN, n + 1, None
            elif op == 0xCC:  # TRAP
                return _TRAP, n, pc
            elif op == 0x02:  # ABORT
                return _CRASH, n + 1, None
            else:
                return _CRASH, n, None
            n += 1
    except IndexError:
        return _CRASH, n, None
    return _TIMEOUT, n, None


def decode(code, pc: int):
    """Decode the instruction at ``pc`` as ``(opcode, size, target)``.

    ``target`` is the absolute branch destination or None. Raises
    MalformedImage for unknown opcodes, the trap opcode, truncated
    operands and out-of-range register numbers.
    """
    if not 0 <= pc < len(code):
        raise MalformedImage(f"fetch outside code at {pc:#x}")
    op = code[pc]
    size = INSN_SIZE.get(op)
    if size is None:
        raise MalformedImage(f"unknown opcode {op:#04x} at {pc:#x}")
    if op == TRAP:
        raise MalformedImage(f"reserved trap opcode at {pc:#x}")
    if pc + size > len(code):
        raise MalformedImage(f"truncated {MNEMONICS[op]} at {pc:#x}")
    for k in range(REG_OPERANDS.get(op, 0)):
        if code[pc + 1 + k] >= NUM_REGS:
            raise MalformedImage(f"bad register r{code[pc + 1 + k]} at {pc:#x}")
    target = None
    if op in BRANCHES:
        rel = int.from_bytes(code[pc + 1:pc + 3], "little", signed=True)
        target = pc + 3 + rel
    return op, size, target


def encode_rel(src_next: int, target: int) -> bytes:
    rel = target - src_next
    if not -0x8000 <= rel <= 0x7FFF:
        raise OverflowError(f"branch displacement {rel} does not fit rel16")
    return rel.to_bytes(2, "little", signed=True)


class Assembler:
    """Tiny label-resolving assembler for building test and benchmark programs.

    >>> asm = Assembler()
    >>> asm.loadin(0, 0); asm.loadi(1, 0x42); asm.cmp(0, 1); asm.jz("boom")
    >>> asm.halt(); asm.label("boom"); asm.abort()
    >>> asm.assemble().hex()
    '200000210142330001110100010102'
    """

    def __init__(self):
        self.buf = bytearray()
        self.labels: dict[str, int] = {}
        self._fixups: list[tuple[int, str]] = []

    @property
    def pc(self) -> int:
        return len(self.buf)

    def label(self, name: str) -> int:
        if name in self.labels:
            raise ValueError(f"duplicate label {name!r}")
        self.labels[name] = len(self.buf)
        return self.labels[name]

    def emit(self, *bs: int):
        self.buf.extend(bs)

    def _branch(self, op: int, target):
        self.buf.append(op)
        if isinstance(target, str):
            self._fixups.append((len(self.buf), target))
            self.buf.extend(b"\0\0")
        else:
            self.buf.extend(encode_rel(len(self.buf) + 2, target))

    def halt(self): self.emit(HALT)
    def abort(self): self.emit(ABORT)
    def trap(self): self.emit(TRAP)
    def jmp(self, target): self._branch(JMP, target)
    def jz(self, target): self._branch(JZ, target)
    def jnz(self, target): self._branch(JNZ, target)
    def loadin(self, reg: int, idx: int): self.emit(LOADIN, reg, idx)
    def loadi(self, reg: int, imm: int): self.emit(LOADI, reg, imm & 0xFF)
    def add(self, a: int, b: int): self.emit(ADD, a, b)
    def sub(self, a: int, b: int): self.emit(SUB, a, b)
    def xor(self, a: int, b: int): self.emit(XOR, a, b)
    def cmp(self, a: int, b: int): self.emit(CMP, a, b)
    def mov(self, a: int, b: int): self.emit(MOV, a, b)

    def assemble(self) -> bytes:
        out = bytearray(self.buf)
        for at, name in self._fixups:
            if name not in self.labels:
                raise ValueError(f"undefined label {name!r}")
            out[at:at + 2] = encode_rel(at + 2, self.labels[name])
        return bytes(out)


def dump_image(image: ProgramImage) -> bytes:
    return _HEADER.pack(IMAGE_MAGIC, image.entry, len(image.code)) + bytes(image.code)


def parse_image(blob: bytes, input_len_max: int = DEFAULT_INPUT_LEN_MAX) -> ProgramImage:
    if len(blob) < _HEADER.size:
        raise MalformedImage("image file shorter than header")
    magic, entry, length = _HEADER.unpack_from(blob)
    if magic != IMAGE_MAGIC:
        raise MalformedImage(f"bad magic {magic!r}")
    code = blob[_HEADER.size:]
    if len(code) != length:
        raise MalformedImage(f"header declares {length} code bytes, file has {len(code)}")
    return load_image(code, entry, input_len_max)


def read_image(path) -> ProgramImage:
    return parse_image(Path(path).read_bytes())


def write_image(path, image: ProgramImage):
    Path(path).write_bytes(dump_image(image))
