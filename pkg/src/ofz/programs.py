"""Deterministic benchmark-program generators.

Each generator lays its program out block by block and records its own
block table while doing so. That table is derived from the generator's
construction only, never from :mod:`ofz.cfg`, so it can serve as ground
truth for the static analysis.

Register conventions shared by the generators: r0/r1 compare operands,
r2-r4 scratch, r5 = 0, r6 = 1, r7 loop counter.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

from . import isa
from .cfg import BasicBlock, Terminator

KINDS = ("maze", "parser", "checksum")
MIN_SIZE = 4


class SizeTooSmall(ValueError):
    pass


@dataclass
class GroundTruth:
    kind: str
    size: int
    rng_seed: int
    blocks: dict[int, BasicBlock]
    crash_sites: list[int]
    emitted_blocks: int
    # one input per crash site that reaches it
    crash_inputs: list[bytes] = field(default_factory=list)

    @property
    def reachable_blocks(self) -> int:
        return len(self.blocks)


class ProgramBuilder:
    """Assembler wrapper that tracks block boundaries by label."""

    def __init__(self):
        self.asm = isa.Assembler()
        self._blocks: list[tuple[str, Terminator, tuple[str, ...]]] = []
        self._open: str | None = None
        self.dead: set[str] = set()

    def block(self, name: str, dead: bool = False):
        if self._open is not None:
            raise RuntimeError(f"block {self._open!r} was not terminated")
        self.asm.label(name)
        self._open = name
        if dead:
            self.dead.add(name)
        return self.asm

    def _close(self, term: Terminator, succ: tuple[str, ...]):
        self._blocks.append((self._open, term, succ))
        self._open = None

    def end_halt(self):
        self.asm.halt()
        self._close(Terminator.HALT, ())

    def end_abort(self):
        self.asm.abort()
        self._close(Terminator.ABORT, ())

    def end_jmp(self, target: str):
        self.asm.jmp(target)
        self._close(Terminator.JMP, (target,))

    def end_cond(self, op: int, taken: str, fallthrough: str):
        """Conditional branch; ``fallthrough`` must be the next block laid out."""
        self.asm._branch(op, taken)
        self._close(Terminator.CONDJMP, (taken, fallthrough))

    def end_fall(self, nxt: str):
        self._close(Terminator.FALLTHROUGH, (nxt,))

    def build(self, entry: str = None):
        if self._open is not None:
            raise RuntimeError(f"block {self._open!r} was not terminated")
        code = self.asm.assemble()
        labels = self.asm.labels
        order = [name for name, _, _ in self._blocks]
        ends = [labels[n] for n in order[1:]] + [len(code)]
        for i, (name, term, succ) in enumerate(self._blocks):
            if term in (Terminator.CONDJMP, Terminator.FALLTHROUGH):
                nxt = succ[-1]
                if i + 1 >= len(order) or order[i + 1] != nxt:
                    raise RuntimeError(f"block {name!r} falls through to {nxt!r}, which is not next")
        table = {}
        for (name, term, succ), end in zip(self._blocks, ends):
            if name in self.dead:
                continue
            start = labels[name]
            table[start] = BasicBlock(start, end - start, term, tuple(labels[s] for s in succ))
        image = isa.load_image(code, labels[entry or order[0]])
        return image, table, len(self._blocks)


def _prologue(a: isa.Assembler):
    a.loadi(5, 0)
    a.loadi(6, 1)


def _noise(a: isa.Assembler, rng: random.Random, count: int):
    for _ in range(count):
        op = rng.choice((a.add, a.xor, a.mov))
        op(rng.randrange(2, 5), rng.randrange(0, 5))


def maze(size: int, rng_seed: int) -> tuple[isa.ProgramImage, GroundTruth]:
    """Binary decision tree over input bytes; node at depth d tests ``input[d] == k``.

    Equal goes right (taken branch), not-equal falls through left. Leaves
    halt, except one or two planted ``ABORT`` leaves (two from size 8 up).
    An even size gets one pass-through ``JMP`` block on the left spine.
    """
    if size < MIN_SIZE:
        raise SizeTooSmall(f"maze needs at least {MIN_SIZE} blocks, got {size}")
    rng = random.Random(rng_seed)
    internal = (size - 1) // 2
    passthrough = size % 2 == 0

    # tree as nested dicts; leaves carry their path constraints
    def grow(n, depth, path):
        if n == 0:
            return {"leaf": True, "depth": depth, "path": path}
        k = rng.randint(1, 48)
        left_n = rng.randint(0, n - 1)
        return {
            "leaf": False, "depth": depth, "k": k, "noise": rng.randint(0, 2),
            "left": grow(left_n, depth + 1, path),
            "right": grow(n - 1 - left_n, depth + 1, path + ((depth, k),)),
        }

    root = grow(internal, 0, ())
    leaves = []

    def collect(node):
        if node["leaf"]:
            leaves.append(node)
        else:
            collect(node["left"])
            collect(node["right"])

    collect(root)
    n_crash = 1 if size < 8 else 2
    candidates = sorted((len(l["path"]), i) for i, l in enumerate(leaves) if l["path"])
    shallow = candidates[0][0]
    pool = [i for c, i in candidates if c <= shallow + 1]
    if len(pool) < n_crash:
        pool = [i for _, i in candidates[:n_crash]]
    crash_ids = set(rng.sample(pool, n_crash))
    for i, leaf in enumerate(leaves):
        leaf["crash"] = i in crash_ids

    b = ProgramBuilder()
    counter = iter(range(10 ** 6))
    names = {}

    def name(node):
        if id(node) not in names:
            names[id(node)] = f"n{next(counter)}"
        return names[id(node)]

    pending_pass = [passthrough]

    def emit(node, first=False):
        a = b.block(name(node))
        if first:
            _prologue(a)
        if node["leaf"]:
            (b.end_abort if node["crash"] else b.end_halt)()
            return
        a.loadin(0, node["depth"])
        a.loadi(1, node["k"])
        _noise(a, rng, node["noise"])
        a.cmp(0, 1)
        left = node["left"]
        if pending_pass[0]:
            # pass-through block between this node and its left child
            pending_pass[0] = False
            pname = f"p{next(counter)}"
            b.end_cond(isa.JZ, name(node["right"]), pname)
            pa = b.block(pname)
            pa.loadi(2, node["k"] ^ 0x5A)
            b.end_jmp(name(left))
            # the left child is laid out after the right subtree is emitted
            emit(node["right"])
            emit(left)
            return
        b.end_cond(isa.JZ, name(node["right"]), name(left))
        emit(left)
        emit(node["right"])

    emit(root, first=True)
    image, table, emitted = b.build()
    crash_sites = sorted(b.asm.labels[name(l)] for l in leaves if l["crash"])
    crash_inputs = []
    for leaf in sorted((l for l in leaves if l["crash"]), key=lambda l: b.asm.labels[name(l)]):
        crash_inputs.append(_path_input(leaf["path"], leaf["depth"]))
    truth = GroundTruth("maze", size, rng_seed, table, crash_sites, emitted, crash_inputs)
    return image, truth


def _path_input(path, depth) -> bytes:
    buf = bytearray(max(depth, 1))
    for idx, val in path:
        buf[idx] = val
    return bytes(buf)


def parser(size: int, rng_seed: int) -> tuple[isa.ProgramImage, GroundTruth]:
    """Record-parser shape: magic header, type dispatch, per-type bodies.

    Normal bodies read a length byte, spin a counted loop over it, then
    validate fields. One type leads to a guarded ``ABORT``. All failures
    share one error block; a never-referenced legacy handler is emitted
    as dead code.
    """
    if size < MIN_SIZE:
        raise SizeTooSmall(f"parser needs at least {MIN_SIZE} blocks, got {size}")
    rng = random.Random(rng_seed)
    # fixed: crash dispatch compare, crash guard, err, abort
    budget = size - 4
    cases = []  # number of field checks per normal case
    while budget >= (6 if not cases else 5):
        checks = rng.randint(1, 3)
        cost = 1 + 3 + checks + (1 if not cases else 0)
        if cost > budget:
            checks -= cost - budget
            cost = budget
        if checks < 1:
            break
        cases.append(checks)
        budget -= cost
        if rng.random() < 0.3:
            break
    headers = budget
    hdr_magic = [rng.randint(1, 64) for _ in range(headers)]
    type_idx = headers
    types = rng.sample(range(1, 40), len(cases) + 1)
    crash_type = types[-1]
    crash_key = rng.randint(1, 64)

    b = ProgramBuilder()
    dispatch = [f"d{i}" for i in range(len(cases) + 1)]
    first = True
    for h in range(headers):
        a = b.block(f"h{h}")
        if first:
            _prologue(a)
            first = False
        a.loadin(0, h)
        a.loadi(1, hdr_magic[h])
        a.cmp(0, 1)
        b.end_cond(isa.JNZ, "err", f"h{h + 1}" if h + 1 < headers else dispatch[0])
    for i, d in enumerate(dispatch):
        a = b.block(d)
        if first:
            _prologue(a)
            first = False
        a.loadin(0, type_idx)
        a.loadi(1, types[i])
        a.cmp(0, 1)
        target = f"c{i}" if i < len(cases) else "crash_guard"
        b.end_cond(isa.JZ, target, dispatch[i + 1] if i + 1 < len(dispatch) else "err")
    b.block("err").loadi(2, 0xEE)
    b.end_halt()
    for i, checks in enumerate(cases):
        base = type_idx + 1
        a = b.block(f"c{i}")
        a.loadin(2, base)
        a.loadi(3, 0)
        b.end_fall(f"c{i}_loop")
        a = b.block(f"c{i}_loop")
        a.add(3, 2)
        a.sub(2, 6)
        b.end_cond(isa.JNZ, f"c{i}_loop", f"c{i}_f0")
        for j in range(checks):
            a = b.block(f"c{i}_f{j}")
            a.loadin(0, base + 1 + j)
            a.loadi(1, rng.randint(1, 64))
            _noise(a, rng, rng.randint(0, 1))
            a.cmp(0, 1)
            nxt = f"c{i}_f{j + 1}" if j + 1 < checks else f"c{i}_done"
            b.end_cond(isa.JNZ, "err", nxt)
        a = b.block(f"c{i}_done")
        a.mov(4, 3)
        b.end_jmp("ok")
    if cases:
        b.block("ok").loadi(2, 0)
        b.end_halt()
        b.block("legacy", dead=True).loadi(2, 0x1E)
        b.end_halt()
    a = b.block("crash_guard")
    a.loadin(0, type_idx + 1)
    a.loadi(1, crash_key)
    a.cmp(0, 1)
    b.end_cond(isa.JNZ, "err", "boom")
    b.block("boom")
    b.end_abort()

    image, table, emitted = b.build()
    crash_input = bytes(hdr_magic) + bytes([crash_type, crash_key])
    truth = GroundTruth("parser", size, rng_seed, table, [b.asm.labels["boom"]], emitted, [crash_input])
    return image, truth


def checksum(size: int, rng_seed: int) -> tuple[isa.ProgramImage, GroundTruth]:
    """Additive checksum over a prefix, then payload checks guarding an ``ABORT``.

    ``input[m]`` must equal the byte sum of ``input[:m]``. Payload checks
    at later offsets either reject outright or detour into feature blocks
    that rejoin the chain.
    """
    if size < MIN_SIZE:
        raise SizeTooSmall(f"checksum needs at least {MIN_SIZE} blocks, got {size}")
    rng = random.Random(rng_seed)
    m = rng.randint(2, 6)
    with_accept = size >= 5
    # fixed: sum block, guard, abort, reject, [accept]
    budget = size - (5 if with_accept else 4)
    steps = []  # True = check with feature detour (2 blocks), False = plain check (1)
    while budget > 0:
        feat = budget >= 2 and rng.random() < 0.6
        steps.append(feat)
        budget -= 2 if feat else 1
    keys = [rng.randint(1, 64) for _ in steps]
    guard_key = rng.randint(1, 64)
    guard_idx = m + 1 + len(steps)

    b = ProgramBuilder()
    a = b.block("sum")
    _prologue(a)
    a.loadi(3, 0)
    for i in range(m):
        a.loadin(0, i)
        a.add(3, 0)
    a.loadin(1, m)
    a.cmp(3, 1)
    first = "s0" if steps else "guard"
    b.end_cond(isa.JNZ, "reject", first)
    for i, feat in enumerate(steps):
        nxt = f"s{i + 1}" if i + 1 < len(steps) else "guard"
        a = b.block(f"s{i}")
        a.loadin(0, m + 1 + i)
        a.loadi(1, keys[i])
        a.cmp(0, 1)
        if feat:
            b.end_cond(isa.JZ, f"s{i}_feat", nxt)
        else:
            b.end_cond(isa.JNZ, "reject", nxt)
    a = b.block("guard")
    a.loadin(0, guard_idx)
    a.loadi(1, guard_key)
    a.cmp(0, 1)
    b.end_cond(isa.JNZ, "accept" if with_accept else "reject", "boom")
    b.block("boom")
    b.end_abort()
    for i, feat in enumerate(steps):
        if feat:
            a = b.block(f"s{i}_feat")
            _noise(a, rng, rng.randint(1, 3))
            b.end_jmp(f"s{i + 1}" if i + 1 < len(steps) else "guard")
    b.block("reject").loadi(2, 0xEE)
    b.end_halt()
    if with_accept:
        b.block("accept").loadi(2, 0)
        b.end_halt()

    image, table, emitted = b.build()
    crash_input = bytearray(guard_idx + 1)
    for i, feat in enumerate(steps):
        if not feat:
            crash_input[m + 1 + i] = keys[i]
    crash_input[guard_idx] = guard_key
    truth = GroundTruth("checksum", size, rng_seed, table, [b.asm.labels["boom"]], emitted,
                        [bytes(crash_input)])
    return image, truth


GENERATORS = {"maze": maze, "parser": parser, "checksum": checksum}


def generate(kind: str, size: int, rng_seed: int):
    if kind not in GENERATORS:
        raise ValueError(f"unknown benchmark kind {kind!r}; choose from {KINDS}")
    return GENERATORS[kind](size, rng_seed)


def random_program(rng: random.Random, n_blocks: int = 12) -> isa.ProgramImage:
    """Random structured program for differential testing.

    Forward conditional and unconditional jumps create plenty of critical
    edges. Backward edges exist only behind a counter guard on r7, so every
    run terminates (self-loops spin at most 256 times per visit).
    """
    a = isa.Assembler()
    a.loadi(5, 0)
    a.loadi(6, 1)
    a.loadi(7, rng.randint(1, 4))
    labels = [f"b{i}" for i in range(n_blocks)]
    for i in range(n_blocks):
        a.label(labels[i])
        for _ in range(rng.randint(0, 2)):
            r = rng.random()
            if r < 0.5:
                a.loadin(rng.randrange(0, 5), rng.randrange(0, 6))
            elif r < 0.7:
                a.loadi(rng.randrange(0, 5), rng.randrange(0, 4))
            else:
                rng.choice((a.add, a.sub, a.xor, a.mov))(rng.randrange(0, 5), rng.randrange(0, 5))
        last = i == n_blocks - 1
        fwd = lambda: labels[rng.randrange(i + 1, n_blocks)]
        r = rng.random()
        if last or r < 0.08:
            (a.abort if rng.random() < 0.3 else a.halt)()
        elif r < 0.55:
            a.loadin(0, rng.randrange(0, 6))
            a.loadi(1, rng.randrange(0, 4))
            a.cmp(0, 1)
            rng.choice((a.jz, a.jnz))(fwd())
        elif r < 0.7:
            a.jmp(fwd())
        elif r < 0.8:
            # guarded back edge to an earlier block (or this one)
            a.cmp(7, 5)
            a.jz(fwd())
            a.sub(7, 6)
            a.jmp(labels[rng.randrange(0, i + 1)])
        elif r < 0.85:
            # counted self-loop
            a.label(f"self{i}")
            a.add(2, 6)
            a.sub(7, 6)
            a.jnz(f"self{i}")
        # else: plain fall-through into the next block
    return isa.load_image(a.assemble(), 0)
