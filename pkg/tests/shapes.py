"""Small hand-built programs shared by several test modules."""

from ofz import isa


def straight3():
    """Three blocks chained by unconditional jumps."""
    a = isa.Assembler()
    a.label("b1"); a.loadi(0, 1); a.jmp("b2")
    a.label("b2"); a.loadi(1, 2); a.jmp("b3")
    a.label("b3"); a.halt()
    return isa.load_image(a.assemble()), [a.labels[k] for k in ("b1", "b2", "b3")]


def diamond():
    """if input[0] == 7 then B2 else B3; both join at B4."""
    a = isa.Assembler()
    a.label("b1"); a.loadin(0, 0); a.loadi(1, 7); a.cmp(0, 1); a.jz("b3")
    a.label("b2"); a.loadi(2, 1); a.jmp("b4")
    a.label("b3"); a.loadi(2, 2)
    a.label("b4"); a.halt()
    return isa.load_image(a.assemble()), {k: a.labels[k] for k in ("b1", "b2", "b3", "b4")}


def critical_taken():
    """B1 -> {B2, B3} and B2 -> B3: the edge B1->B3 (taken arm) is critical."""
    a = isa.Assembler()
    a.label("b1"); a.loadin(0, 0); a.loadi(1, 0); a.cmp(0, 1); a.jz("b3")
    a.label("b2"); a.loadi(2, 5)
    a.label("b3"); a.halt()
    return isa.load_image(a.assemble()), {k: a.labels[k] for k in ("b1", "b2", "b3")}


def critical_fallthrough():
    """B1 -> {B3 (taken), B2 (fall)}, B3 -> B2: the fall-through edge B1->B2 is critical."""
    a = isa.Assembler()
    a.label("b1"); a.loadin(0, 0); a.loadi(1, 0); a.cmp(0, 1); a.jz("b3")
    a.label("b2"); a.halt()
    a.label("b3"); a.loadi(2, 5); a.jmp("b2")
    return isa.load_image(a.assemble()), {k: a.labels[k] for k in ("b1", "b2", "b3")}


def guarded_abort():
    """if input[0] == 0x42 then ABORT else HALT."""
    a = isa.Assembler()
    a.loadin(0, 0); a.loadi(1, 0x42); a.cmp(0, 1); a.jz("boom")
    a.halt()
    a.label("boom"); a.abort()
    return isa.load_image(a.assemble())


def self_loop():
    """B2 is a self-loop entered 4 x 250 = 1000 times in total."""
    a = isa.Assembler()
    a.label("b1"); a.loadi(6, 1); a.loadi(4, 4); a.loadi(7, 250)
    a.label("b2"); a.sub(7, 6); a.jnz("b2")
    a.label("b3"); a.loadi(7, 250); a.sub(4, 6); a.jnz("b2")
    a.label("b4"); a.halt()
    return isa.load_image(a.assemble()), {k: a.labels[k] for k in ("b1", "b2", "b3", "b4")}
