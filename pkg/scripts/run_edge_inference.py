"""Split critical edges in random programs and check edge coverage inferred from blocks."""

import argparse
import random
from dataclasses import dataclass

from ofz import cfg as cfgmod, isa, programs
from ofz.tracer import build_tracer, trace, trace_edges


@dataclass
class Config:
    programs: int = 1000
    inputs: int = 100
    rng_seed: int = 4


def main(c: Config):
    rng = random.Random(c.rng_seed)
    with_critical = dummies = mismatches = 0
    for _ in range(c.programs):
        img = programs.random_program(rng, rng.randrange(3, 30))
        g = cfgmod.build_cfg(img)
        with_critical += bool(cfgmod.find_critical_edges(g))
        new_img, new_g, added = cfgmod.split_critical_edges(img, g)
        dummies += len(added)
        tracer = build_tracer(new_img, new_g.blocks)
        for _ in range(c.inputs):
            data = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 12)))
            same_outcome = isa.execute(img, data).kind == isa.execute(new_img, data).kind
            inferred = cfgmod.infer_edge_coverage(trace(tracer, data).blocks, new_g)
            mismatches += not same_outcome or inferred != trace_edges(tracer, data)
    print(f"programs={c.programs} with_critical={with_critical} dummies={dummies} mismatches={mismatches}")
    return mismatches


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--programs", type=int, default=Config.programs)
    p.add_argument("--rng-seed", type=int, default=Config.rng_seed)
    a = p.parse_args()
    raise SystemExit(1 if main(Config(a.programs, rng_seed=a.rng_seed)) else 0)
