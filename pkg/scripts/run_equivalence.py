"""Fuzz each benchmark under oracle and trace-all and confirm the sessions agree.

Prints one row per (benchmark, rng seed) with coverage-increasing counts and
the wall time of each mode.
"""

import argparse
import itertools
import time
from dataclasses import dataclass, field

from ofz import programs
from ofz.fuzzer import ORACLE, TRACE_ALL, Fuzzer


@dataclass
class Config:
    benchmarks: list = field(default_factory=lambda: [
        ("maze", 64), ("maze", 255), ("parser", 64), ("parser", 128), ("checksum", 32)])
    rng_seeds: tuple = (1, 2, 3)
    testcases: int = 10_000


def session(img, mode, seed, n):
    f = Fuzzer(img, mode, [bytes(16)], rng_seed=seed)
    t0 = time.perf_counter()
    f.run(n)
    return f.result(), time.perf_counter() - t0


def main(cfg: Config):
    print("benchmark,rng_seed,covinc,covered,oracle_s,trace_all_s,agree")
    bad = 0
    for (kind, size), seed in itertools.product(cfg.benchmarks, cfg.rng_seeds):
        img, _ = programs.generate(kind, size, seed)
        o, to = session(img, ORACLE, seed, cfg.testcases)
        t, tt = session(img, TRACE_ALL, seed, cfg.testcases)
        agree = (o.covinc_ids == t.covinc_ids and o.coverage.covered == t.coverage.covered
                 and [e.testcase for e in o.queue] == [e.testcase for e in t.queue])
        bad += not agree
        print(f"{kind}{size},{seed},{len(o.covinc_ids)},{len(o.coverage.covered)},"
              f"{to:.2f},{tt:.2f},{agree}")
    return bad


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--testcases", type=int, default=Config.testcases)
    raise SystemExit(1 if main(Config(testcases=p.parse_args().testcases)) else 0)
