"""Sweep the hybrid threshold on one benchmark and report traced share and wall time."""

import argparse
import time
from dataclasses import dataclass

from ofz import programs
from ofz.fuzzer import Fuzzer, hybrid


@dataclass
class Config:
    kind: str = "maze"
    size: int = 255
    rng_seed: int = 2
    testcases: int = 20_000
    window: int = 1000
    thresholds: tuple = (0.0, 0.001, 0.01, 0.05, 0.2, 1.0)


def main(c: Config):
    img, _ = programs.generate(c.kind, c.size, c.rng_seed)
    print("threshold,traced,covinc,covered,seconds")
    for th in c.thresholds:
        f = Fuzzer(img, hybrid(th, c.window), [bytes(16)], rng_seed=c.rng_seed)
        t0 = time.perf_counter()
        f.run(c.testcases)
        r = f.result()
        print(f"{th},{r.stats.traced},{r.stats.coverage_increasing},{r.stats.covered_blocks},"
              f"{time.perf_counter() - t0:.2f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kind", default=Config.kind)
    p.add_argument("--size", type=int, default=Config.size)
    p.add_argument("--testcases", type=int, default=Config.testcases)
    a = p.parse_args()
    main(Config(a.kind, a.size, testcases=a.testcases))
