"""Record a dataset, replay it under baseline, trace-all and oracle, and report overhead.

Writes report.csv, rate_curve_oracle.csv and crossover.csv into --out and
prints the relative times.
"""

import argparse
import csv
from dataclasses import dataclass
from pathlib import Path

from ofz import bench, programs
from ofz.fuzzer import BASELINE, ORACLE, TRACE_ALL
from ofz.stats import crossover_rate


@dataclass
class Config:
    kind: str = "maze"
    size: int = 64
    rng_seed: int = 1
    testcases: int = 100_000
    trials: int = 8
    stride: int = 1000
    out: Path = Path("overhead_out")


def main(cfg: Config):
    cfg.out.mkdir(parents=True, exist_ok=True)
    img, _ = programs.generate(cfg.kind, cfg.size, cfg.rng_seed)
    ds = bench.record_dataset(img, [bytes(16)], cfg.rng_seed, cfg.testcases)
    modes = {"baseline": BASELINE, "trace-all": TRACE_ALL, "oracle": ORACLE}
    recs = {m: [] for m in modes}
    order = list(modes)
    for t in range(cfg.trials):  # interleaved and rotated so drift affects every mode alike
        for name in order[t % 3:] + order[:t % 3]:
            recs[name].append(bench.replay_trial(ds, img, modes[name], t))
    rep = bench.overhead_report(recs)
    bench.write_report_csv(cfg.out / "report.csv", rep)
    curve = bench.rate_curve([r.verdict for r in recs["oracle"][0]], cfg.stride)
    bench.write_rate_curve_csv(cfg.out / "rate_curve_oracle.csv", curve)
    model = bench.fit_crossover(recs)
    r_star = crossover_rate(model)
    with open(cfg.out / "crossover.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["t_base_ns", "t_trace_ns", "c_extra_ns", "crossover_rate"])
        w.writerow([f"{model.t_base:.3f}", f"{model.t_trace:.3f}", f"{model.c_extra:.3f}", f"{r_star:.6f}"])
    for m in modes:
        print(f"{m:10s} {rep.relative_time(m):.4f}x  rate={rep.modes[m].rate}")
    print(f"final rate {curve[-1][1]:.2e}, crossover rate {r_star:.4f}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--kind", default=Config.kind)
    p.add_argument("--size", type=int, default=Config.size)
    p.add_argument("--rng-seed", type=int, default=Config.rng_seed)
    p.add_argument("--testcases", type=int, default=Config.testcases)
    p.add_argument("--trials", type=int, default=Config.trials)
    p.add_argument("--out", type=Path, default=Config.out)
    a = p.parse_args()
    main(Config(a.kind, a.size, a.rng_seed, a.testcases, a.trials, out=a.out))
