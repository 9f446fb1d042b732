"""Command-line front end.

Every command prints one JSON summary line on stdout, writes its CSVs to the
output directory, and leaves a ``run.meta`` file there from which
``ofz rerun`` can repeat it exactly.

Exit codes: 0 ok, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

from . import __version__, bench, cfg, isa, programs
from .fuzzer import (RNG_NAME, RNG_VERSION, InvalidSeed, Mode, TracingMode, fuzz_loop,
                     write_corpus)
from .oracle import UnknownBlock
from .stats import (DEFAULT_TRIM, SIGNIFICANCE, crossover_rate, effect_size_label,
                    mann_whitney_u, vargha_delaney_a12)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
META_FILE = "run.meta"
DEFAULT_SEED = bytes(16)

DATA_ERRORS = (isa.MalformedImage, isa.AddressOutOfRange, InvalidSeed, UnknownBlock,
               programs.SizeTooSmall, cfg.ImageTooLarge, cfg.CriticalEdgesPresent,
               bench.ChecksumMismatch, bench.MismatchedDatasets, OSError, ValueError)


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    command: str
    image: str | None = None
    mode: str = Mode.ORACLE.value
    rng_seed: int = 0
    budget: int = isa.DEFAULT_BUDGET
    stop_n: int = 10_000
    trim: float = DEFAULT_TRIM
    threshold: float = 0.01
    window: int = 1000
    out: str = "ofz-out"

    def tracing_mode(self) -> TracingMode:
        return TracingMode(Mode(self.mode), self.threshold, self.window)

    def validate(self):
        if self.budget < 1 or self.stop_n < 1 or self.window < 1:
            raise UsageError("--budget, --stop-n and --window must be >= 1")
        if not 0.0 <= self.threshold <= 1.0:
            raise UsageError("--threshold must lie in [0, 1]")
        if not 0.0 <= self.trim < 0.5:
            raise UsageError("--trim must lie in [0, 0.5)")
        if self.rng_seed < 0 or self.rng_seed >= 2 ** 64:
            raise UsageError("--rng-seed must be a u64")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _common(p: argparse.ArgumentParser, *names):
    opts = {
        "mode": dict(choices=[m.value for m in Mode], default=Mode.ORACLE.value),
        "rng-seed": dict(type=int, default=0),
        "budget": dict(type=int, default=isa.DEFAULT_BUDGET, help="instruction budget per execution"),
        "stop-n": dict(type=int, default=10_000, help="number of test cases to generate"),
        "trim": dict(type=float, default=DEFAULT_TRIM),
        "threshold": dict(type=float, default=0.01),
        "window": dict(type=int, default=1000),
    }
    for n in names:
        p.add_argument(f"--{n}", **opts[n])
    p.add_argument("--out", default="ofz-out", help="output directory (OFZ_OUT overrides)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ofz", description="Oracle-first coverage-guided fuzzing on a bytecode VM.")
    ap.add_argument("--version", action="version", version=f"ofz {__version__}")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("genbench", help="generate a benchmark program")
    p.add_argument("--kind", choices=programs.KINDS, required=True)
    p.add_argument("--size", type=int, required=True, help="number of basic blocks")
    _common(p, "rng-seed")

    p = sub.add_parser("analyze", help="recover basic blocks and critical edges")
    p.add_argument("image")
    _common(p)

    p = sub.add_parser("split", help="split critical edges into dummy blocks")
    p.add_argument("image")
    _common(p)

    p = sub.add_parser("fuzz", help="run a fuzzing session")
    p.add_argument("image")
    p.add_argument("--seeds", nargs="*", default=[], help="seed input files (default: 16 zero bytes)")
    _common(p, "mode", "rng-seed", "budget", "stop-n", "threshold", "window")

    p = sub.add_parser("record", help="record a trace-all test-case dataset")
    p.add_argument("image")
    p.add_argument("--seeds", nargs="*", default=[])
    _common(p, "rng-seed", "budget", "stop-n")

    p = sub.add_parser("replay", help="replay a dataset with per-test-case timing")
    p.add_argument("image")
    p.add_argument("dataset")
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    _common(p, "mode", "budget", "threshold", "window")

    p = sub.add_parser("report", help="aggregate timing CSVs into an overhead report")
    p.add_argument("timings", nargs="+")
    p.add_argument("--stride", type=int, default=100, help="rate-curve sampling stride")
    _common(p, "trim")

    p = sub.add_parser("rerun", help="repeat a command from its run.meta file")
    p.add_argument("meta")
    p.add_argument("--out", default=None)
    return ap


# -- helpers ------------------------------------------------------------------

def _out_dir(args) -> Path:
    out = Path(os.environ.get("OFZ_OUT") or args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _config(args) -> RunConfig:
    fields = RunConfig.__dataclass_fields__
    kw = {k: v for k, v in vars(args).items() if k in fields}
    conf = RunConfig(**kw)
    if conf.image:
        conf.image = _abs(conf.image)
    conf.validate()
    return conf


def _abs(path) -> str:
    return str(Path(path).resolve())


def _write_meta(out: Path, argv: list[str], conf: RunConfig, extra: dict):
    meta = {"argv": shlex.join(argv), "rng_name": RNG_NAME, "rng_version": RNG_VERSION,
            "ofz_version": __version__}
    meta.update({k: v for k, v in asdict(conf).items() if k != "out"})
    meta.update(extra)
    (out / META_FILE).write_text("".join(f"{k}={'' if v is None else v}\n" for k, v in meta.items()),
                                 encoding="utf-8")


def read_meta(path) -> dict[str, str]:
    meta = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k] = v
    return meta


def _load_seeds(paths) -> list[bytes]:
    return [Path(p).read_bytes() for p in paths] or [DEFAULT_SEED]


def _emit(summary: dict):
    print(json.dumps(summary, sort_keys=True, separators=(",", ":")))


def _canonical_argv(args, positional: list[str], options: dict) -> list[str]:
    """Rebuild an argv with absolute paths and every option spelled out."""
    argv = [args.command, *positional]
    for k, v in options.items():
        if isinstance(v, list):
            argv.append(f"--{k}")
            argv.extend(v)
        else:
            argv.extend([f"--{k}", str(v)])
    return argv


# -- commands -------------------------------------------------------------------

def cmd_genbench(args):
    conf = _config(args)
    out = _out_dir(args)
    image, truth = programs.generate(args.kind, args.size, args.rng_seed)
    stem = f"{args.kind}{args.size}_s{args.rng_seed}"
    isa.write_image(out / f"{stem}.ofz", image)
    cfg.write_block_csv(out / f"{stem}.blocks.csv", cfg.discover_blocks(image))
    crash = set(truth.crash_sites)
    with open(out / f"{stem}.truth.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cfg.BLOCK_CSV_HEADER + ["crash_site"])
        for row in cfg.block_rows(truth.blocks):
            w.writerow(row + [int(int(row[0], 16) in crash)])
    for i, data in enumerate(truth.crash_inputs):
        (out / f"{stem}.crash{i}.bin").write_bytes(data)
    summary = {"command": "genbench", "kind": args.kind, "size": args.size,
               "rng_seed": args.rng_seed, "image": f"{stem}.ofz", "checksum": image.checksum(),
               "reachable_blocks": truth.reachable_blocks,
               "crash_sites": [f"{c:#x}" for c in truth.crash_sites]}
    argv = _canonical_argv(args, [], {"kind": args.kind, "size": args.size, "rng-seed": args.rng_seed})
    _write_meta(out, argv, conf, {"kind": args.kind, "size": args.size,
                                  "image_checksum": image.checksum(),
                                  "reachable_blocks": truth.reachable_blocks})
    return summary


def cmd_analyze(args):
    conf = _config(args)
    out = _out_dir(args)
    image = isa.read_image(args.image)
    graph = cfg.build_cfg(image)
    critical = cfg.find_critical_edges(graph)
    cfg.write_block_csv(out / "blocks.csv", graph.blocks)
    with open(out / "critical_edges.csv", "w", encoding="utf-8", newline="") as f:
        f.write("src,dest\n")
        f.writelines(f"{e.src:#x},{e.dest:#x}\n" for e in sorted(critical))
    _write_meta(out, _canonical_argv(args, [_abs(args.image)], {}), conf,
                {"image_checksum": image.checksum()})
    return {"command": "analyze", "blocks": len(graph.blocks), "edges": len(graph.edges),
            "critical_edges": len(critical), "checksum": image.checksum()}


def cmd_split(args):
    conf = _config(args)
    out = _out_dir(args)
    image = isa.read_image(args.image)
    graph = cfg.build_cfg(image)
    new_image, new_graph, dummies = cfg.split_critical_edges(image, graph)
    isa.write_image(out / "split.ofz", new_image)
    cfg.write_block_csv(out / "blocks.csv", new_graph.blocks)
    with open(out / "dummies.csv", "w", encoding="utf-8", newline="") as f:
        f.write("dummy,src,dest\n")
        f.writelines(f"{d:#x},{e.src:#x},{e.dest:#x}\n" for d, e in sorted(dummies.items()))
    _write_meta(out, _canonical_argv(args, [_abs(args.image)], {}), conf,
                {"image_checksum": image.checksum()})
    return {"command": "split", "dummies": len(dummies), "blocks": len(new_graph.blocks),
            "critical_edges_after": len(cfg.find_critical_edges(new_graph)),
            "checksum": new_image.checksum()}


def cmd_fuzz(args):
    conf = _config(args)
    out = _out_dir(args)
    image = isa.read_image(args.image)
    seeds = _load_seeds(args.seeds)
    result = fuzz_loop(image, conf.tracing_mode(), seeds, conf.budget, max_testcases=conf.stop_n,
                       rng_seed=conf.rng_seed)
    write_corpus(result, out)
    argv = _canonical_argv(args, [_abs(args.image)], {
        "seeds": [_abs(s) for s in args.seeds], "mode": conf.mode, "rng-seed": conf.rng_seed,
        "budget": conf.budget, "stop-n": conf.stop_n, "threshold": conf.threshold,
        "window": conf.window})
    _write_meta(out, argv, conf, {"image_checksum": image.checksum()})
    return {"command": "fuzz", "mode": conf.mode, **result.stats.counters()}


def cmd_record(args):
    conf = _config(args)
    out = _out_dir(args)
    image = isa.read_image(args.image)
    ds = bench.record_dataset(image, _load_seeds(args.seeds), conf.rng_seed, conf.stop_n, conf.budget)
    bench.write_dataset(out / "dataset.ofds", ds)
    argv = _canonical_argv(args, [_abs(args.image)], {
        "seeds": [_abs(s) for s in args.seeds], "rng-seed": conf.rng_seed,
        "budget": conf.budget, "stop-n": conf.stop_n})
    _write_meta(out, argv, conf, {"image_checksum": image.checksum(), "mode": ds.mode})
    return {"command": "record", "records": len(ds), "checksum": image.checksum()}


def _replay_worker(job):
    dataset, image, mode, trial, budget, path = job
    recs = bench.replay_trial(dataset, image, mode, trial, budget)
    bench.write_timing_csv(path, recs)
    return recs


def cmd_replay(args):
    conf = _config(args)
    if args.trials < 1 or args.jobs < 1:
        raise UsageError("--trials and --jobs must be >= 1")
    out = _out_dir(args)
    image = isa.read_image(args.image)
    ds = bench.read_dataset(args.dataset)
    if ds.image_checksum and ds.image_checksum != image.checksum():
        raise bench.ChecksumMismatch("dataset was recorded against a different image")
    mode = conf.tracing_mode()
    tag = conf.mode
    jobs = [(ds, image, mode, t, conf.budget, out / f"timing_{tag}_trial{t}.csv")
            for t in range(args.trials)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            trials = list(pool.map(_replay_worker, jobs))
    else:
        trials = [_replay_worker(j) for j in jobs]
    merged = [r for t in trials for r in t]
    bench.write_timing_csv(out / f"timing_{tag}.csv", merged)
    verdicts = [r.verdict for r in trials[0]]
    with open(out / f"verdicts_{tag}.csv", "w", encoding="utf-8", newline="") as f:
        f.write("testcase_id,verdict\n")
        f.writelines(f"{r.testcase_id},{r.verdict or ''}\n" for r in trials[0])
    argv = _canonical_argv(args, [_abs(args.image), _abs(args.dataset)], {
        "mode": conf.mode, "budget": conf.budget, "threshold": conf.threshold,
        "window": conf.window, "trials": args.trials, "jobs": args.jobs})
    _write_meta(out, argv, conf, {"image_checksum": image.checksum(), "trials": args.trials})
    n_ci = sum(v == bench._CI for v in verdicts)
    return {"command": "replay", "mode": tag, "trials": args.trials, "records": len(merged),
            "coverage_increasing": n_ci}


def cmd_report(args):
    conf = _config(args)
    if args.stride < 1:
        raise UsageError("--stride must be >= 1")
    out = _out_dir(args)
    records = []
    seen = set()
    for path in args.timings:
        rows = bench.read_timing_csv(path)
        keys = {(r.mode, r.trial) for r in rows}
        if keys & seen:
            raise bench.MismatchedDatasets(f"{path} repeats a (mode, trial) already loaded")
        seen |= keys
        records.extend(rows)
    grouped = bench.group_trials(records)
    rep = bench.overhead_report(grouped, conf.trim)
    bench.write_report_csv(out / "report.csv", rep)
    for mode, trials in sorted(grouped.items()):
        verdicts = [r.verdict for r in trials[0]]
        if any(v is not None for v in verdicts):
            bench.write_rate_curve_csv(out / f"rate_curve_{mode}.csv",
                                       bench.rate_curve(verdicts, args.stride))
    base_totals = [sum(r.total_ns for r in t) for t in grouped[Mode.BASELINE.value]]
    with open(out / "significance.csv", "w", encoding="utf-8", newline="") as f:
        f.write("mode,u,pvalue,significant,a12,effect\n")
        for mode, trials in sorted(grouped.items()):
            if mode == Mode.BASELINE.value:
                continue
            totals = [sum(r.total_ns for r in t) for t in trials]
            u, p = mann_whitney_u(totals, base_totals)
            a12 = vargha_delaney_a12(totals, base_totals)
            f.write(f"{mode},{u},{p:.10g},{int(p < SIGNIFICANCE)},{a12:.6f},{effect_size_label(a12)}\n")
    summary = {"command": "report", "relative_time": {m: round(r.relative_time, 6)
                                                      for m, r in sorted(rep.modes.items())}}
    if all(m.value in grouped for m in (Mode.BASELINE, Mode.TRACE_ALL, Mode.ORACLE)):
        try:
            model = bench.fit_crossover(grouped, conf.trim)
            r_star = crossover_rate(model)
        except ValueError:
            model = None
        if model is not None:
            with open(out / "crossover.csv", "w", encoding="utf-8", newline="") as f:
                f.write("t_base,t_trace,c_extra,crossover_rate\n")
                f.write(f"{model.t_base:.3f},{model.t_trace:.3f},{model.c_extra:.3f},{r_star:.8f}\n")
            summary["crossover_rate"] = r_star
    argv = _canonical_argv(args, [_abs(t) for t in args.timings],
                           {"trim": conf.trim, "stride": args.stride})
    _write_meta(out, argv, conf, {})
    return summary


def cmd_rerun(args):
    meta = read_meta(args.meta)
    if "argv" not in meta:
        raise ValueError(f"{args.meta} has no argv entry")
    argv = shlex.split(meta["argv"])
    out = args.out or str(Path(args.meta).resolve().parent)
    inner = build_parser().parse_args(argv + ["--out", out])
    image_path = getattr(inner, "image", None)
    if meta.get("image_checksum") and image_path:
        if isa.read_image(image_path).checksum() != meta["image_checksum"]:
            raise bench.ChecksumMismatch("image changed since the recorded run")
    return COMMANDS[inner.command](inner)


COMMANDS = {
    "genbench": cmd_genbench, "analyze": cmd_analyze, "split": cmd_split, "fuzz": cmd_fuzz,
    "record": cmd_record, "replay": cmd_replay, "report": cmd_report, "rerun": cmd_rerun,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _emit(COMMANDS[args.command](args))
    except UsageError as e:
        print(f"ofz: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"ofz: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except Exception as e:  # noqa: BLE001 - last-resort mapping to the internal-error code
        print(f"ofz: internal error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
