"""Command-line entry point: gen, image, bench, report, verify.

Configuration is a flat key-value file (one ``key = value`` per line,
``#`` comments); command-line flags override file values and unknown keys
are rejected. Exit codes: 0 success, 1 verification or acceptance
failure, 2 usage/config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench, metrics, visdata
from .comms import REDUCE_KINDS, ReduceStrategy, Topology
from .gridder import KERNEL_KINDS, DEFAULT_KB_BETA_PER_SUPPORT, KernelSpec
from .metrics import (FREQ_LEVELS, PlatformCounterMeter, SyntheticPowerMeter,
                      TraceInjectionMeter)
from .pipeline import peak_pixel, run_pipeline

__all__ = ["CONFIG_SCHEMA", "ConfigError", "load_config_file", "dump_config",
           "resolve_config", "main"]

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_IO = 3


class ConfigError(Exception):
    pass


def _bool(text):
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (converter, default, help)
CONFIG_SCHEMA = {
    "grid.n_u": (int, 256, "mesh cells along u"),
    "grid.n_v": (int, 256, "mesh cells along v"),
    "grid.n_w": (int, 8, "number of w planes"),
    "grid.cell_size_lm": (float, 1e-3, "image pixel size in direction cosines"),
    "kernel.kind": (str, "gaussian", f"gridding kernel, one of {KERNEL_KINDS}"),
    "kernel.half_support": (int, 3, "kernel half support in cells"),
    "kernel.shape_param": (float, 0.0, "sigma (gaussian) or beta (kaiser_bessel); 0 = default"),
    "topo.n_nodes": (int, 1, "virtual nodes"),
    "topo.ranks_per_node": (int, 1, "ranks per virtual node"),
    "topo.threads_per_rank": (int, 1, "gridding threads inside each rank"),
    "reduce.kind": (str, "direct", f"reduction strategy, one of {REDUCE_KINDS}"),
    "reduce.deterministic": (_bool, True, "fixed summation order (bit-reproducible)"),
    "meter.kind": (str, "none", "none | trace_injection | synthetic_model | platform_counters"),
    "meter.trace_path": (str, "", "trace CSV for trace_injection"),
    "meter.trace_label": (str, "", "trace label for trace_injection"),
    "meter.watts_high": (float, metrics.DEFAULT_WATTS["high"], "synthetic watts at high"),
    "meter.watts_default": (float, metrics.DEFAULT_WATTS["default"], "synthetic watts at default"),
    "meter.watts_medium": (float, metrics.DEFAULT_WATTS["medium"], "synthetic watts at medium"),
    "meter.watts_low": (float, metrics.DEFAULT_WATTS["low"], "synthetic watts at low"),
    "meter.counter_file": (str, "", "platform counter file (one number)"),
    "meter.counter_command": (str, "", "platform counter command printing one number"),
    "bench.repeats": (int, 4, "repeats per configuration"),
    "bench.output_dir": (str, "bench_out", "bench output directory"),
    "bench.topologies": (str, "1x1", "comma list of NODESxRANKS topologies"),
    "bench.strategies": (str, "direct", "comma list of reduction strategies"),
    "bench.freq_levels": (str, "default", "comma list of frequency levels"),
    "run.alpha": (float, 1.0, "green-productivity energy weight"),
    "run.seed": (int, 1, "random seed"),
    "run.freq_level": (str, "default", f"frequency level, one of {FREQ_LEVELS}"),
    "run.label": (str, "run", "label attached to run records"),
    "gen.records": (int, 1000, "synthetic record count"),
    "gen.n_freq": (int, 1, "frequency channels"),
    "gen.n_corr": (int, 1, "correlations per channel"),
    "gen.n_time_slices": (int, 8, "time slices"),
    "gen.sources": (str, "0,0,1", "sky sources as l,m,flux;l,m,flux;..."),
    "gen.w_min_native": (float, 0.0, "native w lower bound"),
    "gen.w_max_native": (float, 0.0, "native w upper bound"),
}


def config_help() -> str:
    lines = ["configuration keys (file: one 'key = value' per line, # comments):"]
    for key, (_, default, help_text) in CONFIG_SCHEMA.items():
        lines.append(f"  {key:<24} {help_text} (default: {default})")
    return "\n".join(lines)


def load_config_file(path) -> dict:
    """Parse a flat config file into typed values; unknown keys are errors."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        conv = CONFIG_SCHEMA[key][0]
        try:
            out[key] = conv(value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def dump_config(cfg: dict) -> str:
    lines = [f"{key} = {cfg[key]}" for key in CONFIG_SCHEMA]
    return "\n".join(lines) + "\n"


def resolve_config(config_path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the config file, then explicit overrides."""
    cfg = {key: default for key, (_, default, _) in CONFIG_SCHEMA.items()}
    if config_path:
        cfg.update(load_config_file(config_path))
    for key, value in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            cfg[key] = CONFIG_SCHEMA[key][0](value)
    return cfg


def _parse_topology(text, threads=1) -> Topology:
    try:
        nodes, ranks = text.lower().split("x")
        return Topology(int(nodes), int(ranks), threads)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad topology {text!r}, expected NODESxRANKS") from exc


def _kernel_from(cfg) -> KernelSpec:
    kind = cfg["kernel.kind"]
    support = cfg["kernel.half_support"]
    shape = cfg["kernel.shape_param"]
    if shape <= 0:
        shape = 1.0 if kind == "gaussian" else DEFAULT_KB_BETA_PER_SUPPORT * support
    return KernelSpec(kind=kind, half_support=support, shape_param=shape)


def _meter_from(cfg, topo: Topology | None = None):
    kind = cfg["meter.kind"]
    if kind in ("none", ""):
        return None
    if kind == "trace_injection":
        if not cfg["meter.trace_path"] or not cfg["meter.trace_label"]:
            raise ConfigError("trace_injection needs meter.trace_path and meter.trace_label")
        return TraceInjectionMeter(path=Path(cfg["meter.trace_path"]),
                                   label=cfg["meter.trace_label"],
                                   n_nodes=topo.n_nodes if topo else 1)
    if kind == "synthetic_model":
        return SyntheticPowerMeter(watts={
            "high": cfg["meter.watts_high"], "default": cfg["meter.watts_default"],
            "medium": cfg["meter.watts_medium"], "low": cfg["meter.watts_low"]})
    if kind == "platform_counters":
        return PlatformCounterMeter(
            counter_file=Path(cfg["meter.counter_file"]) if cfg["meter.counter_file"] else None,
            counter_command=cfg["meter.counter_command"] or None)
    raise ConfigError(f"unknown meter kind {kind!r}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = resolve_config(args.config, {
        "gen.records": args.records, "gen.sources": args.sources,
        "run.seed": args.seed, "gen.n_freq": args.n_freq,
        "gen.n_corr": args.n_corr, "gen.n_time_slices": args.time_slices,
        "grid.cell_size_lm": args.cell,
        "gen.w_min_native": args.w_min, "gen.w_max_native": args.w_max,
    })
    if cfg["gen.records"] < 1:
        raise ConfigError("gen.records must be >= 1")
    sky = visdata.SkyModel.parse(cfg["gen.sources"])
    header, chunk = visdata.generate_synthetic(
        sky, cfg["gen.records"], cfg["gen.n_freq"], cfg["run.seed"],
        n_corr=cfg["gen.n_corr"], n_time_slices=cfg["gen.n_time_slices"],
        cell_size_lm=cfg["grid.cell_size_lm"],
        w_min_native=cfg["gen.w_min_native"], w_max_native=cfg["gen.w_max_native"])
    visdata.write_dataset(chunk, header, args.out)
    print(f"wrote {header.n_records} records "
          f"({header.n_freq} freq x {header.n_corr} corr, "
          f"{header.n_time_slices} time slices) to {args.out}")
    return EXIT_OK


def cmd_image(args) -> int:
    cfg = resolve_config(args.config, {
        "grid.n_u": args.n_u, "grid.n_v": args.n_v, "grid.n_w": args.n_w,
        "grid.cell_size_lm": args.cell, "kernel.kind": args.kernel,
        "kernel.half_support": args.half_support, "kernel.shape_param": args.shape_param,
        "reduce.kind": args.strategy, "reduce.deterministic": args.deterministic,
        "topo.threads_per_rank": args.threads, "run.freq_level": args.freq,
        "run.label": args.label, "run.seed": args.seed,
        "meter.kind": args.meter, "meter.trace_path": args.trace,
        "meter.trace_label": args.trace_label,
    })
    dataset = Path(args.dataset)
    if not dataset.exists():
        print(f"dataset not found: {dataset}", file=sys.stderr)
        return EXIT_USAGE
    topo = _parse_topology(args.topo or
                           f"{cfg['topo.n_nodes']}x{cfg['topo.ranks_per_node']}",
                           threads=cfg["topo.threads_per_rank"])
    strategy = ReduceStrategy(cfg["reduce.kind"], cfg["reduce.deterministic"])
    res = run_pipeline(
        dataset, cfg["grid.n_u"], cfg["grid.n_v"], cfg["grid.n_w"],
        cfg["grid.cell_size_lm"], kernel=_kernel_from(cfg), topo=topo,
        strategy=strategy, meter=_meter_from(cfg, topo),
        freq_level=cfg["run.freq_level"], label=cfg["run.label"],
        out_dir=args.out_dir, pgm=args.pgm, seed=cfg["run.seed"])
    i, j = peak_pixel(res.image)
    print(f"image written to {args.out_dir} (sha256 {res.image_sha256[:16]}...)")
    print(f"peak pixel: ({i}, {j}); "
          f"imag residual {res.image.imag_residual_norm:.3e} "
          f"vs real norm {res.image.real_norm:.3e}")
    header = ["phase", "seconds"] + (["joules"] if res.run.energy_joules else [])
    rows = []
    for phase in list(metrics.PHASES) + ["total"]:
        if phase in res.run.phase_times:
            row = [phase, res.run.phase_times[phase]]
            if res.run.energy_joules:
                row.append(res.run.energy_joules.get(phase, 0.0))
            rows.append(row)
    print(metrics.render_table(header, rows))
    if args.out_dir:
        out = Path(args.out_dir) / "phases.csv"
        metrics.write_report_csv(out, header, rows)
        print(f"phase times written to {out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = resolve_config(args.config, {
        "grid.n_u": args.n_u, "grid.n_v": args.n_v, "grid.n_w": args.n_w,
        "grid.cell_size_lm": args.cell,
        "bench.repeats": args.repeats, "bench.output_dir": args.out_dir,
        "bench.topologies": args.topos, "bench.strategies": args.strategies,
        "bench.freq_levels": args.freqs,
        "reduce.deterministic": args.deterministic,
        "topo.threads_per_rank": args.threads,
        "meter.kind": args.meter, "run.seed": args.seed,
        "gen.records": args.records, "gen.sources": args.sources,
    })
    topologies = [_parse_topology(t, cfg["topo.threads_per_rank"])
                  for t in cfg["bench.topologies"].split(",") if t.strip()]
    strategies = [ReduceStrategy(s.strip(), cfg["reduce.deterministic"])
                  for s in cfg["bench.strategies"].split(",") if s.strip()]
    freqs = [f.strip() for f in cfg["bench.freq_levels"].split(",") if f.strip()]
    synthetic = None
    dataset = Path(args.dataset) if args.dataset else None
    if dataset is None:
        synthetic = {
            "sky": visdata.SkyModel.parse(cfg["gen.sources"]),
            "n_records": cfg["gen.records"], "n_freq": cfg["gen.n_freq"],
            "seed": cfg["run.seed"], "n_corr": cfg["gen.n_corr"],
            "n_time_slices": cfg["gen.n_time_slices"],
            "w_min_native": cfg["gen.w_min_native"],
            "w_max_native": cfg["gen.w_max_native"],
        }
    elif not dataset.exists():
        print(f"dataset not found: {dataset}", file=sys.stderr)
        return EXIT_USAGE
    plan = bench.BenchPlan(
        n_u=cfg["grid.n_u"], n_v=cfg["grid.n_v"], n_w=cfg["grid.n_w"],
        cell_size_lm=cfg["grid.cell_size_lm"], kernel=_kernel_from(cfg),
        topologies=topologies, strategies=strategies, freq_levels=freqs,
        repeats=cfg["bench.repeats"], dataset=dataset, synthetic=synthetic,
        meter=_meter_from(cfg), output_dir=Path(cfg["bench.output_dir"]),
        alpha=cfg["run.alpha"])
    result = bench.run_plan(plan)
    print(f"raw runs: {result.raw_path}")
    print(f"aggregates: {result.aggregate_path}")
    shown = ["label", "status", "n_ok", "total_s_mean", "total_s_std",
             "image_hashes_identical"]
    idx = [result.aggregate_header.index(c) for c in shown]
    print(metrics.render_table(shown, [[row[i] for i in idx]
                                       for row in result.aggregate_rows]))
    return EXIT_OK if result.all_ok else EXIT_CHECK_FAILED


REPORT_KINDS = ("gp", "reduce_fraction", "freq", "ratios", "scaling_gp")


def cmd_report(args) -> int:
    alpha = args.alpha
    runs = metrics.load_trace_records(args.trace)
    if args.kind == "gp":
        ref_label = args.ref or runs[0].label
        candidates = [r for r in runs if r.label == ref_label]
        if not candidates:
            raise ConfigError(f"reference label {ref_label!r} not in trace")
        ref = candidates[0]
        header = ["label", "n_nodes", "freq_level", "total_s", "total_j",
                  "speedup", "energy_ratio", "green_productivity"]
        rows = [(r.label, r.n_nodes, r.freq_level, r.total_seconds, r.total_joules,
                 ref.total_seconds / r.total_seconds,
                 ref.total_joules / r.total_joules,
                 metrics.green_productivity(ref, r, alpha))
                for r in runs]
    elif args.kind == "reduce_fraction":
        header = ["label", "n_nodes", "freq_level", "reduce_s", "total_s",
                  "reduce_fraction"]
        rows = [(r.label, r.n_nodes, r.freq_level, r.phase_times.get("reduce", 0.0),
                 r.total_seconds, metrics.reduce_fraction(r))
                for r in runs if "reduce" in r.phase_times]
        if not rows:
            raise ConfigError("no runs with a reduce phase in the trace")
    elif args.kind == "freq":
        groups: dict = {}
        for r in runs:
            groups.setdefault((r.label, r.n_nodes), {})[r.freq_level] = r
        header = ["label", "n_nodes", "freq_level", "energy_saving",
                  "perf_degradation"]
        rows = []
        for (label, nodes), by_level in sorted(groups.items()):
            if "high" not in by_level:
                continue  # nothing to compare against for this group
            base = by_level["high"]
            for level in FREQ_LEVELS:
                if level == "high" or level not in by_level:
                    continue
                other = by_level[level]
                rows.append((label, nodes, level,
                             metrics.energy_saving(base, other),
                             metrics.perf_degradation(base, other)))
        if not rows:
            raise ConfigError("no label group carries a high-frequency baseline")
    elif args.kind == "ratios":
        cpu = [r for r in runs if r.label == args.cpu_label]
        gpu = [r for r in runs if r.label == args.gpu_label]
        if not cpu or not gpu:
            raise ConfigError(
                f"labels {args.cpu_label!r}/{args.gpu_label!r} not both present")
        shared = {r.n_nodes for r in cpu} & {r.n_nodes for r in gpu}
        if not shared:
            raise ConfigError("no common node counts between the two label sets")
        ratio_rows = metrics.ratio_report(
            [r for r in cpu if r.n_nodes in shared],
            [r for r in gpu if r.n_nodes in shared])
        header = ["n_nodes", "cpu_freq_level", "energy_ratio_cpu_over_gpu",
                  "time_ratio_cpu_over_gpu"]
        rows = ratio_rows
    else:  # scaling_gp
        sel = [r for r in runs
               if (args.label is None or r.label == args.label)
               and r.freq_level == args.freq]
        if not sel:
            raise ConfigError("no runs match the label/freq selection")
        gp = metrics.scaling_gp_report(sel, alpha)
        header = ["label", "n_nodes", "green_productivity"]
        rows = [(sel[0].label, nodes, value) for nodes, value in gp]

    print(metrics.render_table(header, rows))
    if args.out:
        metrics.write_report_csv(args.out, header, rows)
        print(f"report written to {args.out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    report = bench.verify_pipeline(scale=args.scale, force_fail=args.force_fail)
    print(report.render())
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wstack",
        description="w-stacking imaging pipeline with message accounting "
                    "and energy/productivity reports",
        epilog=config_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset path")
    gen.add_argument("--records", type=int)
    gen.add_argument("--sources", help="l,m,flux;l,m,flux;...")
    gen.add_argument("--seed", type=int)
    gen.add_argument("--n-freq", type=int, dest="n_freq")
    gen.add_argument("--n-corr", type=int, dest="n_corr")
    gen.add_argument("--time-slices", type=int, dest="time_slices")
    gen.add_argument("--cell", type=float)
    gen.add_argument("--w-min", type=float, dest="w_min")
    gen.add_argument("--w-max", type=float, dest="w_max")
    gen.add_argument("--config")
    gen.set_defaults(func=cmd_gen)

    image = sub.add_parser("image", help="run the imaging pipeline")
    image.add_argument("--dataset", required=True)
    image.add_argument("--out-dir", default="image_out")
    image.add_argument("--n-u", type=int, dest="n_u")
    image.add_argument("--n-v", type=int, dest="n_v")
    image.add_argument("--n-w", type=int, dest="n_w")
    image.add_argument("--cell", type=float)
    image.add_argument("--kernel", choices=KERNEL_KINDS)
    image.add_argument("--half-support", type=int, dest="half_support")
    image.add_argument("--shape-param", type=float, dest="shape_param")
    image.add_argument("--topo", help="NODESxRANKS, e.g. 2x2")
    image.add_argument("--threads", type=int)
    image.add_argument("--strategy", choices=REDUCE_KINDS)
    image.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                       default=None)
    image.add_argument("--freq", choices=FREQ_LEVELS)
    image.add_argument("--label")
    image.add_argument("--seed", type=int)
    image.add_argument("--meter")
    image.add_argument("--trace", help="trace CSV for the trace_injection meter")
    image.add_argument("--trace-label", dest="trace_label")
    image.add_argument("--pgm", action="store_true", help="also write a PGM preview")
    image.add_argument("--config")
    image.set_defaults(func=cmd_image)

    bench_p = sub.add_parser("bench", help="run a benchmark sweep")
    bench_p.add_argument("--dataset", help="dataset path (default: synthesize)")
    bench_p.add_argument("--records", type=int)
    bench_p.add_argument("--sources")
    bench_p.add_argument("--seed", type=int)
    bench_p.add_argument("--n-u", type=int, dest="n_u")
    bench_p.add_argument("--n-v", type=int, dest="n_v")
    bench_p.add_argument("--n-w", type=int, dest="n_w")
    bench_p.add_argument("--cell", type=float)
    bench_p.add_argument("--topos", help="comma list, e.g. 1x1,2x2")
    bench_p.add_argument("--strategies", help="comma list of reduce kinds")
    bench_p.add_argument("--freqs", help="comma list of frequency levels")
    bench_p.add_argument("--threads", type=int)
    bench_p.add_argument("--repeats", type=int)
    bench_p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                         default=None)
    bench_p.add_argument("--meter")
    bench_p.add_argument("--out-dir", dest="out_dir")
    bench_p.add_argument("--config")
    bench_p.set_defaults(func=cmd_bench)

    report = sub.add_parser("report", help="compute a report from trace CSVs")
    report.add_argument("kind", choices=REPORT_KINDS)
    report.add_argument("--trace", required=True, help="trace CSV path")
    report.add_argument("--ref", help="reference label (gp)")
    report.add_argument("--label", help="label filter (scaling_gp)")
    report.add_argument("--freq", default="default",
                        help="frequency level filter (scaling_gp)")
    report.add_argument("--cpu-label", dest="cpu_label", default="cpu")
    report.add_argument("--gpu-label", dest="gpu_label", default="gpu")
    report.add_argument("--alpha", type=float, default=1.0)
    report.add_argument("--out", help="also write the report CSV here")
    report.set_defaults(func=cmd_report)

    verify = sub.add_parser("verify", help="run the self-verification suite")
    verify.add_argument("scale", choices=("small", "medium"))
    verify.add_argument("--force-fail", action="store_true",
                        help=argparse.SUPPRESS)
    verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, metrics.MeterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
