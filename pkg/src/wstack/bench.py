"""Benchmark orchestration and the self-verification suite.

A :class:`BenchPlan` sweeps topologies x strategies x frequency levels,
runs each cell ``repeats`` times, and writes a raw CSV (one row per run)
plus an aggregate CSV (mean and sample standard deviation per cell). A
failed run aborts its cell, is recorded with a reason, and never poisons
the aggregates.

:func:`verify_pipeline` checks the production paths against independent
references: a direct triple-loop convolution, a direct O(N^4) DFT, the
cross-strategy reduce equivalence, and end-to-end point-source recovery.
"""

from __future__ import annotations

import csv
import itertools
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, transform, visdata
from .comms import ReduceStrategy, Topology, reduce_slabs
from .gridder import KernelSpec, grid_all, kernel_value
from .mesh import ComplexGrid, GridSpec, slab_of
from .pipeline import peak_pixel, run_pipeline

__all__ = [
    "BenchPlan",
    "PlanResult",
    "run_plan",
    "RAW_COLUMNS",
    "TIMING_COLUMNS",
    "CheckResult",
    "VerifyReport",
    "verify_pipeline",
    "direct_convolution_grid",
    "reference_dft2d",
]


@dataclass
class BenchPlan:
    """One benchmark campaign over a dataset (given or synthesized)."""

    n_u: int
    n_v: int
    n_w: int
    cell_size_lm: float
    kernel: KernelSpec
    topologies: list
    strategies: list
    freq_levels: list = field(default_factory=lambda: ["default"])
    repeats: int = 4
    dataset: Path | None = None
    synthetic: dict | None = None
    meter: object | None = None
    output_dir: Path = Path("bench_out")
    alpha: float = 1.0

    def __post_init__(self):
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if not self.topologies or not self.strategies or not self.freq_levels:
            raise ValueError("sweep lists must be non-empty")
        if (self.dataset is None) == (self.synthetic is None):
            raise ValueError("exactly one of dataset or synthetic must be set")


PHASE_COLUMNS = [f"{p}_s" for p in metrics.PHASES] + ["total_s"]
OPS_COLUMNS = ["records", "grid_updates", "exchange_bytes", "reduce_bytes",
               "fft_bytes", "reduce_messages", "stack_pixels"]
RAW_COLUMNS = (
    ["config", "label", "topology", "threads", "strategy", "deterministic",
     "freq_level", "repeat", "status", "failure_reason", "image_sha256"]
    + PHASE_COLUMNS + ["total_j"] + OPS_COLUMNS
)
# Columns that legitimately differ between identical deterministic runs:
# wall-clock measurements and anything derived from them.
TIMING_COLUMNS = PHASE_COLUMNS + ["total_j"]


@dataclass
class PlanResult:
    raw_rows: list
    aggregate_rows: list
    aggregate_header: list
    raw_path: Path
    aggregate_path: Path
    all_ok: bool


def _cell_label(topo: Topology, strategy: ReduceStrategy, freq: str) -> str:
    return f"{topo.label()}t{topo.threads_per_rank}_{strategy.kind}_{freq}"


def run_plan(plan: BenchPlan) -> PlanResult:
    out_dir = Path(plan.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = plan.dataset
    if dataset is None:
        syn = dict(plan.synthetic)
        sky = syn.pop("sky")
        header, chunk = visdata.generate_synthetic(
            sky, cell_size_lm=plan.cell_size_lm, **syn)
        dataset = out_dir / "dataset.rvis"
        visdata.write_dataset(chunk, header, dataset)

    raw_rows = []
    cells = list(itertools.product(plan.topologies, plan.strategies, plan.freq_levels))
    for ci, (topo, strategy, freq) in enumerate(cells):
        label = _cell_label(topo, strategy, freq)
        for rep in range(plan.repeats):
            base = {
                "config": ci, "label": label, "topology": topo.label(),
                "threads": topo.threads_per_rank, "strategy": strategy.kind,
                "deterministic": int(strategy.deterministic),
                "freq_level": freq, "repeat": rep,
            }
            try:
                res = run_pipeline(
                    dataset, plan.n_u, plan.n_v, plan.n_w, plan.cell_size_lm,
                    kernel=plan.kernel, topo=topo, strategy=strategy,
                    meter=plan.meter, freq_level=freq, label=label,
                )
            except Exception as exc:  # cell aborts, plan continues
                raw_rows.append({**base, "status": "failed",
                                 "failure_reason": f"{type(exc).__name__}: {exc}",
                                 "image_sha256": ""})
                break
            row = {**base, "status": "ok", "failure_reason": "",
                   "image_sha256": res.image_sha256}
            for p in metrics.PHASES:
                row[f"{p}_s"] = res.run.phase_times.get(p, 0.0)
            row["total_s"] = res.run.total_seconds
            row["total_j"] = res.run.energy_joules.get("total", 0.0)
            row.update(res.ops)
            raw_rows.append(row)

    raw_path = out_dir / "runs_raw.csv"
    with open(raw_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RAW_COLUMNS, restval="")
        writer.writeheader()
        for row in raw_rows:
            writer.writerow({k: _fmt_cell(row.get(k, "")) for k in RAW_COLUMNS})

    agg_header, agg_rows = aggregate_rows(raw_rows)
    agg_path = out_dir / "runs_aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(agg_header)
        for row in agg_rows:
            writer.writerow([_fmt_cell(v) for v in row])

    all_ok = all(r["status"] == "ok" for r in raw_rows)
    return PlanResult(raw_rows=raw_rows, aggregate_rows=agg_rows,
                      aggregate_header=agg_header, raw_path=raw_path,
                      aggregate_path=agg_path, all_ok=all_ok)


def _fmt_cell(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return v


def mean_std(values) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    values = list(values)
    m = statistics.fmean(values)
    s = statistics.stdev(values) if len(values) > 1 else 0.0
    return m, s


def aggregate_rows(raw_rows):
    """Per-configuration mean and stddev over the successful repeats."""
    stat_cols = PHASE_COLUMNS + ["total_j"] + OPS_COLUMNS
    header = ["config", "label", "status", "n_ok", "failure_reason"]
    for col in stat_cols:
        header += [f"{col}_mean", f"{col}_std"]
    header += ["image_hashes_identical"]
    by_config: dict[int, list] = {}
    for row in raw_rows:
        by_config.setdefault(row["config"], []).append(row)
    out = []
    for config in sorted(by_config):
        rows = by_config[config]
        ok = [r for r in rows if r["status"] == "ok"]
        failed = [r for r in rows if r["status"] != "ok"]
        line = [config, rows[0]["label"],
                "ok" if not failed else "failed", len(ok),
                failed[0]["failure_reason"] if failed else ""]
        for col in stat_cols:
            if ok:
                m, s = mean_std([float(r[col]) for r in ok])
            else:
                m, s = 0.0, 0.0
            line += [m, s]
        hashes = {r["image_sha256"] for r in ok}
        line += [int(len(hashes) <= 1)]
        out.append(line)
    return header, out


# ---------------------------------------------------------------------------
# Independent references
# ---------------------------------------------------------------------------

def direct_convolution_grid(chunk, spec: GridSpec, kern: KernelSpec) -> np.ndarray:
    """Reference gridder: plain triple loop over records x kernel footprint
    onto the full mesh. Slow by design; used only to check the fast path."""
    from .comms import prepare_chunk

    prep = prepare_chunk(chunk, spec, 0)
    grid = np.zeros((spec.n_w, spec.n_v, spec.n_u), dtype=np.complex128)
    S = kern.half_support
    for rec in prep:
        gu, gv, plane, value = rec["gu"], rec["gv"], int(rec["plane"]), rec["value"]
        for j in range(int(np.ceil(gv - S)), int(np.floor(gv + S)) + 1):
            if not 0 <= j < spec.n_v:
                continue
            for i in range(int(np.ceil(gu - S)), int(np.floor(gu + S)) + 1):
                if not 0 <= i < spec.n_u:
                    continue
                grid[plane, j, i] += value * kernel_value(kern, gu - i, gv - j)
    return grid


def reference_dft2d(plane: np.ndarray, inverse: bool = False) -> np.ndarray:
    """Direct O(N^4) discrete Fourier transform of a 2D array."""
    nr, nc = plane.shape
    sign = 2j * np.pi if inverse else -2j * np.pi
    fr = np.exp(sign * np.outer(np.arange(nr), np.arange(nr)) / nr)
    fc = np.exp(sign * np.outer(np.arange(nc), np.arange(nc)) / nc)
    out = fr @ plane @ fc
    if inverse:
        out = out / (nr * nc)
    return out


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    tolerance: str
    measured: str
    passed: bool

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.measured} (tolerance {self.tolerance})"


@dataclass
class VerifyReport:
    checks: list

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def render(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"{'OK' if self.passed else 'FAILED'}: "
                     f"{sum(c.passed for c in self.checks)}/{len(self.checks)} checks passed")
        return "\n".join(lines)


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0


def verify_pipeline(scale: str = "small", force_fail: bool = False) -> VerifyReport:
    """Run the oracle suite; failures are reported, never raised."""
    if scale == "small":
        n_u = n_v = 64
        n_w = 4
        n_records = 1000
        brute = True
    elif scale == "medium":
        n_u = n_v = 256
        n_w = 8
        n_records = 100_000
        brute = False
    else:
        raise ValueError(f"scale must be small or medium, got {scale!r}")

    checks: list[CheckResult] = []
    cell = 1e-3
    kern = KernelSpec.gaussian(half_support=3, sigma=1.0)
    spec = GridSpec(n_u=n_u, n_v=n_v, n_w=n_w, cell_size_lm=cell,
                    w_min_native=0.0, w_max_native=20.0)
    sky = visdata.SkyModel(sources=((0.02, -0.015, 2.0), (0.0, 0.0, 1.0)))
    header, chunk = visdata.generate_synthetic(
        sky, n_records, n_freq=2, seed=90, n_time_slices=8,
        cell_size_lm=cell, w_min_native=0.0, w_max_native=20.0)

    # dataset round trip
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        p1 = Path(tmp) / "a.rvis"
        p2 = Path(tmp) / "b.rvis"
        visdata.write_dataset(chunk, header, p1)
        h2, c2 = visdata.read_dataset(p1)
        visdata.write_dataset(c2, h2, p2)
        identical = p1.read_bytes() == p2.read_bytes()
        pieces = [visdata.read_dataset(p1, visdata.ChunkSpec("time", k, 4))[1]
                  for k in range(4)]
        reunion = visdata.VisChunk.concat(pieces)
        chunks_ok = (len(reunion) == len(chunk)
                     and np.array_equal(reunion.u, chunk.u)
                     and np.array_equal(reunion.vis, chunk.vis))
        checks.append(CheckResult(
            "dataset write/read/write round trip", "bit-identical",
            "identical" if identical else "files differ", identical))
        checks.append(CheckResult(
            "time-chunk reassembly", "exact reunion",
            f"{len(reunion)} of {len(chunk)} records", chunks_ok))

    # gridding vs the direct reference, and rank-count independence
    def run_grid(n_ranks):
        topo = Topology(n_nodes=1, ranks_per_node=n_ranks)
        parts = visdata.partition_time_ordered(chunk, n_ranks)
        slabs, _ = grid_all(parts, spec, kern, topo)
        return np.concatenate([s.data for s in slabs], axis=1)

    g1 = run_grid(1)
    g2 = run_grid(2)
    g4 = run_grid(4)
    bitwise = g1.tobytes() == g2.tobytes() == g4.tobytes()
    checks.append(CheckResult(
        "gridding rank-count independence (1, 2, 4 ranks)", "bit-identical",
        "identical" if bitwise else f"max abs diff {max(_max_abs(g1, g2), _max_abs(g1, g4)):.3e}",
        bitwise))
    if brute:
        t0 = time.perf_counter()
        ref = direct_convolution_grid(chunk, spec, kern)
        err = _max_abs(g1, ref)
        checks.append(CheckResult(
            "gridding vs direct convolution", "max abs <= 1e-12",
            f"max abs {err:.3e} ({time.perf_counter() - t0:.2f} s reference)",
            err <= 1e-12))
    else:
        # The Gaussian kernel is separable, so each record's clipped
        # footprint weight is a product of per-axis sums; that gives an
        # independent, vectorized expectation for the total gridded mass.
        from .comms import prepare_chunk

        prep = prepare_chunk(chunk, spec, 0)
        S = kern.half_support
        s2 = 2.0 * kern.shape_param ** 2
        su = np.zeros(len(prep))
        sv = np.zeros(len(prep))
        flo_u = np.floor(prep["gu"]).astype(np.int64)
        flo_v = np.floor(prep["gv"]).astype(np.int64)
        for a in range(-S, S + 1):
            i = flo_u + a
            du = prep["gu"] - i
            su += np.where((np.abs(du) <= S) & (i >= 0) & (i < n_u),
                           np.exp(-du * du / s2), 0.0)
            j = flo_v + a
            dv = prep["gv"] - j
            sv += np.where((np.abs(dv) <= S) & (j >= 0) & (j < n_v),
                           np.exp(-dv * dv / s2), 0.0)
        expected = np.sum(prep["value"] * su * sv)
        total = g1.sum()
        err = abs(total - expected) / max(abs(total), 1.0)
        checks.append(CheckResult(
            "gridded mass vs per-record kernel sums", "relative <= 1e-10",
            f"relative {err:.3e}", err <= 1e-10))

    # fft against the direct DFT, round trip, Parseval
    rng = np.random.default_rng(7)
    small = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    err_dft = _max_abs(transform.fft2d(small), reference_dft2d(small))
    checks.append(CheckResult("fft vs direct DFT (8x8)", "max abs <= 1e-12",
                              f"max abs {err_dft:.3e}", err_dft <= 1e-12))
    plane = rng.standard_normal((64, 64)) + 1j * rng.standard_normal((64, 64))
    err_rt = _max_abs(transform.fft2d(transform.fft2d(plane), inverse=True), plane)
    checks.append(CheckResult("fft inverse(forward) round trip (64x64)",
                              "max abs <= 1e-12", f"max abs {err_rt:.3e}",
                              err_rt <= 1e-12))
    X = transform.fft2d(plane)
    parseval = abs(np.sum(np.abs(plane) ** 2) - np.sum(np.abs(X) ** 2) / plane.size)
    parseval /= np.sum(np.abs(plane) ** 2)
    checks.append(CheckResult("Parseval identity", "relative <= 1e-10",
                              f"relative {parseval:.3e}", parseval <= 1e-10))

    # reduce strategies agree and conserve the total
    topo = Topology(n_nodes=2, ranks_per_node=2)
    rspec = GridSpec(n_u=32, n_v=32, n_w=2, cell_size_lm=1e-3)
    slab = slab_of(rspec, 0, 1)
    partials = []
    for r in range(topo.n_ranks):
        data = (rng.standard_normal((2, 32, 32)) + 1j * rng.standard_normal((2, 32, 32)))
        partials.append(ComplexGrid(rspec, slab, data))
    outs = {}
    for kind in ("direct", "hybrid_ring", "ring_rdma_like"):
        red, _ = reduce_slabs(ReduceStrategy(kind, deterministic=True),
                              partials, 1, topo)
        outs[kind] = red.data
    same = (outs["direct"].tobytes() == outs["hybrid_ring"].tobytes()
            == outs["ring_rdma_like"].tobytes())
    checks.append(CheckResult("reduce strategies agree (deterministic)",
                              "bit-identical", "identical" if same else "differ", same))
    conservation = abs(outs["direct"].sum() - sum(p.data.sum() for p in partials))
    conservation /= max(abs(outs["direct"].sum()), 1.0)
    checks.append(CheckResult("reduce conservation", "relative <= 1e-12",
                              f"relative {conservation:.3e}", conservation <= 1e-12))

    # end-to-end point source recovery; keep the source inside the kernel's
    # image-plane taper (sigma ~ n_u / (2 pi sigma_grid) pixels)
    src_l, src_m = (0.008, -0.006) if scale == "small" else (0.02, -0.015)
    point = visdata.SkyModel(sources=((src_l, src_m, 1.0),))
    ph, pchunk = visdata.generate_synthetic(
        point, n_records, n_freq=1, seed=43, n_time_slices=8,
        cell_size_lm=cell, w_min_native=0.0, w_max_native=20.0)
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        dpath = Path(tmp) / "point.rvis"
        visdata.write_dataset(pchunk, ph, dpath)
        res = run_pipeline(dpath, n_u, n_v, n_w, cell, kernel=kern,
                           topo=Topology(1, 2), label="verify")
    i, j = peak_pixel(res.image)
    want_i = n_u // 2 + round(src_l / cell)
    want_j = n_v // 2 + round(src_m / cell)
    hit = abs(i - want_i) <= 1 and abs(j - want_j) <= 1
    checks.append(CheckResult(
        "point-source recovery", "argmax within 1 pixel",
        f"peak at ({i}, {j}), expected ({want_i}, {want_j})", hit))

    # w correction is a pure phase
    from .transform import ImagePlane, apply_w_correction

    pslab = slab_of(spec, 0, 1)
    data = rng.standard_normal((pslab.v_count, n_u)) + 1j * rng.standard_normal((pslab.v_count, n_u))
    before = np.abs(data)
    after = np.abs(apply_w_correction(ImagePlane(spec, pslab, data), n_w - 1, spec).data)
    phase_err = float(np.max(np.abs(after - before) / np.maximum(before, 1e-300)))
    checks.append(CheckResult("w correction preserves magnitudes",
                              "relative <= 1e-14", f"relative {phase_err:.3e}",
                              phase_err <= 1e-14))

    if force_fail:
        checks.append(CheckResult("forced failure (test hook)", "never passes",
                                  "forced", False))
    return VerifyReport(checks=checks)
