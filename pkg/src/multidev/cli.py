"""Command-line front end.

Exit codes: 0 when every asserted invariant held, 1 when one failed, 2 for
configuration or input errors (the message names the offending key), 3 when
a reconstruction diverged.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import bench
from .config import RunConfig, load_config
from .errors import ConfigError, ReconstructionDiverged, UsageError
from .io import read_array, write_array
from .nlinv import (
    CgParams,
    ReconGrid,
    RegSchedule,
    WeightParams,
    compress_channels,
    reconstruct_series,
)
from .phantom import (
    CoilSpec,
    PhantomSpec,
    make_coils,
    make_mask,
    make_phantom,
    quality_reference,
    relative_error,
    simulate_acquisition,
    zero_filled,
)
from .runtime import DevGroup, create_environment
from .topology import Topology

log = logging.getLogger("multidev")

EXIT_OK, EXIT_INVARIANT, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3

# FFT invocations per operator application; DF^H also sums channels once and
# all-reduces once
EXPECTED_FFT = {"F": 2, "DF": 2, "DFH": 2}

RESIDUAL_COLUMNS = ["frame", "step", "alpha", "cg_iterations", "cg_breakdown", "residual"]
COUNTER_COLUMNS = [
    "operator", "fft_count", "elementwise_count", "channel_sum_count", "dot_count",
    "allreduce_count", "expected_fft", "conforms",
]
METRIC_COLUMNS = [
    "frame", "nlinv_error", "zero_filled_error", "nlinv_better", "final_residual",
    "channels", "channels_used", "energy_fraction", "image_sha256",
]
INVARIANCE_COLUMNS = ["devices", "rel_l2_vs_first", "image_sha256", "within_tolerance"]
RECON_TIMING_COLUMNS = ["frame", "devices", "seconds", "frames_per_second"]
INVARIANCE_TOL = 1e-4


class _Run:
    """Resolved configuration plus helpers shared by the subcommands."""

    def __init__(self, cfg: RunConfig, topology: Topology, out: Path):
        self.cfg = cfg
        self.topology = topology
        self.out = out
        self.violations: List[str] = []

    def env(self, g: Optional[int] = None):
        g = g or self.cfg.devices
        return create_environment(self.topology.device_count, DevGroup(0, g), self.topology)

    def write_csv(self, name: str, columns: Sequence[str], rows: Sequence[Dict]) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
            w.writeheader()
            for row in rows:
                w.writerow({k: _fmt(row[k]) for k in columns})
        return path


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def resolve(args) -> _Run:
    """Merge the config file with command-line overrides and validate it."""
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.topology is not None:
        cfg.topology = args.topology
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.out_dir = args.out
    cfg.validate()
    if cfg.topology:
        try:
            topo = Topology.load(cfg.topology)
        except OSError as e:
            raise ConfigError("topology", str(e)) from None
        if args.devices is None and not (args.config and _sets_key(args.config, "devices")):
            cfg.devices = topo.device_count
    else:
        topo = None
    if args.devices is not None:
        if args.devices < 1:
            raise ConfigError("devices", "must be >= 1")
        cfg.devices = args.devices
    if topo is None:
        topo = Topology.single(cfg.devices)
    if cfg.devices > topo.device_count:
        raise ConfigError("devices", f"{cfg.devices} exceeds the {topo.device_count} devices in the topology")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return _Run(cfg, topo, out)


def _sets_key(path, key) -> bool:
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0]
        if "=" in line and line.split("=", 1)[0].strip() == key:
            return True
    return False


# --------------------------------------------------------------------------
# subcommands


def cmd_bench_transfer(run: _Run) -> None:
    c = run.cfg
    rows, timings, violations = bench.bench_transfer(
        c.devices, run.topology, c.bench_matrix_size, c.bench_matrices, c.bench_weak_per_device, c.seed
    )
    run.write_csv("bench_transfer.csv", bench.TRANSFER_COLUMNS, rows)
    run.write_csv("bench_transfer_timing.csv", bench.TIMING_COLUMNS, timings)
    run.violations += violations


def cmd_bench_algos(run: _Run) -> None:
    c = run.cfg
    rows, timings, violations = bench.bench_algos(c.devices, c.bench_sizes, c.bench_matrices, c.seed)
    run.write_csv("bench_algos.csv", bench.ALGO_COLUMNS, rows)
    run.write_csv("bench_algos_timing.csv", bench.TIMING_COLUMNS, timings)
    run.violations += violations


def _motion(c: RunConfig):
    # small circular drift, one position per frame
    return tuple(
        (c.motion * np.cos(2 * np.pi * f / max(c.frames, 1)) - c.motion,
         c.motion * np.sin(2 * np.pi * f / max(c.frames, 1)))
        for f in range(c.frames)
    )


def generate_phantom(c: RunConfig, out: Path) -> None:
    grid = ReconGrid(c.n)
    try:
        spec = PhantomSpec(c.n, motion=_motion(c))
    except UsageError as e:
        raise ConfigError("motion", str(e)) from None
    coils = make_coils(CoilSpec(c.channels), grid)
    write_array(out / "coils.segv", coils)
    center = max(c.center_band, 1)
    for f in range(c.frames):
        img = make_phantom(spec, f)
        mask = make_mask(grid.ng, c.mask_density, center, c.seed + f)
        y = simulate_acquisition(img, coils, mask, grid, c.noise_sigma, seed=c.seed + 1000 + f)
        write_array(out / f"frame{f:03d}_image.segv", img)
        write_array(out / f"frame{f:03d}_mask.segv", mask)
        write_array(out / f"frame{f:03d}_data.segv", y)


def cmd_phantom(run: _Run) -> None:
    generate_phantom(run.cfg, run.out)


def _load_frames(c: RunConfig, data_dir: Path):
    grid = ReconGrid(c.n)
    frames, truths = [], []
    for f in range(c.frames):
        try:
            y = read_array(data_dir / f"frame{f:03d}_data.segv")
            mask = read_array(data_dir / f"frame{f:03d}_mask.segv")
        except FileNotFoundError as e:
            raise ConfigError("data_dir", f"missing input {e.filename}") from None
        if y.shape != (c.channels, grid.ng, grid.ng):
            raise ConfigError("channels", f"data shape {y.shape} does not match n={c.n}, channels={c.channels}")
        frames.append((y, mask))
        img_path = data_dir / f"frame{f:03d}_image.segv"
        truths.append(read_array(img_path) if img_path.exists() else None)
    coil_path = data_dir / "coils.segv"
    coils = read_array(coil_path) if coil_path.exists() else None
    return grid, frames, truths, coils


def _digest(img: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype=np.complex64).tobytes()).hexdigest()[:16]


def cmd_recon(run: _Run) -> None:
    c = run.cfg
    data_dir = Path(c.data_dir) if c.data_dir else run.out / "data"
    if not c.data_dir:
        data_dir.mkdir(parents=True, exist_ok=True)
        generate_phantom(c, data_dir)
    grid, frames, truths, true_coils = _load_frames(c, data_dir)

    # channel compression with the first frame's basis for the whole series
    energy = 1.0
    used = frames
    if c.J_recon < c.channels:
        comp = compress_channels(frames[0][0], c.J_recon)
        energy = comp.energy_fraction
        basis_h = comp.basis.conj().T
        used = [((basis_h @ y.reshape(c.channels, -1)).reshape((c.J_recon,) + y.shape[1:]).astype(np.complex64), m)
                for y, m in frames]

    kw = dict(
        weights=WeightParams(c.weight_a, c.weight_b),
        reg=RegSchedule(c.alpha0, c.q, c.newton_steps),
        cg=CgParams(c.cg_iters, c.cg_tol),
        precision=c.precision,
    )
    with run.env() as env:
        t0 = time.perf_counter()
        results = reconstruct_series(env, used, grid, **kw)
        elapsed = time.perf_counter() - t0

    residual_rows, metric_rows = [], []
    for f, res in enumerate(results):
        write_array(run.out / f"frame{f:03d}_recon.segv", res.image.astype(np.complex64))
        residual_rows.append({"frame": f, "step": 0, "alpha": "", "cg_iterations": 0, "cg_breakdown": 0,
                              "residual": res.residuals[0]})
        for s, info in enumerate(res.steps):
            residual_rows.append({
                "frame": f, "step": s + 1, "alpha": info.alpha, "cg_iterations": info.cg_iterations,
                "cg_breakdown": int(info.cg_breakdown), "residual": res.residuals[s + 1],
            })
        if any(b > a * (1 + 1e-6) for a, b in zip(res.residuals, res.residuals[1:])):
            run.violations.append(f"frame {f}: data residual increased across Newton steps")
        row = {
            "frame": f, "nlinv_error": "", "zero_filled_error": "", "nlinv_better": "",
            "final_residual": res.residuals[-1], "channels": c.channels, "channels_used": c.J_recon,
            "energy_fraction": energy, "image_sha256": _digest(res.image),
        }
        if truths[f] is not None and true_coils is not None:
            ref = quality_reference(truths[f], true_coils, grid)
            e_nl = relative_error(res.image, ref)
            e_zf = relative_error(zero_filled(frames[f][0], grid), ref)
            row.update(nlinv_error=e_nl, zero_filled_error=e_zf, nlinv_better=int(e_nl < e_zf))
        metric_rows.append(row)

    counter_rows = []
    for name in ("F", "DF", "DFH"):
        cnt = results[-1].counters[name].as_dict()
        ok = cnt["fft_count"] == EXPECTED_FFT[name]
        if name == "DFH":
            ok = ok and cnt["channel_sum_count"] == 1 and cnt["allreduce_count"] == 1
        counter_rows.append({"operator": name, **cnt, "expected_fft": EXPECTED_FFT[name], "conforms": int(ok)})
        if not ok:
            run.violations.append(f"operator {name} counters {cnt} do not match the expected profile")

    run.write_csv("residuals.csv", RESIDUAL_COLUMNS, residual_rows)
    run.write_csv("counters.csv", COUNTER_COLUMNS, counter_rows)
    run.write_csv("metrics.csv", METRIC_COLUMNS, metric_rows)
    run.write_csv("recon_timing.csv", RECON_TIMING_COLUMNS, [{
        "frame": "all", "devices": c.devices, "seconds": elapsed, "frames_per_second": len(results) / elapsed,
    }])

    if c.check_invariance:
        _check_invariance(run, used, grid, kw, results)


def _check_invariance(run: _Run, frames, grid, kw, results) -> None:
    counts = [g for g in (1, 2, 4) if g <= run.cfg.devices]
    if run.cfg.devices not in counts:
        counts.append(run.cfg.devices)
    first = None
    rows = []
    for g in counts:
        if g == run.cfg.devices:
            img = results[-1].image
        else:
            with run.env(g) as env:
                img = reconstruct_series(env, frames, grid, **kw)[-1].image
        if first is None:
            first = img
        diff = float(np.linalg.norm(img - first) / np.linalg.norm(first))
        ok = diff <= INVARIANCE_TOL
        rows.append({"devices": g, "rel_l2_vs_first": diff, "image_sha256": _digest(img), "within_tolerance": int(ok)})
        if not ok:
            run.violations.append(f"G={g}: image differs from G={counts[0]} by {diff:.3g}")
    run.write_csv("invariance.csv", INVARIANCE_COLUMNS, rows)


def cmd_report(run: _Run, directory: Optional[str] = None) -> str:
    """Print one summary table built from whatever CSVs exist in ``directory``."""
    d = Path(directory) if directory else run.out
    if not d.is_dir():
        raise ConfigError("--out", f"no such directory: {d}")
    lines = []
    for name in sorted(p.name for p in d.glob("*.csv")):
        with open(d / name, newline="") as f:
            rows = list(csv.DictReader(f))
        lines.append(f"== {name} ({len(rows)} rows)")
        if not rows:
            continue
        cols = list(rows[0].keys())
        widths = [max(len(c), *(len(_short(r[c])) for r in rows)) for c in cols]
        lines.append("  ".join(c.ljust(w) for c, w in zip(cols, widths)))
        for r in rows:
            lines.append("  ".join(_short(r[c]).ljust(w) for c, w in zip(cols, widths)))
    if not lines:
        lines.append(f"no CSV reports in {d}")
    text = "\n".join(lines) + "\n"
    (d / "report.txt").write_text(text)
    sys.stdout.write(text)
    return text


def _short(v: str) -> str:
    try:
        x = float(v)
    except ValueError:
        return v
    if x.is_integer() and "." not in v and "e" not in v:
        return v
    return f"{x:.4g}"


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--devices", type=int, metavar="N", help="number of simulated devices (overrides config)")
    common.add_argument("--topology", metavar="PATH", help="topology description file")
    common.add_argument("--seed", type=int, metavar="N", help="random seed (overrides config)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log Newton-step progress")

    p = argparse.ArgumentParser(prog="multidev", description="Simulated multi-device runtime and nlinv reconstruction.")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("bench-transfer", parents=[common], help="copy/broadcast/reduce ledger benchmark")
    sub.add_parser("bench-algos", parents=[common], help="FFT/axpy/gemm locality benchmark")
    sub.add_parser("phantom", parents=[common], help="write phantom, coils, masks and k-space data")
    sub.add_parser("recon", parents=[common], help="reconstruct a frame series")
    rp = sub.add_parser("report", parents=[common], help="summarize the CSVs in a directory")
    rp.add_argument("directory", nargs="?", help="directory to summarize (default: --out)")
    return p


COMMANDS = {
    "bench-transfer": cmd_bench_transfer,
    "bench-algos": cmd_bench_algos,
    "phantom": cmd_phantom,
    "recon": cmd_recon,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        run = resolve(args)
        if args.command == "report":
            cmd_report(run, args.directory)
        else:
            COMMANDS[args.command](run)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except ReconstructionDiverged as e:
        print(f"reconstruction diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    for v in run.violations:
        print(f"invariant failed: {v}", file=sys.stderr)
    return EXIT_INVARIANT if run.violations else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
