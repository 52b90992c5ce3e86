"""``startstop`` command line.

Exit status: 0 on success, 1 when a check or loopback fails, 2 on usage
or configuration errors.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .codec import FrameConfig, counter_length, frame_length, stop_bit_capacity
from .config import ScenarioConfig, load_scenario
from .errors import StartStopError
from .grid import GridDims, power_boost_db
from .link import results_csv, run_loopback, summarize
from .metrics import curve_csv, data_rate_efficiency, is_monotone, link_budget, snr_at_error, sweep_detection_error
from .modem import OfdmParams, ici_profile, isi_profile
from .sparse_precoder import bench_csv, frame_benchmark, system_complexity

ICI_SHIFTS = 6
ISI_SHIFTS = 16
LOOPBACK_MER_LIMIT = 1e-2


# -- verify -------------------------------------------------------------------


@dataclass(frozen=True)
class Check:
    name: str
    expected: float
    actual: float
    tol: float = 0.0

    @property
    def ok(self) -> bool:
        return abs(self.actual - self.expected) <= self.tol

    def line(self) -> str:
        status = "ok  " if self.ok else "FAIL"
        return f"{status} {self.name}: expected {self.expected:.10g}, got {self.actual:.10g} (tol {self.tol:g})"


def golden_checks(base: FrameConfig) -> dict:
    """Every published scalar, recomputed from a base frame config.

    The base supplies ``n_bits`` and ``n_messages``; the published cases
    vary the shift grid and repetition around it.
    """
    n_b, m = base.n_bits, base.n_messages
    plain = FrameConfig(n_bits=n_b, n_messages=m)
    tsfs = FrameConfig(n_bits=n_b, n_messages=m, n_tsfs=4, n_t=32, n_f=32)
    rep = FrameConfig(n_bits=n_b, n_messages=m, r_extra=20)
    rich = replace(tsfs, qam_bits=8)
    double = replace(tsfs, n_messages=2 * m, n_t=4, n_f=8)
    n_loaded = counter_length(n_b)
    profile = system_complexity()
    checks = [
        Check("frame_length plain", 1124, frame_length(plain)),
        Check("frame_length ts-fs", 1164, frame_length(tsfs)),
        Check("frame_length repetition", 1324, frame_length(rep)),
        Check("counter_length 10 bits", 1024, counter_length(n_b)),
        Check("counter_length 20 bits", 1048576, counter_length(20)),
        Check("stop_bit_capacity 256-QAM 32x32", 28, stop_bit_capacity(rich)),
        Check("products per s per subcarrier", 14000, profile.products_per_s_per_subcarrier),
        Check("gamma_s multi-message", 0.089, data_rate_efficiency(m * n_b, frame_length(plain)), 5e-4),
        Check("gamma_s single message", 0.0098, data_rate_efficiency(n_b, n_loaded), 5e-4),
        Check("power boost M", 17.09, power_boost_db(n_loaded, tsfs.n_active), 0.01),
        Check("power boost 2M", 14.08, power_boost_db(n_loaded, double.n_active), 0.01),
        Check("sparsity", 0.0172, tsfs.n_active / frame_length(tsfs), 1e-4),
        Check("link gap 10 shift bits", 12.9, link_budget(tsfs).gap_db, 0.1),
        Check("link gap 5 shift bits", 0.9, link_budget(double).gap_db, 0.1),
    ]
    return {c.name: c for c in checks}


def cmd_verify(scn: ScenarioConfig, args) -> int:
    checks = golden_checks(scn.frame)
    if args.checks is not None:
        wanted = [c.strip() for c in args.checks.split(",") if c.strip()]
        unknown = [c for c in wanted if c not in checks]
        if unknown:
            raise StartStopError(f"unknown check(s): {', '.join(unknown)}")
        checks = {k: checks[k] for k in wanted}
    failed = 0
    for c in checks.values():
        print(c.line())
        failed += not c.ok
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return 1 if failed else 0


# -- loopback / sweep -----------------------------------------------------------


def _write(out: Path, name: str, text: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    path = out / name
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")
    return path


def cmd_loopback(scn: ScenarioConfig, args) -> int:
    snrs = args.snr_db if args.snr_db is not None else [scn.channel.snr_db]
    frames = args.trials or scn.params.frames
    out = Path(args.out or scn.out)
    failed = False
    for snr in snrs:
        results = list(run_loopback(scn.frame, scn.grid, frames, seed=scn.seed, snr_db=snr,
                                    fading=scn.channel.fading, params=scn.ofdm, steps=scn.steps))
        s = summarize(scn.frame, results)
        limit = 0.0 if snr == math.inf else LOOPBACK_MER_LIMIT
        ok = s.mer <= limit
        failed |= not ok
        print(f"{'pass' if ok else 'FAIL'} snr_db={snr:g} frames={s.frames} ber={s.ber:.3g} "
              f"mer={s.mer:.3g} ambiguous={s.ambiguous}")
        _write(out, f"loopback_snr{snr:g}.csv", results_csv(results))
    return 1 if failed else 0


def cmd_sweep(scn: ScenarioConfig, args) -> int:
    snrs = args.snr_db if args.snr_db is not None else list(scn.params.snr_db)
    trials = args.trials or scn.params.trials
    points = sweep_detection_error(scn.frame, snrs, trials, seed=scn.seed, params=scn.ofdm,
                                   steps=scn.steps)
    path = _write(Path(args.out or scn.out), "sweep.csv", curve_csv(points))
    print(f"snr at 1% error: {snr_at_error(points, 0.01):.2f} dB; monotone: {is_monotone(points)}")
    if args.plot:
        _plot_curve(points, path.with_suffix(".png"))
    return 0


# -- precoder / profiles ------------------------------------------------------------


def cmd_precoder_bench(scn: ScenarioConfig, args) -> int:
    out = Path(args.out or scn.out)
    cfgs = [("scenario", scn.frame, scn.grid)]
    flagship = FrameConfig(n_bits=10, n_messages=10, n_tsfs=4, n_t=32, n_f=32)
    if scn.frame != flagship:
        cfgs.append(("flagship", flagship, GridDims()))
    results = [frame_benchmark(cfg, dims, scn.params.n_tx, scn.params.n_k, seed=scn.seed, label=name)
               for name, cfg, dims in cfgs]
    for r in results:
        print(f"{r.label}: {r.active_res}/{r.n_res} active, dense {r.dense.mults}, "
              f"sparse {r.sparse.mults}, reduction {r.ratio:.1f}x")
    _write(out, "precoder_bench.csv", bench_csv(results))
    rep = system_complexity(sparsity=results[0].fraction)
    rows = ["profile,inversions_per_s,products_per_s_per_subcarrier,products_per_s,sparsity,"
            "effective_per_s_per_subcarrier",
            f"{rep.profile.name},{rep.inversions_per_s:g},{rep.products_per_s_per_subcarrier:g},"
            f"{rep.products_per_s:g},{rep.sparsity:.6f},{rep.effective_per_s_per_subcarrier:.2f}"]
    _write(out, "complexity.csv", "\n".join(rows) + "\n")
    return 0


def ici_rows(params: OfdmParams):
    rows = []
    for i in range(1, ICI_SHIFTS + 1):
        eps = i / (2 * ICI_SHIFTS)
        mags = ici_profile(eps, params)
        rows.append((eps, *mags, 1 - mags[2] ** 2))
    return rows


def isi_rows(params: OfdmParams):
    return [(s, *isi_profile(s, params))
            for s in (i * params.n_fft // ISI_SHIFTS for i in range(ISI_SHIFTS))]


def cmd_profiles(scn: ScenarioConfig, args) -> int:
    out = Path(args.out or scn.out)
    ici = ici_rows(scn.ofdm)
    isi = isi_rows(scn.ofdm)
    ici_text = "freq_shift,mag_m2,mag_m1,mag_0,mag_p1,mag_p2,leaked_fraction\n" + "".join(
        ",".join(f"{v:.10g}" for v in row) + "\n" for row in ici)
    isi_text = "time_shift_samples,own_fraction,adjacent_fraction\n" + "".join(
        f"{s},{a:.10g},{b:.10g}\n" for s, a, b in isi)
    ici_path = _write(out, "ici_profile.csv", ici_text)
    isi_path = _write(out, "isi_profile.csv", isi_text)
    if args.plot:
        _plot_profiles(ici, isi, ici_path.with_suffix(".png"), isi_path.with_suffix(".png"))
    return 0


def _pyplot():
    try:
        import matplotlib
    except ImportError as exc:
        raise StartStopError("plotting needs matplotlib (pip install .[plot])") from exc
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _plot_curve(points, path):
    plt = _pyplot()
    fig, ax = plt.subplots()
    x = [p.snr_db for p in points]
    y = [max(p.error_rate, 1e-6) for p in points]
    ax.semilogy(x, y, marker="o")
    ax.set_xlabel("SNR per RE [dB]")
    ax.set_ylabel("hypothesis error rate")
    fig.savefig(path, dpi=120)
    plt.close(fig)
    print(f"wrote {path}")


def _plot_profiles(ici, isi, ici_path, isi_path):
    plt = _pyplot()
    fig, ax = plt.subplots()
    offsets = np.arange(-2, 3)
    for row in ici:
        ax.plot(offsets, row[1:6], marker="o", label=f"{row[0]:.3f}")
    ax.set_xlabel("subcarrier offset")
    ax.set_ylabel("magnitude")
    ax.legend(title="frequency shift")
    fig.savefig(ici_path, dpi=120)
    plt.close(fig)
    fig, ax = plt.subplots()
    ax.plot([r[0] for r in isi], [r[2] for r in isi], marker="o")
    ax.set_xlabel("time shift [samples]")
    ax.set_ylabel("energy fraction in adjacent symbol")
    fig.savefig(isi_path, dpi=120)
    plt.close(fig)
    print(f"wrote {ici_path}\nwrote {isi_path}")


# -- entry point ----------------------------------------------------------------------


def _snr_list(text: str):
    try:
        return [math.inf if v.strip() in ("inf", "off") else float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad SNR list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="scenario TOML file")
    common.add_argument("--seed", type=int, help="master seed (overrides the scenario)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--trials", type=int, help="frames (loopback) or trials per point (sweep)")
    common.add_argument("--snr-db", type=_snr_list, help="comma separated SNR values in dB")
    common.add_argument("--plot", action="store_true", help="also write PNG plots")

    parser = argparse.ArgumentParser(prog="startstop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    verify = sub.add_parser("verify", parents=[common], help="recompute published numbers")
    verify.add_argument("--checks", help="comma separated subset of checks (empty: none)")
    sub.add_parser("loopback", parents=[common], help="end-to-end frame loopback")
    sub.add_parser("sweep", parents=[common], help="detection error against SNR")
    sub.add_parser("precoder-bench", parents=[common], help="dense vs sparse precoding cost")
    sub.add_parser("profiles", parents=[common], help="ICI/ISI leakage profiles")
    return parser


COMMANDS = {
    "verify": cmd_verify,
    "loopback": cmd_loopback,
    "sweep": cmd_sweep,
    "precoder-bench": cmd_precoder_bench,
    "profiles": cmd_profiles,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        scn = load_scenario(args.config) if args.config else ScenarioConfig()
        if args.seed is not None:
            scn = replace(scn, seed=args.seed)
        return COMMANDS[args.command](scn, args)
    except (StartStopError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
