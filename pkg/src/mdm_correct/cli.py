"""``mdm-correct`` command line: run, sweep and diagnose.

Replicas are generated in blocks of ``seeds.block_size``; block ``b`` of run
``r`` draws from ``SeedSequence(master, spawn_key=(r, b))``. Blocks are
gathered in index order, so outputs do not depend on ``--threads``.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, expand_sweep, load
from .diagnostics import FLIP_CSV_HEADER, bootstrap_tv, flipped_token_experiment, mc_tv_bound, rate_audit
from .samplers import SamplerConfig, sample
from .targets import DataDistribution, OracleDenoiser

BOOTSTRAP_KEY = 2**31 - 1
RATE_TOL = 1e-10


def block_seed(master: int, run: int, block: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(master, spawn_key=(run, block))


def run_replicas(sampler: SamplerConfig, q0: DataDistribution, cfg: ExperimentConfig,
                 master: int, run: int = 0, threads: int = 1,
                 denoiser=None) -> np.ndarray:
    """Draw ``cfg.seeds.replicas`` samples, block-seeded and gathered in order."""
    den = denoiser or OracleDenoiser(q0)
    N, bs = cfg.seeds.replicas, cfg.seeds.block_size
    sizes = [min(bs, N - lo) for lo in range(0, N, bs)]

    def work(b):
        rng = np.random.Generator(np.random.PCG64(block_seed(master, run, b)))
        return sample(sampler, den, cfg.schedule, q0.D, rng, n=sizes[b])

    if threads > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            blocks = list(ex.map(work, range(len(sizes))))
    else:
        blocks = [work(b) for b in range(len(sizes))]
    return np.concatenate(blocks, axis=0)


def samples_csv(x: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["replica"] + [f"x{d}" for d in range(x.shape[1])])
    for i, row in enumerate(x):
        w.writerow([i, *row.tolist()])
    return buf.getvalue()


def rows_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([f"{v:.12g}" if isinstance(v, float) else v for v in row])
    return buf.getvalue()


def write_outputs(out_dir: Path, files: dict[str, str]) -> list[str]:
    """Write every file to a temp name first, then rename them all into place."""
    out_dir.mkdir(parents=True, exist_ok=True)
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=f".{name}.")
            with os.fdopen(fd, "w") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
    except BaseException:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, dest in staged:
        os.replace(tmp, dest)
    return sorted(files)


def resolve_out(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out or cfg.outputs.dir or os.environ.get("MDM_CORRECT_OUT") or "mdm_out")


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def manifest(cfg: ExperimentConfig, master: int, runs: int, started: float,
             outputs: list[str]) -> str:
    n_blocks = -(-cfg.seeds.replicas // cfg.seeds.block_size)
    seeds = [[int(block_seed(master, r, b).generate_state(1)[0]) for b in range(n_blocks)]
             for r in range(runs)]
    return _json({
        "config_sha256": cfg.digest(),
        "tool_version": __version__,
        "wall_clock_seconds": round(time.time() - started, 3),
        "master_seed": master,
        "block_size": cfg.seeds.block_size,
        "block_seeds": seeds,
        "outputs": outputs + ["manifest.json"],
    })


def cmd_run(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    master = cfg.seeds.master if args.seed is None else args.seed
    q0 = cfg.build_target()
    x = run_replicas(cfg.sampler, q0, cfg, master, 0, args.threads)
    boot_rng = np.random.Generator(np.random.PCG64(block_seed(master, BOOTSTRAP_KEY, 0)))
    tv, se = bootstrap_tv(x, q0, boot_rng)
    summary = {
        "target": q0.name,
        "strategy": cfg.sampler.strategy.value,
        "T": cfg.sampler.T,
        "n": int(x.shape[0]),
        "tv": tv,
        "stderr": se,
        "mc_bound": mc_tv_bound(len(q0.probs), int(x.shape[0])),
        "mask_id": q0.space.mask_id,
    }
    files = {}
    if "csv" in cfg.outputs.formats:
        files["samples.csv"] = samples_csv(x)
    files["summary.json"] = _json(summary)
    out = resolve_out(args, cfg)
    names = write_outputs(out, files)
    write_outputs(out, {"manifest.json": manifest(cfg, master, 1, started, names)})
    print(f"tv={tv:.6f} stderr={se:.6f} n={x.shape[0]} -> {out}")
    return 0


SWEEP_HEADER = ["variant", "strategy", "score_type", "rule", "criterion", "T", "tv", "stderr", "n", "rank"]


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    master = cfg.seeds.master if args.seed is None else args.seed
    q0 = cfg.build_target()
    den = OracleDenoiser(q0)
    runs = expand_sweep(cfg)
    rows = []
    for r, (name, sc) in enumerate(runs):
        x = run_replicas(sc, q0, cfg, master, r, args.threads, den)
        boot_rng = np.random.Generator(np.random.PCG64(block_seed(master, BOOTSTRAP_KEY, r)))
        tv, se = bootstrap_tv(x, q0, boot_rng)
        rows.append([name, sc.strategy.value, sc.score_type.value, sc.rule.value,
                     sc.criterion.value, sc.T, tv, se, int(x.shape[0])])
    for T in sorted({row[5] for row in rows}):
        group = sorted((row for row in rows if row[5] == T), key=lambda row: row[6])
        for rank, row in enumerate(group, 1):
            row.append(rank)
    out = resolve_out(args, cfg)
    names = write_outputs(out, {"sweep.csv": rows_csv(SWEEP_HEADER, rows)})
    write_outputs(out, {"manifest.json": manifest(cfg, master, len(runs), started, names)})
    for row in rows:
        print(f"{row[0]:<40} T={row[5]:<4} tv={row[6]:.5f} se={row[7]:.5f} rank={row[9]}")
    return 0


def cmd_diagnose(cfg: ExperimentConfig, args) -> int:
    started = time.time()
    master = cfg.seeds.master if args.seed is None else args.seed
    rng = np.random.Generator(np.random.PCG64(block_seed(master, 0, 0)))
    q0 = cfg.build_target()
    opts = cfg.diagnose or {}
    out = resolve_out(args, cfg)
    if args.kind == "rates":
        errs = rate_audit(q0, cfg.schedule, int(opts.get("n_states", 1000)), rng)
        worst = float(errs.max())
        names = write_outputs(out, {
            "rates.csv": rows_csv(["state", "abs_error"], [[i, float(e)] for i, e in enumerate(errs)]),
            "rates.json": _json({"max_abs_error": worst, "n_states": len(errs), "tolerance": RATE_TOL}),
        })
        print(f"max |ratio - marginal| = {worst:.3e}")
        status = 0 if worst <= RATE_TOL else 1
    else:
        grid = opts.get("times") or int(opts.get("steps", 8))
        report = flipped_token_experiment(q0, int(opts.get("n_samples", 2000)), grid,
                                          int(opts.get("flip_count", 1)), rng, cfg.schedule)
        report_rows = report.rows()
        names = write_outputs(out, {
            f"{args.kind}.csv": rows_csv(FLIP_CSV_HEADER, report_rows),
            f"{args.kind}.json": _json(report.summary()),
        })
        for row in report_rows:
            print(" ".join(f"{h}={v:.4g}" if isinstance(v, float) else f"{h}={v}"
                           for h, v in zip(FLIP_CSV_HEADER, row)))
        status = 0
    write_outputs(out, {"manifest.json": manifest(cfg, master, 1, started, names)})
    return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mdm-correct", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override seeds.master")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", default=None, help="output directory (else config, else $MDM_CORRECT_OUT)")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", parents=[common], help="sample replicas and score TV against the target")
    r.add_argument("config")
    s = sub.add_parser("sweep", parents=[common], help="expand sweep axes into runs")
    s.add_argument("config")
    d = sub.add_parser("diagnose", parents=[common], help="flip / rank studies or the rate audit")
    d.add_argument("kind", choices=["flip", "rank", "rates"])
    d.add_argument("config")
    return p


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "diagnose": cmd_diagnose}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load(args.config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return COMMANDS[args.command](cfg, args)
    except Exception as exc:  # runtime failure: report, leave no partial outputs
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
