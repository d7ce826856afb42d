"""Flipped-token likelihood and rank study along noising trajectories.

Writes one CSV per target (columns as in ``FLIP_CSV_HEADER``) and prints the
correct/flipped gap in units of its paired standard error.

    python scripts/flip_study.py --n 2000 --steps 8
"""
import argparse
from pathlib import Path

import numpy as np

from mdm_correct.diagnostics import flipped_token_experiment
from mdm_correct.targets import all_equal, markov_chain, parity, peaked_transition


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--steps", type=int, default=8)
    ap.add_argument("--flip-count", type=int, default=1)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out-dir", default="results/flip")
    args = ap.parse_args()

    targets = [markov_chain(6, 3, peaked_transition(3)), all_equal(6, 4), parity(6)]
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for q0, rng in zip(targets, np.random.default_rng(args.seed).spawn(len(targets))):
        rep = flipped_token_experiment(q0, args.n, args.steps, args.flip_count, rng)
        path = out / f"{q0.name.replace('(', '_').replace(',', '_').rstrip(')')}.csv"
        rep.write_csv(path)
        print(f"{q0.name}:")
        for row, z in zip(rep.rows(), rep.gap_z()):
            step, t, mc, mf, rs, ra, n = row
            print(f"  step {step}: t={t:.3f} correct={mc:.3f} flipped={mf:.3f} "
                  f"z={z:6.2f} rank single={rs:.2f} accum={ra:.2f} n={n}")
        print(f"  -> {path}")


if __name__ == "__main__":
    main()
