"""Pick the channel noise whose rule-based average success is closest to the 64.5% target.

Sweeps noise_p over 0.10..0.35 in 0.05 steps with 2,000 episodes per domain and prints one
row per value. The chosen value is what DEFAULT_NOISE_P in mdrl/env.py should hold.

    python scripts/calibrate_noise.py [--episodes 2000] [--target 0.645]
"""

import argparse

import numpy as np

from mdrl.config import DESK_DOMAINS
from mdrl.env import get_domain
from mdrl.harness import measure_rule_based


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--episodes", type=int, default=2000)
    ap.add_argument("--target", type=float, default=0.645)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    grid = np.round(np.arange(0.10, 0.351, 0.05), 2)
    domains = [get_domain(n) for n in DESK_DOMAINS]
    print("noise_p  " + "  ".join(f"{d.name:>10}" for d in domains) + "     average")
    averages = {}
    for p in grid:
        est = [measure_rule_based(d, args.episodes, float(p), args.seed) for d in domains]
        averages[p] = float(np.mean([e.success for e in est]))
        print(f"{p:7.2f}  " + "  ".join(f"{e.success:10.3f}" for e in est) + f"  {averages[p]:10.3f}")
    best = min(grid, key=lambda p: (abs(averages[p] - args.target), p))
    in_band = 0.55 <= averages[best] <= 0.75
    print(f"\nclosest to {args.target:.3f}: noise_p = {best:.2f} (average {averages[best]:.3f}, "
          f"{'inside' if in_band else 'OUTSIDE'} the 0.55-0.75 band)")


if __name__ == "__main__":
    main()
