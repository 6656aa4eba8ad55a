"""Wall-clock benchmark of the full-resolution optimization.

By default times a handful of iterations at the standard resolution
(5000 elements, 60 steps) and extrapolates to the 400-iteration run;
pass --full to execute the whole optimization.
"""

import argparse
import time
from pathlib import Path

from lhtes.config import load_config
from lhtes.optimize import run_optimization, write_result_artifacts

ROOT = Path(__file__).resolve().parents[1]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--full", action="store_true",
                        help="run all 400 iterations instead of sampling")
    parser.add_argument("--sample-iters", type=int, default=3)
    args = parser.parse_args()

    cfg = load_config(ROOT / "configs" / "default.ini")
    cfg.output.out_dir = str(ROOT / "results" / "benchmark_full")
    if not args.full:
        cfg.optimizer.max_iters = args.sample_iters
        cfg.optimizer.step_tol = 0.0

    start = time.monotonic()
    result = run_optimization(cfg)
    elapsed = time.monotonic() - start
    write_result_artifacts(result, cfg, cfg.output.out_dir)

    per_iteration = elapsed / result.iterations
    print(f"{result.iterations} iterations in {elapsed:.0f}s "
          f"({per_iteration:.1f} s/iteration)")
    if not args.full:
        print(f"projected 400-iteration wall time: {400 * per_iteration / 60:.0f} min")
    else:
        print(f"discharged {result.discharged_energy / 1e6:.1f} MJ with "
              f"{result.hcm_name} / {result.pcm_name}")


if __name__ == "__main__":
    main()
