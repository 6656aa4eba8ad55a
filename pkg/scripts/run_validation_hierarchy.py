"""Desk-scale design-strategy ladder.

Simulates the pure-storage and fin baselines, runs geometry-only
optimization, the three-stage sequential workflow, and concurrent
co-design, then prints the discharged-energy comparison table.
Artifacts land under results/validation_hierarchy/.
"""

from pathlib import Path

import numpy as np

from lhtes.config import load_config
from lhtes.optimize import (CoDesignProblem, fin_baseline, run_optimization,
                            write_density_csv, write_result_artifacts)

ROOT = Path(__file__).resolve().parents[1]
OUT = ROOT / "results" / "validation_hierarchy"


def main():
    cfg = load_config(ROOT / "configs" / "desk_validation.ini")
    cfg.output.out_dir = str(OUT / "geometry_only")
    problem = CoDesignProblem(cfg)
    hcm = problem.fixed_hcm.attribute_vector()
    pcm = problem.fixed_pcm.attribute_vector()

    def discharged(gamma):
        j0, j_end, _ = problem.simulate_design(gamma, hcm, pcm, p=3.0)
        return (j0 - j_end) / 1e6

    table = [("pure PCM", discharged(np.ones(problem.mesh.n_elems)))]
    for n in (2, 3, 4):
        table.append((f"{n}-fin baseline",
                      discharged(fin_baseline(problem.mesh, n, 0.2))))

    geo = run_optimization(cfg, problem=problem)
    write_result_artifacts(geo, cfg, cfg.output.out_dir)
    table.append(("geometry-only TO", geo.discharged_energy / 1e6))

    OUT.mkdir(parents=True, exist_ok=True)
    layout = OUT / "layout.csv"
    write_density_csv(layout, geo.gamma_phys)

    cfg_h = load_config(ROOT / "configs" / "desk_validation.ini")
    cfg_h.optimizer.mode = "sequential-hcm"
    cfg_h.optimizer.lr_decay = 0.994  # latent coordinates need to park
    cfg_h.optimizer.init_design = str(layout)
    cfg_h.output.out_dir = str(OUT / "sequential_hcm")
    seq_h = run_optimization(cfg_h)
    write_result_artifacts(seq_h, cfg_h, cfg_h.output.out_dir)
    table.append((f"sequential stage 2 ({seq_h.hcm_name})",
                  seq_h.discharged_energy / 1e6))

    cfg_p = load_config(ROOT / "configs" / "desk_validation.ini")
    cfg_p.optimizer.mode = "sequential-pcm"
    cfg_p.optimizer.lr_decay = 0.994
    cfg_p.optimizer.init_design = str(layout)
    cfg_p.materials.fixed_hcm = seq_h.hcm_name
    cfg_p.output.out_dir = str(OUT / "sequential_pcm")
    seq_p = run_optimization(cfg_p)
    write_result_artifacts(seq_p, cfg_p, cfg_p.output.out_dir)
    table.append((f"sequential stage 3 ({seq_p.hcm_name}/{seq_p.pcm_name})",
                  seq_p.discharged_energy / 1e6))

    cfg_c = load_config(ROOT / "configs" / "desk_codesign.ini")
    cfg_c.output.out_dir = str(OUT / "codesign")
    co = run_optimization(cfg_c)
    write_result_artifacts(co, cfg_c, cfg_c.output.out_dir)
    table.append((f"co-design ({co.hcm_name}/{co.pcm_name})",
                  co.discharged_energy / 1e6))

    print("\ndischarged energy over the horizon")
    for name, energy in table:
        print(f"  {name:<42s} {energy:9.1f} MJ")


if __name__ == "__main__":
    main()
