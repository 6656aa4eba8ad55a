"""Command-line entry point.

Subcommands: ``train-vae`` (fit a material embedding and write the
decoder + atlas), ``simulate`` (forward discharge of a given layout and
materials), ``optimize`` (any optimization mode, with budget sweeps),
``export-plots`` (CSV post-processing and density rasters) and
``print-config`` (annotated reference of every key and default).

Exit codes: 0 success, 2 usage/configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import (ConfigError, RunConfig, dump_ini, load_config,
                     set_override)
from .materials import MaterialError, attributes_for, bundled_database_path
from .simulate import StepConvergenceError
from .vae import TrainingDivergedError

USAGE_ERROR = 2
NUMERICAL_ERROR = 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, MaterialError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (StepConvergenceError, TrainingDivergedError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERICAL_ERROR


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lhtes",
        description="Co-design of geometry and materials for latent-heat "
                    "thermal storage devices.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-vae", help="train a material embedding")
    p.add_argument("--kind", choices=("hcm", "pcm"), required=True)
    p.add_argument("--db", required=True, help="material database CSV")
    p.add_argument("--out", required=True, help="model file to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=50_000)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--beta", type=float, default=1e-7)
    p.add_argument("--atlas-out", default=None,
                   help="atlas CSV path (default: <out stem>_atlas.csv)")
    p.set_defaults(handler=cmd_train_vae)

    p = sub.add_parser("simulate", help="forward discharge simulation")
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--hcm", default=None, help="conductor name (default from config)")
    p.add_argument("--pcm", default=None, help="storage material name")
    p.add_argument("--gamma", default=None,
                   help="density field CSV/NPZ; default all-PCM")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--vtk", action="store_true", help="write per-step VTK fields")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("optimize", help="run a design optimization")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--mode", default=None,
                   choices=("co-design", "geometry-only", "sequential-hcm",
                            "sequential-pcm"))
    p.add_argument("--budget", type=float, default=None)
    p.add_argument("--hcm", default=None, help="fixed conductor for non-co-design modes")
    p.add_argument("--pcm", default=None, help="fixed storage material")
    p.add_argument("--init-design", default=None,
                   help="density CSV/NPZ used as the starting or frozen layout")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--sweep-budget", default=None, metavar="B1,B2,...",
                   help="run one optimization per budget and write a Pareto CSV")
    p.add_argument("--vtk", action="store_true")
    p.set_defaults(handler=cmd_optimize)

    p = sub.add_parser("export-plots", help="post-process result CSVs")
    p.add_argument("kind", choices=("merge-energy", "normalize-convergence",
                                    "raster-density"))
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid", default=None, metavar="NRxNT",
                   help="raster grid shape, e.g. 50x100")
    p.set_defaults(handler=cmd_export_plots)

    p = sub.add_parser("print-config", help="print the annotated configuration")
    p.add_argument("--config", default=None, help="echo this file instead of defaults")
    p.set_defaults(handler=cmd_print_config)
    return parser


def _make_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    for override in getattr(args, "set", []):
        if "=" not in override:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {override!r}")
        dotted, raw = override.split("=", 1)
        set_override(cfg, dotted.strip(), raw.strip())
    if getattr(args, "out_dir", None):
        cfg.output.out_dir = args.out_dir
    if getattr(args, "vtk", False):
        cfg.output.vtk = True
    if getattr(args, "mode", None):
        cfg.optimizer.mode = args.mode
    if getattr(args, "budget", None) is not None:
        cfg.optimizer.budget = args.budget
    if getattr(args, "hcm", None):
        cfg.materials.fixed_hcm = args.hcm
    if getattr(args, "pcm", None):
        cfg.materials.fixed_pcm = args.pcm
    if getattr(args, "init_design", None):
        cfg.optimizer.init_design = args.init_design
    return cfg.validate()


def cmd_train_vae(args) -> int:
    from .materials import load_database, normalize
    from .vae import build_atlas, decode, save_atlas, save_model, train_vae

    records = load_database(args.db, args.kind)
    matrix, params = normalize(records)
    model, losses = train_vae(matrix, args.kind, params, seed=args.seed,
                              epochs=args.epochs, lr=args.lr, beta=args.beta)
    save_model(model, args.out)
    atlas = build_atlas(model, matrix, [r.name for r in records])
    atlas_path = args.atlas_out or str(Path(args.out).with_name(
        Path(args.out).stem + "_atlas.csv"))
    save_atlas(atlas, atlas_path)

    decoder = model.decoder()
    errors = []
    for i, record in enumerate(records):
        predicted = decode(decoder, atlas.coords[i])
        errors.append(np.abs(predicted - record.attribute_vector())
                      / record.attribute_vector())
    mean_err = np.mean(errors, axis=0)
    print(f"trained {args.kind} embedding on {len(records)} materials "
          f"({args.epochs} epochs, seed {args.seed})")
    print(f"final loss {losses[-1]:.6g}")
    print("mean reconstruction error per attribute:")
    for attr, err in zip(attributes_for(args.kind), mean_err):
        print(f"  {attr:>5s}: {100 * err:.2f}%")
    print(f"model written to {args.out}")
    print(f"atlas written to {atlas_path}")
    return 0


def cmd_simulate(args) -> int:
    from .design import interpolate
    from .materials import find_record, load_database
    from .mesh import build_quarter_annulus, write_vtk
    from .optimize import read_density_csv
    from .simulate import (PhaseModel, ThermalSystem, TransientSetup,
                           energy_curve)

    cfg = _make_config(args)
    mesh = build_quarter_annulus(cfg.mesh.r_in, cfg.mesh.r_out,
                                 cfg.mesh.n_r, cfg.mesh.n_theta)
    hcm_records = load_database(cfg.materials.hcm_db or bundled_database_path("hcm"), "hcm")
    pcm_records = load_database(cfg.materials.pcm_db or bundled_database_path("pcm"), "pcm")
    hcm = find_record(hcm_records, args.hcm or cfg.materials.fixed_hcm)
    pcm = find_record(pcm_records, args.pcm or cfg.materials.fixed_pcm)

    if args.gamma:
        path = Path(args.gamma)
        if path.suffix == ".npz":
            data = np.load(path)
            gamma = data["gamma_phys"] if "gamma_phys" in data else data["gamma"]
        else:
            gamma = read_density_csv(path)
        if gamma.shape != (mesh.n_elems,):
            raise ConfigError(f"density field size {gamma.shape[0]} does not "
                              f"match mesh ({mesh.n_elems} elements)")
    else:
        gamma = np.ones(mesh.n_elems)

    props = interpolate(gamma, hcm.attribute_vector(), pcm.attribute_vector(),
                        p=1.0, mushy_width=cfg.phase.mushy_width)
    phase = PhaseModel(props.t_melt, props.mushy_width, cfg.phase.alpha)
    setup = TransientSetup(
        t_initial=cfg.transient.t_initial, t_boundary=cfg.transient.t_boundary,
        dt=cfg.transient.dt, n_steps=cfg.transient.n_steps,
        newton_tol=cfg.transient.newton_tol,
        max_newton_iters=cfg.transient.max_newton_iters,
        ggls=cfg.transient.ggls, ggls_scale=cfg.transient.ggls_scale,
        linear_solver=cfg.transient.linear_solver)
    system = ThermalSystem(mesh)
    history = system.run_transient(props, phase, setup)
    curve = energy_curve(history, mesh, props, phase, t_ref=setup.t_boundary)

    out = Path(cfg.output.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "energy.csv", curve, delimiter=",",
               header="step,time_s,J_joules", comments="")
    if cfg.output.vtk:
        for k in range(history.n_macro + 1):
            write_vtk(out / f"temperature_{k:04d}.vtk", mesh,
                      point_data={"temperature": history.macro_state(k)},
                      cell_data={"gamma": gamma})
    discharged = curve[0, 2] - curve[-1, 2]
    print(f"simulated {hcm.name} / {pcm.name}: discharged "
          f"{discharged / 1e6:.3f} MJ over {curve[-1, 1] / 3600.0:.1f} h")
    print(f"energy curve written to {out / 'energy.csv'}")
    return 0


def cmd_optimize(args) -> int:
    from .optimize import run_optimization, write_result_artifacts

    cfg = _make_config(args)
    if args.sweep_budget:
        budgets = [float(b) for b in args.sweep_budget.split(",")]
        base_out = Path(cfg.output.out_dir)
        rows = []
        for budget in budgets:
            cfg.optimizer.budget = budget
            cfg.output.out_dir = str(base_out / f"budget_{budget:g}")
            result = run_optimization(cfg)
            write_result_artifacts(result, cfg, cfg.output.out_dir)
            rows.append((budget, result.discharged_energy, result.hcm_name,
                         result.pcm_name))
            print(f"budget {budget:g}: discharged "
                  f"{result.discharged_energy / 1e6:.3f} MJ "
                  f"({result.hcm_name} / {result.pcm_name})")
        base_out.mkdir(parents=True, exist_ok=True)
        with open(base_out / "pareto.csv", "w") as fh:
            fh.write("budget,discharged_J,hcm,pcm\n")
            for budget, energy, hcm, pcm in rows:
                fh.write(f"{budget},{energy},{hcm},{pcm}\n")
        print(f"Pareto table written to {base_out / 'pareto.csv'}")
        return 0

    result = run_optimization(cfg)
    out = write_result_artifacts(result, cfg, cfg.output.out_dir)
    if cfg.output.vtk:
        from .mesh import build_quarter_annulus, write_vtk
        mesh = build_quarter_annulus(cfg.mesh.r_in, cfg.mesh.r_out,
                                     cfg.mesh.n_r, cfg.mesh.n_theta)
        write_vtk(out / "density.vtk", mesh,
                  cell_data={"gamma": result.gamma_phys})
    print(f"mode {result.mode}: {result.hcm_name} / {result.pcm_name}, "
          f"discharged {result.discharged_energy / 1e6:.3f} MJ "
          f"in {result.iterations} iterations ({result.termination})")
    print(f"artifacts written to {out}")
    return 0


def cmd_export_plots(args) -> int:
    if args.kind == "merge-energy":
        return _merge_energy(args.inputs, args.out)
    if args.kind == "normalize-convergence":
        return _normalize_convergence(args.inputs, args.out)
    return _raster_density(args.inputs, args.out, args.grid)


def _merge_energy(inputs, out) -> int:
    tables = []
    for path in inputs:
        data = np.genfromtxt(path, delimiter=",", names=True)
        tables.append((Path(path).parent.name or Path(path).stem, data))
    steps = tables[0][1]["step"]
    times = tables[0][1]["time_s"]
    for name, data in tables[1:]:
        if data["step"].shape != steps.shape:
            raise ValueError(f"{name}: energy tables have different lengths")
    with open(out, "w") as fh:
        fh.write("step,time_s," + ",".join(f"J_{name}" for name, _ in tables) + "\n")
        for i in range(len(steps)):
            cells = [str(int(steps[i])), repr(float(times[i]))]
            cells += [repr(float(d["J_joules"][i])) for _, d in tables]
            fh.write(",".join(cells) + "\n")
    print(f"merged {len(tables)} energy curves into {out}")
    return 0


def _normalize_convergence(inputs, out) -> int:
    if len(inputs) != 1:
        raise ValueError("normalize-convergence expects exactly one input")
    data = np.genfromtxt(inputs[0], delimiter=",", names=True)
    names = list(data.dtype.names)
    j = data["J"]
    j_norm = j / j[0]
    with open(out, "w") as fh:
        fh.write(",".join(names + ["J_over_J0"]) + "\n")
        for i in range(len(j)):
            cells = [repr(float(data[name][i])) for name in names]
            cells.append(repr(float(j_norm[i])))
            fh.write(",".join(cells) + "\n")
    print(f"normalized objective column added: {out}")
    return 0


def _raster_density(inputs, out, grid) -> int:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .optimize import read_density_csv

    if len(inputs) != 1:
        raise ValueError("raster-density expects exactly one input")
    gamma = read_density_csv(inputs[0])
    if grid is None:
        raise ValueError("raster-density needs --grid NRxNT")
    n_r, n_theta = (int(v) for v in grid.lower().split("x"))
    if n_r * n_theta != gamma.size:
        raise ValueError(f"grid {n_r}x{n_theta} does not match {gamma.size} elements")
    image = gamma.reshape(n_theta, n_r)  # rows: angular position
    plt.imsave(out, image, cmap="gray", vmin=0.0, vmax=1.0, origin="lower")
    print(f"density raster written to {out}")
    return 0


def cmd_print_config(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(dump_ini(cfg, annotated=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
