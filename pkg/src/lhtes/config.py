"""Run configuration: dataclasses, INI round trip, validation.

Every tunable of a run lives here with defaults matching the standard
discharge scenario (quarter annulus, 5000 elements, 60 x 8000 s steps,
400 optimizer iterations).  Config files are INI sections named after
the dataclass groups below; unknown sections or keys are rejected.
CLI flags override file values.
"""

from __future__ import annotations

import configparser
import hashlib
import io
from dataclasses import asdict, dataclass, field, fields

OPTIMIZER_MODES = ("co-design", "geometry-only", "sequential-hcm", "sequential-pcm")
CONSTRAINT_KINDS = ("cost", "volume")


class ConfigError(ValueError):
    """Raised for unknown keys/sections or ill-typed values."""


@dataclass
class MeshConfig:
    r_in: float = 0.1
    r_out: float = 1.0
    n_r: int = 50
    n_theta: int = 100


@dataclass
class PhaseConfig:
    mushy_width: float = 10.0
    alpha: float = 0.25


@dataclass
class TransientConfig:
    t_initial: float = 400.0
    t_boundary: float = 273.0
    dt: float = 8000.0
    n_steps: int = 60
    newton_tol: float = 1e-7
    max_newton_iters: int = 50
    ggls: bool = True
    ggls_scale: float = 1.0
    linear_solver: str = "direct"


@dataclass
class DesignFieldConfig:
    filter_radius: float = 0.03
    projection_eta: float = 0.5
    gamma_init: float = 0.9
    gamma_dither: float = 0.01


@dataclass
class MaterialsConfig:
    hcm_db: str = ""
    pcm_db: str = ""
    hcm_model: str = ""
    pcm_model: str = ""
    hcm_atlas: str = ""
    pcm_atlas: str = ""
    fixed_hcm: str = "Aluminum"
    fixed_pcm: str = "RT-25"


@dataclass
class SchedulesConfig:
    p_start: float = 1.0
    p_rate: float = 0.005
    p_max: float = 3.0
    beta_start: float = 1.0
    beta_rate: float = 0.04
    beta_max: float = 64.0
    eps_start: float = 4.0
    eps_rate: float = 0.08
    eps_min: float = 0.02
    tau_start: float = 3.0
    tau_growth: float = 1.02


@dataclass
class OptimizerConfig:
    mode: str = "co-design"
    objective: str = "discharge"
    constraint: str = "cost"
    budget: float = 600.0
    volume_fraction: float = 0.2
    learning_rate: float = 0.05
    lr_decay: float = 1.0
    max_iters: int = 400
    step_tol: float = 1e-4
    rho_lse: float = 20.0
    seed: int = 0
    max_stored_states: int = 0
    init_design: str = ""


@dataclass
class OutputConfig:
    out_dir: str = "results"
    vtk: bool = False


@dataclass
class RunConfig:
    mesh: MeshConfig = field(default_factory=MeshConfig)
    phase: PhaseConfig = field(default_factory=PhaseConfig)
    transient: TransientConfig = field(default_factory=TransientConfig)
    design: DesignFieldConfig = field(default_factory=DesignFieldConfig)
    materials: MaterialsConfig = field(default_factory=MaterialsConfig)
    schedules: SchedulesConfig = field(default_factory=SchedulesConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self):
        if self.optimizer.mode not in OPTIMIZER_MODES:
            raise ConfigError(f"optimizer.mode must be one of {OPTIMIZER_MODES}")
        if self.optimizer.objective not in ("discharge", "retention"):
            raise ConfigError("optimizer.objective must be 'discharge' or 'retention'")
        if self.optimizer.constraint not in CONSTRAINT_KINDS:
            raise ConfigError(f"optimizer.constraint must be one of {CONSTRAINT_KINDS}")
        if self.optimizer.budget <= 0.0:
            raise ConfigError("optimizer.budget must be positive")
        if not (0.0 < self.optimizer.volume_fraction < 1.0):
            raise ConfigError("optimizer.volume_fraction must be in (0, 1)")
        if self.optimizer.max_iters < 1:
            raise ConfigError("optimizer.max_iters must be >= 1")
        if self.transient.linear_solver not in ("direct", "cg"):
            raise ConfigError("transient.linear_solver must be 'direct' or 'cg'")
        return self


_KEY_HELP = {
    ("mesh", "r_in"): "inner radius of the quarter annulus (m)",
    ("mesh", "r_out"): "outer radius (m)",
    ("mesh", "n_r"): "radial element count",
    ("mesh", "n_theta"): "angular element count",
    ("phase", "mushy_width"): "mushy zone width Delta-T (K)",
    ("phase", "alpha"): "transition width as a fraction of the mushy zone",
    ("transient", "t_initial"): "uniform initial temperature (K)",
    ("transient", "t_boundary"): "fixed inner-boundary temperature (K)",
    ("transient", "dt"): "time step size (s)",
    ("transient", "n_steps"): "number of time steps",
    ("transient", "newton_tol"): "relative residual tolerance per step",
    ("transient", "max_newton_iters"): "iteration cap before step bisection",
    ("transient", "ggls"): "gradient least-squares stabilization on/off",
    ("transient", "ggls_scale"): "stabilization magnitude multiplier",
    ("transient", "linear_solver"): "direct (sparse LU) or cg (Jacobi-preconditioned)",
    ("design", "filter_radius"): "density filter radius (m)",
    ("design", "projection_eta"): "projection threshold",
    ("design", "gamma_init"): "uniform initial pseudo-density",
    ("design", "gamma_dither"): "seeded uniform perturbation of the initial "
                                "density; breaks rotational symmetry",
    ("materials", "hcm_db"): "conductive-material CSV; empty = bundled",
    ("materials", "pcm_db"): "phase-change-material CSV; empty = bundled",
    ("materials", "hcm_model"): "trained decoder file; empty = bundled",
    ("materials", "pcm_model"): "trained decoder file; empty = bundled",
    ("materials", "hcm_atlas"): "latent atlas CSV; empty = bundled",
    ("materials", "pcm_atlas"): "latent atlas CSV; empty = bundled",
    ("materials", "fixed_hcm"): "material name for fixed-material modes",
    ("materials", "fixed_pcm"): "material name for fixed-material modes",
    ("schedules", "p_start"): "conductivity penalization start",
    ("schedules", "p_rate"): "penalization increase per iteration",
    ("schedules", "p_max"): "penalization cap",
    ("schedules", "beta_start"): "projection sharpness start",
    ("schedules", "beta_rate"): "sharpness increase per iteration",
    ("schedules", "beta_max"): "sharpness cap",
    ("schedules", "eps_start"): "latent distance allowance start",
    ("schedules", "eps_rate"): "allowance decrease per iteration",
    ("schedules", "eps_min"): "allowance floor",
    ("schedules", "tau_start"): "log-barrier stiffness start",
    ("schedules", "tau_growth"): "barrier stiffness growth factor per iteration",
    ("optimizer", "mode"): "co-design | geometry-only | sequential-hcm | sequential-pcm",
    ("optimizer", "objective"): "discharge (maximize extracted energy) | retention "
                                "(minimize end-state stored energy)",
    ("optimizer", "constraint"): "material constraint: cost | volume",
    ("optimizer", "budget"): "conductive-material cost budget (currency)",
    ("optimizer", "volume_fraction"): "conductive-material volume fraction cap",
    ("optimizer", "learning_rate"): "Adam learning rate",
    ("optimizer", "lr_decay"): "per-iteration multiplicative learning-rate "
                               "decay; 1.0 keeps the rate constant",
    ("optimizer", "max_iters"): "iteration cap",
    ("optimizer", "step_tol"): "stop when max design change falls below this",
    ("optimizer", "rho_lse"): "log-sum-exp sharpness of the latent constraint",
    ("optimizer", "seed"): "seed echoed into artifacts (the loop is deterministic)",
    ("optimizer", "max_stored_states"): "checkpointing: states kept; 0 = all",
    ("optimizer", "init_design"): "npz/csv with the starting (or frozen) density field",
    ("output", "out_dir"): "directory for result artifacts",
    ("output", "vtk"): "write VTK field exports",
}


def _coerce(raw: str, target_type: type, where: str):
    try:
        if target_type is bool:
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        return target_type(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> RunConfig:
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"config file not found: {path}")
    return apply_ini(RunConfig(), parser)


def apply_ini(config: RunConfig, parser: configparser.ConfigParser) -> RunConfig:
    groups = {f.name: getattr(config, f.name) for f in fields(config)}
    for section in parser.sections():
        if section not in groups:
            raise ConfigError(f"unknown config section [{section}]")
        group = groups[section]
        known = {f.name: f.type for f in fields(group)}
        for key, raw in parser.items(section):
            if key not in known:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            current = getattr(group, key)
            setattr(group, key, _coerce(raw, type(current), f"[{section}] {key}"))
    return config.validate()


def set_override(config: RunConfig, dotted_key: str, raw: str) -> RunConfig:
    """Apply a single 'section.key=value' override (flags beat files)."""
    if "." not in dotted_key:
        raise ConfigError(f"override must be section.key, got {dotted_key!r}")
    section, key = dotted_key.split(".", 1)
    groups = {f.name: getattr(config, f.name) for f in fields(config)}
    if section not in groups:
        raise ConfigError(f"unknown config section [{section}]")
    group = groups[section]
    if not hasattr(group, key):
        raise ConfigError(f"unknown key {key!r} in section [{section}]")
    current = getattr(group, key)
    setattr(group, key, _coerce(raw, type(current), dotted_key))
    return config


def dump_ini(config: RunConfig, annotated: bool = False) -> str:
    """Render the config as INI; annotated adds one help comment per key."""
    out = io.StringIO()
    for group_field in fields(config):
        group = getattr(config, group_field.name)
        out.write(f"[{group_field.name}]\n")
        for f in fields(group):
            if annotated:
                help_text = _KEY_HELP.get((group_field.name, f.name), "")
                if help_text:
                    out.write(f"# {help_text}\n")
            value = getattr(group, f.name)
            out.write(f"{f.name} = {value}\n")
        out.write("\n")
    return out.getvalue()


def config_hash(config: RunConfig) -> str:
    canonical = repr(sorted(_flatten(asdict(config))))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _flatten(tree: dict, prefix: str = "") -> list:
    items = []
    for key, value in tree.items():
        name = f"{prefix}.{key}" if prefix else key
        if isinstance(value, dict):
            items.extend(_flatten(value, name))
        else:
            items.append((name, value))
    return items
