"""Declarative experiment configuration (TOML)."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

KINDS = ("exit_time", "coupling", "spectral_sweep", "profile_sweep", "norm_scaling")
SCHEMA_VERSION = 1


@dataclass
class ExperimentConfig:
    """All knobs of one experiment; TOML keys match the field names.

    Noise strength is eta0 = noise_scale * eps**noise_exponent, the H^-1 tube
    radius is c0 * eps**tube_power and the optional L2 tube radius is
    eps**l2_power.  The horizon is min(eps**-horizon_power, horizon_cap).
    """

    kind: str = "exit_time"
    eps: list = field(default_factory=lambda: [0.06])
    n: int = 64
    dt: float = 0.02
    kappa: float = 2.0
    rho_phys: float = 0.2
    xi0: list = field(default_factory=lambda: [0.5, 0.5])
    delta: float = 0.1
    # noise
    noise_exponent: float = 9.5
    noise_scale: float = 1.0
    noise_decay: float = 2.0
    mu_cut: float | None = None
    # tubes and initial data
    c0: float = 10.0
    tube_power: float = 4.0
    l2_power: float | None = None
    nu: float = 1.0
    # horizon
    horizon_power: float = 2.0
    horizon_cap: float = 500.0
    # ensemble
    paths: int = 50
    seed: int = 0
    diag_every: int = 10
    threads: int = 1
    # coupling
    coupling_T: float = 2.0
    coupling_dt: float = 2e-4
    eta_factors: list = field(default_factory=lambda: [1.0, 0.1])
    drift_mode: str = "full"
    # sweeps
    rho_list: list = field(default_factory=lambda: [10.0, 20.0, 40.0])
    out_dir: str = "out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown experiment kind {self.kind!r}; expected one of {KINDS}")
        if not self.eps:
            raise ValueError("eps list is empty")
        if any(e <= 0 for e in self.eps):
            raise ValueError("eps values must be positive")
        if self.n < 8:
            raise ValueError("grid too coarse")
        if self.dt <= 0 or self.coupling_dt <= 0:
            raise ValueError("time steps must be positive")
        if self.tube_power < 4:
            raise ValueError("tube_power (m) must be at least 4")
        if self.paths < 1:
            raise ValueError("need at least one path")
        if self.nu >= self.c0:
            raise ValueError("initial perturbation size nu must be below c0")
        if self.drift_mode not in ("full", "leading"):
            raise ValueError("drift_mode must be 'full' or 'leading'")
        if self.kind == "profile_sweep" and not self.rho_list:
            raise ValueError("rho_list is empty")

    # derived quantities
    def eta0(self, eps):
        return self.noise_scale * eps**self.noise_exponent

    def tube_radius(self, eps):
        return self.c0 * eps**self.tube_power

    def l2_radius(self, eps):
        return None if self.l2_power is None else eps**self.l2_power

    def horizon(self, eps):
        return min(eps**-self.horizon_power, self.horizon_cap)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in dataclasses.fields(cls)}
        flat = {}
        for key, value in data.items():
            if isinstance(value, dict):
                # sections are cosmetic: their keys are field names
                for k, v in value.items():
                    flat[k] = v
            else:
                flat[key] = value
        unknown = set(flat) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "eps" in flat and not isinstance(flat["eps"], list):
            flat["eps"] = [flat["eps"]]
        return cls(**flat)

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def load_config(path=None, **overrides):
    cfg = ExperimentConfig() if path is None else ExperimentConfig.from_toml(Path(path))
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**overrides) if overrides else cfg
