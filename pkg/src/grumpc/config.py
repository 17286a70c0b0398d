"""Experiment configuration files (TOML).

Relative paths are resolved against the directory of the config file.
Example::

    [model]
    weights = "model.json"
    normalization = "norm.json"   # optional, enables raw-unit references
    x_check = 1.0

    [observer]
    gains = "observer.json"       # optional, tuned on the fly when absent

    [mpc]
    Q = 1.0                       # scalar, diagonal list or full matrix
    R = 0.25
    S = 2.0
    N = 20
    M = "auto"                    # or an integer
    u_min = -1.0
    u_max = 1.0
    lambda = "certificate"        # "certificate", "empirical" or a number

    [reference]
    points = [[0, -0.2], [150, 0.5]]
    units = "model"               # or "raw"

    [plant]
    kind = "surrogate"            # or "gru-echo"

    [noise]
    sigma = 0.0

    [seed]
    value = 0

    [simulation]
    steps = 300
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


@dataclass(frozen=True)
class ModelSection:
    weights: Path
    normalization: Path | None = None
    x_check: float = 1.0


@dataclass(frozen=True)
class MpcSection:
    Q: object = 1.0
    R: object = 0.25
    S: object = 2.0
    N: int = 20
    M: int | str = "auto"
    u_min: object = -1.0
    u_max: object = 1.0
    lam: float | str = "certificate"
    tol_opt: float = 1e-8
    max_iter: int = 500
    empirical_pairs: int = 10000
    empirical_T: int = 300


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection
    mpc: MpcSection
    reference: list
    reference_units: str = "model"
    observer_gains: Path | None = None
    plant_kind: str = "gru-echo"
    plant_options: dict = field(default_factory=dict)
    noise_sigma: float = 0.0
    seed: int = 0
    steps: int = 200
    settle_window: int = 20
    source: Path | None = None

    def to_dict(self) -> dict:
        def plain(v):
            return str(v) if isinstance(v, Path) else v
        return {
            "model": {k: plain(v) for k, v in vars(self.model).items()},
            "mpc": dict(vars(self.mpc)),
            "reference": {"points": self.reference, "units": self.reference_units},
            "observer": {"gains": plain(self.observer_gains)},
            "plant": {"kind": self.plant_kind, **self.plant_options},
            "noise": {"sigma": self.noise_sigma},
            "seed": self.seed,
            "simulation": {"steps": self.steps, "settle_window": self.settle_window},
            "source": plain(self.source),
        }


_KNOWN = {"model", "observer", "mpc", "reference", "plant", "noise", "seed", "simulation"}


def _path(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def parse_config(data: dict, base: Path = Path(".")) -> ExperimentConfig:
    unknown = set(data) - _KNOWN
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    if "model" not in data or "weights" not in data["model"]:
        raise ValueError("config needs [model] weights")
    m = data["model"]
    model = ModelSection(_path(base, m["weights"]), _path(base, m.get("normalization")),
                         float(m.get("x_check", 1.0)))

    mp = dict(data.get("mpc", {}))
    if "lambda" in mp:
        mp["lam"] = mp.pop("lambda")
    allowed = set(MpcSection.__dataclass_fields__)
    bad = set(mp) - allowed
    if bad:
        raise ValueError(f"unknown [mpc] keys: {sorted(bad)}")
    mpc = MpcSection(**mp)
    if isinstance(mpc.M, str) and mpc.M != "auto":
        raise ValueError("[mpc] M must be an integer or \"auto\"")
    if isinstance(mpc.lam, str) and mpc.lam not in ("certificate", "empirical"):
        raise ValueError("[mpc] lambda must be \"certificate\", \"empirical\" or a number")

    ref = data.get("reference", {})
    points = ref.get("points")
    if not points:
        raise ValueError("config needs [reference] points")
    points = [(int(k), v) for k, v in points]
    units = ref.get("units", "model")
    if units not in ("model", "raw"):
        raise ValueError("[reference] units must be \"model\" or \"raw\"")

    plant = dict(data.get("plant", {}))
    kind = plant.pop("kind", "gru-echo")
    seed = data.get("seed", {})
    seed = int(seed.get("value", 0)) if isinstance(seed, dict) else int(seed)
    sim = data.get("simulation", {})
    return ExperimentConfig(
        model=model, mpc=mpc, reference=points, reference_units=units,
        observer_gains=_path(base, data.get("observer", {}).get("gains")),
        plant_kind=kind, plant_options=plant,
        noise_sigma=float(data.get("noise", {}).get("sigma", 0.0)), seed=seed,
        steps=int(sim.get("steps", 200)), settle_window=int(sim.get("settle_window", 20)),
    )


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    cfg = parse_config(data, path.parent)
    return ExperimentConfig(**{**vars(cfg), "source": path})
