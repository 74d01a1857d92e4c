import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional

from .. import version
from ..core.errors import ArtifactError, ConfigError, require
from ..diffusion.schedule import ScheduleConfig
from ..util.fs import ensure_dir, output_root, source_revision

logger = logging.getLogger(__name__)

COMMANDS = ("forward", "analyze", "train", "sample")
BASELINES = ("linear", "matched")
COMPONENTS = ("both", "scale_estimator", "reverse_predictor")

# the simulation commands default to the full-size schedule, the learner ones to the toy one
COMMAND_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "forward": {"gamma": 20.0, "steps": 200},
    "analyze": {"gamma": 20.0, "steps": 200},
    "train": {"gamma": 10.0, "steps": 20},
    "sample": {"gamma": 10.0, "steps": 20},
}


@dataclass
class RunConfig:
    """
    Fully resolved settings of one command; echoed into the run's manifest.json.

    Only the fields a command reads matter to it, but every field is recorded so a
    manifest can be replayed with `--config`.
    """

    command: str
    gamma: Optional[float] = None
    steps: Optional[int] = None
    seed: int = 0
    output: Optional[str] = None

    # clean image: a PGM/PPM path, or the synthetic portrait
    image: Optional[str] = None
    image_size: int = 128

    # forward
    baseline: str = "linear"
    baseline_only: bool = False
    beta_min: float = 1e-4
    beta_max: float = 0.02
    copies: int = 1
    frame_stride: int = 0
    mean_tol: float = 0.05
    var_tol: float = 0.05

    # analyze
    x_small: float = 0.2
    x_large: float = 0.8
    a: float = 1.0
    t_min: float = 1e-3
    t_max: float = 0.1
    grid_points: int = 200
    pixels: int = 10

    # train
    corpus_seed: int = 0
    corpus_size: int = 512
    component: str = "both"
    iterations: int = 4000
    predictor_iterations: int = 3000
    learning_rate: float = 2e-3
    batch_size: int = 32
    checkpoint_every: int = 500
    resume: Optional[str] = None

    # sample
    artifacts: Optional[str] = None
    from_steps: List[int] = field(default_factory=list)
    count: int = 8
    oracle_scale: bool = False
    oracle_noise: bool = False

    def __post_init__(self) -> None:
        require(self.command in COMMANDS, f"unknown command {self.command!r}, expected one of {COMMANDS}")
        defaults = COMMAND_DEFAULTS[self.command]
        if self.gamma is None:
            self.gamma = defaults["gamma"]
        if self.steps is None:
            self.steps = defaults["steps"]
        self.gamma = float(self.gamma)
        ScheduleConfig(self.gamma, self.steps)
        require(self.baseline in BASELINES, f"baseline must be one of {BASELINES}, got {self.baseline!r}")
        require(self.component in COMPONENTS, f"component must be one of {COMPONENTS}, got {self.component!r}")
        require(self.mean_tol > 0 and self.var_tol > 0, "convergence tolerances must be > 0")
        require(self.copies >= 1, f"copies must be >= 1, got {self.copies}")
        require(0 <= self.frame_stride <= self.steps, f"frame_stride must lie in [0, {self.steps}]")
        require(self.image_size >= 7, f"image_size must be >= 7 for SSIM, got {self.image_size}")
        require(0 < self.t_min < self.t_max, f"need 0 < t_min < t_max, got {self.t_min}, {self.t_max}")
        require(self.grid_points >= 2 and self.pixels >= 1, "analysis grids need at least 2 times and 1 pixel")
        require(self.count >= 1, f"count must be >= 1, got {self.count}")
        self.from_steps = [int(i) for i in self.from_steps]
        require(
            all(1 <= i <= self.steps for i in self.from_steps),
            f"--from-steps values must lie in [1, {self.steps}], got {self.from_steps}",
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @property
    def run_dir(self) -> str:
        return ensure_dir(os.path.join(output_root(self.output), self.command))

    def path(self, *parts: str) -> str:
        return os.path.join(self.run_dir, *parts)


def parse_steps(text: str) -> List[int]:
    """Parse "5,10,20" into [5, 10, 20]."""
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma-separated step numbers, got {text!r}") from e


def read_config_file(path: str) -> Dict[str, Any]:
    if not os.path.isfile(path):
        raise ArtifactError(f"config file not found: {path}")
    with open(path, "r") as f:
        try:
            values = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    # a manifest can be fed back as a config
    if "config" in values and isinstance(values["config"], dict):
        values = values["config"]
    return values


def load_run_config(command: str, config_file: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    """File values first, then explicit flags on top."""
    values: Dict[str, Any] = read_config_file(config_file) if config_file else {}
    values.pop("command", None)
    values.update(overrides)
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(command=command, **values)


def write_manifest(cfg: RunConfig) -> str:
    path = cfg.path("manifest.json")
    manifest = {"pixdiff_version": version, "revision": source_revision(), "config": cfg.to_dict()}
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.debug(f"Wrote {path}")
    return path
