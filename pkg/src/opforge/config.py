"""One JSON document drives the whole pipeline.

Every field has a default, so an empty object is a valid config. Unknown
sections or fields are rejected rather than ignored, and the noise level
must agree across synthesis, adversarial training, and solving before any
stage is allowed to start.
"""

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigError

__all__ = [
    "CorpusSection", "PsfSection", "NoiseSection", "GanSection",
    "ScoreSection", "SolverSection", "EvalSection", "RunConfig",
    "default_run_config", "load_run_config", "run_config_to_dict",
    "save_run_config",
]


@dataclass(frozen=True)
class CorpusSection:
    n_images: int = 2000
    image_shape: tuple = (32, 32)
    eval_items: int = 20

    def __post_init__(self):
        object.__setattr__(self, "image_shape", tuple(self.image_shape))
        if self.n_images < 2:
            raise ConfigError("corpus.n_images must be at least 2")
        if self.eval_items < 1:
            raise ConfigError("corpus.eval_items must be at least 1")
        shape = self.image_shape
        if len(shape) != 2 or any(int(v) != v or v < 8 for v in shape):
            raise ConfigError(f"corpus.image_shape must be two extents >= 8, got {shape}")
        object.__setattr__(self, "image_shape", (int(shape[0]), int(shape[1])))


@dataclass(frozen=True)
class PsfSection:
    family: str = "gaussian"
    kernel_size: int = 17
    sigma_lo: float = 0.8
    sigma_hi: float = 2.0
    isotropic: bool = True
    walk_steps: int = 24
    step_size: float = 0.35
    turn_sigma: float = 0.35

    def __post_init__(self):
        if self.family not in ("gaussian", "motion"):
            raise ConfigError(f"psf.family must be gaussian or motion, got {self.family!r}")
        if self.kernel_size % 2 == 0 or self.kernel_size < 3:
            raise ConfigError("psf.kernel_size must be odd and >= 3")


@dataclass(frozen=True)
class NoiseSection:
    sigma: float = 0.0

    def __post_init__(self):
        if self.sigma < 0:
            raise ConfigError("noise.sigma must be >= 0")


@dataclass(frozen=True)
class GanSection:
    steps: int = 2500
    batch_size: int = 32
    latent_dim: int = 64
    head_mode: str = "softmax"
    noise_sigma: float = 0.0
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lr_decay_from: float = 1.0
    checkpoint_every: int = 1000


@dataclass(frozen=True)
class ScoreSection:
    steps: int = 4000
    batch_size: int = 32
    T: int = 300
    base_channels: int = 8
    emb_dim: int = 32
    lr: float = 1e-4
    checkpoint_every: int = 2000
    source: str = "gan"       # kernel nets only: truth | gan | uniform | mismatch
    n_train: int = 2000       # kernel nets only: family draws to train on

    def __post_init__(self):
        if self.source not in ("truth", "gan", "uniform", "mismatch"):
            raise ConfigError(f"unknown kernel source {self.source!r}")
        if self.n_train < 1:
            raise ConfigError("n_train must be >= 1")


@dataclass(frozen=True)
class SolverSection:
    noise_sigma: float = 0.0
    zeta_image: float = 1.0
    zeta_kernel: float = 0.3


@dataclass(frozen=True)
class EvalSection:
    n_items: int = 20

    def __post_init__(self):
        if self.n_items < 1:
            raise ConfigError("eval.n_items must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    corpus: CorpusSection = field(default_factory=CorpusSection)
    psf: PsfSection = field(default_factory=PsfSection)
    noise: NoiseSection = field(default_factory=NoiseSection)
    gan: GanSection = field(default_factory=GanSection)
    diffusion_image: ScoreSection = field(default_factory=ScoreSection)
    diffusion_kernel: ScoreSection = field(default_factory=ScoreSection)
    solver: SolverSection = field(default_factory=SolverSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def __post_init__(self):
        sigmas = {
            "noise.sigma": self.noise.sigma,
            "gan.noise_sigma": self.gan.noise_sigma,
            "solver.noise_sigma": self.solver.noise_sigma,
        }
        if len(set(sigmas.values())) > 1:
            listing = ", ".join(f"{k}={v}" for k, v in sigmas.items())
            raise ConfigError(f"noise level must agree across sections: {listing}")
        if self.diffusion_image.T != self.diffusion_kernel.T:
            raise ConfigError(
                f"diffusion_image.T={self.diffusion_image.T} differs from "
                f"diffusion_kernel.T={self.diffusion_kernel.T}; the joint "
                "solver needs both priors on one schedule"
            )


_SECTIONS = {
    "corpus": CorpusSection,
    "psf": PsfSection,
    "noise": NoiseSection,
    "gan": GanSection,
    "diffusion_image": ScoreSection,
    "diffusion_kernel": ScoreSection,
    "solver": SolverSection,
    "eval": EvalSection,
}


def _coerce(section: str, name: str, default, value):
    want = type(default)
    if want is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if want is tuple and isinstance(value, (list, tuple)):
        return tuple(value)
    if isinstance(value, bool) is not (want is bool) or not isinstance(value, want):
        raise ConfigError(
            f"{section}.{name} expects {want.__name__}, got {type(value).__name__}"
        )
    return value


def _build_section(name: str, cls, doc: dict):
    if not isinstance(doc, dict):
        raise ConfigError(f"section {name!r} must be an object")
    defaults = {f.name: getattr(cls(), f.name) for f in fields(cls)}
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown field {sorted(unknown)[0]!r} in section {name!r}")
    kwargs = {k: _coerce(name, k, defaults[k], v) for k, v in doc.items()}
    return cls(**kwargs)


def default_run_config(seed: int = 0) -> RunConfig:
    return RunConfig(seed=seed)


def load_run_config(path=None, seed_override: int | None = None) -> RunConfig:
    """Parse and validate a config file; None means all defaults."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file is not valid JSON: {err}")
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - set(_SECTIONS) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown config section {sorted(unknown)[0]!r}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    if seed_override is not None:
        seed = seed_override
    sections = {
        name: _build_section(name, cls, doc.get(name, {}))
        for name, cls in _SECTIONS.items()
    }
    return RunConfig(seed=seed, **sections)


def run_config_to_dict(config: RunConfig) -> dict:
    out = {"seed": config.seed}
    for name in _SECTIONS:
        out[name] = asdict(getattr(config, name))
        for k, v in out[name].items():
            if isinstance(v, tuple):
                out[name][k] = list(v)
    return out


def save_run_config(path, config: RunConfig) -> None:
    Path(path).write_text(json.dumps(run_config_to_dict(config), indent=2) + "\n")
