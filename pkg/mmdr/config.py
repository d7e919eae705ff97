"""Run configuration: pydantic sections loaded from YAML/JSON plus command-line overrides."""

import hashlib
import json
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, Field, ValidationError, model_validator

from mmdr.errors import ConfigError
from mmdr.models import Protocol

WORKERS_ENV = "MMDR_WORKERS"

PAD_ID = 0
SEP_ID = 1
RESERVED_IDS = 2


class SyntheticGenConfig(BaseModel):
    """Synthetic multimodal dialogue generator settings."""

    n_topics: int = Field(default=8, ge=1)
    vocab_size: int = Field(default=256, ge=RESERVED_IDS + 2)
    train_dialogues: int = Field(default=2000, ge=1)
    dev_dialogues: int = Field(default=400, ge=1)
    test_dialogues: int = Field(default=400, ge=1)
    context_utterances: tuple[int, int] = (2, 6)
    utterance_tokens: tuple[int, int] = (3, 10)
    label_tokens: tuple[int, int] = (2, 4)
    image_dims: tuple[int, int, int] = (8, 8, 3)
    intent_prior: list[float] | None = Field(
        default=None, description="P(image) per topic; None means even topics image, odd topics text"
    )
    alignment_noise: float = Field(default=0.05, ge=0.0, le=1.0)
    intent_ambiguity: float = Field(default=0.0, ge=0.0, le=1.0)
    image_bank_size: int | None = Field(
        default=None, ge=1, description="Unique images per split; None gives every image dialogue its own image"
    )
    seed: int = 0

    @model_validator(mode="after")
    def _check_ranges(self) -> "SyntheticGenConfig":
        for name in ("context_utterances", "utterance_tokens", "label_tokens"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= low <= high, got {(lo, hi)}")
        if self.intent_prior is not None:
            if len(self.intent_prior) != self.n_topics:
                raise ValueError(f"intent_prior needs {self.n_topics} entries, got {len(self.intent_prior)}")
            if any(not 0.0 <= p <= 1.0 for p in self.intent_prior):
                raise ValueError("intent_prior entries must be probabilities")
        if min(self.image_dims) <= 0:
            raise ValueError(f"image_dims must be positive, got {self.image_dims}")
        if self.image_bank_size is not None and self.image_bank_size < self.n_topics:
            raise ValueError(f"image_bank_size must cover every topic ({self.n_topics}), got {self.image_bank_size}")
        return self

    def intent_probability(self, topic: int) -> float:
        """P(image response) for a topic before ambiguity flips."""
        if self.intent_prior is None:
            return 1.0 if topic % 2 == 0 else 0.0
        return self.intent_prior[topic]


class DimsConfig(BaseModel):
    """Encoder widths: token embedding, hidden, joint space, visual and label features."""

    d_tok: int = Field(ge=1)
    d_h: int = Field(ge=1)
    d_joint: int = Field(ge=1)
    d_vis: int = Field(ge=1)
    d_lab: int = Field(ge=1)


DIMS_PRESETS: dict[str, DimsConfig] = {
    "small": DimsConfig(d_tok=32, d_h=64, d_joint=32, d_vis=32, d_lab=32),
    "large": DimsConfig(d_tok=64, d_h=128, d_joint=64, d_vis=64, d_lab=64),
}

LR_PRESETS: dict[str, float] = {"toy": 1e-3, "reference": 5e-5, "paper": 5e-5}

DATA_PRESETS: dict[str, dict[str, Any]] = {
    "photochat": {},
    "mmdial": {"image_bank_size": 120, "intent_prior": [0.8, 0.1] * 4},
}


class ModelConfig(BaseModel):
    """Encoder sizes and the fixed hyperparameters of the dual encoders."""

    size: Literal["small", "large"] = "small"
    dims: DimsConfig | None = Field(default=None, description="Explicit widths; overrides the size preset")
    temperature: float = Field(default=0.01, gt=0.0)
    dropout: float = Field(default=0.2, ge=0.0, lt=1.0)
    max_len: int = Field(default=128, ge=1)
    patch_size: int = Field(default=4, ge=1)

    @property
    def resolved_dims(self) -> DimsConfig:
        return self.dims if self.dims is not None else DIMS_PRESETS[self.size]


class EpochBudget(BaseModel):
    intent: int = Field(default=10, ge=1)
    text: int = Field(default=10, ge=1)
    image: int = Field(default=20, ge=1)
    joint: int = Field(default=20, ge=1)


class TrainConfig(BaseModel):
    """Optimization schedule shared by all regimes."""

    batch_size: int = Field(default=64, ge=1)
    epochs: EpochBudget = Field(default_factory=EpochBudget)
    lr_preset: Literal["toy", "reference", "paper"] = "toy"
    base_lr: float | None = Field(default=None, gt=0.0, description="Explicit rate; overrides lr_preset")
    decay_fraction: float = Field(default=0.001, ge=0.0)
    decay_interval: int = Field(default=1000, ge=1)
    seed: int = 0
    eval_every: int = Field(default=100, ge=1)
    log_every: int = Field(default=10, ge=1)
    max_steps: int | None = Field(default=None, ge=1, description="Cap on optimizer steps per subtask")
    prefix_augment: bool = True
    intent_label_noise: float = Field(default=0.0, ge=0.0, le=0.5)
    mask_duplicate_responses: bool = False
    joint_image_ratio: float | None = Field(
        default=None, gt=0.0, lt=1.0, description="Image share of joint batches; None follows the dataset"
    )

    @property
    def learning_rate(self) -> float:
        return self.base_lr if self.base_lr is not None else LR_PRESETS[self.lr_preset]


class EvalConfig(BaseModel):
    pool_size: int = Field(default=50, ge=1)
    seed: int = 0
    shared_pool: bool = False
    protocols: list[Protocol] = Field(default_factory=lambda: list(Protocol))


class RunConfig(BaseModel):
    """Everything a run depends on besides its input files."""

    data: SyntheticGenConfig = Field(default_factory=SyntheticGenConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)

    def config_hash(self) -> str:
        return config_digest(self)


def config_digest(section: BaseModel) -> str:
    """sha256 of a section's canonical JSON (sorted keys, no whitespace)."""
    canonical = json.dumps(section.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _set_dotted(target: dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = target
    for key in keys[:-1]:
        child = node.setdefault(key, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {dotted!r}: {key!r} is not a section")
        node = child
    node[keys[-1]] = value


def parse_override(assignment: str) -> tuple[str, Any]:
    """Split ``section.key=value``; the value is parsed as YAML so numbers and lists keep their type."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {assignment!r}: {e}") from e


def load_run_config(path: Path | str | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load a YAML or JSON config file, apply dotted-key overrides and validate.

    Args:
        path: Config file; None uses the built-in defaults
        overrides: Mapping such as {"train.batch_size": 32}

    Returns:
        The validated RunConfig
    """
    raw: dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"Configuration file not found at {config_path}")
        try:
            loaded = yaml.safe_load(config_path.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{config_path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: top level must be a mapping")
        raw = loaded or {}

    for dotted, value in (overrides or {}).items():
        _set_dotted(raw, dotted, value)

    data = raw.get("data")
    preset = data.pop("preset", None) if isinstance(data, dict) else None
    if preset is not None:
        if preset not in DATA_PRESETS:
            raise ConfigError(f"unknown data preset {preset!r}; choose from {sorted(DATA_PRESETS)}")
        raw["data"] = {**DATA_PRESETS[preset], **data}

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration:\n{e}") from e


def save_resolved_config(config: RunConfig, out_dir: Path) -> Path:
    """Echo the resolved config (and its hash) into a run directory."""
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved_config.json"
    payload = {"config_hash": config.config_hash(), **config.model_dump(mode="json")}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def load_resolved_config(run_dir: Path) -> RunConfig:
    path = run_dir / "resolved_config.json"
    if not path.exists():
        raise ConfigError(f"no resolved_config.json in {run_dir}")
    payload = json.loads(path.read_text(encoding="utf-8"))
    payload.pop("config_hash", None)
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as e:
        raise ConfigError(f"{path}: {e}") from e


def eval_workers() -> int:
    """Evaluation worker threads from the environment (default 1)."""
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        workers = int(raw)
    except ValueError as e:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from e
    if workers < 1:
        raise ConfigError(f"{WORKERS_ENV} must be at least 1, got {workers}")
    return workers
