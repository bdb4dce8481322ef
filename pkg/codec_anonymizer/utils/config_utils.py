# utils/config_utils.py
"""
Run configuration: pydantic sections loaded from a YAML file of flat dotted
keys (``model.strides: [2, 4, 5, 8]``, ``loss.rec: 45.0``).

Unknown keys are hard errors: a typo in a loss weight silently falling back to
its default would invalidate an experiment.
"""

import math
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from modules.errors import ConfigInvalidError

# widths used when model.toy_scale is true and the file leaves them unset
TOY_DEFAULTS = {
    "base_channels": 8,
    "encoder_out_dim": 64,
    "speaker_dim": 32,
    "speaker_channels": 64,
    "codebook_size": 16,
    "discriminator_channels": 8,
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -------------------------
# DSP sections
# -------------------------
class MelConfig(_Section):
    sample_rate: int = 16000
    n_fft: int = 1024
    win_length: int = 1024
    hop_length: int = 320
    n_mels: int = 80
    f_min: float = 0.0
    f_max: Optional[float] = None  # None -> sample_rate / 2
    floor: float = 1e-5

    @property
    def upper_hz(self) -> float:
        return float(self.f_max) if self.f_max is not None else self.sample_rate / 2.0

    def check(self) -> None:
        if not (self.n_fft >= self.win_length >= self.hop_length >= 1):
            raise ConfigInvalidError(
                f"mel config needs n_fft >= win_length >= hop_length >= 1, got "
                f"{self.n_fft}/{self.win_length}/{self.hop_length}"
            )
        if self.n_mels != 80:
            raise ConfigInvalidError(f"mel config must have 80 mel bins, got {self.n_mels}")
        if self.sample_rate <= 0:
            raise ConfigInvalidError(f"sample_rate must be positive, got {self.sample_rate}")
        if not (0.0 <= self.f_min < self.upper_hz <= self.sample_rate / 2.0):
            raise ConfigInvalidError(f"mel band [{self.f_min}, {self.upper_hz}] outside [0, sr/2]")
        if not (self.floor > 0.0 and math.isfinite(self.floor)):
            raise ConfigInvalidError(f"mel floor must be positive, got {self.floor}")


class F0Config(_Section):
    f_min: float = 50.0
    f_max: float = 550.0
    threshold: float = 0.15  # YIN absolute threshold
    win_length: int = 512  # integration window of the difference function

    def check(self, sample_rate: int) -> None:
        if not (0.0 < self.f_min < self.f_max < sample_rate / 2.0):
            raise ConfigInvalidError(
                f"f0 range needs 0 < f_min < f_max < sr/2, got [{self.f_min}, {self.f_max}] at {sample_rate} Hz"
            )
        if self.win_length < 1:
            raise ConfigInvalidError(f"f0 win_length must be >= 1, got {self.win_length}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigInvalidError(f"YIN threshold must be in (0, 1), got {self.threshold}")


# -------------------------
# Model
# -------------------------
class CodecConfig(_Section):
    strides: Tuple[int, ...] = (2, 4, 5, 8)
    base_channels: int = Field(32, ge=1)
    encoder_out_dim: int = Field(512, ge=1)
    lstm_layers: int = Field(2, ge=1)
    speaker_dim: int = Field(128, ge=1)
    speaker_channels: int = Field(256, ge=1)
    num_quantizers: int = Field(8, ge=2)  # layer 1 linguistic, layer 2 emotion
    codebook_size: int = Field(256, ge=1)
    codebook_decay: float = Field(0.99, gt=0.0, lt=1.0)
    dead_code_threshold: float = Field(0.01, ge=0.0)
    teacher_vocab: int = Field(64, ge=1)
    discriminator_channels: int = Field(16, ge=1)
    discriminator_scales: int = Field(3, ge=1)
    toy_scale: bool = False
    mel: MelConfig = MelConfig()
    f0: F0Config = F0Config()

    @model_validator(mode="before")
    @classmethod
    def _apply_toy_scale(cls, data: Any) -> Any:
        if isinstance(data, dict) and data.get("toy_scale"):
            data = dict(data)
            for key, value in TOY_DEFAULTS.items():
                data.setdefault(key, value)
        return data

    @property
    def hop_length(self) -> int:
        return int(math.prod(self.strides))

    def check(self) -> None:
        if len(self.strides) != 4 or any(s < 1 for s in self.strides):
            raise ConfigInvalidError(f"model.strides must be 4 positive integers, got {list(self.strides)}")
        if self.hop_length != self.mel.hop_length:
            raise ConfigInvalidError(
                f"product of strides ({self.hop_length}) must equal mel hop_length ({self.mel.hop_length})"
            )
        self.mel.check()
        self.f0.check(self.mel.sample_rate)


# -------------------------
# Training / anonymization sections
# -------------------------
class LossWeights(_Section):
    rec: float = Field(45.0, ge=0.0, allow_inf_nan=False)
    adv: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    com: float = Field(0.1, ge=0.0, allow_inf_nan=False)
    spk: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    lin: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    emo: float = Field(1.0, ge=0.0, allow_inf_nan=False)
    feature_match: float = Field(2.0, ge=0.0, allow_inf_nan=False)  # scale inside the adversarial term


class OptimConfig(_Section):
    lr: float = Field(2e-4, gt=0.0)
    beta1: float = Field(0.8, ge=0.0, lt=1.0)
    beta2: float = Field(0.99, ge=0.0, lt=1.0)
    weight_decay: float = Field(1e-5, ge=0.0)
    lr_decay: float = Field(0.99, gt=0.0, le=1.0)  # per epoch
    grad_clip: float = Field(0.0, ge=0.0)  # 0 disables clipping


class DataConfig(_Section):
    manifest: str = ""
    segment_seconds: float = Field(1.28, gt=0.0)
    batch_size: int = Field(8, ge=1)


class TrainConfig(_Section):
    steps: int = Field(2000, ge=1)
    seed: int = Field(0, ge=0)
    out_dir: str = "runs/toy"
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(500, ge=1)
    reference_mode: bool = True  # single-threaded, deterministic kernels
    progress: bool = True


class AnonConfig(_Section):
    alpha: float = Field(0.9, ge=0.0, le=1.0)
    num_selected: int = Field(20, ge=1)
    seed: int = 0
    gaussian_sigma: Optional[float] = Field(None, gt=0.0)  # None -> 1/sqrt(d)
    selection: Literal["random", "farthest"] = "random"
    passthrough: bool = False
    pool: str = ""
    num_trials: int = Field(100, ge=2)


class RunConfig(_Section):
    model: CodecConfig = CodecConfig()
    loss: LossWeights = LossWeights()
    optim: OptimConfig = OptimConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    anon: AnonConfig = AnonConfig()

    def check(self) -> "RunConfig":
        self.model.check()
        return self

    def flat(self) -> Dict[str, Any]:
        """Flat dotted echo, the form written into checkpoints and reports."""
        return flatten_dict(self.model_dump(mode="json"))

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        if seed is None:
            return self
        return self.model_copy(update={
            "train": self.train.model_copy(update={"seed": int(seed)}),
            "anon": self.anon.model_copy(update={"seed": int(seed)}),
        })

    @property
    def segment_samples(self) -> int:
        return int(round(self.data.segment_seconds * self.model.mel.sample_rate))


# -------------------------
# Flat dotted keys <-> nested
# -------------------------
def flatten_dict(nested: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    flat = {}
    for key, value in nested.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            flat.update(flatten_dict(value, dotted + "."))
        else:
            flat[dotted] = value
    return flat


def unflatten_dict(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for dotted, value in flat.items():
        if not isinstance(dotted, str) or "." not in dotted:
            raise ConfigInvalidError(f"config key '{dotted}' is not a dotted section.field key")
        if isinstance(value, dict):
            raise ConfigInvalidError(f"config key '{dotted}' must hold a value, not a mapping")
        parts = dotted.split(".")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigInvalidError(f"config key '{dotted}' collides with a value key")
            node = child
        if parts[-1] in node:
            raise ConfigInvalidError(f"config key '{dotted}' given twice")
        node[parts[-1]] = value
    return nested


def config_from_flat(flat: Dict[str, Any]) -> RunConfig:
    try:
        cfg = RunConfig.model_validate(unflatten_dict(flat))
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigInvalidError(f"invalid config: {problems}") from e
    return cfg.check()


def _resolve(path: str, base_dir: Path) -> str:
    if not path:
        return path
    p = Path(path)
    return str(p if p.is_absolute() else (base_dir / p).resolve())


def load_run_config(config_path: str | Path) -> RunConfig:
    """Load a flat dotted YAML config; relative paths resolve against its directory."""
    config_path = Path(config_path)
    if not config_path.exists():
        raise ConfigInvalidError(f"config file not found: {config_path}")
    try:
        with open(config_path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise ConfigInvalidError(f"config file {config_path} is not valid YAML: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigInvalidError(f"config file {config_path} must be a mapping of dotted keys")

    cfg = config_from_flat(raw)
    base = config_path.parent
    return cfg.model_copy(update={
        "data": cfg.data.model_copy(update={"manifest": _resolve(cfg.data.manifest, base)}),
        "train": cfg.train.model_copy(update={"out_dir": _resolve(cfg.train.out_dir, base)}),
        "anon": cfg.anon.model_copy(update={"pool": _resolve(cfg.anon.pool, base)}),
    })


def save_run_config(cfg: RunConfig, config_path: str | Path) -> None:
    with open(config_path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg.flat(), f, sort_keys=True)
