import math
from pathlib import Path
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# ============ Tensor Op Schemas ============

class ShuffleSpec(BaseModel):
    """Scale factor and channel index convention of a 3D (un)shuffle"""
    model_config = ConfigDict(frozen=True)

    factor: int = Field(2, ge=2)
    # channel = c_in * r^3 + (dh * r + dw) * r + dd
    channel_order: Literal["channel_major"] = "channel_major"


# ============ Model Schemas ============

class ModelConfig(BaseModel):
    """Complete, serializable hyperparameter set of a network instance"""

    architecture: Literal["shuffleunet", "unet"] = "shuffleunet"
    levels: int = Field(4, ge=1)
    base_filters: int = Field(64, ge=1)
    scale_per_level: int = 2
    conv_kernel: int = Field(3, ge=1)
    in_channels: int = Field(1, ge=1)
    out_channels: int = Field(1, ge=1)
    activation: Literal["leaky_relu", "relu"] = "leaky_relu"
    negative_slope: float = Field(0.01, ge=0.0)
    global_residual: bool = False
    init_seed: int = 0

    @field_validator("base_filters")
    @classmethod
    def _filters_divisible_by_eight(cls, value: int) -> int:
        # expansion-path shuffle divides channels by 2^3
        if value % 8 != 0:
            raise ValueError(f"base_filters must be divisible by 8, got {value}")
        return value

    @field_validator("scale_per_level")
    @classmethod
    def _fixed_scale(cls, value: int) -> int:
        if value != 2:
            raise ValueError(f"scale_per_level is fixed at 2, got {value}")
        return value

    @field_validator("conv_kernel")
    @classmethod
    def _kernel_is_odd(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError(f"conv_kernel must be odd to preserve spatial size, got {value}")
        return value

    @model_validator(mode="after")
    def _residual_needs_matching_channels(self):
        if self.global_residual and self.in_channels != self.out_channels:
            raise ValueError("global_residual requires in_channels == out_channels")
        return self

    @property
    def divisor(self) -> int:
        return self.scale_per_level ** self.levels

    def filters(self, level: int) -> int:
        """Contraction filters F_l of a 1-based level; F_{levels+1} is the latent width"""
        return self.base_filters * 2 ** (level - 1)


# ============ Training Schemas ============

class TrainConfig(BaseModel):
    """Training loop hyperparameters"""

    epochs: int = Field(80, ge=1)
    batch_size: int = Field(4, ge=1)
    # zero is accepted so frozen-weight runs can be checked
    learning_rate: float = Field(1e-4, ge=0.0)
    patches_per_volume: int = Field(8, ge=1)
    validation_patches_per_volume: int = Field(2, ge=1)
    loss: Literal["l1"] = "l1"
    seed: int = 0
    checkpoint_dir: Path = Path("checkpoints")
    validate_every: int = Field(1, ge=1)
    patch_size: Tuple[int, int, int] = (96, 96, 48)
    num_workers: int = Field(0, ge=0)
    prefetch_factor: int = Field(2, ge=1)
    deterministic: bool = True
    include_b0: bool = True

    @field_validator("patch_size")
    @classmethod
    def _positive_patch(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(v < 1 for v in value):
            raise ValueError(f"patch_size must be positive, got {value}")
        return value


# ============ Evaluation Schemas ============

class MetricRow(BaseModel):
    """One (subject, method, metric, value) record of a report"""

    subject: str
    method: str
    metric: str
    value: float


class MetricSummary(BaseModel):
    """Aggregate of one method/metric pair over subjects"""

    method: str
    metric: str
    mean: float
    std: float
    n: int

    @property
    def formatted(self) -> str:
        return f"{self.mean:.3f}±{self.std:.3f}"


class SampleSet(BaseModel):
    """Per-subject values of one metric for one method"""

    method: str
    metric: str
    values: List[float]

    @field_validator("values")
    @classmethod
    def _enough_finite_values(cls, values: List[float]) -> List[float]:
        if len(values) < 2:
            raise ValueError(f"need at least 2 samples, got {len(values)}")
        if not all(math.isfinite(v) for v in values):
            raise ValueError("samples must be finite")
        return values


class TTestResult(BaseModel):
    """Outcome of an independent two-sample t-test"""

    metric: str
    method_a: str
    method_b: str
    t: float
    df: float
    p: float
    significant: bool
    degenerate: bool = False
    equal_var: bool = True
    alpha: float = 0.05
    note: Optional[str] = None
