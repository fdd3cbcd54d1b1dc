import difflib
import math
import tomllib
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class ConfigError(ValueError):
    """Raised for unreadable config files and invalid overrides."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class PathsConfig(_Section):
    dataset: str = "app/data/synthetic"
    output: str = "app/data/runs/latest"
    checkpoint: Optional[str] = None
    journal_dir: Optional[str] = "app/data/journal"


class BodyConfig(_Section):
    """Rig-level settings: upsampling thresholds and displacement caps (meters)."""

    face_area_thresh: float = Field(default=4e-4, gt=0)
    edge_len_thresh: float = Field(default=0.04, gt=0)
    cap_body: float = Field(default=0.02, ge=0)
    cap_head: float = Field(default=0.01, ge=0)
    cap_hand: float = Field(default=0.003, ge=0)

    def caps(self) -> List[float]:
        """Caps in segment code order (body, head, left_hand, right_hand)."""
        return [self.cap_body, self.cap_head, self.cap_hand, self.cap_hand]


class SplatConfig(_Section):
    s_max_body: float = Field(default=0.05, gt=0)
    s_max_head: float = Field(default=0.02, gt=0)
    s_max_hand: float = Field(default=0.01, gt=0)
    l_max: float = Field(default=0.01, gt=0)
    sh_degree: int = Field(default=3, ge=0, le=3)
    init_opacity: float = Field(default=0.1, gt=0, lt=1)
    hidden_width: int = Field(default=32, ge=1)
    kernel_size: int = Field(default=5, ge=1)
    predict_displacements: bool = False

    def s_max(self) -> List[float]:
        return [self.s_max_body, self.s_max_head, self.s_max_hand, self.s_max_hand]

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, value: int) -> int:
        if value % 2 == 0:
            raise ValueError("kernel_size must be odd so sequences keep their length")
        return value


class RenderConfig(_Section):
    tile_size: int = Field(default=16, ge=1)
    radius_sigma: float = Field(default=3.0, gt=0)
    alpha_max: float = Field(default=0.99, gt=0, lt=1)
    transmittance_min: float = Field(default=1e-4, ge=0)
    lowpass: float = Field(default=0.3, ge=0)
    frustum_margin: float = Field(default=1.3, ge=1)
    max_tile_batch_elements: int = Field(default=4_000_000, ge=1)


class DensifyPolicy(_Section):
    enabled: bool = True
    grad_threshold: float = Field(default=2e-4, gt=0)
    interval: int = Field(default=500, ge=1)
    start: int = Field(default=500, ge=0)
    stop: int = Field(default=15_000, ge=0)
    max_splats: int = Field(default=200_000, ge=1)

    @model_validator(mode="after")
    def _ordered_window(self) -> "DensifyPolicy":
        if self.start >= self.stop:
            raise ValueError("densify.start must be smaller than densify.stop")
        return self


class PrunePolicy(_Section):
    enabled: bool = True
    opacity_eps: float = Field(default=0.005, gt=0, lt=1)
    protect_original: bool = True
    reset_opacity: float = Field(default=0.1, gt=0, lt=1)

    @field_validator("protect_original")
    @classmethod
    def _always_protected(cls, value: bool) -> bool:
        if not value:
            raise ValueError("original mesh splats are always protected from pruning")
        return value


class RegularizerConfig(_Section):
    enabled: bool = True
    lambda_scale: float = Field(default=0.1, ge=0)
    lambda_rotation: float = Field(default=0.05, ge=0)
    lambda_color: float = Field(default=0.01, ge=0)
    lambda_opacity: float = Field(default=0.01, ge=0)
    lambda_disp: float = Field(default=1.0, ge=0)
    radius_body: float = Field(default=0.02, gt=0)
    radius_detail: float = Field(default=0.008, gt=0)
    sh_schedule: List[float] = Field(default_factory=lambda: [0.7, 0.8, 0.9])

    @field_validator("sh_schedule")
    @classmethod
    def _increasing_fractions(cls, value: List[float]) -> List[float]:
        previous: float = -math.inf
        for fraction in value:
            if not 0.0 <= fraction <= 1.0 or fraction <= previous:
                raise ValueError("sh_schedule must be strictly increasing fractions in [0, 1]")
            previous = fraction
        return value


class TrainerConfig(_Section):
    iterations: int = Field(default=30_000, ge=1)
    batch: int = Field(default=4, ge=1)
    seed: int = 0
    lr_opacity: float = Field(default=1e-2, ge=0)
    lr_scale: float = Field(default=5e-3, ge=0)
    lr_rotation: float = Field(default=5e-3, ge=0)
    lr_sh: float = Field(default=2.5e-3, ge=0)
    lr_anchor: float = Field(default=1e-3, ge=0)
    lr_displacement: float = Field(default=1e-4, ge=0)
    lr_predictor: float = Field(default=1e-3, ge=0)
    lr_pose: float = Field(default=1e-5, ge=0)
    refine_pose: bool = True
    weight_l1: float = Field(default=0.8, ge=0)
    weight_dssim: float = Field(default=0.2, ge=0)
    log_interval: int = Field(default=100, ge=1)
    init_colors_from_frames: bool = True
    eval_pose_refine_steps: int = Field(default=0, ge=0)
    dtype: str = "float32"

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value: str) -> str:
        if value not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return value


class Fit2DConfig(_Section):
    # "rest" starts from zero joint angles and expression, keeping the dataset shape
    # and global transform.
    init: Literal["dataset", "rest"] = "dataset"
    lr: float = Field(default=1e-3, gt=0)
    max_steps: int = Field(default=500, ge=1)
    min_lr: float = Field(default=1e-6, gt=0)
    optimize_extrinsics: bool = False
    optimize_global: bool = False


class StitchConfig(_Section):
    omega: float = Field(default=0.05, gt=0)
    min_frames: int = Field(default=2, ge=0)
    fps: float = Field(default=25.0, gt=0)


class SyntheticConfig(_Section):
    seed: int = 0
    n_poses: int = Field(default=6, ge=1)
    n_views: int = Field(default=4, ge=1)
    width: int = Field(default=128, ge=8)
    height: int = Field(default=128, ge=8)
    focal: float = Field(default=110.0, gt=0)
    camera_distance: float = Field(default=2.6, gt=0)
    held_out_views: List[int] = Field(default_factory=lambda: [3])
    background: List[float] = Field(default_factory=lambda: [0.0, 0.0, 0.0])


class LoggingConfig(_Section):
    level: str = "INFO"


class StudioConfig(_Section):
    paths: PathsConfig = Field(default_factory=PathsConfig)
    body: BodyConfig = Field(default_factory=BodyConfig)
    splats: SplatConfig = Field(default_factory=SplatConfig)
    render: RenderConfig = Field(default_factory=RenderConfig)
    densify: DensifyPolicy = Field(default_factory=DensifyPolicy)
    prune: PrunePolicy = Field(default_factory=PrunePolicy)
    regularizer: RegularizerConfig = Field(default_factory=RegularizerConfig)
    trainer: TrainerConfig = Field(default_factory=TrainerConfig)
    fit2d: Fit2DConfig = Field(default_factory=Fit2DConfig)
    stitch: StitchConfig = Field(default_factory=StitchConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)
    logging: LoggingConfig = Field(default_factory=LoggingConfig)


def config_keys(sections: Optional[Sequence[str]] = None) -> List[str]:
    """Lists the dotted keys of the config tree, optionally restricted to sections."""
    keys: List[str] = []
    for section_name, field in StudioConfig.model_fields.items():
        if sections is not None and section_name not in sections:
            continue
        section_model = field.annotation
        for key in section_model.model_fields:  # type: ignore[union-attr]
            keys.append(f"{section_name}.{key}")
    return keys


def _parse_override_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def parse_override(override: str) -> Tuple[str, Any]:
    if "=" not in override:
        raise ConfigError(f"Override '{override}' must look like section.key=value")
    key, raw = override.split("=", 1)
    return key.strip(), _parse_override_value(raw.strip())


def _suggest(key: str) -> str:
    matches: List[str] = difflib.get_close_matches(key, config_keys(), n=1, cutoff=0.0)
    return f" Did you mean '{matches[0]}'?" if matches else ""


def _check_keys(data: Dict[str, Any]) -> None:
    valid: set[str] = set(config_keys())
    for section_name, section in data.items():
        if section_name not in StudioConfig.model_fields:
            raise ConfigError(f"Unknown config section '{section_name}'.{_suggest(section_name)}")
        if not isinstance(section, dict):
            raise ConfigError(f"Config section '{section_name}' must be a table")
        for key in section:
            dotted: str = f"{section_name}.{key}"
            if dotted not in valid:
                raise ConfigError(f"Unknown config key '{dotted}'.{_suggest(dotted)}")


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for override in overrides:
        key, value = parse_override(override)
        parts: List[str] = key.split(".")
        if len(parts) != 2 or key not in config_keys():
            raise ConfigError(f"Unknown config key '{key}'.{_suggest(key)}")
        data.setdefault(parts[0], {})[parts[1]] = value
    return data


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = ()) -> StudioConfig:
    """Reads a TOML config, applies dotted overrides and validates the result.

    Args:
        path (Optional[str | Path]): TOML file. Defaults are used when None.
        overrides (Sequence[str]): "section.key=value" strings applied last.

    Returns:
        StudioConfig: The validated configuration tree.

    Raises:
        ConfigError: If the file is unreadable or a key is unknown.
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path: Path = Path(path)
        if not config_path.is_file():
            raise ConfigError(f"Config file not found: {config_path}")
        try:
            data = tomllib.loads(config_path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"Config file {config_path} is not valid TOML: {e}") from e
    _check_keys(data)
    apply_overrides(data, overrides)
    return StudioConfig.model_validate(data)
