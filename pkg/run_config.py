"""
Run configuration: one JSON document covering every pipeline stage, plus named sub-seeds.
"""
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple, Type, Union

from config import WHISKER_MASTER_SEED, WHISKER_OUTPUT_DIR, WHISKER_WORKERS
from evaluation import EvalConfig
from exceptions import ValidationError
from real2sim_calibration import CalibrationConfig, PreprocessConfig
from rod_mechanics import WhiskerSpec
from scene_geometry import PlacementConfig, ShapeSpec
from sensor_surrogate import RigConfig, SurrogateSensorModel
from sweep_datagen import DatagenConfig
from whiskernet import TrainConfig, WhiskerNetConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUB_SEEDS = ("datagen", "surrogate", "train", "eval", "split", "augment")
FULL_SWEEPS_PER_OBJECT = 200
FULL_SHAPE_COUNT = 78
RUN_LOCATION_FIELDS = ("output_dir", "workers")


def default_shapes() -> Tuple[ShapeSpec, ...]:
    """Desk-scale training library."""
    return (
        ShapeSpec("circle", {"radius": 20.0}, name="circle"),
        ShapeSpec("rectangle", {"width": 40.0, "height": 25.0}, name="rectangle"),
        ShapeSpec("circle", {"radius": 12.0}, name="small_circle"),
        ShapeSpec("rectangle", {"width": 30.0, "height": 30.0}, name="square"),
        ShapeSpec("blob", {"radius": 18.0, "amplitude": 0.2, "harmonics": 4, "seed": 1}, name="blob_1"),
        ShapeSpec("blob", {"radius": 22.0, "amplitude": 0.25, "harmonics": 3, "seed": 2}, name="blob_2"),
    )


def default_unseen_shapes() -> Tuple[ShapeSpec, ...]:
    return (
        ShapeSpec("coin", {"diameter": 24.0, "thickness": 3.0}, name="coin"),
        ShapeSpec("L-bracket", {"leg_length": 30.0, "leg_width": 8.0}, name="L-bracket"),
    )


def full_scale_shapes(count: int = FULL_SHAPE_COUNT) -> Tuple[ShapeSpec, ...]:
    """Procedural library cycling circles, rectangles and blobs of varied size."""
    shapes = []
    for i in range(count):
        size = 10.0 + 2.0 * (i % 9)
        kind = ("circle", "rectangle", "blob")[i % 3]
        if kind == "circle":
            params = {"radius": size}
        elif kind == "rectangle":
            params = {"width": 2.0 * size, "height": size * (1.0 + 0.25 * (i % 4))}
        else:
            params = {"radius": size, "amplitude": 0.1 + 0.05 * (i % 5), "harmonics": 2 + i % 4, "seed": i}
        shapes.append(ShapeSpec(kind, params, name=f"{kind}_{i:02d}"))
    return tuple(shapes)


@dataclass(frozen=True)
class RunConfig:
    whisker: WhiskerSpec = field(default_factory=WhiskerSpec)
    shapes: Tuple[ShapeSpec, ...] = field(default_factory=default_shapes)
    unseen_shapes: Tuple[ShapeSpec, ...] = field(default_factory=default_unseen_shapes)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    datagen: DatagenConfig = field(default_factory=DatagenConfig)
    surrogate: SurrogateSensorModel = field(default_factory=SurrogateSensorModel)
    rig: RigConfig = field(default_factory=RigConfig)
    calibration: CalibrationConfig = field(default_factory=CalibrationConfig)
    model: WhiskerNetConfig = field(default_factory=WhiskerNetConfig.small)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = WHISKER_OUTPUT_DIR
    master_seed: int = WHISKER_MASTER_SEED
    workers: int = WHISKER_WORKERS
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ValidationError(f"Unsupported config schema_version {self.schema_version}, expected {SCHEMA_VERSION}")
        self.whisker.validate()
        self.placement.validate()
        self.datagen.validate()
        self.surrogate.validate()
        self.rig.validate()
        self.calibration.preprocess.validate()
        self.model.validate()
        self.train.validate()
        self.evaluation.validate()
        names = [s.name or s.kind for s in self.shapes + self.unseen_shapes]
        if len(set(names)) != len(names):
            raise ValidationError(f"Shape names must be unique, got {names}")
        if self.workers < 1:
            raise ValidationError(f"workers must be >= 1, got {self.workers}")

    def seed_for(self, name: str) -> int:
        return derive_seed(self.master_seed, name)

    def full_scale(self) -> "RunConfig":
        """Full-size protocol: 200 sweeps per object over 78 shapes and the full WhiskerNet."""
        return dataclasses.replace(
            self,
            shapes=full_scale_shapes(),
            datagen=dataclasses.replace(self.datagen, sweeps_per_object=FULL_SWEEPS_PER_OBJECT),
            model=WhiskerNetConfig(),
        )

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        """Hash of the fields that shape artifacts; output location and worker count are left out."""
        content = {k: v for k, v in self.to_dict().items() if k not in RUN_LOCATION_FIELDS}
        return hashlib.sha256(json.dumps(content, sort_keys=True).encode()).hexdigest()


def derive_seed(master: int, name: str) -> int:
    """Named sub-seed: first 8 bytes of sha256("<master>:<name>")."""
    return int.from_bytes(hashlib.sha256(f"{master}:{name}".encode()).digest()[:8], "big")


_NESTED: Dict[str, Type] = {
    "whisker": WhiskerSpec,
    "placement": PlacementConfig,
    "datagen": DatagenConfig,
    "surrogate": SurrogateSensorModel,
    "rig": RigConfig,
    "calibration": CalibrationConfig,
    "model": WhiskerNetConfig,
    "train": TrainConfig,
    "evaluation": EvalConfig,
}


def _tuples(value: Any) -> Any:
    if isinstance(value, list):
        return tuple(_tuples(v) for v in value)
    return value


def _build(cls: Type, data: Any, path: str) -> Any:
    if not isinstance(data, dict):
        raise ValidationError(f"Config section '{path}' must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"Unknown config key(s) {', '.join(f'{path}.{k}' for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is CalibrationConfig and key == "preprocess":
            kwargs[key] = _build(PreprocessConfig, value, f"{path}.{key}")
        elif cls is ShapeSpec and key == "params":
            kwargs[key] = dict(value)
        else:
            kwargs[key] = _tuples(value)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValidationError(f"Invalid config section '{path}': {e}") from e


def config_from_dict(data: Dict[str, Any]) -> RunConfig:
    """Parse a config document, rejecting unknown keys at any level."""
    if not isinstance(data, dict):
        raise ValidationError("Config document must be a JSON object")
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ValidationError(f"Unknown config key(s) {', '.join(unknown)}")
    kwargs: Dict[str, Any] = {}
    for key, value in data.items():
        if key in _NESTED:
            kwargs[key] = _build(_NESTED[key], value, key)
        elif key in ("shapes", "unseen_shapes"):
            kwargs[key] = tuple(_build(ShapeSpec, s, f"{key}[{i}]") for i, s in enumerate(value))
        else:
            kwargs[key] = value
    config = RunConfig(**kwargs)
    config.validate()
    return config


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError as e:
        raise ValidationError(f"Config file {path} does not exist") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Config file {path} is not valid JSON: {e}") from e
    logger.info(f"Loaded run config from {path}")
    return config_from_dict(data)


def save_config(config: RunConfig, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), sort_keys=True, indent=2))
