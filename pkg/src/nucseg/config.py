"""Pipeline configuration: one nested key-value file drives every stage.

Unknown keys are hard errors so typos cannot silently fall back to defaults.
The effective config of a run is always serializable and written next to the
outputs, and re-running from that file reproduces the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import ot, postprocess, stain
from .errors import ConfigError


def _coerce(path: str, default, value):
    """Cast a raw config value to the field's type; YAML 1.1 reads unsigned
    exponents like ``1.0e9`` as strings, so numeric fields accept those too."""
    if default is None or isinstance(default, (list, tuple)) or value is None:
        return value
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        raise ConfigError(f"config key '{path}' must be a boolean, got {value!r}")
    if isinstance(default, int):
        try:
            as_float = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key '{path}' must be an integer, got {value!r}") from None
        if as_float != int(as_float):
            raise ConfigError(f"config key '{path}' must be an integer, got {value!r}")
        return int(as_float)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"config key '{path}' must be a number, got {value!r}") from None
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"config key '{path}' must be a string, got {value!r}")
    return value


@dataclass
class StainSection:
    h_vector: list = field(default_factory=lambda: list(stain.RUIFROK_H))
    e_vector: list = field(default_factory=lambda: list(stain.RUIFROK_E))
    reference_intensity: float = 255.0
    ratio: float = 0.6
    bins: int = 256

    def matrix(self) -> stain.StainMatrix:
        return stain.StainMatrix.from_vectors(self.h_vector, self.e_vector, self.reference_intensity)

    def validate(self):
        self.matrix()
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"stain.ratio must be in (0, 1], got {self.ratio}")
        if self.bins < 2:
            raise ConfigError("stain.bins must be >= 2")


@dataclass
class FeatureSection:
    patch_size: int = 128
    stride: int = 64
    cell: int = 16
    k: int = 3
    external_dir: str | None = None

    def validate(self):
        if self.patch_size < 1 or not 1 <= self.stride <= self.patch_size:
            raise ConfigError("features.stride must be in [1, patch_size]")
        if self.cell < 1 or self.patch_size % self.cell != 0:
            raise ConfigError("features.cell must divide features.patch_size")
        if self.stride % self.cell != 0:
            raise ConfigError("features.stride must be a multiple of features.cell")
        if self.k < 1:
            raise ConfigError("features.k must be >= 1")


@dataclass
class TransportSection:
    epsilon: float = 0.05
    lambda_kl: float = 10.0
    iota: float = 1e9
    max_iters: int = 30000
    marginal_tol: float = 1e-6
    b_tol: float = 1e-9
    rho0: float = 0.6
    rho_stride: float = 0.05

    def solver(self) -> ot.SolverConfig:
        return ot.SolverConfig(
            epsilon=self.epsilon,
            lambda_kl=self.lambda_kl,
            iota=self.iota,
            max_iters=self.max_iters,
            marginal_tol=self.marginal_tol,
            b_tol=self.b_tol,
        )

    def validate(self):
        self.solver()
        if not 0.0 < self.rho0 < 1.0:
            raise ConfigError(f"transport.rho0 must be in (0, 1), got {self.rho0}")
        if self.rho_stride <= 0:
            raise ConfigError("transport.rho_stride must be positive")


@dataclass
class PromptSection:
    refiner: str = "identity"
    refiner_sigma: float = 2.0
    resize: str = "bilinear"
    min_separation: int = 5
    min_region_area: int = 10
    negative_stride: int = 32
    negative_margin: int = 5
    merge_k: int = 2
    area_cap: float = 0.2

    def validate(self):
        if self.refiner not in ("identity", "gaussian"):
            raise ConfigError(f"prompting.refiner must be identity|gaussian, got {self.refiner!r}")
        if self.resize not in ("bilinear", "nearest"):
            raise ConfigError(f"prompting.resize must be bilinear|nearest, got {self.resize!r}")
        if self.refiner_sigma <= 0:
            raise ConfigError("prompting.refiner_sigma must be positive")
        if self.min_separation < 1 or self.min_region_area < 1:
            raise ConfigError("prompting.min_separation and min_region_area must be >= 1")
        if self.negative_stride < 1 or self.negative_margin < 0:
            raise ConfigError("prompting.negative_stride must be >= 1 and margin >= 0")
        if self.merge_k < 1 or not 0.0 < self.area_cap <= 1.0:
            raise ConfigError("prompting.merge_k must be >= 1 and area_cap in (0, 1]")


@dataclass
class PredictorSection:
    patch_size: int = 512
    overlap_ratio: float = 0.5
    y_negatives: int = 2
    iou_merge: float = 0.8
    backend: str = "oracle"
    mask_dir: str | None = None
    drop_frac: float = 0.5
    min_seed: float = 0.05
    barrier_radius: int = 2
    expand_frac: float = 0.3
    expand_px: int = 2

    def validate(self):
        from .predictor import PatchLayout

        PatchLayout(self.patch_size, self.overlap_ratio)
        if self.y_negatives < 0:
            raise ConfigError("predictor.y_negatives must be >= 0")
        if not 0.0 < self.iou_merge <= 1.0:
            raise ConfigError("predictor.iou_merge must be in (0, 1]")
        if self.backend not in ("oracle", "file"):
            raise ConfigError(f"predictor.backend must be oracle|file, got {self.backend!r}")
        if self.backend == "file" and not self.mask_dir:
            raise ConfigError("predictor.mask_dir is required with the file backend")
        if not 0.0 < self.drop_frac < 1.0 or self.min_seed <= 0 or self.barrier_radius < 0:
            raise ConfigError("predictor oracle parameters out of range")
        if not 0.0 < self.expand_frac <= self.drop_frac or self.expand_px < 0:
            raise ConfigError("predictor expansion parameters out of range")


@dataclass
class NmsSection:
    decay: str = "exponential"
    sigma: float = 0.5
    epsilon_pen: float = 0.5
    tau: float = 0.05
    iou_thresh: float = 0.5
    score_mode: str = "combined"
    containment_frac: float = 0.9

    def config(self) -> "postprocess.NmsConfig":
        return postprocess.NmsConfig(
            decay=self.decay,
            sigma=self.sigma,
            epsilon_pen=self.epsilon_pen,
            tau=self.tau,
            iou_thresh=self.iou_thresh,
            score_mode=self.score_mode,
            containment_frac=self.containment_frac,
        )

    def validate(self):
        self.config()


@dataclass
class RunSection:
    seed: int = 0
    workers: int = 1
    debug_activations: bool = False
    pre_resize: list | None = None
    allow_unconverged: bool = False

    def validate(self):
        if self.workers < 1:
            raise ConfigError("run.workers must be >= 1")
        if self.pre_resize is not None:
            if len(self.pre_resize) != 2 or any(int(v) < 16 for v in self.pre_resize):
                raise ConfigError("run.pre_resize must be [height, width] with both >= 16")


@dataclass
class PipelineConfig:
    stain: StainSection = field(default_factory=StainSection)
    features: FeatureSection = field(default_factory=FeatureSection)
    transport: TransportSection = field(default_factory=TransportSection)
    prompting: PromptSection = field(default_factory=PromptSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    nms: NmsSection = field(default_factory=NmsSection)
    run: RunSection = field(default_factory=RunSection)

    def validate(self):
        for section in dataclasses.fields(self):
            getattr(self, section.name).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        cfg = cls()
        known = {f.name: f for f in dataclasses.fields(cls)}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config section {key!r}")
            section = getattr(cfg, key)
            if not isinstance(value, dict):
                raise ConfigError(f"config section {key!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(section)}
            for sub, subval in value.items():
                if sub not in names:
                    raise ConfigError(f"unknown config key '{key}.{sub}'")
                setattr(section, sub, _coerce(f"{key}.{sub}", getattr(section, sub), subval))
        return cfg

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data)

    def dump(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))
