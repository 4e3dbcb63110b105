"""Flat key = value run configuration covering every tunable.

Unknown keys are rejected. Two presets ship with the package: ``desk``
(64 px rasters, 5,000 batches, radius 5) and ``paper`` (256 px rasters,
80,000 batches, radius 19). Every command writes its fully resolved
configuration next to its outputs.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, fields
from pathlib import Path

from .affinity import AffinityParams
from .losses import LossWeights
from .nets import NetConfig
from .synthdata import GenSpec
from .trainer import Schedule


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # raster and nets
    image_size: int = 256
    base_channels: int = 16
    depth: int = 4
    # training schedule
    batch_size: int = 8
    total_batches: int = 80000
    constant_batches: int = 60000
    base_lr: float = 2e-4
    warmup_batches: int = 30000
    checkpoint_interval: int = 1000
    train_seed: int = 0
    threads: int = 0
    # objective weights
    alpha: float = 3.0
    beta: float = 3.0
    gamma: float = 1.0
    delta: float = 200.0
    epsilon: float = 2.0
    bce_one_sided: bool = False
    # affinity
    sigma_i: float = 0.075
    sigma_x: float = 4.0
    radius: float = 19.0
    # dataset generation
    dataset_count: int = 500
    dataset_seed: int = 0
    rect_min: int = 1
    rect_max: int = 3
    rot_max_deg: float = 45.0
    fill_min: float = 0.2
    fill_max: float = 0.6
    jitter_sigma: float = 1.0
    blob_count: int = 2
    blob_radius: float = 3.0
    smooth_size: int = 3
    roof: tuple = (0.78, 0.72, 0.68)
    ground: tuple = (0.30, 0.38, 0.30)
    texture_contrast: float = 0.06
    noise_sigma: float = 0.02
    iou_floor: float = 0.5

    # ------------------------------------------------------------------
    def set_key(self, key: str, raw: str) -> None:
        spec = {f.name: f for f in fields(self)}
        if key not in spec:
            raise ConfigError(f"unknown configuration key {key!r}")
        kind = spec[key].type
        try:
            if key in ("roof", "ground"):
                value = tuple(float(v) for v in raw.split(","))
                if len(value) != 3:
                    raise ValueError("need three components")
            elif kind == "bool":
                if raw.lower() not in ("true", "false", "0", "1"):
                    raise ValueError("expected true/false")
                value = raw.lower() in ("true", "1")
            elif kind == "int":
                value = int(raw)
            else:
                value = float(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        setattr(self, key, value)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(c) for c in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for ln, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"line {ln}: expected 'key = value', got {line!r}")
            cfg.set_key(key.strip(), value.strip())
        return cfg

    # ------------------------------------------------------------------
    def net_config(self) -> NetConfig:
        return NetConfig(image_size=self.image_size, base_channels=self.base_channels,
                         depth=self.depth)

    def schedule(self) -> Schedule:
        return Schedule(total_batches=self.total_batches,
                        constant_batches=self.constant_batches,
                        base_lr=self.base_lr, warmup_batches=self.warmup_batches)

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma,
                           delta_max=self.delta, epsilon_max=self.epsilon,
                           warmup_batches=self.warmup_batches)

    def affinity_params(self) -> AffinityParams:
        return AffinityParams(sigma_i=self.sigma_i, sigma_x=self.sigma_x,
                              radius=self.radius)

    def gen_spec(self) -> GenSpec:
        return GenSpec(image_size=self.image_size, rect_min=self.rect_min,
                       rect_max=self.rect_max, rot_max_deg=self.rot_max_deg,
                       fill_min=self.fill_min, fill_max=self.fill_max,
                       jitter_sigma=self.jitter_sigma, blob_count=self.blob_count,
                       blob_radius=self.blob_radius, smooth_size=self.smooth_size,
                       roof=self.roof, ground=self.ground,
                       texture_contrast=self.texture_contrast,
                       noise_sigma=self.noise_sigma, iou_floor=self.iou_floor)


def resolve_config(name_or_path, overrides=()) -> RunConfig:
    """Load a config by preset name ('desk', 'paper') or file path, then apply
    'key=value' override strings."""
    path = Path(name_or_path)
    if path.exists():
        text = path.read_text()
    else:
        resource = importlib.resources.files("freg").joinpath(f"configs/{name_or_path}.cfg")
        if not resource.is_file():
            raise ConfigError(f"no config file or preset named {name_or_path!r}")
        text = resource.read_text()
    cfg = RunConfig.from_text(text)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        cfg.set_key(key.strip(), value.strip())
    return cfg
