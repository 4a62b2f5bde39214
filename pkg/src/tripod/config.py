"""Flat key-value configuration with named presets.

Config files are JSON objects whose keys are field names of :class:`Config`.
Unknown keys are rejected. Defaults describe the full-scale model; presets
in ``tripod/presets`` override what a desk-scale run needs.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import List, Optional


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # dims
    K: int = 13
    d: int = 2
    hidden: int = 256
    heads: int = 3
    node_dim: int = 96
    joint_embed_dim: int = 64
    visual_dim: int = 1024
    n_classes: int = 80
    object_widths: List[int] = field(default_factory=lambda: [5000, 1024, 256])
    context_dim: int = 1024
    context_widths: List[int] = field(default_factory=lambda: [512, 256])
    # horizons
    tau_o: int = 8
    tau_f: int = 8
    frame_interval_ms: float = 40.0
    horizons_ms: List[float] = field(default_factory=list)
    units: str = "px"
    # interaction and ablation flags
    mp_iterations: int = 3
    use_context: bool = True
    pose_graph: str = "dense"
    use_h2h: bool = True
    use_h2o: bool = True
    use_message_passing: bool = True
    use_future_h2h: bool = True
    teacher_forcing: bool = False
    # training
    lr: float = 5e-5
    lr_decay: float = 0.95
    omega: int = 2
    epochs_per_stage: int = 1
    batch_size: int = 1
    seed: int = 0
    val_fraction: float = 0.0
    grad_clip: float = 0.0
    max_steps: int = 0
    # metrics
    beta: float = 200.0
    vis_threshold: float = 0.5
    # synthetic generator
    gen_n_samples: int = 10
    gen_n_persons: int = 2
    gen_motion: str = "constant-velocity"
    gen_speed_min: float = 0.1
    gen_speed_max: float = 0.4
    gen_velocity: Optional[List[float]] = None
    gen_follow_lag: int = 3
    gen_turn_min_deg: float = 45.0
    gen_turn_max_deg: float = 135.0
    gen_limb_amplitude: float = 0.2
    gen_limb_period: float = 8.0
    gen_occlusion: str = "none"
    gen_occlusion_joints: List[int] = field(default_factory=lambda: [0])
    gen_occlusion_window: List[int] = field(default_factory=lambda: [10, 12])
    gen_region: float = 6.0
    gen_n_objects: int = 2
    gen_spawn_extent: float = 3.0
    gen_context: bool = False
    gen_seed: int = 0

    def __post_init__(self):
        self.check()

    def check(self) -> None:
        if self.d not in (2, 3):
            raise ConfigError(f"d must be 2 or 3, got {self.d}")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        if self.node_dim % self.heads:
            raise ConfigError(f"node_dim {self.node_dim} must be divisible by heads {self.heads}")
        if not self.object_widths or self.object_widths[-1] != self.hidden:
            raise ConfigError("object_widths must end with the hidden size")
        if not self.context_widths or self.context_widths[-1] != self.hidden:
            raise ConfigError("context_widths must end with the hidden size")
        if self.pose_graph not in ("dense", "sparse"):
            raise ConfigError(f"pose_graph must be 'dense' or 'sparse', got {self.pose_graph!r}")
        if self.mp_iterations < 0:
            raise ConfigError("mp_iterations must be >= 0")
        if self.omega < 1:
            raise ConfigError("omega must be >= 1")
        if self.tau_o < 1 or self.tau_f < 0:
            raise ConfigError("tau_o must be >= 1 and tau_f >= 0")
        if self.frame_interval_ms <= 0:
            raise ConfigError("frame_interval_ms must be > 0")
        if self.beta <= 0:
            raise ConfigError("beta must be > 0")
        if self.gen_motion not in ("constant-velocity", "sinusoidal-limb", "follower"):
            raise ConfigError(f"unknown gen_motion {self.gen_motion!r}")
        if self.gen_occlusion not in ("none", "deterministic-window", "exit"):
            raise ConfigError(f"unknown gen_occlusion {self.gen_occlusion!r}")

    @property
    def F(self) -> int:
        return self.K * (2 * self.d + 1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "Config":
        return from_dict({**self.to_dict(), **changes})


FIELD_NAMES = {f.name for f in dataclasses.fields(Config)}


def from_dict(data: dict) -> Config:
    unknown = sorted(set(data) - FIELD_NAMES)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return Config(**data)


def preset_names() -> List[str]:
    return sorted(p.name[:-5] for p in resources.files("tripod.presets").iterdir() if p.name.endswith(".json"))


def load_config(source: Optional[str] = None, overrides: Optional[dict] = None) -> Config:
    """Load a preset name or a JSON file path, then apply ``overrides`` (which win)."""
    data: dict = {}
    if source:
        path = Path(source)
        if path.exists():
            text = path.read_text()
        else:
            res = resources.files("tripod.presets") / f"{source}.json"
            if not res.is_file():
                raise ConfigError(f"no config file or preset named {source!r}")
            text = res.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{source}: invalid JSON ({exc})") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{source}: config must be a JSON object")
    data.update(overrides or {})
    return from_dict(data)


def parse_override(text: str) -> tuple:
    """``key=value`` with ``value`` parsed as JSON when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key=value")
    key, raw = text.split("=", 1)
    key = key.strip()
    if key not in FIELD_NAMES:
        raise ConfigError(f"unknown config key(s): {key}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value
