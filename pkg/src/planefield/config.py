"""Training configuration and its flat ``key = value`` file format.

Blank lines and ``#`` comments are ignored. Keys are the field names of
:class:`TrainConfig`; values are parsed by the field's type (booleans accept
true/false/1/0/yes/no, ``domain_min``/``domain_max`` take three numbers or
``auto``). Unknown keys are rejected. Command-line overrides are applied on
top of the file with :func:`apply_overrides`.
"""

import dataclasses
from dataclasses import dataclass, fields

from .bank import MemoryBank
from .errors import InvalidParams
from .fitting import FitParams
from .render import LossWeights


@dataclass
class TrainConfig:
    mode: str = "ss"
    seed: int = 0
    # sampling and optimization
    n_local_samples: int = 1024
    n_global_samples: int = 768
    lr_mlp: float = 1e-2
    average_decay: float = 0.99
    steps_per_frame_local: int = 10
    steps_per_frame_global: int = 5
    keyframe_every: int = 5
    keyframe_pixels: int = 2048
    max_keyframes: int = 200
    global_keyframes: int = 2
    min_label_points: int = 32
    # rendering
    tr: float = 0.1
    n_stratified: int = 32
    n_surface: int = 8
    t_near: float = 0.1
    t_far: float = 6.0
    w_color: float = 1.0
    w_depth: float = 0.1
    w_sdf: float = 10.0
    w_freespace: float = 1.0
    w_plane: float = 1.0
    # field
    bins_per_axis: int = 32
    sigma_bins: float = 1.0
    hidden: int = 32
    feature_dim: int = 15
    domain_min: tuple | None = None
    domain_max: tuple | None = None
    domain_margin: float = 0.3
    # plane fitting
    n_min: int = 1
    eps: float = 0.02
    eps_cluster: float = 1.0
    tau_n: float = 0.7
    p_hat: float = 0.3
    k_normals: int = 8
    link_factor: float = 10.0
    # memory bank
    bank_capacity: int = 64
    tau_dist: float = 0.1
    psi: float = 0.999
    similarity: str = "points"
    # data and outputs
    depth_scale: float = 1000.0
    checkpoint_every: int = 0
    export_every: int = 10
    export_stride: int = 2
    render_step: float = 0.05
    n_band_render: int = 16

    def validate(self) -> "TrainConfig":
        self.mode = self.mode.lower()
        if self.mode not in ("s", "ss"):
            raise InvalidParams(f"mode must be s or ss, got {self.mode!r}")
        for name in ("n_local_samples", "n_global_samples", "keyframe_every", "keyframe_pixels",
                     "max_keyframes", "global_keyframes", "min_label_points", "n_stratified",
                     "export_every", "export_stride", "n_band_render"):
            if getattr(self, name) < 1:
                raise InvalidParams(f"{name} must be >= 1")
        for name in ("steps_per_frame_local", "steps_per_frame_global", "n_surface", "checkpoint_every"):
            if getattr(self, name) < 0:
                raise InvalidParams(f"{name} must be >= 0")
        for name in ("lr_mlp", "tr", "depth_scale", "render_step"):
            if not getattr(self, name) > 0:
                raise InvalidParams(f"{name} must be positive")
        if not 0 <= self.average_decay < 1:
            raise InvalidParams("average_decay must be in [0, 1)")
        if not 0 < self.t_near < self.t_far:
            raise InvalidParams("need 0 < t_near < t_far")
        if (self.domain_min is None) != (self.domain_max is None):
            raise InvalidParams("set both domain_min and domain_max, or neither")
        self.fit_params.validate()
        MemoryBank(self.bank_capacity, self.tau_dist, self.psi, self.similarity)
        return self

    @property
    def fit_params(self) -> FitParams:
        return FitParams(n_min=self.n_min, eps=self.eps, eps_cluster=self.eps_cluster,
                         tau_n=self.tau_n, p_hat=self.p_hat, k_normals=self.k_normals,
                         link_factor=self.link_factor)

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_color, self.w_depth, self.w_sdf, self.w_freespace, self.w_plane)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_FIELDS = {f.name: f for f in fields(TrainConfig)}


def _parse_value(name: str, text: str):
    kind = _FIELDS[name].type
    text = text.strip()
    if name in ("domain_min", "domain_max"):
        if text.lower() in ("auto", "none", ""):
            return None
        vals = tuple(float(v) for v in text.replace(",", " ").split())
        if len(vals) != 3:
            raise ValueError("expected three numbers")
        return vals
    if kind in (int, "int"):
        return int(text)
    if kind in (float, "float"):
        return float(text)
    if kind in (bool, "bool"):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParams(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise InvalidParams(f"{source}:{lineno}: unknown key {key!r}")
        try:
            out[key] = _parse_value(key, value)
        except ValueError as e:
            raise InvalidParams(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return out


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise InvalidParams(f"unknown config key {key!r}")
        if isinstance(value, str):
            value = _parse_value(key, value)
        setattr(cfg, key, value)
    return cfg


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    cfg = TrainConfig()
    if path is not None:
        with open(path) as f:
            apply_overrides(cfg, parse_config_text(f.read(), str(path)))
    if overrides:
        apply_overrides(cfg, overrides)
    return cfg.validate()


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for name, value in cfg.to_dict().items():
        if name in ("domain_min", "domain_max"):
            value = "auto" if value is None else " ".join(repr(float(v)) for v in value)
        lines.append(f"{name} = {value}")
    return "\n".join(lines) + "\n"
