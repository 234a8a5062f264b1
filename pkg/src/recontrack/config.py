"""Pipeline configuration: ``key = value`` files plus command-line overrides."""
from dataclasses import dataclass, fields, replace

from .errors import ConfigError
from .recovery import DEFAULT_DIMS

MODES = ("offline", "online")
STAGES = ("full", "no-fill", "2d-only")
PROVIDERS = ("depth-consistent", "precomputed")
CENTER_MODES = ("extent", "fused", "frame")


@dataclass(frozen=True)
class PipelineConfig:
    # 2D association: minimum warped-mask IoU (decision, no value given)
    iou_min: float = 0.5
    # LOF neighbourhood size (decision)
    lof_k: int = 4
    # correspondence cap per frame pair
    corr_cap: int = 200
    # pixel noise (px) for the stereo position covariance
    sigma_px: float = 0.5
    # per-step rotations beyond this (rad/frame) refit as pure translation (decision)
    max_yaw_step: float = 0.3
    # trusted-motion residual threshold, RMS metres (decision; must clear the
    # depth-noise floor of the fit residual)
    residual_max: float = 1.0
    # merge window in frames; 0 disables merging
    max_gap: int = 20
    # Mahalanobis merge gate (decision; see README for the calibration)
    merge_score: float = 12.0
    # planar speed separating heading-from-motion vs. point spread (decision)
    motion_threshold: float = 0.1
    # visibility distance; None = half the class box diagonal in XZ (decision)
    d_max: float = None
    car_dims: tuple = DEFAULT_DIMS["car"]
    pedestrian_dims: tuple = DEFAULT_DIMS["pedestrian"]
    # masks smaller than this count as a failed recovery (decision)
    min_mask_pixels: int = 20
    mode: str = "offline"
    stage: str = "full"
    mask_provider: str = "depth-consistent"
    precomputed_masks: str = None
    classes: tuple = ("car", "pedestrian")
    # object centre: footprint centre ("extent") or median ("fused") of the
    # fused cloud, or median of the frame alone ("frame")
    center_mode: str = "extent"
    # add the variance of the never-observed part of the class footprint to
    # each centre covariance (decision)
    footprint_prior: bool = True
    threads: int = 1

    def __post_init__(self):
        for name in ("iou_min", "sigma_px", "max_yaw_step", "residual_max", "merge_score", "motion_threshold"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.iou_min > 1:
            raise ConfigError(f"iou_min must be at most 1, got {self.iou_min}")
        for name in ("lof_k", "corr_cap", "threads", "min_mask_pixels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.corr_cap < 3:
            raise ConfigError("corr_cap must be at least 3")
        if self.max_gap < 0:
            raise ConfigError(f"max_gap must be non-negative, got {self.max_gap}")
        if self.d_max is not None and not self.d_max > 0:
            raise ConfigError(f"d_max must be positive, got {self.d_max}")
        for name in ("car_dims", "pedestrian_dims"):
            d = getattr(self, name)
            if len(d) != 3 or min(d) <= 0:
                raise ConfigError(f"{name} must be three positive lengths, got {d}")
        for name, allowed in (
            ("mode", MODES),
            ("stage", STAGES),
            ("mask_provider", PROVIDERS),
            ("center_mode", CENTER_MODES),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {', '.join(allowed)}, got {getattr(self, name)!r}")
        if self.mask_provider == "precomputed" and not self.precomputed_masks:
            raise ConfigError("mask_provider = precomputed needs precomputed_masks")
        bad = [c for c in self.classes if c not in DEFAULT_DIMS]
        if bad or not self.classes:
            raise ConfigError(f"classes must be a non-empty subset of car, pedestrian, got {self.classes}")

    @property
    def dims(self):
        return {"car": tuple(self.car_dims), "pedestrian": tuple(self.pedestrian_dims)}

    def override(self, **kw):
        kw = {k: v for k, v in kw.items() if v is not None}
        try:
            return replace(self, **kw)
        except TypeError as e:
            raise ConfigError(str(e)) from None


def _convert(name, raw):
    f = {f.name: f for f in fields(PipelineConfig)}[name]
    default = f.default
    raw = raw.strip()
    if name in ("car_dims", "pedestrian_dims"):
        return tuple(float(x) for x in raw.replace(",", " ").split())
    if name == "classes":
        return tuple(c.strip() for c in raw.split(",") if c.strip())
    if name in ("d_max", "precomputed_masks"):
        if raw.lower() in ("", "none", "auto"):
            return None
        return float(raw) if name == "d_max" else raw
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` comments) on top of ``base``."""
    names = {f.name for f in fields(PipelineConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in names:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        try:
            values[key] = _convert(key, raw)
        except ValueError as e:
            raise ConfigError(f"config line {lineno}: {key}: {e}") from None
    return (base or PipelineConfig()).override(**values)


def load_config(path, base=None):
    try:
        with open(path) as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return parse_config(text, base)


def format_config(cfg):
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif v is None:
            v = "auto" if f.name == "d_max" else "none"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


__all__ = ["PipelineConfig", "parse_config", "load_config", "format_config"]
