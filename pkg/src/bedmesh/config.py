"""Run settings: schema, TOML loading, and key=value overrides.

Settings are plain nested dataclasses of primitives; the flat dotted-key
schema derived from them drives the CLI help text, config-file validation
and override parsing (precedence: defaults < config file < command line).
Builder functions convert settings into the typed configuration objects
used by the library modules.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .data import AugmentPolicy, ParamRanges, SceneConfig, ShiftProfile
from .eval import ExperimentConfig
from .network import DenoiserConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Malformed settings: unknown keys, bad values, or unreadable files."""


@dataclass
class SceneSection:
    camera_height: float = 2.0
    bed_length: float = 2.0
    bed_width: float = 1.0
    pixel_pitch: float = 0.03125
    image_h: int = 64
    image_w: int = 32
    bed_height: float = 0.0


@dataclass
class RangesSection:
    beta_lo: float = -2.0
    beta_hi: float = 2.0
    s_x_range: float = 0.15
    s_y_range: float = 0.15
    yaw_range: float = 0.45


@dataclass
class DataSection:
    n_synthetic: int = 200
    n_real_train: int = 64
    n_real_test: int = 32
    n_train_participants: int = 80
    n_test_participants: int = 22
    template_vertices: int = 240
    template_seed: int = 0


@dataclass
class ShiftSection:
    noise_sigma: float = 0.005
    bias_center: float = 0.015
    bias_range: float = 0.010
    blur_sigma_px: float = 1.0
    sag_depth: float = 0.020


@dataclass
class ModelSection:
    n_down_blocks: int = 6
    n_attention_blocks: int = 3
    base_channels: int = 32
    latent_dim: int = 128
    include_gender: bool = False


@dataclass
class TrainSection:
    lr_init: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 32
    timesteps: int = 100
    steps_total: int = 20_000
    epochs: int = 50
    lambda_v2v: float = 1.0


@dataclass
class AugmentSection:
    enabled: bool = True
    p_rotate: float = 0.3
    max_rotate_deg: float = 15.0
    p_erase: float = 0.3
    max_erase_frac: float = 0.2
    p_noise: float = 0.5
    max_noise_sigma: float = 0.010
    rotate_labels: bool = False


@dataclass
class EvalSection:
    n_steps: int = 5
    batch_size: int = 64
    seed: int = 0


@dataclass
class ExperimentSection:
    fractions: list = field(default_factory=lambda: [0.1, 0.25, 0.5, 1.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    sim_steps: int = 1000
    finetune_epochs: int = 40


@dataclass
class Settings:
    seed: int = 0
    scene: SceneSection = field(default_factory=SceneSection)
    ranges: RangesSection = field(default_factory=RangesSection)
    data: DataSection = field(default_factory=DataSection)
    shift: ShiftSection = field(default_factory=ShiftSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)
    eval: EvalSection = field(default_factory=EvalSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)


def schema_keys() -> list[tuple[str, type, object]]:
    """Every accepted dotted key with its type and default."""
    out: list[tuple[str, type, object]] = []
    for f in dataclasses.fields(Settings):
        factory = f.default_factory
        section = factory() if factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(section):
            for sf in dataclasses.fields(section):
                out.append((f"{f.name}.{sf.name}", sf.type, getattr(section, sf.name)))
        else:
            out.append((f.name, f.type, f.default))
    return out


_SCHEMA = None


def _schema() -> dict:
    global _SCHEMA
    if _SCHEMA is None:
        _SCHEMA = {key: (typ, default) for key, typ, default in schema_keys()}
    return _SCHEMA


def _set_key(settings: Settings, key: str, value) -> None:
    if key not in _schema():
        raise ConfigError(f"unknown config key: {key!r}")
    target = settings
    parts = key.split(".")
    for part in parts[:-1]:
        target = getattr(target, part)
    setattr(target, parts[-1], value)


def _coerce(key: str, value) -> object:
    if key not in _schema():
        raise ConfigError(f"unknown config key: {key!r}")
    typ, default = _schema()[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        text = str(value).lower()
        if text in ("true", "1", "yes"):
            return True
        if text in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            out = float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
        if out != int(out):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(out)
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected a number, got {value!r}") from None
    if isinstance(default, list):
        if isinstance(value, (list, tuple)):
            return [float(v) for v in value]
        return [float(v) for v in str(value).split(",") if v.strip()]
    return str(value)


def load_settings(config_path=None, overrides: list[str] | None = None,
                  seed: int | None = None) -> Settings:
    """Defaults, then the TOML file, then ``--seed``, then key=value overrides."""
    settings = Settings()
    if config_path is not None:
        try:
            with open(config_path, "rb") as f:
                doc = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {config_path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{config_path}: {exc}") from None
        for key, value in _flatten(doc):
            _set_key(settings, key, _coerce(key, value))
    if seed is not None:
        settings.seed = int(seed)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, _, raw = item.partition("=")
        _set_key(settings, key.strip(), _coerce(key.strip(), raw.strip()))
    return settings


def _flatten(doc: dict, prefix: str = ""):
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            yield from _flatten(value, prefix=f"{name}.")
        else:
            yield name, value


def settings_digest(settings: Settings) -> str:
    payload = json.dumps(dataclasses.asdict(settings), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------

def build_scene(settings: Settings) -> SceneConfig:
    s = settings.scene
    return SceneConfig(
        camera_height=s.camera_height,
        bed_extent=(s.bed_length, s.bed_width),
        pixel_pitch=s.pixel_pitch,
        image_size=(s.image_h, s.image_w),
        bed_height=s.bed_height,
    )


def build_ranges(settings: Settings) -> ParamRanges:
    r = settings.ranges
    s = settings.scene
    return ParamRanges(
        beta_lo=r.beta_lo, beta_hi=r.beta_hi,
        s_x=(-r.s_x_range, r.s_x_range), s_y=(-r.s_y_range, r.s_y_range),
        phi_z=(-r.yaw_range, r.yaw_range),
        bed_extent=(s.bed_length, s.bed_width),
    )


def build_shift(settings: Settings) -> ShiftProfile:
    s = settings.shift
    return ShiftProfile(
        noise_sigma=s.noise_sigma, bias_center=s.bias_center,
        bias_range=s.bias_range, blur_sigma_px=s.blur_sigma_px,
        sag_depth=s.sag_depth,
    )


def build_model_config(settings: Settings) -> DenoiserConfig:
    m = settings.model
    stride = 2 ** m.n_down_blocks
    h = math.ceil(settings.scene.image_h / stride) * stride
    w = math.ceil(settings.scene.image_w / stride) * stride
    return DenoiserConfig(
        image_size=(h, w),
        n_down_blocks=m.n_down_blocks,
        n_attention_blocks=m.n_attention_blocks,
        base_channels=m.base_channels,
        latent_dim=m.latent_dim,
        include_gender_in_condition=m.include_gender,
    )


def build_train_config(settings: Settings, stage: str) -> TrainConfig:
    t = settings.train
    return TrainConfig(
        lr_init=t.lr_init, weight_decay=t.weight_decay, batch_size=t.batch_size,
        timesteps=t.timesteps, stage=stage, steps_total=t.steps_total,
        epochs=t.epochs, seed=settings.seed, lambda_v2v=t.lambda_v2v,
    )


def build_augment(settings: Settings) -> AugmentPolicy | None:
    a = settings.augment
    if not a.enabled:
        return None
    return AugmentPolicy(
        p_rotate=a.p_rotate, max_rotate_deg=a.max_rotate_deg,
        p_erase=a.p_erase, max_erase_frac=a.max_erase_frac,
        p_noise=a.p_noise, max_noise_sigma=a.max_noise_sigma,
        fill_depth=settings.scene.camera_height - settings.scene.bed_height,
        rotate_labels=a.rotate_labels,
    )


def build_experiment(settings: Settings) -> ExperimentConfig:
    e = settings.experiment
    return ExperimentConfig(
        real_fractions=tuple(e.fractions),
        seeds=tuple(int(s) for s in e.seeds),
        sim_steps=e.sim_steps,
        finetune_epochs=e.finetune_epochs,
        eval_n_steps=settings.eval.n_steps,
        eval_seed=settings.eval.seed,
    )


def build_templates(settings: Settings):
    from .body_model import make_toy_template

    return make_toy_template(settings.data.template_vertices,
                             settings.data.template_seed)


def dataset_seeds(settings: Settings) -> dict:
    """Derived per-dataset seeds: disjoint streams off the top-level seed."""
    base = settings.seed
    return {
        "synthetic": 10 * base + 1,
        "real_train": 10 * base + 2,
        "real_test": 10 * base + 3,
        "shift": 10 * base + 4,
    }
