"""Hierarchical run configuration.

Config files are plain text with one dotted key per line::

    train.learning_rate = 5e-06
    reward.models = [{"id": "clipiqa", "kind": "toy"}]

Values are JSON (bare words read as strings). Files overlay the package
defaults; unknown keys are rejected before any work starts, and every run
echoes its effective configuration to ``config.resolved`` in the output
directory so the run can be reproduced from that file alone.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import (
    BlurStage,
    DegradationConfig,
    JpegStage,
    NoiseStage,
    PairDataset,
    ResizeStage,
    build_caption_provider,
    default_degradation,
    make_dataset,
    make_synthetic_dataset,
)
from .errors import ConfigurationError
from .reward import RewardRegistry, RewardWeights, build_rewards
from .schedule import SCHEDULE_PRESETS, LossWeights, TimestepSchedule
from .style import FeatureExtractor, build_extractor

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.output_dir": "runs/default",
    "model.kind": "toy",
    "model.seed": 0,
    "model.hidden_channels": 8,
    "model.latent_channels": 12,
    "model.condition_on_lr": True,
    "schedule.preset": "seesr",
    "schedule.T": None,
    "schedule.st_latest": None,
    "schedule.st1": None,
    "schedule.st2": None,
    "schedule.phase_mix": [0.5, 0.5],
    "loss.lambda_dwt": 5e-4,
    "loss.lambda_clipiqa": 5e-5,
    "loss.lambda_iw": 5e-6,
    "loss.lambda_r": 5e-6,
    "train.learning_rate": 5e-6,
    "train.batch_size": 8,
    "train.iterations": 10_000,
    "train.gt_resolution": 512,
    "train.ema_decay": 0.999,
    "train.checkpoint_every": 1000,
    "train.grad_clip": None,
    "reward.models": [
        {"id": "clipiqa", "kind": "clipiqa"},
        {"id": "iw", "kind": "imagereward"},
    ],
    "style.extractor": {"kind": "vgg"},
    "data.source": "folders",
    "data.roots": [],
    "data.crop": None,
    "data.scale": 4,
    "data.synthetic_count": 8,
    "data.synthetic_size": 32,
    "data.caption_provider": {"kind": "none"},
    "data.degradation": None,
    "eval.metrics": ["ssim", "psnr"],
}

PRESET_NAMES = ("toy", "seesr_rfsr", "diffbir_rfsr", "pasd_rfsr")


def _parse_value(raw: str):
    raw = raw.strip()
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw  # bare string


def parse_config_text(text: str, source: str = "<config>") -> dict[str, object]:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got: {line!r}")
        key, raw = stripped.split("=", 1)
        values[key.strip()] = _parse_value(raw)
    return values


def preset_text(name: str) -> str:
    try:
        return resources.files("rfsr").joinpath(f"presets/{name}.cfg").read_text()
    except FileNotFoundError as exc:
        raise ConfigurationError(f"no shipped preset named '{name}'") from exc


@dataclass
class RunConfig:
    """Validated merged view of all module configs."""

    values: dict[str, object] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = set(self.values) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        merged = dict(DEFAULTS)
        merged.update(self.values)
        self.values = merged

    @classmethod
    def load(cls, config: str | Path) -> "RunConfig":
        """Load from a file path, or from a shipped preset when given a bare
        preset name (e.g. ``toy``)."""
        path = Path(config)
        if path.exists():
            return cls(parse_config_text(path.read_text(), source=str(path)))
        if str(config) in PRESET_NAMES:
            return cls(parse_config_text(preset_text(str(config)), source=f"preset:{config}"))
        raise ConfigurationError(f"config file not found: {path}")

    def get(self, key: str):
        return self.values[key]

    def override(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigurationError(f"unknown config key: {key}")
        self.values[key] = value

    def resolved_text(self) -> str:
        lines = [f"{key} = {json.dumps(self.values[key])}" for key in sorted(self.values)]
        return "\n".join(lines) + "\n"

    def write_resolved(self, out_dir: Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "config.resolved"
        path.write_text(self.resolved_text())
        return path

    def hash(self) -> str:
        return hashlib.sha256(self.resolved_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Component assembly


def schedule_from_config(cfg: RunConfig) -> TimestepSchedule:
    preset_name = cfg.get("schedule.preset")
    if preset_name is not None and preset_name not in SCHEDULE_PRESETS:
        raise ConfigurationError(
            f"unknown schedule preset '{preset_name}'; expected one of {sorted(SCHEDULE_PRESETS)}"
        )
    base = SCHEDULE_PRESETS[preset_name] if preset_name else TimestepSchedule()
    overrides = {
        name: cfg.get(f"schedule.{name}")
        for name in ("T", "st_latest", "st1", "st2")
        if cfg.get(f"schedule.{name}") is not None
    }
    if overrides:
        params = {"T": base.T, "st_latest": base.st_latest, "st1": base.st1, "st2": base.st2}
        params.update({k: int(v) for k, v in overrides.items()})
        return TimestepSchedule(**params)
    return base


def loss_weights_from_config(cfg: RunConfig) -> LossWeights:
    return LossWeights(
        lambda_dwt=float(cfg.get("loss.lambda_dwt")),
        lambda_r=float(cfg.get("loss.lambda_r")),
        reward_weights=RewardWeights(
            lambda_clipiqa=float(cfg.get("loss.lambda_clipiqa")),
            lambda_iw=float(cfg.get("loss.lambda_iw")),
        ),
    )


_STAGE_BUILDERS = {
    "blur": BlurStage,
    "resize": ResizeStage,
    "noise": NoiseStage,
    "jpeg": JpegStage,
}


def degradation_from_config(spec: dict | None, scale: int = 4) -> DegradationConfig:
    if spec is None:
        return default_degradation(scale=scale)
    stages = []
    for stage_spec in spec.get("stages", []):
        if isinstance(stage_spec, str):
            stage_spec = {"kind": stage_spec}
        kind = stage_spec.get("kind")
        if kind not in _STAGE_BUILDERS:
            raise ConfigurationError(
                f"unknown degradation stage '{kind}'; expected one of {sorted(_STAGE_BUILDERS)}"
            )
        params = {k: v for k, v in stage_spec.items() if k != "kind"}
        for name, value in params.items():
            if isinstance(value, list):
                params[name] = tuple(value)
        try:
            stages.append(_STAGE_BUILDERS[kind](**params))
        except TypeError as exc:
            raise ConfigurationError(f"bad parameters for stage '{kind}': {exc}") from exc
    return DegradationConfig(
        stages=tuple(stages),
        second_order=bool(spec.get("second_order", True)),
        scale=scale,
        final_mode=spec.get("final_mode", "bicubic"),
    )


def dataset_from_config(cfg: RunConfig) -> PairDataset:
    scale = int(cfg.get("data.scale"))
    degradation = degradation_from_config(cfg.get("data.degradation"), scale=scale)
    provider = build_caption_provider(cfg.get("data.caption_provider"))
    crop = cfg.get("data.crop")
    crop = int(crop) if crop is not None else int(cfg.get("train.gt_resolution"))
    seed = int(cfg.get("run.seed"))
    source = cfg.get("data.source")
    if source == "synthetic":
        return make_synthetic_dataset(
            count=int(cfg.get("data.synthetic_count")),
            size=int(cfg.get("data.synthetic_size")),
            seed=seed,
            degradation=degradation,
            crop=min(crop, int(cfg.get("data.synthetic_size"))),
            caption_provider=provider,
        )
    if source == "folders":
        return make_dataset(
            roots=list(cfg.get("data.roots")),
            degradation=degradation,
            crop=crop,
            seed=seed,
            caption_provider=provider,
        )
    raise ConfigurationError(f"unknown data source '{source}'")


def rewards_from_config(cfg: RunConfig) -> RewardRegistry:
    return build_rewards(cfg.get("reward.models"))


def extractor_from_config(cfg: RunConfig) -> FeatureExtractor:
    return build_extractor(cfg.get("style.extractor"))


def model_spec_from_config(cfg: RunConfig) -> dict:
    return {
        "kind": cfg.get("model.kind"),
        "seed": int(cfg.get("model.seed")),
        "hidden_channels": int(cfg.get("model.hidden_channels")),
        "latent_channels": int(cfg.get("model.latent_channels")),
        "condition_on_lr": bool(cfg.get("model.condition_on_lr")),
    }


def train_config_from_config(cfg: RunConfig, output_dir: Path | None = None):
    from .trainer import TrainConfig

    grad_clip = cfg.get("train.grad_clip")
    mix = cfg.get("schedule.phase_mix")
    return TrainConfig(
        learning_rate=float(cfg.get("train.learning_rate")),
        batch_size=int(cfg.get("train.batch_size")),
        iterations=int(cfg.get("train.iterations")),
        gt_resolution=int(cfg.get("train.gt_resolution")),
        ema_decay=float(cfg.get("train.ema_decay")),
        schedule=schedule_from_config(cfg),
        weights=loss_weights_from_config(cfg),
        seed=int(cfg.get("run.seed")),
        checkpoint_every=int(cfg.get("train.checkpoint_every")),
        grad_clip=float(grad_clip) if grad_clip is not None else None,
        phase_mix=(float(mix[0]), float(mix[1])),
        output_dir=Path(output_dir) if output_dir is not None else Path(cfg.get("run.output_dir")),
        config_hash=cfg.hash(),
    )
