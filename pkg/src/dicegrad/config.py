"""Flat `key = value` run configuration.

One schema covers every command; a config file may set any subset, and
`--set key=value` flags override the file.  Keys are namespaced by what
they configure (`model.depth`, `train.steps`, ...).  Unknown keys are
rejected rather than ignored so a typo cannot silently fall back to a
default.  The fully resolved mapping can be rendered back to text; the
rendering parses to the identical mapping, which is what makes the
effective-config echo in every output directory re-runnable.
"""

from __future__ import annotations

from .errors import ConfigError
from .losses import LossConfig
from .model import ModelConfig
from .phantom import PhantomSpec
from .sampling import SamplerConfig
from .training import CompareConfig, TrainConfig


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_list(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _parse_str_list(raw: str) -> tuple[str, ...]:
    return tuple(part.strip() for part in raw.split(",") if part.strip())


# key -> (parser, default)
SCHEMA: dict = {
    "model.num_labels": (int, 7),
    "model.in_channels": (int, 1),
    "model.depth": (int, 2),
    "model.base_channels": (int, 16),
    "model.patch_size": (int, 64),

    "loss.kind": (str, "bsd"),
    "loss.epsilon": (float, 1e-5),
    "loss.dice_label_mode": (str, "per_label_mean"),
    "loss.include_background": (_parse_bool, True),
    "loss.prob_clamp": (float, 1e-12),

    "sampler.batch_size": (int, 8),
    "sampler.center_jitter_px": (int, 16),
    "sampler.augment": (_parse_bool, True),
    "sampler.flip_prob": (float, 0.5),
    "sampler.max_translation_px": (int, 8),
    "sampler.elastic_sigma": (float, 6.0),
    "sampler.elastic_alpha": (float, 4.0),

    "phantom.volume_size": (int, 64),
    "phantom.noise_std": (float, 0.02),
    "phantom.spacing_z": (float, 1.2),
    "phantom.spacing_y": (float, 1.0),
    "phantom.spacing_x": (float, 1.0),
    "phantom.low_contrast": (float, 0.08),

    "data.num_cases": (int, 30),
    "data.seed": (int, 0),

    "train.steps": (int, 2000),
    "train.learning_rate": (float, 1e-4),
    "train.adam_beta1": (float, 0.9),
    "train.adam_beta2": (float, 0.999),
    "train.adam_eps": (float, 1e-8),
    "train.seed": (int, 0),
    "train.checkpoint_every": (int, 0),
    "train.eval_every": (int, 0),
    "train.holdout_cases": (int, 5),

    "eval.oracle_self_test": (_parse_bool, False),

    "check.threshold": (float, 1e-5),
    "check.end_to_end_threshold": (float, 1e-4),

    "compare.losses": (_parse_str_list, ("ce", "wce", "sd", "bsd")),
    "compare.seeds": (_parse_int_list, (0, 1, 2)),
    "compare.small_labels": (_parse_int_list, (3, 4)),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Raw key -> value strings from `key = value` lines; `#` comments."""
    raw = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{ln}: empty key")
        if key in raw:
            raise ConfigError(f"{source}:{ln}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve(file_text: str | None = None, overrides: list[str] | None = None,
            source: str = "<config>") -> dict:
    """Defaults, overlaid by the config file, overlaid by --set pairs."""
    cfg = {key: default for key, (_, default) in SCHEMA.items()}

    def apply(key: str, raw_value: str, where: str):
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            cfg[key] = parser(raw_value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc

    if file_text is not None:
        for key, value in parse_config_text(file_text, source).items():
            apply(key, value, source)
    for pair in overrides or []:
        if "=" not in pair:
            raise ConfigError(f"--set needs key=value, got {pair!r}")
        key, value = (part.strip() for part in pair.split("=", 1))
        apply(key, value, f"--set {pair}")
    return cfg


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def render(cfg: dict) -> str:
    """Text form of the effective config; parsing it back round-trips."""
    lines = [f"{key} = {_format_value(cfg[key])}" for key in sorted(cfg)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# dataclass builders
# ---------------------------------------------------------------------------

def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        num_labels=cfg["model.num_labels"],
        in_channels=cfg["model.in_channels"],
        depth=cfg["model.depth"],
        base_channels=cfg["model.base_channels"],
        patch_size=cfg["model.patch_size"],
    )


def loss_config(cfg: dict) -> LossConfig:
    return LossConfig(
        kind=cfg["loss.kind"],
        epsilon=cfg["loss.epsilon"],
        dice_label_mode=cfg["loss.dice_label_mode"],
        include_background=cfg["loss.include_background"],
        prob_clamp=cfg["loss.prob_clamp"],
    )


def sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(
        patch_size=cfg["model.patch_size"],
        batch_size=cfg["sampler.batch_size"],
        num_labels=cfg["model.num_labels"],
        center_jitter_px=cfg["sampler.center_jitter_px"],
        augment=cfg["sampler.augment"],
        flip_prob=cfg["sampler.flip_prob"],
        max_translation_px=cfg["sampler.max_translation_px"],
        elastic_sigma=cfg["sampler.elastic_sigma"],
        elastic_alpha=cfg["sampler.elastic_alpha"],
    )


def phantom_spec(cfg: dict) -> PhantomSpec:
    return PhantomSpec(
        volume_size=cfg["phantom.volume_size"],
        spacing_mm=(cfg["phantom.spacing_z"], cfg["phantom.spacing_y"],
                    cfg["phantom.spacing_x"]),
        noise_std=cfg["phantom.noise_std"],
        low_contrast=cfg["phantom.low_contrast"],
    )


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        steps=cfg["train.steps"],
        learning_rate=cfg["train.learning_rate"],
        adam_beta1=cfg["train.adam_beta1"],
        adam_beta2=cfg["train.adam_beta2"],
        adam_eps=cfg["train.adam_eps"],
        seed=cfg["train.seed"],
        checkpoint_every=cfg["train.checkpoint_every"],
        eval_every=cfg["train.eval_every"],
        holdout_cases=cfg["train.holdout_cases"],
        loss=loss_config(cfg),
        sampler=sampler_config(cfg),
    )


def compare_config(cfg: dict) -> CompareConfig:
    return CompareConfig(
        losses=cfg["compare.losses"],
        seeds=cfg["compare.seeds"],
        small_labels=cfg["compare.small_labels"],
    )
