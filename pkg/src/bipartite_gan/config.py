"""Run configuration: typed "key = value" files with validated ranges.

One flat namespace covers the generator, the training loop, and the command
plumbing (dataset path, output directory, evaluation budget). Parsing reports
errors with the offending line number; formatting emits every effective value
so the echoed file reloads to an identical configuration.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .network import GeneratorConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # generator
    resolution: int = 32
    base_resolution: int = 4
    channels: tuple[int, ...] | None = None  # per level; derived when None
    k: int = 16
    latent_dim: int = 32
    mapping_depth: int = 8
    attention_variant: str = "duplex"
    attn_first_level: int = 0
    attn_last_level: int | None = None
    heads: int = 4
    use_resnet_skips: bool = True
    noise_inputs: bool = False
    disc_attention: bool = False
    # training
    learning_rate: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.99
    adam_eps: float = 1e-8
    batch_size: int = 16
    r1_gamma: float = 40.0
    r1_interval: int = 16
    ema_decay: float = 0.999
    style_mix_prob: float = 0.9
    total_steps: int = 5000
    seed: int = 0
    # plumbing
    dataset_dir: str = ""
    out_dir: str = "out"
    n_scenes: int = 2048
    eval_samples: int = 1000
    embedder_seed: int = 17
    checkpoint_interval: int = 1000
    log_every: int = 10


def _parse_bool(raw: str) -> bool:
    if raw == "true":
        return True
    if raw == "false":
        return False
    raise ValueError("expected true or false")


def _parse_optional_int(raw: str) -> int | None:
    return None if raw == "none" else int(raw)


def _parse_channels(raw: str) -> tuple[int, ...] | None:
    return None if raw == "none" else tuple(int(x) for x in raw.split(","))


# key -> (parser, range predicate, range description)
_ALWAYS = (lambda v: True, "")
_SCHEMA: dict[str, tuple] = {
    "resolution": (int, lambda v: v >= 8 and (v & (v - 1)) == 0, "a power of two >= 8"),
    "base_resolution": (int, lambda v: v >= 2, ">= 2"),
    "channels": (
        _parse_channels,
        lambda v: v is None or (len(v) > 0 and all(c >= 1 for c in v)),
        "none or comma-separated positive widths",
    ),
    "k": (int, lambda v: v >= 1, ">= 1"),
    "latent_dim": (int, lambda v: v >= 1, ">= 1"),
    "mapping_depth": (int, lambda v: v >= 1, ">= 1"),
    "attention_variant": (str, lambda v: v in ("simplex", "duplex"), "simplex or duplex"),
    "attn_first_level": (int, lambda v: v >= 0, ">= 0"),
    "attn_last_level": (_parse_optional_int, lambda v: v is None or v >= 0, ">= 0 or none"),
    "heads": (int, lambda v: v >= 1, ">= 1"),
    "use_resnet_skips": (_parse_bool,) + _ALWAYS,
    "noise_inputs": (_parse_bool,) + _ALWAYS,
    "disc_attention": (_parse_bool,) + _ALWAYS,
    "learning_rate": (float, lambda v: v > 0, "> 0"),
    "beta1": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "beta2": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "adam_eps": (float, lambda v: v > 0, "> 0"),
    "batch_size": (int, lambda v: v >= 2, ">= 2"),
    "r1_gamma": (float, lambda v: v >= 0, ">= 0"),
    "r1_interval": (int, lambda v: v >= 1, ">= 1"),
    "ema_decay": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "style_mix_prob": (float, lambda v: 0.0 <= v <= 1.0, "in [0, 1]"),
    "total_steps": (int, lambda v: v >= 0, ">= 0"),
    "seed": (int, lambda v: 0 <= v < 2**64, "a u64"),
    "dataset_dir": (str,) + _ALWAYS,
    "out_dir": (str,) + _ALWAYS,
    "n_scenes": (int, lambda v: v >= 0, ">= 0"),
    "eval_samples": (int, lambda v: v >= 2, ">= 2"),
    "embedder_seed": (int, lambda v: 0 <= v < 2**64, "a u64"),
    "checkpoint_interval": (int, lambda v: v >= 0, ">= 0"),
    "log_every": (int, lambda v: v >= 1, ">= 1"),
}

assert set(_SCHEMA) == {f.name for f in fields(RunConfig)}


def set_key(cfg: RunConfig, key: str, raw: str, where: str) -> None:
    """Parse and range-check one assignment; errors name the source location."""
    if key not in _SCHEMA:
        raise ConfigError(f"{where}: unknown key '{key}'")
    parser, in_range, describe = _SCHEMA[key]
    raw = raw.strip()
    try:
        value = parser(raw)
    except ValueError as exc:
        raise ConfigError(f"{where}: cannot parse value '{raw}' for {key}: {exc}") from None
    if not in_range(value):
        raise ConfigError(f"{where}: {key} must be {describe}, got {value}")
    setattr(cfg, key, value)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """Parse "key = value" lines ("#" starts a comment) into a RunConfig."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {lineno}: expected 'key = value', got '{line}'")
        key, raw = line.split("=", 1)
        set_key(cfg, key.strip(), raw, f"{source} line {lineno}")
    return cfg


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read(), source=path)


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def format_config(cfg: RunConfig) -> str:
    """Echo every effective value; reparsing the result reproduces cfg."""
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in fields(RunConfig)]
    return "\n".join(lines) + "\n"


def generator_config(cfg: RunConfig) -> GeneratorConfig:
    gen = GeneratorConfig(
        resolution=cfg.resolution,
        base_resolution=cfg.base_resolution,
        channels=cfg.channels,
        k=cfg.k,
        latent_dim=cfg.latent_dim,
        mapping_depth=cfg.mapping_depth,
        attention_variant=cfg.attention_variant,
        attn_first_level=cfg.attn_first_level,
        attn_last_level=cfg.attn_last_level,
        heads=cfg.heads,
        use_resnet_skips=cfg.use_resnet_skips,
        noise_inputs=cfg.noise_inputs,
        disc_attention=cfg.disc_attention,
    )
    try:
        gen.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return gen


def train_config(cfg: RunConfig) -> TrainConfig:
    train = TrainConfig(
        learning_rate=cfg.learning_rate,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        adam_eps=cfg.adam_eps,
        batch_size=cfg.batch_size,
        r1_gamma=cfg.r1_gamma,
        r1_interval=cfg.r1_interval,
        ema_decay=cfg.ema_decay,
        style_mix_prob=cfg.style_mix_prob,
        total_steps=cfg.total_steps,
        seed=cfg.seed,
    )
    try:
        train.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return train
