"""Run configuration: defaults, ``key = value`` files and command-line overrides."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from typing import Iterable

from .prn import PrnConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    n_raw: int = 100
    m_refined: int = 512
    k_nn: int = 30
    lambda_adv: float = 0.05
    beta: float = 0.95
    mu: float = 1.0
    lr: float = 1e-4
    batch_size: int = 48
    joint_batch_size: int = 8
    alt_epochs: int = 15
    joint_epochs: int = 30
    lr_decay: float = 0.3
    seed: int = 0
    # architecture
    encoder_widths: tuple[int, ...] = (64, 64, 128, 128, 256, 256)
    latent_dim: int = 512
    decoder_fc_widths: tuple[int, ...] = (512, 512, 256)
    point_width: int = 16
    disc_widths: tuple[int, ...] = (64, 128)
    d_rgb: int = 32
    gcn_f_widths: tuple[int, ...] = (64, 128, 256)
    gcn_ref_widths: tuple[int, ...] = (64, 128, 256)
    t_widths: tuple[int, ...] = (512, 512, 256)
    head_widths: tuple[int, ...] = (256, 128, 64)
    non_saturating: bool = False
    single_resolution: bool = False
    canonical_frame: bool = False
    threads: int = 1

    def __post_init__(self):
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if self.m_refined % 8:
            raise ConfigError(f"m_refined must be divisible by 8, got {self.m_refined}")
        if self.k_nn < 1 or self.k_nn >= self.n_raw:
            raise ConfigError(f"k_nn must lie in [1, n_raw), got {self.k_nn}")
        if self.m_refined < self.n_raw:
            raise ConfigError("m_refined must be at least n_raw (GCN_ref samples n_raw refined points)")
        for name in ("lr", "batch_size", "joint_batch_size", "threads"):
            if getattr(self, name) < 0 or (name != "lr" and getattr(self, name) == 0):
                raise ConfigError(f"{name} must be positive")
        if self.alt_epochs < 0 or self.joint_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")

    @property
    def prn(self) -> PrnConfig:
        return PrnConfig(
            n_raw=self.n_raw, m_refined=self.m_refined, encoder_widths=self.encoder_widths,
            latent_dim=self.latent_dim, decoder_fc_widths=self.decoder_fc_widths,
            point_width=self.point_width, lambda_adv=self.lambda_adv, beta_mr=self.beta,
            non_saturating=self.non_saturating, single_resolution=self.single_resolution,
            canonical_frame=self.canonical_frame,
        )

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ", ".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            out.append(f"{f.name} = {v}")
        return "\n".join(out) + "\n"


ALIASES = {"lambda": "lambda_adv", "k": "k_nn", "N": "n_raw", "M": "m_refined", "decay": "lr_decay"}


def _coerce(name: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(x) for x in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def parse_overrides(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    changes = {}
    for key, value in pairs:
        key = ALIASES.get(key.strip(), key.strip())
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        changes[key] = _coerce(key, known[key], value)
    return base.replace(**changes)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key, value))
    return parse_overrides(pairs, base)


def load_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            return parse_config_text(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
