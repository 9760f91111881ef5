"""Run configuration: one YAML file of sections, validated before any compute.

Schema (every key optional; omitted keys take their defaults)::

    run:       name, out_root, seed
    corpus:    n_foreground_classes, n_images, image_size, pool_size,
               n_probe_instances, probe_test_fraction, glyph_size,
               background_pools, seed
    proposals: strategy, min_box_fraction, max_box_fraction, candidates_per_image
    paste:     scale_range, aspect_jitter_range, blend
    jitter:    iou_min, max_center_shift, max_scale_delta, max_attempts
    photo:     p_color_jitter, brightness, contrast, saturation, hue,
               p_grayscale, p_blur, blur_sigma, p_flip
    data:      query_pools, key_pools
    train:     batch_size, base_lr, momentum_sgd, weight_decay, epochs,
               max_steps, lr_schedule, warmup_steps, n_keys, snapshot_every,
               encoder_momentum, queue_size, save_queues, deterministic
    model:     stem_channels, stage_channels, blocks_per_stage, fpn_channels,
               head_channels, head_hidden, embed_dim, roi_size, sampling_ratio
    loss:      temperature, level_weights

``run.seed`` seeds training and the view stream.  Overrides are
``section.key=value`` strings whose values are parsed as YAML.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import yaml

from .contrastive import LossConfig
from .corpus import SyntheticCorpusConfig
from .cpj import PasteConfig, PhotoConfig
from .encoder import EncoderConfig
from .geometry import JitterConfig
from .proposals import ProposalGeneratorConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    """Every problem found in a configuration, one per line."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.violations))


@dataclass(frozen=True)
class RunSection:
    name: str = "codo"
    out_root: str = "runs"
    seed: int = 0


@dataclass(frozen=True)
class DataSection:
    query_pools: tuple[str, ...] | None = None
    key_pools: tuple[str, ...] | None = None


_TRAIN_FIELDS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name not in ("loss", "model", "seed"))

SECTIONS: dict[str, type] = {
    "run": RunSection,
    "corpus": SyntheticCorpusConfig,
    "proposals": ProposalGeneratorConfig,
    "paste": PasteConfig,
    "jitter": JitterConfig,
    "photo": PhotoConfig,
    "data": DataSection,
    "train": TrainConfig,
    "model": EncoderConfig,
    "loss": LossConfig,
}


def _allowed(section: str) -> tuple[str, ...]:
    if section == "train":
        return _TRAIN_FIELDS
    return tuple(f.name for f in dataclasses.fields(SECTIONS[section]))


Rule = Callable[[Any], bool]

# range rules checked field by field so every violation is reported at once
RULES: dict[tuple[str, str], tuple[Rule, str]] = {
    ("loss", "temperature"): (lambda v: v > 0, "must be > 0"),
    ("jitter", "iou_min"): (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    ("jitter", "max_attempts"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "n_keys"): (lambda v: v in (1, 3), "must be 1 (two views) or 3 (four views)"),
    ("train", "batch_size"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "epochs"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "max_steps"): (lambda v: v >= 0, "must be >= 0"),
    ("train", "base_lr"): (lambda v: v >= 0, "must be >= 0"),
    ("train", "encoder_momentum"): (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    ("train", "queue_size"): (lambda v: v >= 1, "must be >= 1"),
    ("train", "lr_schedule"): (lambda v: v in ("cosine", "step"), "must be 'cosine' or 'step'"),
    ("proposals", "candidates_per_image"): (lambda v: v >= 0, "must be >= 0"),
    ("proposals", "strategy"): (lambda v: v in ("energy_sampler", "graph_segmentation"), "unknown strategy"),
    ("corpus", "image_size"): (lambda v: v >= 32 and v % 32 == 0, "must be a positive multiple of 32"),
}


def _defaults(section: str) -> dict[str, Any]:
    obj = SECTIONS[section]()
    out = {}
    for name in _allowed(section):
        v = getattr(obj, name)
        out[name] = v.value if hasattr(v, "value") else v
    return out


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    """Match ``value`` to the type of ``default``; raises ValueError."""
    where = f"{section}.{key}"
    if default is None or isinstance(default, tuple):
        if value is None and default is None:
            return None
        if not isinstance(value, (list, tuple)):
            raise ValueError(f"{where}: expected a list, got {value!r}")
        if isinstance(default, tuple) and default and len(value) != len(default) and not isinstance(default[0], str):
            raise ValueError(f"{where}: expected {len(default)} items, got {len(value)}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValueError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValueError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValueError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ValueError(f"{where}: expected a string, got {value!r}")
        return value
    return value


@dataclass(frozen=True)
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    corpus: SyntheticCorpusConfig = field(default_factory=SyntheticCorpusConfig)
    proposals: ProposalGeneratorConfig = field(default_factory=ProposalGeneratorConfig)
    paste: PasteConfig = field(default_factory=PasteConfig)
    jitter: JitterConfig = field(default_factory=JitterConfig)
    photo: PhotoConfig = field(default_factory=PhotoConfig)
    data: DataSection = field(default_factory=DataSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(self.raw))


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


def _apply_override(doc: dict, override: str, violations: list[str]) -> None:
    if "=" not in override or "." not in override.split("=", 1)[0]:
        violations.append(f"override {override!r}: expected section.key=value")
        return
    path, value = override.split("=", 1)
    section, key = path.split(".", 1)
    doc.setdefault(section, {})
    if not isinstance(doc[section], dict):
        violations.append(f"{section}: expected a mapping")
        return
    doc[section][key] = yaml.safe_load(value)


def parse_and_validate(path: str | Path | None = None, overrides: Sequence[str] = ()) -> RunConfig:
    """Load, merge defaults, apply overrides and validate.

    Raises :class:`ConfigError` listing every violation found.
    """
    violations: list[str] = []
    doc: dict = {}
    if path is not None:
        text = Path(path).read_text()
        loaded = yaml.safe_load(text) if text.strip() else {}
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        doc = loaded
    doc = {k: dict(v) if isinstance(v, dict) else v for k, v in doc.items()}
    for ov in overrides:
        _apply_override(doc, ov, violations)

    merged: dict[str, dict] = {}
    for section in doc:
        if section not in SECTIONS:
            violations.append(f"unknown section {section!r}")
        elif not isinstance(doc[section], dict):
            violations.append(f"{section}: expected a mapping")
    for section in SECTIONS:
        given = doc.get(section) or {}
        if not isinstance(given, dict):
            continue
        defaults = _defaults(section)
        values = dict(defaults)
        for key, value in given.items():
            if key not in defaults:
                violations.append(f"{section}.{key}: unknown key")
                continue
            try:
                values[key] = _coerce(section, key, value, defaults[key])
            except ValueError as e:
                violations.append(str(e))
                continue
            rule = RULES.get((section, key))
            if rule and not rule[0](values[key]):
                violations.append(f"{section}.{key} = {value!r}: {rule[1]}")
        merged[section] = values
    if violations:
        raise ConfigError(violations)

    built: dict[str, Any] = {}
    for section, values in merged.items():
        if section == "train":
            continue
        try:
            built[section] = SECTIONS[section](**values)
        except (TypeError, ValueError) as e:
            violations.append(f"{section}: {e}")
    if not violations:
        try:
            built["train"] = TrainConfig(
                **merged["train"], seed=built["run"].seed, loss=built["loss"], model=built["model"]
            )
        except (TypeError, ValueError) as e:
            violations.append(f"train: {e}")
    if not violations:
        pools = set(built["corpus"].background_pools)
        for name in ("query_pools", "key_pools"):
            chosen = getattr(built["data"], name)
            if chosen is not None and not set(chosen) <= pools:
                violations.append(f"data.{name}: unknown pools {sorted(set(chosen) - pools)}")
    if violations:
        raise ConfigError(violations)
    built.pop("loss")
    built.pop("model")
    return RunConfig(**built, raw=json.loads(json.dumps(merged)))
