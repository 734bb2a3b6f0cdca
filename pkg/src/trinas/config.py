"""Experiment configuration: a single INI file drives every run.

The whole surface is one plain-text file with familiar ``[section]``
``key = value`` syntax (parsed by :mod:`configparser`, so it works on any
Python without extra dependencies). Every key has a default; a missing
file means "all defaults". Unknown sections or keys are hard errors, not
warnings, because a silently ignored typo in a hyperparameter name is the
most expensive failure mode a batch experiment can have.

``load_config`` resolves file + command-line overrides into an
:class:`ExperimentConfig`, whose ``config_hash`` (sha256 over the resolved
key/value lines, truncated) is stamped into every artifact the harness
writes. Two runs agree on the hash exactly when they agree on every
effective setting.
"""

import configparser
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np

from .cig import GeneratorSpec
from .data import (LabeledImageSet, Split, load_lfmc, stratified_split,
                   synth_blobs)
from .reweight import WeightingConfig
from .search_space import SupernetSpec
from .trilevel import RateSchedule, SearchSetup


class ConfigError(ValueError):
    """Bad configuration file or override (unknown key, bad value)."""


# -- schema --------------------------------------------------------------------
#
# type tags: int, float, bool, str, ops (comma list), opt_int / opt_str
# (empty string means "unset").

_SCHEMA = {
    "data": {
        "source": ("str", "blobs"),
        "test_source": ("opt_str", ""),
        "classes": ("int", 4),
        "per_class": ("int", 128),
        "test_per_class": ("int", 64),
        "size": ("int", 8),
        "channels": ("int", 1),
        "separation": ("float", 3.0),
        "noise_std": ("float", 1.0),
        "train_fraction": ("float", 0.5),
    },
    "supernet": {
        "cells": ("int", 2),
        "nodes": ("int", 4),
        "channels": ("int", 8),
        "ops": ("ops", ("sep_conv_3x3", "dil_conv_3x3", "max_pool_3x3",
                        "avg_pool_3x3", "zero", "identity")),
        "reduction": ("bool", False),
    },
    "generator": {
        "noise_dim": ("int", 8),
        "embed_dim": ("int", 4),
        "capacity": ("str", "small"),
        "base_channels": ("int", 8),
    },
    "weighting": {
        "lambda": ("float", 1.0),
        "synth_per_class": ("opt_int", None),
        "synthetic_only": ("bool", False),
        "normalize": ("bool", False),
    },
    "rates": {
        "w_max": ("float", 0.025),
        "w_min": ("float", 0.001),
        "arch": ("float", 3e-4),
        "gan": ("float", 2e-4),
        "momentum": ("float", 0.9),
        "weight_decay": ("float", 3e-4),
        "arch_weight_decay": ("float", 1e-3),
        "grad_clip": ("float", 5.0),
    },
    "run": {
        "epochs": ("int", 25),
        "batch_size": ("int", 32),
        "seed": ("int", 0),
        "mode": ("str", "second"),
        "hvp_eps": ("float", 0.01),
    },
    "eval": {
        "cells": ("int", 2),
        "channels": ("int", 8),
        "epochs": ("int", 50),
        "batch_size": ("int", 32),
        "w_max": ("float", 0.05),
        "w_min": ("float", 0.001),
        "augment_noise": ("float", 0.0),
    },
}


def _convert(section, key, kind, raw):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "opt_str":
            return raw or ""
        if kind == "opt_int":
            return int(raw) if raw else None
        if kind == "ops":
            names = tuple(p.strip() for p in raw.split(",") if p.strip())
            if not names:
                raise ValueError("empty op list")
            return names
    except ValueError:
        raise ConfigError(
            f"[{section}] {key}: cannot parse {raw!r} as {kind}") from None
    raise AssertionError(f"unhandled kind {kind}")


def _canon(value) -> str:
    """Stable text form of a resolved value (feeds the config hash)."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return ""
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class EvalSettings:
    """How the discretized architecture is retrained from scratch.

    ``augment_noise`` is the standard deviation of Gaussian noise added to
    each training batch (images stay clipped to [-1, 1]); 0 disables it.
    Retraining commonly uses heavier augmentation than the search phase.
    """

    cells: int = 2
    channels: int = 8
    epochs: int = 50
    batch_size: int = 32
    w_max: float = 0.05
    w_min: float = 0.001
    augment_noise: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    """All resolved settings for one experiment, plus their provenance hash."""

    values: dict = field(repr=False)
    net_spec: SupernetSpec = None
    gen_spec: GeneratorSpec = None
    weighting: WeightingConfig = None
    rates: RateSchedule = None
    evaluation: EvalSettings = None

    def __getitem__(self, dotted: str):
        return self.values[dotted]

    @property
    def config_hash(self) -> str:
        lines = [f"{k}={_canon(v)}" for k, v in sorted(self.values.items())]
        digest = hashlib.sha256("\n".join(lines).encode()).hexdigest()
        return digest[:16]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def search_setup(self) -> SearchSetup:
        v = self.values
        return SearchSetup(
            net_spec=self.net_spec,
            gen_spec=self.gen_spec,
            weighting=self.weighting,
            rates=self.rates,
            epochs=v["run.epochs"],
            batch_size=v["run.batch_size"],
            seed=v["run.seed"],
            hypergrad_mode=v["run.mode"],
            hvp_eps=v["run.hvp_eps"],
        )

    def load_data(self) -> tuple:
        """Materialize (Split, held-out LabeledImageSet or None).

        The blobs source generates ``per_class + test_per_class`` examples
        per class in one draw, peels the test rows off first, then splits
        the rest into train/validation. File sources load an LFMC container
        and take the held-out set from ``test_source`` when given.
        """
        v = self.values
        if v["data.source"] == "blobs":
            rng = np.random.default_rng([v["run.seed"], 0xB10B5])
            ds = synth_blobs(v["data.classes"],
                             v["data.per_class"] + v["data.test_per_class"],
                             size=v["data.size"],
                             separation=v["data.separation"],
                             noise_std=v["data.noise_std"],
                             channels=v["data.channels"], rng=rng)
            test_idx, pool_idx = [], []
            for c in range(ds.num_classes):
                idx = np.flatnonzero(ds.labels == c)
                test_idx.append(idx[:v["data.test_per_class"]])
                pool_idx.append(idx[v["data.test_per_class"]:])
            test = ds.subset(np.sort(np.concatenate(test_idx)))
            pool = ds.subset(np.sort(np.concatenate(pool_idx)))
        else:
            pool = load_lfmc(v["data.source"])
            if pool.num_classes != v["data.classes"]:
                raise ConfigError(
                    f"{v['data.source']} holds {pool.num_classes} classes, "
                    f"config says {v['data.classes']}")
            test = load_lfmc(v["data.test_source"]) if v["data.test_source"] \
                else None
        split_rng = np.random.default_rng([v["run.seed"], 0x59117])
        split = stratified_split(pool, v["data.train_fraction"], split_rng)
        return split, test


def _resolve(file_values: dict, overrides: dict) -> ExperimentConfig:
    values = {}
    for section, keys in _SCHEMA.items():
        for key, (kind, default) in keys.items():
            dotted = f"{section}.{key}"
            if dotted in file_values:
                values[dotted] = _convert(section, key, kind,
                                          file_values[dotted])
            else:
                values[dotted] = default
    for dotted, raw in (overrides or {}).items():
        if dotted not in values:
            raise ConfigError(f"override targets unknown key {dotted!r}")
        section, _, key = dotted.partition(".")
        kind = _SCHEMA[section][key][0]
        values[dotted] = _convert(section, key, kind, str(raw))

    v = values
    if v["run.mode"] not in ("first", "second"):
        raise ConfigError("[run] mode must be 'first' or 'second'")
    if v["generator.capacity"] not in ("tiny", "small", "medium"):
        raise ConfigError("[generator] capacity must be tiny, small or medium")
    in_shape = (v["data.size"], v["data.size"], v["data.channels"])
    try:
        net_spec = SupernetSpec(
            num_cells=v["supernet.cells"], num_nodes=v["supernet.nodes"],
            channels=v["supernet.channels"], num_classes=v["data.classes"],
            in_shape=in_shape, ops=v["supernet.ops"],
            use_reduction=v["supernet.reduction"])
        gen_spec = GeneratorSpec(
            num_classes=v["data.classes"], image_shape=in_shape,
            noise_dim=v["generator.noise_dim"],
            embed_dim=v["generator.embed_dim"],
            capacity=v["generator.capacity"],
            base_channels=v["generator.base_channels"])
        weighting = WeightingConfig(
            lam=v["weighting.lambda"],
            synth_per_class=v["weighting.synth_per_class"],
            synthetic_only=v["weighting.synthetic_only"],
            normalize=v["weighting.normalize"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    rates = RateSchedule(
        w_max=v["rates.w_max"], w_min=v["rates.w_min"], arch=v["rates.arch"],
        gan=v["rates.gan"], momentum=v["rates.momentum"],
        weight_decay=v["rates.weight_decay"],
        arch_weight_decay=v["rates.arch_weight_decay"],
        grad_clip=v["rates.grad_clip"])
    if v["eval.augment_noise"] < 0:
        raise ConfigError("[eval] augment_noise must be >= 0")
    evaluation = EvalSettings(
        cells=v["eval.cells"], channels=v["eval.channels"],
        epochs=v["eval.epochs"], batch_size=v["eval.batch_size"],
        w_max=v["eval.w_max"], w_min=v["eval.w_min"],
        augment_noise=v["eval.augment_noise"])
    return ExperimentConfig(values=values, net_spec=net_spec,
                            gen_spec=gen_spec, weighting=weighting,
                            rates=rates, evaluation=evaluation)


def load_config(path=None, overrides: dict = None) -> ExperimentConfig:
    """Read an INI file (or pure defaults when ``path`` is None).

    ``overrides`` maps dotted keys to raw strings, e.g.
    ``{"weighting.lambda": "2.0", "run.seed": "3"}``; they are applied
    after the file so command-line flags win. Unknown sections, keys or
    override targets raise :class:`ConfigError`.
    """
    file_values = {}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, "r", encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        for section in parser.sections():
            if section not in _SCHEMA:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in _SCHEMA[section]:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                file_values[f"{section}.{key}"] = raw
    return _resolve(file_values, overrides)


def default_config_text() -> str:
    """The full schema as a ready-to-edit INI file, defaults filled in."""
    out = io.StringIO()
    for section, keys in _SCHEMA.items():
        out.write(f"[{section}]\n")
        for key, (_, default) in keys.items():
            out.write(f"{key} = {_canon(default)}\n")
        out.write("\n")
    return out.getvalue()
