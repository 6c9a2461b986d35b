"""
Run configuration files and the named direct-optimization presets.

A run config is a JSON document:

    {
      "problem": {"K": 4, "class_counts": [100, 100, 100, 100], "widths": [64, 64, 64],
                  "loss": "mse", "bias": "none",
                  "lambdas": {"w": [5e-4, 5e-4, 5e-4], "h": 5e-4}},
      "train":   {"lr": 0.1, "iterations": 30000, "record_stride": 100, "seed": 0},
      "outputs": {"dir": "runs/balanced_M3"}
    }
"""

import copy
import json
import logging
from dataclasses import dataclass

from errors import ArgumentError, ConfigError
from trainer import DEFAULT_GRAD_TOL, DEFAULT_RECORD_STRIDE, TrainConfig
from ufm_model import BiasMode, LossKind, ProblemSpec

logger = logging.getLogger(__name__)

# ===============================================================
#  CONFIGURATION
# ===============================================================

TRAIN_DEFAULTS = {
    "record_stride": DEFAULT_RECORD_STRIDE,
    "grad_tol": DEFAULT_GRAD_TOL,
    "seed": 0,
    "require_monotone": False,
}

TOLERANCE_DEFAULTS = {
    "compare": 1e-3,
}

_SCHEMA = {
    "problem": {
        "required": {"K", "class_counts", "widths", "lambdas"},
        "optional": {"loss", "bias"},
    },
    "problem.lambdas": {
        "required": {"w", "h"},
        "optional": {"b"},
    },
    "train": {
        "required": {"lr", "iterations"},
        "optional": {"lr_decay", "record_stride", "seed", "grad_tol", "require_monotone"},
    },
    "train.lr_decay": {
        "required": {"factor", "every"},
        "optional": set(),
    },
    "outputs": {
        "required": {"dir"},
        "optional": set(),
    },
}


@dataclass(frozen=True)
class RunConfig:
    spec: ProblemSpec
    train: TrainConfig
    output_dir: str
    raw: dict


# ===============================================================
#  PARSING
# ===============================================================

def _check_keys(section, path):
    if not isinstance(section, dict):
        raise ConfigError(path, "expected an object")
    schema = _SCHEMA[path]
    for key in section:
        if key not in schema["required"] | schema["optional"]:
            raise ConfigError(f"{path}.{key}", "unknown key")
    for key in sorted(schema["required"]):
        if key not in section:
            raise ConfigError(f"{path}.{key}", "missing required key")


def _number(value, path, kind=float):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number, got {value!r}")
    if kind is int:
        if int(value) != value:
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return int(value)
    return float(value)


def _number_list(value, path, kind=float):
    if not isinstance(value, list) or not value:
        raise ConfigError(path, "expected a nonempty list")
    return [_number(v, f"{path}[{i}]", kind) for i, v in enumerate(value)]


def _choice(value, path, enum):
    try:
        return enum(value)
    except ValueError:
        allowed = ", ".join(repr(member.value) for member in enum)
        raise ConfigError(path, f"expected one of {allowed}, got {value!r}") from None


def parse_problem(section):
    _check_keys(section, "problem")
    lambdas = section["lambdas"]
    _check_keys(lambdas, "problem.lambdas")

    bias_mode = _choice(section.get("bias", "none"), "problem.bias", BiasMode)
    lambda_b = 0.0
    if "b" in lambdas:
        lambda_b = _number(lambdas["b"], "problem.lambdas.b")
    if bias_mode is BiasMode.LAST_REGULARIZED and "b" not in lambdas:
        raise ConfigError("problem.lambdas.b", "required when bias is 'last_reg'")

    try:
        return ProblemSpec(
            K=_number(section["K"], "problem.K", int),
            class_counts=tuple(_number_list(section["class_counts"], "problem.class_counts", int)),
            widths=tuple(_number_list(section["widths"], "problem.widths", int)),
            lambda_w=tuple(_number_list(lambdas["w"], "problem.lambdas.w")),
            lambda_h=_number(lambdas["h"], "problem.lambdas.h"),
            loss=_choice(section.get("loss", "mse"), "problem.loss", LossKind),
            bias_mode=bias_mode,
            lambda_b=lambda_b,
        )
    except ArgumentError as exc:
        raise ConfigError("problem", str(exc)) from exc


def parse_train(section):
    _check_keys(section, "train")
    lr_decay = None
    if "lr_decay" in section:
        decay = section["lr_decay"]
        _check_keys(decay, "train.lr_decay")
        lr_decay = (_number(decay["factor"], "train.lr_decay.factor"),
                    _number(decay["every"], "train.lr_decay.every", int))

    require_monotone = section.get("require_monotone", TRAIN_DEFAULTS["require_monotone"])
    if not isinstance(require_monotone, bool):
        raise ConfigError("train.require_monotone", "expected true or false")

    try:
        return TrainConfig(
            lr=_number(section["lr"], "train.lr"),
            iterations=_number(section["iterations"], "train.iterations", int),
            lr_decay=lr_decay,
            record_stride=_number(section.get("record_stride", TRAIN_DEFAULTS["record_stride"]),
                                  "train.record_stride", int),
            grad_tol=_number(section.get("grad_tol", TRAIN_DEFAULTS["grad_tol"]), "train.grad_tol"),
            seed=_number(section.get("seed", TRAIN_DEFAULTS["seed"]), "train.seed", int),
            require_monotone=require_monotone,
        )
    except ArgumentError as exc:
        raise ConfigError("train", str(exc)) from exc


def parse_run_config(document):
    if not isinstance(document, dict):
        raise ConfigError("", "top level must be a JSON object")
    for key in document:
        if key not in ("problem", "train", "outputs"):
            raise ConfigError(key, "unknown key")
    for key in ("problem", "train"):
        if key not in document:
            raise ConfigError(key, "missing required section")

    outputs = document.get("outputs", {"dir": "."})
    _check_keys(outputs, "outputs")
    if not isinstance(outputs["dir"], str):
        raise ConfigError("outputs.dir", "expected a string")

    return RunConfig(
        spec=parse_problem(document["problem"]),
        train=parse_train(document["train"]),
        output_dir=outputs["dir"],
        raw=document,
    )


def load_run_config(path):
    try:
        with open(path) as f:
            document = json.load(f)
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path} is not valid JSON (line {exc.lineno}: {exc.msg})") from exc
    config = parse_run_config(document)
    logger.debug("loaded %s: K=%d M=%d N=%d", path, config.spec.K, config.spec.M, config.spec.N)
    return config


# ===============================================================
#  PRESETS
# ===============================================================

def _problem(K, counts, width, depth, lam, loss="mse", bias="none"):
    return {
        "K": K,
        "class_counts": list(counts),
        "widths": [width] * depth,
        "loss": loss,
        "bias": bias,
        "lambdas": {"w": [lam] * depth, "h": lam},
    }


# Directions that carry no signal (and the split between the bias and the
# global feature mean) only shrink through weight decay, by a factor of
# (1 - lr * lambda) per iteration, so lr * iterations sets how far they get.
PRESETS = {
    "balanced": {
        "problem": dict(K=4, counts=[100] * 4, width=64, lam=5e-4),
        "train": {"lr": 0.25, "iterations": 80000, "record_stride": 500, "seed": 0},
    },
    "balanced_bias": {
        "problem": dict(K=4, counts=[100] * 4, width=64, lam=5e-4, bias="last_unreg"),
        "train": {"lr": 0.25, "iterations": 80000, "record_stride": 500, "seed": 0},
    },
    "imbalanced": {
        "problem": dict(K=4, counts=[200, 100, 50, 50], width=64, lam=5e-4),
        "train": {"lr": 0.25, "iterations": 80000, "record_stride": 500, "seed": 0},
    },
    "minority_collapse": {
        "problem": dict(K=4, counts=[2000, 495, 495, 10], width=16, lam=2e-3),
        "train": {"lr": 1.0, "iterations": 50000, "record_stride": 500, "seed": 0},
    },
    "ce_balanced": {
        "problem": dict(K=4, counts=[100] * 4, width=256, lam=5e-4, loss="ce", bias="last_unreg"),
        "train": {"lr": 0.25, "iterations": 80000, "record_stride": 500, "seed": 0},
    },
    "plain_toy": {
        "problem": dict(K=2, counts=[3, 1], width=2, lam=0.05),
        "train": {"lr": 0.1, "iterations": 50000, "record_stride": 1000, "seed": 0, "grad_tol": 1e-12},
    },
}


def preset_config(name, depth=1, output_dir=None):
    """RunConfigFile document for a named preset at the given depth."""
    if name not in PRESETS:
        raise ArgumentError(f"unknown preset {name!r}; choose from {', '.join(sorted(PRESETS))}")
    if depth < 1:
        raise ArgumentError(f"depth must be >= 1, got {depth}")
    preset = copy.deepcopy(PRESETS[name])
    return {
        "problem": _problem(depth=depth, **preset["problem"]),
        "train": preset["train"],
        "outputs": {"dir": output_dir or f"runs/{name}_M{depth}"},
    }


def with_depth(document, depth):
    """Copy of a config document with every layer list resized to `depth` layers."""
    document = copy.deepcopy(document)
    try:
        problem = document["problem"]
        problem["widths"] = [problem["widths"][0]] * depth
        problem["lambdas"]["w"] = [problem["lambdas"]["w"][0]] * depth
    except (KeyError, IndexError, TypeError) as exc:
        raise ConfigError("problem", f"cannot resize layers: missing {exc}") from exc
    base = document.get("outputs", {}).get("dir", ".")
    document["outputs"] = {"dir": f"{base}/M{depth}"}
    return document
