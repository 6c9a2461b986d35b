"""
File formats: NCDL binary checkpoints, trajectory CSV and JSON reports.

NCDL layout (all integers little-endian):

    b"NCDL" | u32 version (=1) | u32 matrix count
    per matrix: u16 name length | UTF-8 name | u64 rows | u64 cols | rows*cols <f8 values, row-major
"""

import json
import logging
import math
import os
import struct

import numpy as np
import pandas as pd

from errors import CheckpointError
from ufm_model import NetworkState

logger = logging.getLogger(__name__)

MAGIC = b"NCDL"
VERSION = 1
FLOAT_FORMAT = "%.17g"

_HEADER = struct.Struct("<4sII")
_NAME_LEN = struct.Struct("<H")
_SHAPE = struct.Struct("<QQ")


# ===============================================================
#  BINARY CHECKPOINTS
# ===============================================================

def write_checkpoint(path, matrices):
    """Write an ordered name -> 2-D array mapping."""
    chunks = [_HEADER.pack(MAGIC, VERSION, len(matrices))]
    for name, matrix in matrices.items():
        matrix = np.asarray(matrix, dtype=np.float64)
        if matrix.ndim != 2:
            raise CheckpointError(f"matrix {name!r} must be 2-D, got shape {matrix.shape}")
        encoded = name.encode("utf-8")
        chunks.append(_NAME_LEN.pack(len(encoded)))
        chunks.append(encoded)
        chunks.append(_SHAPE.pack(*matrix.shape))
        chunks.append(np.ascontiguousarray(matrix, dtype="<f8").tobytes())

    with open(path, "wb") as f:
        f.write(b"".join(chunks))
    logger.debug("wrote %d matrices to %s", len(matrices), path)


def _take(buffer, offset, size, what):
    end = offset + size
    if end > len(buffer):
        raise CheckpointError(f"checkpoint truncated while reading {what}")
    return buffer[offset:end], end


def read_checkpoint(path):
    """Read an NCDL file back into an ordered name -> array dict."""
    try:
        with open(path, "rb") as f:
            buffer = f.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    raw, offset = _take(buffer, 0, _HEADER.size, "header")
    magic, version, count = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path} is not an NCDL checkpoint (magic {magic!r})")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")

    matrices = {}
    for _ in range(count):
        raw, offset = _take(buffer, offset, _NAME_LEN.size, "name length")
        (name_len,) = _NAME_LEN.unpack(raw)
        raw, offset = _take(buffer, offset, name_len, "name")
        try:
            name = raw.decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: matrix name {raw!r} is not valid UTF-8") from None
        raw, offset = _take(buffer, offset, _SHAPE.size, f"shape of {name}")
        rows, cols = _SHAPE.unpack(raw)
        raw, offset = _take(buffer, offset, rows * cols * 8, f"values of {name}")
        matrices[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)

    if offset != len(buffer):
        raise CheckpointError(f"{len(buffer) - offset} trailing bytes after the last matrix")
    return matrices


def state_to_matrices(state):
    matrices = {f"W{m}": W for m, W in enumerate(state.weights, start=1)}
    matrices["H1"] = state.features
    if state.bias is not None:
        matrices["b"] = state.bias.reshape(-1, 1)
    return matrices


def matrices_to_state(matrices, spec):
    names = [f"W{m}" for m in range(1, spec.M + 1)] + ["H1"]
    if spec.has_bias:
        names.append("b")
    missing = [name for name in names if name not in matrices]
    if missing:
        raise CheckpointError(f"checkpoint is missing {', '.join(missing)}")

    bias = matrices["b"].ravel().copy() if spec.has_bias else None
    return NetworkState(
        weights=tuple(matrices[f"W{m}"].copy() for m in range(1, spec.M + 1)),
        features=matrices["H1"].copy(),
        bias=bias,
    )


def save_state(path, state):
    write_checkpoint(path, state_to_matrices(state))


def load_state(path, spec):
    return matrices_to_state(read_checkpoint(path), spec)


# ===============================================================
#  CSV / JSON
# ===============================================================

def write_trajectory_csv(trajectory, path):
    frame = trajectory.to_frame()
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT)
    return frame


def read_trajectory_csv(path):
    return pd.read_csv(path, float_precision="round_trip")


def to_jsonable(value):
    """numpy arrays/scalars to lists/floats; non-finite floats to None."""
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if math.isfinite(value) else None
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


def write_json(payload, path):
    with open(path, "w") as f:
        json.dump(to_jsonable(payload), f, indent=2)
        f.write("\n")


def read_json(path):
    with open(path) as f:
        return json.load(f)


def prediction_to_dict(prediction):
    spec = prediction.spec
    return {
        "K": spec.K,
        "M": spec.M,
        "class_counts": list(spec.class_counts),
        "loss": spec.loss,
        "bias": spec.bias_mode,
        "regime": prediction.regime,
        "geometry": prediction.geometry,
        "rank_cap": prediction.rank_cap,
        "constant_a": prediction.constant,
        "scalar_b": prediction.thresholds,
        "threshold": prediction.threshold,
        "x_star": prediction.x_star,
        "singular_values": prediction.singular_values,
        "tie_indices": list(prediction.tie_indices),
        "spectral_comparison": prediction.spectral,
        "predicted_loss": prediction.predicted_loss,
        "predicted_bias": prediction.predicted_bias,
        "target_W_gram": prediction.target_W_gram,
        "target_product_gram": prediction.target_product_gram,
        "target_H_gram": prediction.target_H_gram,
        "target_WH": prediction.target_WH,
        "notes": prediction.notes,
    }


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
