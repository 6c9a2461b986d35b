import json
import struct

import numpy as np
import pytest

from checkpoint_io import (MAGIC, load_state, prediction_to_dict, read_checkpoint, read_trajectory_csv, save_state,
                           to_jsonable, write_checkpoint, write_json, write_trajectory_csv)
from conftest import make_spec
from errors import CheckpointError
from theory import predict
from trainer import TrainConfig, train
from ufm_model import init_state


def random_state(spec, seed):
    rng = np.random.default_rng(seed)
    state = init_state(spec, seed)
    if spec.has_bias:
        state = type(state)(weights=state.weights, features=state.features, bias=rng.standard_normal(spec.K))
    return state


# ===============================================================
#  NCDL CHECKPOINTS
# ===============================================================

@pytest.mark.parametrize("seed", range(100))
def test_state_survives_checkpoint(tmp_path, seed):
    rng = np.random.default_rng(seed)
    M = int(rng.integers(1, 4))
    K = int(rng.integers(2, 5))
    spec = make_spec(K=K, widths=tuple(int(w) for w in rng.integers(1, 6, size=M)),
                     bias="last_unreg" if seed % 2 else "none")
    state = random_state(spec, seed)
    path = tmp_path / "state.ncdl"
    save_state(path, state)
    restored = load_state(path, spec)
    for a, b in zip(state.parameters(), restored.parameters()):
        assert a.shape == b.shape
        assert np.array_equal(a, b)


def test_layout_is_little_endian(tmp_path):
    path = tmp_path / "one.ncdl"
    write_checkpoint(path, {"W1": np.array([[1.5, -2.0]])})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (2,)
    assert raw[14:16] == b"W1"
    assert struct.unpack("<QQ", raw[16:32]) == (1, 2)
    assert struct.unpack("<2d", raw[32:]) == (1.5, -2.0)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ncdl"
    path.write_bytes(b"NOPE" + bytes(8))
    with pytest.raises(CheckpointError, match="not an NCDL"):
        read_checkpoint(path)


def test_bad_version(tmp_path):
    path = tmp_path / "v2.ncdl"
    path.write_bytes(MAGIC + struct.pack("<II", 2, 0))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(path)


def test_truncated_and_trailing_bytes(tmp_path):
    path = tmp_path / "state.ncdl"
    write_checkpoint(path, {"W1": np.eye(2)})
    raw = path.read_bytes()
    path.write_bytes(raw[:-3])
    with pytest.raises(CheckpointError, match="truncated"):
        read_checkpoint(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_corrupt_name_bytes(tmp_path):
    path = tmp_path / "corrupt.ncdl"
    write_checkpoint(path, {"W1": np.eye(2)})
    raw = bytearray(path.read_bytes())
    raw[14:16] = b"\xff\xfe"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="UTF-8"):
        read_checkpoint(path)


def test_missing_matrix(tmp_path, small_spec):
    path = tmp_path / "partial.ncdl"
    write_checkpoint(path, {"W1": np.zeros((4, 4)), "H1": np.zeros((4, 6))})
    with pytest.raises(CheckpointError, match="W2, W3"):
        load_state(path, small_spec)


def test_missing_file(tmp_path, small_spec):
    with pytest.raises(CheckpointError):
        load_state(tmp_path / "absent.ncdl", small_spec)


# ===============================================================
#  CSV / JSON
# ===============================================================

def test_trajectory_csv_round_trip(tmp_path, small_spec):
    trajectory = train(small_spec, TrainConfig(lr=0.1, iterations=30, record_stride=10), flavor="of")
    path = tmp_path / "trajectory.csv"
    written = write_trajectory_csv(trajectory, path)
    restored = read_trajectory_csv(path)
    assert list(restored.columns) == list(written.columns)
    assert list(restored["iter"]) == [0, 10, 20, 30]
    for column in written.columns[1:]:
        assert np.max(np.abs(restored[column].to_numpy() - written[column].to_numpy())) <= 1e-15


def test_json_cleans_numpy_and_non_finite(tmp_path):
    payload = {"a": np.array([1.0, np.inf]), "b": np.float64(np.nan), "c": np.int64(3), "d": np.bool_(True)}
    assert to_jsonable(payload) == {"a": [1.0, None], "b": None, "c": 3, "d": True}
    path = tmp_path / "out.json"
    write_json(payload, path)
    assert json.loads(path.read_text())["a"] == [1.0, None]


def test_prediction_serializes(balanced_deep):
    document = to_jsonable(prediction_to_dict(predict(balanced_deep)))
    assert document["regime"] == "nontrivial"
    assert document["geometry"] == "OF"
    assert len(document["singular_values"]) == 4
    json.dumps(document)
