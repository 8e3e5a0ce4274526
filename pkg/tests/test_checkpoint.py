import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from vsm import checkpoint
from vsm.checkpoint import CheckpointError, dumps, loads
from vsm.data import synthetic_splits
from vsm.networks import EncoderConfig, NetworkConfig
from vsm.trainer import TrainConfig, evaluate, train

arrays_strategy = st.dictionaries(
    st.text(min_size=1, max_size=8),
    st.one_of(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
        hnp.arrays(np.int64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4)),
    ),
    max_size=5,
)


@given(arrays_strategy)
def test_round_trip_is_bitwise(arrays):
    back, meta = loads(dumps(arrays, {"k": [1, 2]}))
    assert meta == {"k": [1, 2]} and list(back) == list(arrays)
    for name, value in arrays.items():
        assert back[name].dtype == value.dtype and back[name].shape == value.shape
        assert back[name].tobytes() == value.tobytes()


def test_layout_is_little_endian():
    blob = dumps({"a": np.array([1.5], dtype=np.float64)})
    assert blob[:4] == b"VSMC"
    assert struct.unpack("<II", blob[4:12]) == (1, 1)
    assert struct.unpack("<I", blob[12:16]) == (1,) and blob[16:17] == b"a"
    assert struct.unpack("<BB", blob[17:19]) == (1, 1)
    assert struct.unpack("<Q", blob[19:27]) == (1,)
    assert struct.unpack("<d", blob[27:35]) == (1.5,)


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b[:-3], "truncated"),
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 99) + b[8:], "version"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:17] + bytes([9]) + b[18:], "dtype tag"),
    ],
)
def test_corrupt_containers_are_rejected(mutate, message):
    blob = dumps({"a": np.arange(3, dtype=np.int64)})
    with pytest.raises(CheckpointError, match=message):
        loads(mutate(blob))


def test_save_is_atomic(tmp_path):
    path = tmp_path / "c.vsmc"
    checkpoint.save(path, {"x": np.ones(2)}, {"m": 1})
    assert not (tmp_path / "c.vsmc.tmp").exists()
    assert checkpoint.load(path)[1] == {"m": 1}


def test_learner_round_trip_preserves_evaluation(tmp_path):
    data = synthetic_splits(n_train=6, n_val=3, n_test=4, d_img=8, samples_per_class=8)
    net = NetworkConfig(encoder=EncoderConfig(image_shape=(8, 8, 1), blocks=2, channels=4), hidden=8)
    cfg = TrainConfig(way=3, queries_per_class=2, tasks_per_batch=2, iterations=3, val_episodes=2,
                      eval_queries_per_class=2, n_memory_samples=2, n_prototype_samples=3)
    learner, _ = train(cfg, data, net)
    checkpoint.save_learner(learner, tmp_path / "c.vsmc")
    restored = checkpoint.load_learner(tmp_path / "c.vsmc")
    assert restored.step == learner.step and restored.episodes_seen == learner.episodes_seen
    for (name, a), b in zip(learner.named_parameters().items(), restored.named_parameters().values()):
        assert a.data.tobytes() == b.data.tobytes(), name
    np.testing.assert_array_equal(restored.store.keys, learner.store.keys)
    assert evaluate(restored, data["test"], 20).accuracy == evaluate(learner, data["test"], 20).accuracy
    # training continues identically from the restored state
    learner.train_step(data["train"])
    restored.train_step(data["train"])
    for a, b in zip(learner.named_parameters().values(), restored.named_parameters().values()):
        assert a.data.tobytes() == b.data.tobytes()


def test_missing_metadata():
    with pytest.raises(CheckpointError, match="metadata"):
        checkpoint.restore_learner({}, None)
