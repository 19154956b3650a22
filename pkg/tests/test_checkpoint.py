import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from frskd.checkpoint import CheckpointError, CheckpointState, load_checkpoint, save_checkpoint


def sample_state(rng):
    return CheckpointState(
        config_text="train.epochs = 3\n",
        epoch=2,
        params={"a.weight": rng.standard_normal((3, 2, 1, 1)).astype(np.float32),
                "b": rng.standard_normal(5)},
        buffers={"bn.running_mean": np.zeros(4, np.float32)},
        momentum={"a.weight": rng.standard_normal((3, 2, 1, 1)).astype(np.float32),
                  "b": np.zeros(5)},
        rng={"shuffle_seed": 7, "augment_seed": 9},
        extra={"normalization": {"mean": [0.1, 0.2, 0.3], "std": [1.0, 1.0, 1.0]}},
    )


def same(a: CheckpointState, b: CheckpointState) -> bool:
    if (a.config_text, a.epoch, a.rng, a.extra) != (b.config_text, b.epoch, b.rng, b.extra):
        return False
    for x, y in ((a.params, b.params), (a.buffers, b.buffers), (a.momentum, b.momentum)):
        if list(x) != list(y):
            return False
        if any(x[k].dtype != y[k].dtype or x[k].tobytes() != y[k].tobytes() for k in x):
            return False
    return True


def test_round_trip(tmp_path, rng):
    s = sample_state(rng)
    assert same(load_checkpoint(save_checkpoint(tmp_path / "c.frsk", s)), s)


def test_layout(tmp_path, rng):
    raw = save_checkpoint(tmp_path / "c.frsk", sample_state(rng)).read_bytes()
    magic, version, hlen = struct.unpack_from("<4sIQ", raw)
    assert magic == b"FRSK" and version == 1
    header = json.loads(raw[16:16 + hlen])
    start = (16 + hlen + 7) & ~7
    entry = next(e for e in header["tensors"] if e["name"] == "b" and e["group"] == "param")
    assert entry["offset"] % 8 == 0 and entry["dtype"] == "<f8"
    stored = np.frombuffer(raw[start + entry["offset"]:start + entry["offset"] + entry["nbytes"]], "<f8")
    assert stored.size == 5


def test_save_is_byte_stable(tmp_path, rng):
    s = sample_state(rng)
    a = save_checkpoint(tmp_path / "a.frsk", s).read_bytes()
    b = save_checkpoint(tmp_path / "b.frsk", s).read_bytes()
    assert a == b
    assert not (tmp_path / "a.frsk.tmp").exists()


@pytest.mark.parametrize("mutate", [
    lambda raw: b"XXXX" + raw[4:],
    lambda raw: raw[:4] + struct.pack("<I", 99) + raw[8:],
    lambda raw: raw[:10],
    lambda raw: raw[:-8],
])
def test_corrupt_files(tmp_path, rng, mutate):
    p = save_checkpoint(tmp_path / "c.frsk", sample_state(rng))
    p.write_bytes(mutate(p.read_bytes()))
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "none.frsk")


@settings(max_examples=30)
@given(st.lists(st.tuples(st.sampled_from(["f4", "f8", "i8"]), st.lists(st.integers(0, 4), max_size=3)),
                min_size=0, max_size=5), st.integers(0, 10_000))
def test_arbitrary_tables_round_trip(specs, epoch):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(epoch)
    params = {f"p{i}": (rng.standard_normal(shape) * 100).astype(dt) for i, (dt, shape) in enumerate(specs)}
    s = CheckpointState("x = 1\n", epoch, params=params)
    with tempfile.TemporaryDirectory() as d:
        assert same(load_checkpoint(save_checkpoint(Path(d) / "c.frsk", s)), s)
