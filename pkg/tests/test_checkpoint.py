import json
import struct

import numpy as np
import pytest

from wattnet import checkpoint
from wattnet.errors import CheckpointError
from wattnet.model import ArchConfig, build


@pytest.fixture
def saved(tmp_path, rng):
    model = build(ArchConfig(d=3, k=2, input_shape=(16, 16, 3), num_classes=4), seed=3)
    model.stage2.block.expand.bn.running_mean[...] = rng.standard_normal(model.stage2.block.expand.bn.channels)
    path = tmp_path / "m.ckpt"
    checkpoint.save(model, path, {"seed": 9})
    return model, path


class TestCheckpoint:
    def test_round_trip(self, saved):
        model, path = saved
        loaded, header = checkpoint.load(path)
        assert loaded.config == model.config and header["extra"] == {"seed": 9}
        for (n1, a), (n2, b) in zip(model.state_arrays(), loaded.state_arrays()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_layout(self, saved):
        model, path = saved
        buf = path.read_bytes()
        assert buf[:4] == b"WATT"
        version, hlen = struct.unpack("<II", buf[4:12])
        header = json.loads(buf[12 : 12 + hlen])
        assert version == 1 and header["arch"]["d"] == 3
        names = [t["name"] for t in header["tensors"]]
        assert names == [n for n, _ in model.state_arrays()]
        first = np.frombuffer(buf, "<f4", count=4, offset=12 + hlen)
        np.testing.assert_array_equal(first, model.state_arrays()[0][1].ravel()[:4])
        assert len(buf) == 12 + hlen + 4 * sum(a.size for _, a in model.state_arrays())

    def test_same_outputs_after_reload(self, saved, rng):
        model, path = saved
        loaded, _ = checkpoint.load(path)
        x = rng.uniform(0, 1, (2, 3, 16, 16)).astype(np.float32)
        np.testing.assert_array_equal(model.eval()(x).data, loaded(x).data)

    @pytest.mark.parametrize("damage", ["magic", "version", "truncate", "trailing", "header"])
    def test_corruption(self, saved, damage):
        _, path = saved
        buf = bytearray(path.read_bytes())
        if damage == "magic":
            buf[:4] = b"XXXX"
        elif damage == "version":
            buf[4:8] = struct.pack("<I", 99)
        elif damage == "truncate":
            buf = buf[:-7]
        elif damage == "trailing":
            buf += b"\0"
        else:
            buf[12] = 0xFF
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointError):
            checkpoint.load(path)
