import json
import struct

import numpy as np
import pytest

from hifinet import archive
from hifinet.archive import ArchiveError
from hifinet.network import ABLATIONS, NetConfig, init_params, param_shapes


@pytest.mark.parametrize("name", sorted(ABLATIONS))
def test_roundtrip_bit_exact(tmp_path, name):
    params = init_params(11, ABLATIONS[name], dtype=np.float32)
    path = tmp_path / "w.hifiw"
    archive.save_weights(path, params, meta={"note": "x"})
    back = archive.load_weights(path)
    assert back.config == params.config
    assert list(back.tensors) == list(params.tensors)
    for n in params:
        assert back[n].data.dtype == np.float32
        assert back[n].data.tobytes() == params[n].data.tobytes()


def test_saving_loaded_weights_reproduces_file(tmp_path):
    params = init_params(2, dtype=np.float32)
    archive.save_weights(tmp_path / "a.hifiw", params)
    archive.save_weights(tmp_path / "b.hifiw", archive.load_weights(tmp_path / "a.hifiw"))
    assert (tmp_path / "a.hifiw").read_bytes() == (tmp_path / "b.hifiw").read_bytes()


def test_layout(tmp_path):
    arrays = {"a": np.array([1.0, -2.0], dtype=np.float32), "b": np.arange(6, dtype=np.float32).reshape(2, 3)}
    path = tmp_path / "x.hifiw"
    archive.save_archive(path, arrays, config={"use_haar": True}, meta={"k": 1})
    raw = path.read_bytes()
    assert raw[:8] == archive.MAGIC
    version, mlen = struct.unpack("<II", raw[8:16])
    assert version == archive.FORMAT_VERSION
    manifest = json.loads(raw[16:16 + mlen])
    assert [e["name"] for e in manifest["tensors"]] == ["a", "b"]
    assert manifest["tensors"][1] == {"name": "b", "shape": [2, 3], "dtype": "float32", "offset": 8, "nbytes": 24}
    start = 16 + mlen + (-(16 + mlen)) % 8
    assert start % 8 == 0
    assert raw[start:start + 8] == struct.pack("<2f", 1.0, -2.0)
    assert len(raw) == start + 32


def test_manifest_lists_canonical_names(tmp_path):
    params = init_params(0)
    archive.save_weights(tmp_path / "w.hifiw", params)
    manifest, _ = archive.read_manifest(tmp_path / "w.hifiw")
    assert [e["name"] for e in manifest["tensors"]] == [n for n, _ in param_shapes(NetConfig())]
    assert manifest["tensors"][0]["name"] == "rfm.rfu1.base_path.conv1.weight"
    assert manifest["config"]["use_cbam"] is True


def test_float64_params_are_stored_as_float32(tmp_path):
    params = init_params(0, dtype=np.float64)
    archive.save_weights(tmp_path / "w.hifiw", params)
    back = archive.load_weights(tmp_path / "w.hifiw", dtype=np.float64)
    name = "f3_proj.weight"
    np.testing.assert_array_equal(back[name].data, params[name].data.astype(np.float32))


def test_rejects_bad_files(tmp_path):
    (tmp_path / "junk").write_bytes(b"hello world, not weights")
    with pytest.raises(ArchiveError):
        archive.load_weights(tmp_path / "junk")
    params = init_params(0, dtype=np.float32)
    archive.save_weights(tmp_path / "w.hifiw", params)
    raw = (tmp_path / "w.hifiw").read_bytes()
    (tmp_path / "cut.hifiw").write_bytes(raw[:-100])
    with pytest.raises(ArchiveError):
        archive.load_weights(tmp_path / "cut.hifiw")
    (tmp_path / "v9.hifiw").write_bytes(raw[:8] + struct.pack("<I", 9) + raw[12:])
    with pytest.raises(ArchiveError):
        archive.load_weights(tmp_path / "v9.hifiw")
