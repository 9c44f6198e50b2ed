import numpy as np
import pytest

from p4o.checkpoint import (CheckpointError, from_jsonable, load_arrays,
                            save_arrays, to_jsonable)
from p4o.rng import Rng


def test_array_roundtrip_preserves_bits_and_dtypes(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "w64": rng.normal(size=(3, 4)),
        "w32": rng.normal(size=(2, 5)).astype(np.float32),
        "obs": rng.integers(0, 256, size=(2, 3, 3)).astype(np.uint8),
        "scalar": np.array(3.5),
    }
    path = tmp_path / "x.ckpt"
    save_arrays(path, arrays, {"note": "hello", "n": 7})
    loaded, extra = load_arrays(path)
    assert extra == {"note": "hello", "n": 7}
    for name, arr in arrays.items():
        assert loaded[name].dtype == arr.dtype, name
        assert np.array_equal(loaded[name], arr), name


def test_header_is_human_readable(tmp_path):
    path = tmp_path / "x.ckpt"
    save_arrays(path, {"a": np.zeros(2)}, {})
    with open(path, "rb") as f:
        assert f.readline().startswith(b"P4O-CHECKPOINT v1")
        import json
        manifest = json.loads(f.readline())
    entry = manifest["arrays"][0]
    assert set(entry) == {"name", "shape", "offset", "dtype"}
    assert manifest["version"] == 1


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOT A CHECKPOINT\n{}\n")
    with pytest.raises(CheckpointError):
        load_arrays(path)


def test_truncated_blob_rejected(tmp_path):
    path = tmp_path / "x.ckpt"
    save_arrays(path, {"a": np.arange(8.0)}, {})
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(path)


def test_jsonable_roundtrip_of_generator_state():
    import json

    r = Rng(42, "env", 3)
    r.uniform(size=17)
    state = r.get_state()
    encoded = json.loads(json.dumps(to_jsonable(state)))
    restored = from_jsonable(encoded)
    r2 = Rng(0)
    r2.set_state(restored)
    assert np.array_equal(r.uniform(size=9), r2.uniform(size=9))
