import numpy as np
import pytest

from bedmesh.containers import ContainerError, read_container, write_container


def _sample_arrays():
    rng = np.random.default_rng(0)
    return {
        "floats": rng.normal(size=(7, 3)).astype(np.float32),
        "ints": rng.integers(0, 100, size=(5,)).astype(np.int32),
        "bytes": rng.integers(0, 255, size=(2, 4)).astype(np.uint8),
    }


def test_roundtrip_bitwise(tmp_path):
    arrays = _sample_arrays()
    path = tmp_path / "data.zip"
    write_container(path, arrays, meta={"note": "x"}, kind="dataset")
    loaded, meta = read_container(path, kind="dataset")
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        assert np.array_equal(loaded[k], arrays[k])
    assert meta["note"] == "x"


def test_identical_content_gives_identical_bytes(tmp_path):
    arrays = _sample_arrays()
    a, b = tmp_path / "a.zip", tmp_path / "b.zip"
    write_container(a, arrays, meta={"seed": 3}, kind="dataset")
    write_container(b, arrays, meta={"seed": 3}, kind="dataset")
    assert a.read_bytes() == b.read_bytes()


def test_version_mismatch_rejected(tmp_path):
    import json
    import zipfile

    path = tmp_path / "old.zip"
    write_container(path, {"x": np.zeros(3)}, kind="dataset")
    # rewrite the meta record with a bogus version
    with zipfile.ZipFile(path) as zf:
        payload = {n: zf.read(n) for n in zf.namelist()}
    meta = json.loads(payload["meta.json"])
    meta["format_version"] = 999
    payload["meta.json"] = json.dumps(meta).encode()
    with zipfile.ZipFile(path, "w") as zf:
        for n, p in payload.items():
            zf.writestr(n, p)
    with pytest.raises(ContainerError, match="version"):
        read_container(path)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "t.zip"
    write_container(path, {"x": np.zeros(100)}, kind="dataset")
    path.write_bytes(path.read_bytes()[:40])
    with pytest.raises(ContainerError):
        read_container(path)


def test_wrong_kind_rejected(tmp_path):
    path = tmp_path / "k.zip"
    write_container(path, {"x": np.zeros(3)}, kind="dataset")
    with pytest.raises(ContainerError, match="kind"):
        read_container(path, kind="checkpoint")


def test_missing_file_rejected(tmp_path):
    with pytest.raises(ContainerError, match="no such"):
        read_container(tmp_path / "absent.zip")
