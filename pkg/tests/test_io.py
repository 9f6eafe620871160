import json
import struct

import numpy as np
import pytest

from gridflow.io import (
    GSEQ_MAGIC,
    FormatError,
    config_hash,
    decode_gseq,
    encode_gseq,
    read_checkpoint,
    read_gseq,
    sidecar_path,
    write_checkpoint,
    write_gseq,
)
from gridflow.scene import SensorNoise, ground_truth_flow, random_scenario, simulate


@pytest.fixture(scope="module")
def scene():
    return ground_truth_flow(simulate(random_scenario(4, sensor_noise=SensorNoise(0.02, 0.3))))


def test_header_layout(scene):
    blob = encode_gseq(scene)
    assert blob[:8] == b"GSEQ\x00\x01\x00\x00" == GSEQ_MAGIC
    w, h, n, ch = struct.unpack_from("<IIII", blob, 8)
    cell, dt = struct.unpack_from("<dd", blob, 24)
    assert (w, h, n, ch) == (24, 24, len(scene), 8)
    assert (cell, dt) == (0.5, 0.5)
    t, x, y, hd = struct.unpack_from("<dddd", blob, 40)
    assert t == 0.0 and (x, y, hd) == scene.frames[0].pose.as_tuple()
    first = np.frombuffer(blob, "<f4", count=24 * 24, offset=72).reshape(24, 24)
    assert np.array_equal(first, scene.frames[0].state.data[0].astype("<f4"))
    assert len(blob) == 40 + n * (32 + 4 * 8 * 24 * 24)


def test_absent_flow_is_nan(scene):
    _, _, frames = decode_gseq(encode_gseq(scene))
    assert np.all(np.isnan(frames[0][2][6:8]))
    assert not np.any(np.isnan(frames[1][2][6:8]))


def test_round_trip(tmp_path, scene):
    path = write_gseq(tmp_path / "s.gseq", scene, meta={"config_hash": "abc"})
    back = read_gseq(path)
    assert back.instances == scene.instances
    assert back.dt_s == scene.dt_s and back.geometry == scene.geometry
    for a, b in zip(scene.frames, back.frames):
        assert np.max(np.abs(a.state.data - b.state.data)) <= 1e-6
        assert np.max(np.abs(a.velocity.data - b.velocity.data)) <= 1e-5
        assert np.array_equal(a.semantic.data.astype("<f4"), b.semantic.data.astype("<f4"))
        assert (a.flow is None) == (b.flow is None)
        assert a.pose == b.pose
    side = json.loads(sidecar_path(path).read_text())
    assert set(side[0][0]) == {"id", "centroid", "corners", "dynamic"}
    assert json.loads((tmp_path / "s.meta.json").read_text())["config_hash"] == "abc"


def test_extra_plane_round_trip(tmp_path, scene):
    extra = [np.full(scene.geometry.shape, k / 10) for k in range(len(scene))]
    seq, got = read_gseq(write_gseq(tmp_path / "p.gseq", scene, extra_planes=extra), with_extra=True)
    assert np.allclose(np.stack(got), np.stack(extra), atol=1e-7)
    _, none = read_gseq(write_gseq(tmp_path / "q.gseq", scene), with_extra=True)
    assert none is None


def test_identical_bytes_across_runs(scene):
    again = ground_truth_flow(simulate(random_scenario(4, sensor_noise=SensorNoise(0.02, 0.3))))
    assert encode_gseq(scene) == encode_gseq(again)


def test_rejects_corrupt_files(scene):
    blob = encode_gseq(scene)
    with pytest.raises(FormatError):
        decode_gseq(b"XXXX" + blob[4:])
    with pytest.raises(FormatError):
        decode_gseq(blob[:-4])


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a.weight": rng.normal(size=(3, 2, 3, 3)).astype(np.float32), "b": np.float32([1.5])}
    path = write_checkpoint(tmp_path / "c.gfck", tensors, {"config_hash": "h", "seed": 1})
    back, manifest = read_checkpoint(path)
    assert list(back) == list(tensors)
    assert all(np.array_equal(back[k], v) for k, v in tensors.items())
    assert manifest == {"config_hash": "h", "seed": 1}
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "missing.gfck")


def test_config_hash_is_key_order_free():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})
