import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mde_harden.geometry import reconstruct_view, warp_field
from mde_harden.io import (ContainerError, MAGIC, decode_tensors, encode_tensors, read_png, read_tensor_container,
                           write_png, write_tensor_container)
from mde_harden.scenes import (SyntheticSceneSpec, generate_dataset, generate_scene, generate_scenes, load_dataset,
                               load_scene, regenerate_from_manifest, save_scene, split_by_parity)
from mde_harden.validation import validate_json_file


# -- tensor container -------------------------------------------------------------

def test_round_trip_is_bit_exact(tmp_path, rng):
    t = {"a": rng.normal(size=(3, 4, 5)).astype(np.float32), "scalar": np.float32(2.5).reshape(()),
         "empty": np.zeros((0, 3), np.float32), "ünï": rng.random(7).astype(np.float32)}
    write_tensor_container(tmp_path / "x.dht", t)
    back = read_tensor_container(tmp_path / "x.dht")
    assert list(back) == list(t)
    for k in t:
        assert back[k].dtype == np.float32 and back[k].shape == t[k].shape
        assert back[k].tobytes() == t[k].tobytes()


@given(arrays(np.float32, st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(width=32, allow_nan=True, allow_infinity=True)))
def test_round_trip_property(a):
    back = decode_tensors(encode_tensors({"t": a}))["t"]
    assert back.shape == a.shape and back.tobytes() == a.tobytes()


def test_layout_is_little_endian():
    blob = encode_tensors({"w": np.array([1.0], np.float32)})
    assert blob[:4] == b"DHT1"
    assert struct.unpack("<I", blob[4:8]) == (1,)
    assert struct.unpack("<H", blob[8:10]) == (1,) and blob[10:11] == b"w"
    assert struct.unpack("<II", blob[11:19]) == (1, 1)
    assert blob[19:23] == np.array([1.0], "<f4").tobytes()


def test_empty_container():
    blob = encode_tensors({})
    assert blob == MAGIC + b"\x00\x00\x00\x00"
    assert decode_tensors(blob) == {}


def test_bad_magic_rejected(tmp_path):
    (tmp_path / "x.dht").write_bytes(b"XXXX" + encode_tensors({})[4:])
    with pytest.raises(ContainerError, match="magic"):
        read_tensor_container(tmp_path / "x.dht")


def test_truncated_and_trailing_rejected():
    blob = encode_tensors({"a": np.ones((2, 2), np.float32)})
    with pytest.raises(ContainerError, match="truncated"):
        decode_tensors(blob[:-1])
    with pytest.raises(ContainerError, match="trailing"):
        decode_tensors(blob + b"\x00")


def test_dimension_overflow_rejected():
    blob = MAGIC + struct.pack("<IH", 1, 1) + b"a" + struct.pack("<I", 2) + struct.pack("<II", 2**20, 2**20)
    with pytest.raises(ContainerError, match="overflow"):
        decode_tensors(blob)


def test_png_round_trip(tmp_path, rng):
    img = np.round(rng.random((3, 5, 7)) * 255) / 255
    write_png(tmp_path / "a.png", img)
    assert np.allclose(read_png(tmp_path / "a.png"), img, atol=1e-6)
    m = rng.random((5, 7)) > 0.5
    write_png(tmp_path / "m.png", m.astype(float))
    assert np.array_equal(read_png(tmp_path / "m.png", mask=True), m)


# -- synthetic scenes ----------------------------------------------------------------

def test_same_seed_same_scene(spec):
    a, b = generate_scene(spec, 17), generate_scene(spec, 17)
    assert np.array_equal(a.I0_t, b.I0_t) and np.array_equal(a.I0_s, b.I0_s) and np.array_equal(a.depth, b.depth)
    assert not np.array_equal(a.I0_t, generate_scene(spec, 18).I0_t)


def test_zero_baseline_gives_identical_views():
    s = generate_scene(SyntheticSceneSpec(baseline=0.0), 3)
    assert np.array_equal(s.I0_s, s.I0_t)


def test_invalid_spec():
    with pytest.raises(ValueError):
        SyntheticSceneSpec(baseline=-1.0)
    with pytest.raises(ValueError):
        SyntheticSceneSpec(quad_depth=(5.0, 200.0))


def test_stereo_pose_and_depth_range(spec):
    s = generate_scene(spec, 5)
    assert np.allclose(s.T_t2s.t, [-0.54, 0, 0]) and np.allclose(s.T_t2s.R, np.eye(3))
    assert np.all((s.depth > 0.1) & (s.depth < 100))


def test_reconstruction_consistency_over_100_scenes(spec):
    errs = []
    for s in generate_scenes(spec, 100, seed=11):
        wf = warp_field(s.depth.astype(np.float64), s.T_t2s, s.K)
        grid = np.stack([wf.u, wf.v], axis=-1)[None].astype(np.float32)
        recon, valid = reconstruct_view(s.I0_s[None], grid, wf.valid[None])
        m = valid[0] & s.visible
        errs.append(np.abs(recon.data[0] - s.I0_t)[:, m].mean())
    assert max(errs) <= 2 / 255


def test_depth_histogram_covers_5_to_40(spec):
    d = np.concatenate([s.depth.ravel() for s in generate_scenes(spec, 100, seed=2)])
    hist, _ = np.histogram(d, bins=7, range=(5.0, 40.0))
    assert np.all(hist > 0)


def test_scene_round_trip(tmp_path, spec):
    s = generate_scene(spec, 9, name="x")
    save_scene(s, tmp_path / "x")
    back = load_scene(tmp_path / "x")
    assert np.allclose(back.I0_t, s.I0_t, atol=0.5 / 255 + 1e-7)
    assert np.array_equal(back.depth, s.depth)
    assert np.allclose(back.T_t2s.matrix, s.T_t2s.matrix) and back.K == s.K


def test_missing_scene_file_named(tmp_path, spec):
    save_scene(generate_scene(spec, 1), tmp_path / "s")
    (tmp_path / "s" / "pose.json").unlink()
    with pytest.raises(FileNotFoundError, match="pose.json"):
        load_scene(tmp_path / "s")


def test_dataset_manifest_and_regeneration(tmp_path, spec):
    m = generate_dataset(spec, 10, 4, tmp_path / "a")
    dirs = sorted(p.name for p in (tmp_path / "a").iterdir() if p.is_dir())
    assert len(dirs) == 10 and m["count"] == 10
    validate_json_file(tmp_path / "a" / "manifest.json", "dataset_manifest")
    regenerate_from_manifest(tmp_path / "a" / "manifest.json", tmp_path / "b")
    for p in sorted((tmp_path / "a").rglob("*")):
        if p.is_file():
            assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()


def test_split_by_parity_is_disjoint(tmp_path, spec):
    generate_dataset(spec, 6, 0, tmp_path)
    train, ev = load_dataset(tmp_path, "train"), load_dataset(tmp_path, "eval")
    assert [s.name for s in train] == ["scene_0000", "scene_0002", "scene_0004"]
    assert not {s.name for s in train} & {s.name for s in ev}
    a, b = split_by_parity(list(range(7)))
    assert a == [0, 2, 4, 6] and b == [1, 3, 5]


def test_dataset_without_manifest_loads(tmp_path, spec):
    for i in range(3):
        save_scene(generate_scene(spec, i), tmp_path / f"s{i}")
    assert len(load_dataset(tmp_path)) == 3
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")


def test_generate_dataset_rejects_zero_count(tmp_path, spec):
    with pytest.raises(ValueError):
        generate_dataset(spec, 0, 0, tmp_path)
