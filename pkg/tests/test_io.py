import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis.extra.numpy import arrays
from hypothesis import strategies as st

from splatdepth.errors import DataError, FormatError
from splatdepth.fusion import TriangleMesh
from splatdepth.io import (
    camera_to_dict,
    linear_to_srgb,
    load_cameras_json,
    load_splat_ply,
    read_image_png,
    read_mesh_ply,
    read_pfm,
    save_cameras_json,
    save_splat_ply,
    srgb_to_linear,
    write_depth_pfm,
    write_image_png,
    write_mesh,
)
from splatdepth.synthetic import random_camera, random_scene

FIELDS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
          "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def write_raw_ply(path, fields, rows, fmt="binary_little_endian"):
    arr = np.zeros(len(rows), dtype=[(f, "<f4") for f in fields])
    for i, row in enumerate(rows):
        arr[i] = tuple(row)
    head = ["ply", f"format {fmt} 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {f}" for f in fields] + ["end_header"]
    path.write_bytes(("\n".join(head) + "\n").encode() + arr.tobytes())


def good_row():
    return [0, 0, 1, 0.1, 0.2, 0.3, 0.0, -2, -2, -2, 1, 0, 0, 0]


# --- splat PLY --------------------------------------------------------------

@pytest.mark.parametrize("degree", [0, 1, 2, 3])
def test_ply_roundtrip(tmp_path, rng, degree):
    s = random_scene(rng, 7, sh_degree=degree)
    save_splat_ply(s, tmp_path / "s.ply")
    back = load_splat_ply(tmp_path / "s.ply")
    assert back.sh_degree == degree and back.count == 7
    # float32 storage
    np.testing.assert_allclose(back.splats.centers, s.centers, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(back.splats.scales, s.scales, rtol=1e-5)
    np.testing.assert_allclose(back.splats.opacities, s.opacities, rtol=1e-5)
    np.testing.assert_allclose(back.splats.sh, s.sh, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(np.abs(np.einsum("ij,ij->i", back.splats.rotations, s.rotations)), 1, atol=1e-6)


def test_ply_activations_frozen(tmp_path):
    write_raw_ply(tmp_path / "a.ply", FIELDS, [[1, 2, 3, 0.5, 0, 0, 0.0, np.log(0.25), 0, 0, 2, 0, 0, 0]])
    s = load_splat_ply(tmp_path / "a.ply").splats
    assert s.opacities[0] == 0.5
    np.testing.assert_allclose(s.scales[0], [0.25, 1, 1], rtol=1e-7)
    np.testing.assert_array_equal(s.rotations[0], [1, 0, 0, 0])
    np.testing.assert_allclose(s.sh[0, 0], [0.5, 0, 0])


def test_ply_rest_is_channel_major(tmp_path):
    fields = FIELDS + [f"f_rest_{k}" for k in range(9)]
    row = good_row() + list(range(1, 10))
    write_raw_ply(tmp_path / "r.ply", fields, [row])
    sh = load_splat_ply(tmp_path / "r.ply").splats.sh[0]
    # red channel holds f_rest_0..2, green 3..5, blue 6..8
    np.testing.assert_array_equal(sh[1:, 0], [1, 2, 3])
    np.testing.assert_array_equal(sh[1:, 2], [7, 8, 9])


@pytest.mark.parametrize("missing", ["opacity", "rot_3", "f_dc_1"])
def test_ply_missing_field_named(tmp_path, missing):
    fields = [f for f in FIELDS if f != missing]
    write_raw_ply(tmp_path / "m.ply", fields, [[0.5] * len(fields)])
    with pytest.raises(FormatError, match=missing):
        load_splat_ply(tmp_path / "m.ply")


def test_ply_bad_rest_count(tmp_path):
    fields = FIELDS + [f"f_rest_{k}" for k in range(5)]
    write_raw_ply(tmp_path / "b.ply", fields, [good_row() + [0] * 5])
    with pytest.raises(FormatError, match="f_rest"):
        load_splat_ply(tmp_path / "b.ply")


def test_ply_ascii_rejected(tmp_path):
    write_raw_ply(tmp_path / "t.ply", FIELDS, [good_row()], fmt="ascii")
    with pytest.raises(FormatError, match="binary_little_endian"):
        load_splat_ply(tmp_path / "t.ply")


def test_ply_truncated_and_magic(tmp_path):
    write_raw_ply(tmp_path / "t.ply", FIELDS, [good_row(), good_row()])
    data = (tmp_path / "t.ply").read_bytes()
    (tmp_path / "t.ply").write_bytes(data[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_splat_ply(tmp_path / "t.ply")
    (tmp_path / "x.ply").write_bytes(b"obj\n")
    with pytest.raises(FormatError, match="magic"):
        load_splat_ply(tmp_path / "x.ply")


@pytest.mark.parametrize(
    "column, value, match",
    [(0, np.nan, "center"), (6, 200.0, "opacity"), (7, 1e4, "scale"), (10, 0.0, "rotation")],
)
def test_ply_bad_values_name_splat(tmp_path, column, value, match):
    rows = [good_row(), good_row(), good_row()]
    rows[2][column] = value
    if column == 10:
        rows[2][10:14] = [0, 0, 0, 0]
    write_raw_ply(tmp_path / "v.ply", FIELDS, rows)
    with pytest.raises(DataError, match=f"splat 2.*{match}"):
        load_splat_ply(tmp_path / "v.ply")


# --- cameras ----------------------------------------------------------------

def camera_file(tmp_path, rng, n=2, **override):
    entries = []
    for k in range(n):
        (tmp_path / f"im{k}.png").write_bytes(b"")
        entries.append(camera_to_dict(f"c{k}", random_camera(rng, 16, 12), f"im{k}.png"))
    entries[-1].update(override)
    path = tmp_path / "cameras.json"
    path.write_text(json.dumps(entries))
    return path, entries


def test_camera_roundtrip(tmp_path, rng):
    path, entries = camera_file(tmp_path, rng)
    cams = load_cameras_json(path)
    assert [v.id for v in cams] == ["c0", "c1"]
    assert cams.views[0].image == tmp_path / "im0.png"
    np.testing.assert_allclose(cams.cameras[1].rotation.ravel(), entries[1]["rotation"], atol=1e-15)
    save_cameras_json([camera_to_dict(v.id, v.camera, v.image.name) for v in cams], tmp_path / "again.json")
    again = load_cameras_json(tmp_path / "again.json")
    assert again.cameras[0].translation.tolist() == cams.cameras[0].translation.tolist()


@pytest.mark.parametrize(
    "override, match",
    [
        (dict(fx=-1.0), "/1/fx"),
        (dict(rotation=[1, 0, 0]), "/1/rotation"),
        (dict(rotation=[1, 0, 0, 0, 1, 0, 0, 0, -1]), "not a proper rotation"),
        (dict(rotation=[1.1, 0, 0, 0, 1, 0, 0, 0, 1]), "not a proper rotation"),
        (dict(id="c0"), "duplicate"),
        (dict(image="nowhere.png"), "does not exist"),
        (dict(split="val"), "/1/split"),
    ],
)
def test_camera_errors_point_at_entry(tmp_path, rng, override, match):
    path, _ = camera_file(tmp_path, rng, **override)
    with pytest.raises(FormatError, match=match):
        load_cameras_json(path)


def test_camera_small_rotation_noise_is_repaired(tmp_path, rng):
    path, entries = camera_file(tmp_path, rng)
    rot = np.array(entries[1]["rotation"]) + 1e-5
    path, _ = camera_file(tmp_path, rng, rotation=rot.tolist())
    r = load_cameras_json(path).cameras[1].rotation
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)


def test_camera_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("[{")
    with pytest.raises(FormatError, match="invalid JSON"):
        load_cameras_json(tmp_path / "c.json")


# --- images and maps --------------------------------------------------------

@given(arrays(np.float64, 20, elements=st.floats(0.0, 1.0)))
def test_srgb_roundtrip(x):
    np.testing.assert_allclose(srgb_to_linear(linear_to_srgb(x)), x, atol=1e-12)


def test_png_roundtrip_within_quantization(tmp_path, rng):
    img = rng.uniform(size=(9, 11, 3))
    write_image_png(img, tmp_path / "a.png")
    back = read_image_png(tmp_path / "a.png")
    assert back.shape == img.shape
    np.testing.assert_allclose(linear_to_srgb(back), linear_to_srgb(img), atol=0.5 / 255 + 1e-12)


@pytest.mark.parametrize("shape", [(5, 7), (5, 7, 3)])
def test_pfm_roundtrip(tmp_path, rng, shape):
    a = rng.normal(size=shape).astype(np.float32)
    write_depth_pfm(a, tmp_path / "d.pfm")
    np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), a)


def test_pfm_layout_is_bottom_up(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    write_depth_pfm(a, tmp_path / "d.pfm")
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n2 2\n-1.0\n")
    np.testing.assert_array_equal(np.frombuffer(raw[-16:], "<f4"), [3, 4, 1, 2])


def test_pfm_errors(tmp_path):
    with pytest.raises(ValueError):
        write_depth_pfm(np.zeros((2, 2, 2)), tmp_path / "x.pfm")
    (tmp_path / "y.pfm").write_bytes(b"Pf\n4 4\n-1.0\n" + b"\0" * 8)
    with pytest.raises(FormatError, match="payload"):
        read_pfm(tmp_path / "y.pfm")


def test_mesh_writers(tmp_path):
    m = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], [[0, 1, 2], [0, 2, 3]])
    write_mesh(m, tmp_path / "m.ply")
    back = read_mesh_ply(tmp_path / "m.ply")
    np.testing.assert_array_equal(back.vertices, m.vertices)
    np.testing.assert_array_equal(back.triangles, m.triangles)
    write_mesh(m, tmp_path / "m.obj")
    lines = (tmp_path / "m.obj").read_text().splitlines()
    assert lines[0] == "v 0 0 0" and lines[-1] == "f 1 3 4"
    write_mesh(TriangleMesh.empty(), tmp_path / "e.ply")
    assert len(read_mesh_ply(tmp_path / "e.ply")) == 0
