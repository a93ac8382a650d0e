import json

import numpy as np
import pytest

from splatdepth.cli import main
from splatdepth.io import camera_to_dict, read_mesh_ply, read_pfm, save_cameras_json, save_splat_ply
from splatdepth.synthetic import orbit_cameras, sphere_scene


@pytest.fixture(scope="module")
def small_scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    scene = sphere_scene(200, rng=np.random.default_rng(0))
    save_splat_ply(scene, root / "scene.ply")
    cams = orbit_cameras(3, width=40, height=40)
    save_cameras_json([camera_to_dict(f"v{k}", c, f"v{k}.png") for k, c in enumerate(cams)], root / "cameras.json")
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_config_echo_is_first_line(capsys, small_scene, tmp_path):
    code, out, _ = run(capsys, "--seed", 3, "render", "--scene", small_scene / "scene.ply",
                       "--cameras", small_scene / "cameras.json", "--out", tmp_path)
    assert code == 0
    cfg = json.loads(out.splitlines()[0])
    assert cfg["seed"] == 3 and cfg["command"] == "render"


def test_render_outputs(capsys, small_scene, tmp_path):
    code, _, _ = run(capsys, "render", "--scene", small_scene / "scene.ply",
                     "--cameras", small_scene / "cameras.json", "--out", tmp_path)
    assert code == 0
    for suffix in ("color.png", "depth.pfm", "normal.pfm", "opacity.pfm"):
        assert (tmp_path / f"v0_{suffix}").exists()
    depth = read_pfm(tmp_path / "v1_depth.pfm")
    assert depth.shape == (40, 40)
    hit = depth > 0
    # 200 large discs: gaps show the far side and edge-on discs at the
    # silhouette extrapolate their depth plane, so only check the bulk
    assert np.mean((depth[hit] > 1.9) & (depth[hit] < 4.1)) > 0.99
    assert 2.0 < np.median(depth[hit]) < 2.5


def test_render_is_byte_identical_across_threads(capsys, small_scene, tmp_path):
    outs = []
    for threads in (1, 3):
        out = tmp_path / str(threads)
        assert run(capsys, "--threads", threads, "render", "--scene", small_scene / "scene.ply",
                   "--cameras", small_scene / "cameras.json", "--out", out)[0] == 0
        outs.append({p.name: p.read_bytes() for p in sorted(out.iterdir())})
    assert outs[0] == outs[1]


def test_missing_scene_exits_2(capsys, small_scene, tmp_path):
    code, _, err = run(capsys, "render", "--scene", tmp_path / "nope.ply",
                       "--cameras", small_scene / "cameras.json", "--out", tmp_path)
    assert code == 2 and "nope.ply" in err


def test_bad_arguments_exit_2(capsys, small_scene):
    with pytest.raises(SystemExit) as exc:
        main(["validate", "--scene", str(small_scene / "scene.ply"), "--cameras", "c.json", "--trials", "0"])
    assert exc.value.code == 2
    capsys.readouterr()


def test_validate_passes_and_fault_fails(capsys, small_scene):
    args = ["validate", "--scene", small_scene / "scene.ply", "--cameras", small_scene / "cameras.json",
            "--trials", 200, "--skip-gradients"]
    code, out, _ = run(capsys, *args)
    assert code == 0
    lines = out.splitlines()[1:]
    assert len(lines) == 3 and all(ln.startswith("PASS") for ln in lines)
    code, out, err = run(capsys, *args, "--inject-fault", "planarity")
    assert code == 3
    assert "FAIL planarity" in out and "planarity" in err


def test_mesh_command(capsys, small_scene, tmp_path):
    code, out, _ = run(capsys, "mesh", "--scene", small_scene / "scene.ply",
                       "--cameras", small_scene / "cameras.json", "--voxel-size", 0.1, "--out", tmp_path / "m.ply")
    assert code == 0
    assert "triangles=" in out
    assert len(read_mesh_ply(tmp_path / "m.ply")) > 0
    code, _, _ = run(capsys, "mesh", "--scene", small_scene / "scene.ply", "--cameras",
                     small_scene / "cameras.json", "--voxel-size", -1, "--out", tmp_path / "m.ply")
    assert code == 2


def test_synth_then_short_fit(capsys, tmp_path):
    assert run(capsys, "synth", "plane", "--out", tmp_path / "plane")[0] == 0
    fixture = json.loads((tmp_path / "plane" / "fixture.json").read_text())
    assert fixture["l1_threshold"] == 0.02
    code, out, err = run(capsys, "fit", "--targets", tmp_path / "plane", "--iters-phase1", 2, "--iters-phase2", 1,
                         "--out", tmp_path / "fit.ply")
    # three iterations cannot reach the fixture threshold
    assert code == 3 and "threshold" in err
    line = json.loads(out.splitlines()[-1])
    assert line["eval_split"] == "test" and "depth_mae" in line
    rows = (tmp_path / "fit.csv").read_text().splitlines()
    assert rows[0] == "iteration,L_c,L_d,L_n,total" and len(rows) == 4


def test_fit_without_bounds_exit_2(capsys, tmp_path):
    assert run(capsys, "synth", "plane", "--out", tmp_path / "p")[0] == 0
    (tmp_path / "p" / "fixture.json").unlink()
    code, _, err = run(capsys, "fit", "--targets", tmp_path / "p", "--out", tmp_path / "f.ply")
    assert code == 2 and "bounds" in err
