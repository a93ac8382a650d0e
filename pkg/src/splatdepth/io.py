"""Readers and writers: 3DGS PLY scenes, camera JSON, PNG, PFM and meshes."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from .core import Camera, Gaussian3D, SplatSet, as_splat_set
from .errors import DataError, FormatError
from .fusion import TriangleMesh

PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}
REST_DEGREE = {0: 0, 9: 1, 24: 2, 45: 3}
ROTATION_TOL = 1e-3


# ---------------------------------------------------------------------------
# splat PLY
# ---------------------------------------------------------------------------

@dataclass
class SceneFile:
    splats: SplatSet
    sh_degree: int
    source: str | None = None

    @property
    def count(self) -> int:
        return len(self.splats)

    @property
    def gaussians(self) -> list[Gaussian3D]:
        return self.splats.to_gaussians()


def _read_header(fh) -> tuple[int, list[tuple[str, str]]]:
    first = fh.readline()
    if first.strip() != b"ply":
        raise FormatError("not a PLY file (missing 'ply' magic)")
    count, props, in_vertex, fmt = None, [], False, None
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header not terminated by end_header")
        words = line.decode("ascii", errors="replace").split()
        if not words or words[0] in ("comment", "obj_info"):
            continue
        if words[0] == "end_header":
            break
        if words[0] == "format":
            fmt = words[1] if len(words) > 1 else None
        elif words[0] == "element":
            if len(words) != 3:
                raise FormatError(f"bad element line: {line!r}")
            in_vertex = words[1] == "vertex"
            if in_vertex:
                count = int(words[2])
            elif count is None:
                raise FormatError(f"element '{words[1]}' before vertex element is not supported")
        elif words[0] == "property" and in_vertex:
            if words[1] == "list":
                raise FormatError("list properties in the vertex element are not supported")
            if words[1] not in PLY_TYPES:
                raise FormatError(f"unknown PLY property type '{words[1]}'")
            props.append((words[2], PLY_TYPES[words[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(f"unsupported PLY format '{fmt}', expected binary_little_endian")
    if count is None:
        raise FormatError("PLY has no vertex element")
    return count, props


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def load_splat_ply(path) -> SceneFile:
    """Load a 3DGS-layout PLY and apply the activation maps."""
    path = Path(path)
    with open(path, "rb") as fh:
        count, props = _read_header(fh)
        dtype = np.dtype([(name, "<" + t) for name, t in props])
        raw = fh.read(count * dtype.itemsize)
    if len(raw) < count * dtype.itemsize:
        raise FormatError(f"PLY payload truncated: expected {count} vertices")
    data = np.frombuffer(raw, dtype=dtype, count=count)
    names = set(dtype.names or ())
    required = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
                "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    for name in required:
        if name not in names:
            raise FormatError(f"PLY is missing required field '{name}'")
    n_rest = sum(1 for n in names if n.startswith("f_rest_"))
    if n_rest not in REST_DEGREE:
        raise FormatError(f"unsupported number of f_rest fields: {n_rest}")
    for k in range(n_rest):
        if f"f_rest_{k}" not in names:
            raise FormatError(f"PLY is missing required field 'f_rest_{k}'")
    degree = REST_DEGREE[n_rest]
    per = (degree + 1) ** 2 - 1

    def col(*fields):
        return np.column_stack([data[f].astype(np.float64) for f in fields]) if count else np.zeros((0, len(fields)))

    centers = col("x", "y", "z")
    dc = col("f_dc_0", "f_dc_1", "f_dc_2")
    rest = col(*(f"f_rest_{k}" for k in range(n_rest))) if n_rest else np.zeros((count, 0))
    # rest coefficients are stored channel-major: rest[c * per + k]
    sh = np.concatenate([dc[:, None, :], rest.reshape(count, 3, per).transpose(0, 2, 1)], 1)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        opac = _sigmoid(data["opacity"].astype(np.float64))
        scales = np.exp(col("scale_0", "scale_1", "scale_2"))
        q = col("rot_0", "rot_1", "rot_2", "rot_3")
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
    for name, arr in (("center", centers), ("color", sh), ("opacity", opac), ("scale", scales), ("rotation", q)):
        bad = ~np.isfinite(arr.reshape(count, -1)).all(1)
        if bad.any():
            raise DataError(f"splat {int(np.flatnonzero(bad)[0])}: non-finite {name} after activation")
    # sigmoid saturates to exactly 0 or 1 for extreme raw values
    sat = (opac <= 0) | (opac >= 1) | np.any(scales <= 0, axis=1)
    if sat.any():
        raise DataError(f"splat {int(np.flatnonzero(sat)[0])}: opacity or scale saturated after activation")
    return SceneFile(SplatSet(centers, q, scales, opac, sh), degree, str(path))


def save_splat_ply(scene, path) -> None:
    """Write raw (pre-activation) parameters in the 3DGS PLY layout."""
    s = scene.splats if isinstance(scene, SceneFile) else as_splat_set(scene)
    n, k = len(s), s.sh.shape[1]
    per = k - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * per)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    arr = np.zeros(n, dtype=[(nm, "<f4") for nm in names])
    for i, nm in enumerate("xyz"):
        arr[nm] = s.centers[:, i]
    for c in range(3):
        arr[f"f_dc_{c}"] = s.sh[:, 0, c]
        for j in range(per):
            arr[f"f_rest_{c * per + j}"] = s.sh[:, 1 + j, c]
    with np.errstate(divide="ignore"):
        arr["opacity"] = np.log(s.opacities) - np.log1p(-s.opacities)
        for i in range(3):
            arr[f"scale_{i}"] = np.log(s.scales[:, i])
    q = s.rotations / np.linalg.norm(s.rotations, axis=1, keepdims=True) if n else s.rotations
    for i in range(4):
        arr[f"rot_{i}"] = q[:, i]
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------

CAMERA_SCHEMA = {
    "type": "array",
    "items": {
        "type": "object",
        "required": ["id", "width", "height", "fx", "fy", "cx", "cy", "rotation", "translation", "image"],
        "properties": {
            "id": {"type": ["string", "integer"]},
            "width": {"type": "integer", "minimum": 1},
            "height": {"type": "integer", "minimum": 1},
            "fx": {"type": "number", "exclusiveMinimum": 0},
            "fy": {"type": "number", "exclusiveMinimum": 0},
            "cx": {"type": "number"},
            "cy": {"type": "number"},
            "rotation": {"type": "array", "items": {"type": "number"}, "minItems": 9, "maxItems": 9},
            "translation": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
            "image": {"type": "string"},
            "depth": {"type": "string"},
            "split": {"enum": ["train", "test"]},
        },
    },
}


@dataclass
class CameraView:
    id: str
    camera: Camera
    image: Path
    depth: Path | None = None
    split: str = "train"


@dataclass
class CameraSet:
    views: list[CameraView] = field(default_factory=list)
    source: str | None = None

    def __len__(self):
        return len(self.views)

    def __iter__(self):
        return iter(self.views)

    @property
    def cameras(self) -> list[Camera]:
        return [v.camera for v in self.views]

    def split(self, name: str) -> list[CameraView]:
        return [v for v in self.views if v.split == name]


def load_cameras_json(path, require_images: bool = True) -> CameraSet:
    """Load and validate a camera list; image paths resolve relative to the JSON file."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from None
    try:
        jsonschema.validate(doc, CAMERA_SCHEMA)
    except jsonschema.ValidationError as exc:
        pointer = "/" + "/".join(str(p) for p in exc.absolute_path)
        raise FormatError(f"{path}: schema violation at {pointer}: {exc.message}") from None
    views, seen = [], set()
    for i, entry in enumerate(doc):
        vid = str(entry["id"])
        if vid in seen:
            raise FormatError(f"{path}: duplicate camera id at /{i}/id: {vid!r}")
        seen.add(vid)
        rot = np.asarray(entry["rotation"], dtype=np.float64).reshape(3, 3)
        dev = np.abs(rot.T @ rot - np.eye(3)).max()
        if dev > ROTATION_TOL or np.linalg.det(rot) <= 0:
            raise FormatError(f"{path}: rotation at /{i}/rotation is not a proper rotation (deviation {dev:.3g})")
        u, _, vt = np.linalg.svd(rot)
        cam = Camera(entry["fx"], entry["fy"], entry["cx"], entry["cy"], entry["width"], entry["height"],
                     u @ vt, entry["translation"])
        image = path.parent / entry["image"]
        if require_images and not image.exists():
            raise FormatError(f"{path}: image referenced at /{i}/image does not exist: {image}")
        depth = path.parent / entry["depth"] if "depth" in entry else None
        views.append(CameraView(vid, cam, image, depth, entry.get("split", "train")))
    return CameraSet(views, str(path))


def camera_to_dict(view_id, camera: Camera, image: str, depth: str | None = None, split: str | None = None) -> dict:
    out = {
        "id": view_id, "width": camera.width, "height": camera.height,
        "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
        "rotation": [float(v) for v in camera.rotation.ravel()],
        "translation": [float(v) for v in camera.translation],
        "image": image,
    }
    if depth is not None:
        out["depth"] = depth
    if split is not None:
        out["split"] = split
    return out


def save_cameras_json(entries: list[dict], path) -> None:
    jsonschema.validate(entries, CAMERA_SCHEMA)
    Path(path).write_text(json.dumps(entries, indent=2) + "\n")


# ---------------------------------------------------------------------------
# images and float maps
# ---------------------------------------------------------------------------

def linear_to_srgb(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def srgb_to_linear(x: np.ndarray) -> np.ndarray:
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def write_image_png(buffer: np.ndarray, path) -> None:
    """8-bit sRGB PNG from a linear (H, W, 3) or (H, W) buffer."""
    img = np.asarray(buffer, dtype=np.float64)
    if img.ndim not in (2, 3):
        raise ValueError(f"expected an (H, W[, 3]) buffer, got {img.shape}")
    u8 = np.rint(linear_to_srgb(img) * 255.0).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def read_image_png(path) -> np.ndarray:
    """Linear float RGB in [0, 1] from an 8-bit sRGB image."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return srgb_to_linear(arr)


def write_depth_pfm(buffer: np.ndarray, path) -> None:
    """Little-endian PFM (scale -1.0); 1 channel for (H, W), 3 for (H, W, 3). Rows bottom to top."""
    a = np.asarray(buffer)
    if a.ndim == 2:
        tag = b"Pf"
    elif a.ndim == 3 and a.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs an (H, W) or (H, W, 3) buffer, got {a.shape}")
    h, w = a.shape[:2]
    payload = np.ascontiguousarray(a[::-1], dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        fh.write(payload.tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        try:
            w, h = (int(v) for v in fh.readline().split())
            scale = float(fh.readline().strip())
        except ValueError:
            raise FormatError(f"{path}: malformed PFM header") from None
        chans = 3 if tag == b"PF" else 1
        dt = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dt)
    if data.size != w * h * chans:
        raise FormatError(f"{path}: PFM payload has {data.size} values, expected {w * h * chans}")
    img = data.reshape((h, w, 3) if chans == 3 else (h, w))[::-1]
    return img.astype(np.float32)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

def write_mesh(mesh: TriangleMesh, path) -> None:
    """ASCII OBJ for ``.obj`` paths, binary little-endian PLY otherwise."""
    path = Path(path)
    if path.suffix.lower() == ".obj":
        lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
        path.write_text("\n".join(lines) + ("\n" if lines else ""))
        return
    header = [
        "ply", "format binary_little_endian 1.0", f"element vertex {len(mesh.vertices)}",
        "property float x", "property float y", "property float z",
        f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices", "end_header",
    ]
    faces = np.zeros(len(mesh.triangles), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(np.ascontiguousarray(mesh.vertices, dtype="<f4").tobytes())
        fh.write(faces.tobytes())


def read_mesh_ply(path) -> TriangleMesh:
    """Reader for the binary PLY meshes produced by ``write_mesh``."""
    with open(path, "rb") as fh:
        header = []
        while True:
            line = fh.readline()
            if not line:
                raise FormatError(f"{path}: PLY header not terminated")
            header.append(line.decode("ascii").strip())
            if header[-1] == "end_header":
                break
        nv = int(next(h.split()[2] for h in header if h.startswith("element vertex")))
        nf = int(next(h.split()[2] for h in header if h.startswith("element face")))
        verts = np.frombuffer(fh.read(nv * 12), dtype="<f4").reshape(nv, 3)
        faces = np.frombuffer(fh.read(nf * 13), dtype=[("n", "u1"), ("idx", "<i4", (3,))])
    return TriangleMesh(verts.astype(np.float64), faces["idx"].astype(np.int64))


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p


__all__ = [
    "SceneFile", "CameraView", "CameraSet", "load_splat_ply", "save_splat_ply", "load_cameras_json",
    "camera_to_dict", "save_cameras_json", "write_image_png", "read_image_png", "write_depth_pfm",
    "read_pfm", "write_mesh", "read_mesh_ply", "ensure_dir",
]
