"""File formats: OBJ meshes, raw f32 arrays, model/basis/field containers, silhouettes, JSON."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .basis import LinearOffsetBasis
from .blendshape import SkinnedBlendshapeModel
from .geometry import RegionPartition, TriMesh

FIELD_MAGIC = b"OFLD"
FIELD_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


# -- JSON -------------------------------------------------------------------

def dumps(data) -> str:
    """Canonical JSON text (sorted keys, fixed indent) so outputs are byte-stable."""
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path, data) -> None:
    Path(path).write_text(dumps(data))


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def write_trace(path, reports) -> None:
    """One JSON object per optimizer step."""
    with open(path, "w") as fh:
        for step, report in enumerate(reports):
            fh.write(json.dumps({"step": step, **report.to_dict()}, sort_keys=True) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- raw arrays -------------------------------------------------------------

def write_array(path, array) -> None:
    np.ascontiguousarray(array, dtype="<f4").tofile(path)


def read_array(path, shape) -> np.ndarray:
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{Path(path).name}: expected {int(np.prod(shape))} values, found {data.size}")
    return data.astype(np.float64).reshape(shape)


# -- OBJ --------------------------------------------------------------------

def region_sidecar(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".regions.json")


def write_obj(path, mesh: TriMesh, vertices=None) -> None:
    """Write ``v``/``vt``/``f`` records (1-based) plus a region sidecar when regions exist.

    Texture coordinates share the vertex indexing, so faces read ``f i/i j/j k/k``.
    """
    verts = mesh.vertices if vertices is None else np.asarray(vertices, dtype=np.float64)
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in verts]
    if mesh.uv is not None:
        lines += [f"vt {u:.17g} {v:.17g}" for u, v in mesh.uv]
        lines += ["f " + " ".join(f"{i}/{i}" for i in tri) for tri in mesh.triangles + 1]
    else:
        lines += ["f " + " ".join(str(i) for i in tri) for tri in mesh.triangles + 1]
    Path(path).write_text("\n".join(lines) + "\n" if lines else "")
    if mesh.regions is not None:
        write_json(region_sidecar(path), mesh.regions.to_dict())


def read_obj(path, regions_path=None) -> TriMesh:
    """Read an OBJ file; polygons are fan-triangulated, normals ignored.

    The region sidecar is picked up automatically when it sits next to the file.
    """
    verts, tex, faces, face_tex = [], [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(c) for c in parts[1:4]])
                elif parts[0] == "vt":
                    tex.append([float(c) for c in parts[1:3]])
                elif parts[0] == "f":
                    refs = [p.split("/") for p in parts[1:]]
                    vi = [int(r[0]) for r in refs]
                    ti = [int(r[1]) if len(r) > 1 and r[1] else 0 for r in refs]
                    for k in range(1, len(refs) - 1):
                        faces.append([vi[0], vi[k], vi[k + 1]])
                        face_tex.append([ti[0], ti[k], ti[k + 1]])
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: malformed record") from None
    n = len(verts)
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    f = np.where(f < 0, f + n + 1, f) - 1
    uv = None
    if tex and faces:
        ft = np.array(face_tex, dtype=np.int64)
        if np.all(ft > 0):
            t = np.array(tex, dtype=np.float64)
            uv = np.zeros((n, 2))
            uv[f.reshape(-1)] = t[ft.reshape(-1) - 1]
    regions = None
    sidecar = Path(regions_path) if regions_path is not None else region_sidecar(path)
    if sidecar.exists():
        regions = RegionPartition.from_dict(read_json(sidecar), n)
    elif regions_path is not None:
        raise FileNotFoundError(sidecar)
    return TriMesh(v, f, uv, regions)


# -- silhouettes ------------------------------------------------------------

def write_silhouette(path, image) -> None:
    """8-bit grayscale PGM (P5) or PNG, chosen by suffix; value is round(255 * occupancy)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("silhouette must be a 2-D image")
    data = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    fmt = {".pgm": "PPM", ".png": "PNG"}.get(Path(path).suffix.lower())
    if fmt is None:
        raise ValueError(f"unsupported silhouette format {Path(path).suffix!r}")
    Image.fromarray(data, mode="L").save(path, format=fmt)


def read_silhouette(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


# -- offset field -----------------------------------------------------------

def write_field(path, displacements) -> None:
    d = np.asarray(displacements, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 3:
        raise ValueError("offset field must be (N, 3)")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC + struct.pack("<I", FIELD_VERSION))
        fh.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def read_field(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not an offset field file")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported field version {version}")
    body = np.frombuffer(raw[8:], dtype="<f4")
    if body.size % 3:
        raise ValueError(f"{path}: truncated field data")
    return body.astype(np.float64).reshape(-1, 3)


# -- model container --------------------------------------------------------

_MODEL_ARRAYS = ("v_base", "shape_basis", "expr_basis", "joint_regressor", "skin_weights")


def save_model(directory, model: SkinnedBlendshapeModel, template: TriMesh | None = None) -> None:
    """Write the model container; ``template`` adds topology as ``template.obj``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {name: getattr(model, name) for name in _MODEL_ARRAYS}
    write_json(d / "manifest.json", {
        "N": model.n_vertices, "K": model.n_shape, "L": model.n_expression, "J_count": model.n_joints,
        "parents": [int(p) for p in model.joint_parents],
        "shapes": {name: list(a.shape) for name, a in arrays.items()},
        "dtype": "<f4",
    })
    for name, a in arrays.items():
        write_array(d / f"{name}.bin", a)
    if template is not None:
        write_obj(d / "template.obj", template, model.v_base)


def load_model(directory) -> SkinnedBlendshapeModel:
    d = Path(directory)
    manifest = read_json(d / "manifest.json")
    arrays = {name: read_array(d / f"{name}.bin", manifest["shapes"][name]) for name in _MODEL_ARRAYS}
    return SkinnedBlendshapeModel(joint_parents=manifest["parents"], **arrays)


def load_template(directory) -> TriMesh:
    return read_obj(Path(directory) / "template.obj")


# -- basis container --------------------------------------------------------

def save_basis(directory, basis: LinearOffsetBasis) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_json(d / "manifest.json", {
        "N": basis.n_vertices, "K_hair": basis.k_hair, "K_neck": basis.k_neck,
        "centered": basis.centered, "dtype": "<f4",
    })
    write_array(d / "mean.bin", basis.mean)
    write_array(d / "components.bin", basis.components)
    write_array(d / "singular_values.bin", basis.singular_values)


def load_basis(directory) -> LinearOffsetBasis:
    d = Path(directory)
    m = read_json(d / "manifest.json")
    n3, k = 3 * m["N"], m["K_hair"] + m["K_neck"]
    return LinearOffsetBasis(read_array(d / "mean.bin", (n3,)), read_array(d / "components.bin", (n3, k)),
                             read_array(d / "singular_values.bin", (k,)), m["K_hair"], m["K_neck"],
                             bool(m["centered"]))
