"""PLY point clouds, PNG images and NeRF-synthetic style scene folders."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .renderer import Camera

__all__ = [
    "PlyData",
    "read_ply",
    "write_ply",
    "read_png",
    "write_png",
    "Scene",
    "load_scene",
    "write_transforms",
    "load_camera_json",
]

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


@dataclass
class PlyData:
    points: np.ndarray
    colors: np.ndarray | None = None


def _parse_header(fh):
    first = fh.readline().strip()
    if first != b"ply":
        raise ValueError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise ValueError("PLY header is not terminated")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append({"name": tok[1], "count": int(tok[2]), "props": []})
        elif tok[0] == "property":
            if not elements:
                raise ValueError("PLY property before any element")
            if tok[1] == "list":
                elements[-1]["props"].append((tok[4], ("list", tok[2], tok[3])))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise ValueError(f"unknown PLY property type {tok[1]!r}")
                elements[-1]["props"].append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise ValueError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_binary_element(fh, el, endian):
    props = el["props"]
    if any(isinstance(t, tuple) for _, t in props):
        rows = []
        for _ in range(el["count"]):
            row = {}
            for name, t in props:
                if isinstance(t, tuple):
                    cnt_dt = np.dtype(endian + _PLY_TYPES[t[1]])
                    cnt = int(np.frombuffer(fh.read(cnt_dt.itemsize), cnt_dt)[0])
                    item_dt = np.dtype(endian + _PLY_TYPES[t[2]])
                    row[name] = np.frombuffer(fh.read(cnt * item_dt.itemsize), item_dt)
                else:
                    dt = np.dtype(endian + _PLY_TYPES[t])
                    row[name] = np.frombuffer(fh.read(dt.itemsize), dt)[0]
            rows.append(row)
        return {name: np.array([r[name] for r in rows]) for name, t in props
                if not isinstance(t, tuple)}
    dtype = np.dtype([(name, endian + _PLY_TYPES[t]) for name, t in props])
    raw = fh.read(dtype.itemsize * el["count"])
    if len(raw) != dtype.itemsize * el["count"]:
        raise ValueError("PLY body is truncated")
    data = np.frombuffer(raw, dtype=dtype)
    return {name: data[name] for name, _ in props}


def read_ply(path) -> PlyData:
    """Read vertex positions (and RGB if present) from ASCII or binary PLY."""
    with open(path, "rb") as fh:
        fmt, elements = _parse_header(fh)
        vertex = None
        if fmt == "ascii":
            lines = fh.read().decode("ascii").split("\n")
            pos = 0
            for el in elements:
                rows = []
                for _ in range(el["count"]):
                    while pos < len(lines) and not lines[pos].strip():
                        pos += 1
                    if pos >= len(lines):
                        raise ValueError("PLY body is truncated")
                    rows.append(lines[pos].split())
                    pos += 1
                if el["name"] == "vertex":
                    scalar = [(i, name) for i, (name, t) in enumerate(el["props"])
                              if not isinstance(t, tuple)]
                    vertex = {name: np.array([float(r[i]) for r in rows]) for i, name in scalar}
        else:
            endian = "<" if fmt == "binary_little_endian" else ">"
            for el in elements:
                data = _read_binary_element(fh, el, endian)
                if el["name"] == "vertex":
                    vertex = data
                    break
    if vertex is None or not all(k in vertex for k in "xyz"):
        raise ValueError("PLY file has no vertex positions")
    points = np.stack([np.asarray(vertex[k], dtype=np.float64) for k in "xyz"], axis=1)
    colors = None
    names = [("red", "green", "blue"), ("r", "g", "b")]
    for trio in names:
        if all(k in vertex for k in trio):
            cols = np.stack([np.asarray(vertex[k]) for k in trio], axis=1)
            if np.issubdtype(cols.dtype, np.integer) or cols.max(initial=0) > 1.0:
                cols = cols.astype(np.float64) / 255.0
            colors = cols.astype(np.float64)
            break
    return PlyData(points, colors)


def write_ply(path, points, colors=None, binary=True):
    """Write a vertex-only PLY (float xyz, optional uchar rgb)."""
    points = np.asarray(points, dtype=np.float32)
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if colors is not None:
        fields += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    data = np.empty(len(points), dtype=fields)
    data["x"], data["y"], data["z"] = points.T
    if colors is not None:
        c = np.clip(np.round(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)
        data["red"], data["green"], data["blue"] = c.T
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(points)}"]
    header += [f"property float {n}" for n in "xyz"]
    if colors is not None:
        header += [f"property uchar {n}" for n in ("red", "green", "blue")]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(data.tobytes())
        else:
            for row in data:
                fh.write((" ".join(repr(float(v)) if i < 3 else str(int(v))
                                   for i, v in enumerate(row)) + "\n").encode("ascii"))


def read_png(path, background=None) -> np.ndarray:
    """Float RGB image in [0, 1]; RGBA is composited over ``background``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    rgb, a = arr[..., :3], arr[..., 3:]
    if background is None:
        return rgb
    return rgb * a + np.asarray(background, dtype=np.float64) * (1.0 - a)


def write_png(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


@dataclass
class Scene:
    train_cameras: list
    train_images: list
    test_cameras: list
    test_images: list
    points: PlyData | None = None
    background: tuple = (0.0, 0.0, 0.0)


def _resolve_image(root, file_path):
    path = os.path.normpath(os.path.join(root, file_path))
    if not os.path.splitext(path)[1]:
        path += ".png"
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing image {path}")
    return path


def _load_split(root, name, background, near):
    path = os.path.join(root, f"transforms_{name}.json")
    if not os.path.exists(path):
        raise FileNotFoundError(f"missing {path}")
    with open(path) as fh:
        meta = json.load(fh)
    cams, imgs = [], []
    for frame in meta["frames"]:
        img = read_png(_resolve_image(root, frame["file_path"]), background)
        h, w = img.shape[:2]
        cams.append(Camera.from_nerf(frame["transform_matrix"], meta["camera_angle_x"], w, h, near))
        imgs.append(img)
    return cams, imgs


def load_scene(root, background=(0.0, 0.0, 0.0), near=0.2) -> Scene:
    """Load ``transforms_{train,test}.json`` + images (+ optional ``points.ply``)."""
    tr_c, tr_i = _load_split(root, "train", background, near)
    te_c, te_i = _load_split(root, "test", background, near)
    ply = os.path.join(root, "points.ply")
    points = read_ply(ply) if os.path.exists(ply) else None
    return Scene(tr_c, tr_i, te_c, te_i, points, tuple(background))


def write_transforms(path, cameras, file_paths, camera_angle_x):
    """Write a NeRF-style transforms file (OpenGL camera-to-world matrices)."""
    frames = []
    for cam, fp in zip(cameras, file_paths):
        c2w = np.eye(4)
        c2w[:3, :3] = cam.R.T
        c2w[:3, 3] = cam.center
        c2w[:3, 1:3] *= -1.0
        frames.append({"file_path": fp, "transform_matrix": c2w.tolist()})
    with open(path, "w") as fh:
        json.dump({"camera_angle_x": float(camera_angle_x), "frames": frames}, fh, indent=1)


def load_camera_json(path) -> Camera:
    with open(path) as fh:
        return Camera.from_dict(json.load(fh))
