"""File formats: ASCII PLY, PGM/PNG, CSV, JSON and INI-style key-value configs.

Floats are written with ``repr`` so every file re-imports bit-exactly.
"""
import configparser
import csv
import io
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .data import IntensityImage, LabeledPointCloud, SegmentationMask
from .geometry import RigidTransform, TriangleMesh
from .planner import IncisionPath


class FormatError(ValueError):
    pass


def _f(x):
    return repr(float(x))


def _write_text(path, text):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(text)


# -- PLY ----------------------------------------------------------------------

def _ply_header(n_vertex, props, n_face=None, comments=()):
    lines = ["ply", "format ascii 1.0"]
    lines += [f"comment {c}" for c in comments]
    lines.append(f"element vertex {n_vertex}")
    lines += [f"property {t} {name}" for name, t in props]
    if n_face is not None:
        lines.append(f"element face {n_face}")
        lines.append("property list uchar int vertex_indices")
    lines.append("end_header")
    return "\n".join(lines) + "\n"


def _ply_rows(columns, kinds):
    out = io.StringIO()
    cols = [c.tolist() for c in columns]
    for row in zip(*cols):
        out.write(" ".join(_f(v) if k == "double" else str(int(v)) for v, k in zip(row, kinds)))
        out.write("\n")
    return out.getvalue()


def write_mesh_ply(path, mesh, classes=None, class_property="class"):
    props = [("x", "double"), ("y", "double"), ("z", "double")]
    cols = [mesh.vertices[:, 0], mesh.vertices[:, 1], mesh.vertices[:, 2]]
    if mesh.normals is not None:
        props += [("nx", "double"), ("ny", "double"), ("nz", "double")]
        cols += [mesh.normals[:, 0], mesh.normals[:, 1], mesh.normals[:, 2]]
    if classes is not None:
        props.append((class_property, "int"))
        cols.append(np.asarray(classes))
    text = _ply_header(len(mesh.vertices), props, len(mesh.triangles))
    text += _ply_rows(cols, [t for _, t in props])
    text += "".join(f"3 {a} {b} {c}\n" for a, b, c in mesh.triangles.tolist())
    _write_text(path, text)


def read_ply(path):
    """Parse an ASCII PLY file into ``(vertex_columns, faces, comments)``."""
    with open(path, encoding="ascii") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0].strip() != "ply":
        raise FormatError(f"{path}: not a PLY file")
    elements, comments = [], []
    k = 1
    while True:
        if k >= len(lines):
            raise FormatError(f"{path}: missing end_header")
        tok = lines[k].split()
        k += 1
        if not tok:
            continue
        if tok[0] == "format" and tok[1] != "ascii":
            raise FormatError(f"{path}: only ASCII PLY is supported")
        elif tok[0] == "comment":
            comments.append(" ".join(tok[1:]))
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            elements[-1][2].append(tok[1:])
        elif tok[0] == "end_header":
            break
    vertex, faces = {}, np.empty((0, 3), dtype=np.int64)
    for name, count, props in elements:
        rows = lines[k:k + count]
        k += count
        if name == "vertex":
            data = [r.split() for r in rows]
            for col, p in enumerate(props):
                kind, pname = p[0], p[-1]
                vals = [row[col] for row in data]
                if kind in ("float", "double", "float32", "float64"):
                    vertex[pname] = np.array([float(v) for v in vals], dtype=np.float64)
                else:
                    vertex[pname] = np.array([int(v) for v in vals], dtype=np.int64)
        elif name == "face":
            fl = [list(map(int, r.split())) for r in rows]
            if any(f[0] != 3 for f in fl):
                raise FormatError(f"{path}: only triangular faces are supported")
            faces = np.array([f[1:4] for f in fl], dtype=np.int64).reshape(-1, 3)
    return vertex, faces, comments


def read_mesh_ply(path, class_property="class"):
    """Returns ``(TriangleMesh, classes or None)``."""
    v, faces, _ = read_ply(path)
    pts = np.column_stack([v["x"], v["y"], v["z"]])
    normals = np.column_stack([v["nx"], v["ny"], v["nz"]]) if "nx" in v else None
    return TriangleMesh(pts, faces, normals), v.get(class_property)


def write_cloud_ply(path, cloud, label_property="label"):
    props = [("x", "double"), ("y", "double"), ("z", "double"), (label_property, "int")]
    cols = [cloud.points[:, 0], cloud.points[:, 1], cloud.points[:, 2], cloud.labels]
    if cloud.gt_labels is not None:
        props.append(("gt_class", "int"))
        cols.append(cloud.gt_labels)
    comments = [f"frame {cloud.frame}"]
    if cloud.viewpoint is not None:
        comments.append("viewpoint " + " ".join(_f(x) for x in cloud.viewpoint))
    text = _ply_header(len(cloud), props, comments=comments)
    text += _ply_rows(cols, [t for _, t in props])
    _write_text(path, text)


def read_cloud_ply(path, label_property="label"):
    v, _, comments = read_ply(path)
    frame, viewpoint = "world", None
    for c in comments:
        key, _, rest = c.partition(" ")
        if key == "frame":
            frame = rest
        elif key == "viewpoint":
            viewpoint = np.array([float(x) for x in rest.split()])
    pts = np.column_stack([v["x"], v["y"], v["z"]]) if len(v.get("x", [])) else np.empty((0, 3))
    labels = v.get(label_property)
    if labels is None:
        labels = v.get("class")
    return LabeledPointCloud(pts, labels, v.get("gt_class"), frame, viewpoint)


# -- images -------------------------------------------------------------------

def write_pgm(path, values, maxval=None):
    """ASCII (P2) PGM of non-negative integer pixel values."""
    arr = np.asarray(getattr(values, "values", getattr(values, "classes", values)))
    if np.any(arr < 0) or np.any(arr != np.rint(arr)):
        raise FormatError("PGM stores non-negative integers only")
    arr = arr.astype(np.int64)
    if maxval is None:
        maxval = 255 if arr.max(initial=0) <= 255 else 65535
    if arr.max(initial=0) > maxval:
        raise FormatError(f"pixel value {arr.max()} exceeds maxval {maxval}")
    h, w = arr.shape
    body = "\n".join(" ".join(map(str, row)) for row in arr.tolist())
    _write_text(path, f"P2\n{w} {h}\n{maxval}\n{body}\n")


def read_pgm(path):
    """Read ASCII (P2) or binary (P5) PGM into an int64 array."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: not a PGM file")
    # header tokens, skipping comments
    tokens, pos = [], 2
    while len(tokens) < 3:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(int(data[pos:end]))
        pos = end
    w, h, maxval = tokens
    if magic == b"P2":
        vals = np.array(data[pos:].split(), dtype=np.int64)
    else:
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        vals = np.frombuffer(data[pos + 1:pos + 1 + w * h * dtype.itemsize], dtype=dtype).astype(np.int64)
    if vals.size != w * h:
        raise FormatError(f"{path}: expected {w * h} pixels, found {vals.size}")
    return vals.reshape(h, w)


def write_png16(path, values):
    arr = np.asarray(getattr(values, "values", getattr(values, "classes", values)))
    if np.any(arr < 0) or np.any(arr > 65535) or np.any(arr != np.rint(arr)):
        raise FormatError("16-bit PNG stores integers in [0, 65535]")
    Image.fromarray(arr.astype(np.uint16)).save(path, format="PNG")


def read_png16(path):
    with Image.open(path) as im:
        return np.array(im).astype(np.int64)


def read_image(path):
    """IntensityImage from a PGM or PNG file."""
    suffix = Path(path).suffix.lower()
    arr = read_png16(path) if suffix == ".png" else read_pgm(path)
    return IntensityImage(arr.astype(np.float64))


def read_mask(path):
    arr = read_png16(path) if Path(path).suffix.lower() == ".png" else read_pgm(path)
    return SegmentationMask(arr)


def write_mask(path, mask):
    write_pgm(path, mask.classes, maxval=255)


# -- CSV / JSON ---------------------------------------------------------------

PATH_COLUMNS = ("t", "x", "y", "z", "nx", "ny", "nz")


def write_path_csv(path, ipath):
    lines = [",".join(PATH_COLUMNS)]
    lines += [",".join(_f(v) for v in row) for row in ipath.rows().tolist()]
    _write_text(path, "\n".join(lines) + "\n")


def read_path_csv(path, speed=None):
    """Poses from CSV; without ``speed`` it is inferred from the chord length."""
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t, pos, ax = rows[:, 0], rows[:, 1:4], rows[:, 4:7]
    if speed is None:
        perimeter = float(np.sum(np.linalg.norm(np.diff(pos, axis=0), axis=1)))
        speed = perimeter / t[-1] if t[-1] > 0 else 1.0
    else:
        perimeter = float(t[-1] * speed)
    return IncisionPath(pos, ax, t, float(speed), perimeter)


def path_metadata(ipath, margin, loop_count, **extra):
    meta = {
        "margin_mm": float(margin),
        "speed_mm_s": float(ipath.speed),
        "perimeter_mm": float(ipath.perimeter),
        "total_time_s": float(ipath.total_time),
        "loop_count": int(loop_count),
        "n_poses": len(ipath),
    }
    meta.update(extra)
    return meta


def write_path_json(path, ipath, margin, loop_count, **extra):
    doc = {"metadata": path_metadata(ipath, margin, loop_count, **extra),
           "poses": [dict(zip(PATH_COLUMNS, row)) for row in ipath.rows().tolist()]}
    write_json(path, doc)


def read_path_json(path):
    doc = read_json(path)
    rows = np.array([[p[c] for c in PATH_COLUMNS] for p in doc["poses"]], dtype=np.float64)
    m = doc["metadata"]
    return IncisionPath(rows[:, 1:4], rows[:, 4:7], rows[:, 0], m["speed_mm_s"], m["perimeter_mm"]), m


def write_json(path, doc):
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path, encoding="ascii") as fh:
        return json.load(fh)


def read_correspondences(path):
    """CSV rows ``x1,y1,z1,x2,y2,z2`` (an optional header row is skipped)."""
    src, dst = [], []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                vals = [float(x) for x in row]
            except ValueError:
                continue
            if len(vals) != 6:
                raise FormatError(f"{path}: correspondence rows need 6 values")
            src.append(vals[:3])
            dst.append(vals[3:])
    return np.array(src).reshape(-1, 3), np.array(dst).reshape(-1, 3)


def write_correspondences(path, src, dst):
    lines = ["x1,y1,z1,x2,y2,z2"]
    lines += [",".join(_f(v) for v in (*a, *b)) for a, b in zip(np.asarray(src).tolist(), np.asarray(dst).tolist())]
    _write_text(path, "\n".join(lines) + "\n")


def write_rows_csv(path, header, rows):
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_f(v) if isinstance(v, (float, np.floating)) else v for v in r])
    _write_text(path, out.getvalue())


# -- key-value configs --------------------------------------------------------

def format_vector(v):
    return " ".join(_f(x) for x in np.asarray(v, dtype=np.float64).ravel())


def parse_vector(text, n=None):
    vals = np.array([float(x) for x in text.replace(",", " ").split()])
    if n is not None and vals.size != n:
        raise FormatError(f"expected {n} numbers, got {vals.size}: {text!r}")
    return vals


def transform_to_section(T):
    return {"rotation": format_vector(T.rotation), "translation": format_vector(T.translation)}


def transform_from_section(sec):
    return RigidTransform(parse_vector(sec["rotation"], 9).reshape(3, 3),
                          parse_vector(sec["translation"], 3))


def camera_to_section(cam):
    d = {"fx": _f(cam.fx), "fy": _f(cam.fy), "cx": _f(cam.cx), "cy": _f(cam.cy),
         "width": str(cam.width), "height": str(cam.height)}
    d.update(transform_to_section(cam.pose))
    return d


def camera_from_section(sec):
    from .calibration import CameraModel

    return CameraModel(float(sec["fx"]), float(sec["fy"]), float(sec["cx"]), float(sec["cy"]),
                       int(sec["width"]), int(sec["height"]), transform_from_section(sec))


def write_frame_graph(path, graph, cameras=None):
    """Frame-graph edges (and optionally cameras) in the key-value config format."""
    cp = configparser.ConfigParser(interpolation=None)
    for a, b, T in graph.edges:
        cp[f"edge {a} {b}"] = transform_to_section(T)
    for name, cam in sorted((cameras or {}).items()):
        cp[f"camera {name}"] = camera_to_section(cam)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        cp.write(fh)


def read_frame_graph(path):
    from .calibration import FrameGraph

    cp = configparser.ConfigParser(interpolation=None)
    if not cp.read(path):
        raise FileNotFoundError(path)
    graph, cameras = FrameGraph(), {}
    for name in cp.sections():
        kind, *rest = name.split()
        if kind == "edge":
            graph.add_edge(rest[0], rest[1], transform_from_section(cp[name]))
        elif kind == "camera":
            cameras[rest[0]] = camera_from_section(cp[name])
    return graph, cameras
