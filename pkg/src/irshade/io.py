"""File formats: meshes, images, depth maps, views and albedo files.

Views file (plain text, one view per non-comment line, whitespace
separated, ``#`` starts a comment)::

    name fx fy cx cy width height  r11 r12 r13 t1 r21 r22 r23 t2 r31 r32 r33 t3  lx ly lz  image

The twelve pose values are the row-major 3x4 world-to-camera matrix
``[R | t]`` (millimetres), ``lx ly lz`` the light position in the camera
frame (mm) and ``image`` a path relative to the views file (``-`` for no
image). An image's gamma state lives in a JSON sidecar ``<image>.json``
holding ``{"gamma_applied": bool, "gamma": float}``; images without a
sidecar are taken as raw captures (gamma applied, exponent unknown, to be
supplied when linearising).

Albedo file (plain text)::

    # irshade albedo
    mode global
    value <c rho>

or::

    mode grouped
    groups <K>
    <value of group 0>
    ...
    labels <N>
    <label of vertex 0>
    ...
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
from PIL import Image

from .albedo import AlbedoModel
from .camera import CameraError, CameraIntrinsics, CameraPose, View
from .depth import DepthMap
from .mesh import TriangleMesh, compute_vertex_normals
from .shading import ShadingImage


class FormatError(ValueError):
    pass


# meshes ---------------------------------------------------------------------

_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _parse_ply_header(fh):
    if fh.readline().strip() != b"ply":
        raise FormatError("not a PLY file")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise FormatError("PLY header has no end_header")
        tok = line.decode("ascii", "replace").split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            elements.append([tok[1], int(tok[2]), []])
        elif tok[0] == "property":
            if not elements:
                raise FormatError("PLY property outside an element")
            if tok[1] == "list":
                elements[-1][2].append((tok[4], ("list", tok[2], tok[3])))
            else:
                elements[-1][2].append((tok[2], tok[1]))
        elif tok[0] == "end_header":
            break
    if fmt not in ("ascii", "binary_little_endian", "binary_big_endian"):
        raise FormatError(f"unsupported PLY format {fmt!r}")
    return fmt, elements


def _read_ply(path):
    with open(path, "rb") as fh:
        fmt, elements = _parse_ply_header(fh)
        body = fh.read()
    data = {}
    if fmt == "ascii":
        tokens = body.split()
        pos = 0
        for name, count, props in elements:
            rows = []
            for _ in range(count):
                row = []
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        n = int(tokens[pos])
                        row.append([float(t) for t in tokens[pos + 1:pos + 1 + n]])
                        pos += 1 + n
                    else:
                        row.append(float(tokens[pos]))
                        pos += 1
                rows.append(row)
            data[name] = (props, rows)
    else:
        end = "<" if fmt == "binary_little_endian" else ">"
        pos = 0
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, end + _PLY_TYPES[t]) for p, t in props])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                pos += dt.itemsize * count
                data[name] = (props, arr)
                continue
            if len(props) == 1 and count:
                # common case: pure triangle lists read in one go
                _, (_, ct, it) = props[0]
                dt = np.dtype([("n", end + _PLY_TYPES[ct]), ("i", end + _PLY_TYPES[it], (3,))])
                if pos + dt.itemsize * count <= len(body):
                    arr = np.frombuffer(body, dtype=dt, count=count, offset=pos)
                    if np.all(arr["n"] == 3):
                        pos += dt.itemsize * count
                        data[name] = (props, [[r] for r in arr["i"].tolist()])
                        continue
            rows = []
            for _ in range(count):
                row = []
                for pname, ptype in props:
                    if isinstance(ptype, tuple):
                        ct = np.dtype(end + _PLY_TYPES[ptype[1]])
                        it = np.dtype(end + _PLY_TYPES[ptype[2]])
                        n = int(np.frombuffer(body, ct, 1, pos)[0])
                        pos += ct.itemsize
                        row.append(np.frombuffer(body, it, n, pos).tolist())
                        pos += it.itemsize * n
                    else:
                        t = np.dtype(end + _PLY_TYPES[ptype])
                        row.append(float(np.frombuffer(body, t, 1, pos)[0]))
                        pos += t.itemsize
                rows.append(row)
            data[name] = (props, rows)
    if "vertex" not in data:
        raise FormatError("PLY file has no vertex element")
    props, rows = data["vertex"]
    names = [p for p, _ in props]
    try:
        cols = [names.index(c) for c in ("x", "y", "z")]
    except ValueError:
        raise FormatError("PLY vertices lack x, y, z") from None
    if isinstance(rows, np.ndarray):
        verts = np.column_stack([rows[c].astype(np.float64) for c in ("x", "y", "z")])
    else:
        verts = np.array([[r[c] for c in cols] for r in rows], dtype=np.float64).reshape(-1, 3)
    faces = []
    if "face" in data:
        props, rows = data["face"]
        fi = [i for i, (p, t) in enumerate(props) if isinstance(t, tuple)]
        if not fi:
            raise FormatError("PLY face element has no index list")
        for r in rows:
            faces.extend(_triangulate([int(v) for v in r[fi[0]]]))
    return verts, np.array(faces, dtype=np.int64).reshape(-1, 3)


def _triangulate(poly):
    if len(poly) < 3:
        raise FormatError(f"polygon with {len(poly)} vertices")
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def _write_ply(path, mesh, binary):
    v = mesh.vertices
    f = mesh.faces
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {len(v)}", "property double x", "property double y",
              "property double z"]
    if mesh.normals is not None:
        header += ["property double nx", "property double ny", "property double nz"]
    header += [f"element face {len(f)}", "property list uchar int vertex_indices", "end_header"]
    cols = v if mesh.normals is None else np.hstack([v, mesh.normals])
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        if binary:
            fh.write(np.ascontiguousarray(cols, dtype="<f8").tobytes())
            rec = np.empty(len(f), dtype=[("n", "u1"), ("i", "<i4", (3,))])
            rec["n"] = 3
            rec["i"] = f
            fh.write(rec.tobytes())
        else:
            for row in cols:
                fh.write((" ".join(repr(float(x)) for x in row) + "\n").encode("ascii"))
            for a, b, c in f:
                fh.write(f"3 {a} {b} {c}\n".encode("ascii"))


def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            tok = line.split()
            if not tok or tok[0].startswith("#"):
                continue
            try:
                if tok[0] == "v":
                    verts.append([float(x) for x in tok[1:4]])
                elif tok[0] == "f":
                    idx = []
                    for t in tok[1:]:
                        i = int(t.split("/")[0])
                        idx.append(i - 1 if i > 0 else len(verts) + i)
                    faces.extend(_triangulate(idx))
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}:{lineno}: malformed OBJ record ({exc})") from None
    return np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _write_obj(path, mesh):
    with open(path, "w") as fh:
        for x, y, z in mesh.vertices.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def read_mesh(path):
    """Load a PLY (ASCII or binary) or OBJ mesh; normals are recomputed."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"mesh file not found: {path}")
    ext = path.suffix.lower()
    if ext == ".ply":
        v, f = _read_ply(path)
    elif ext == ".obj":
        v, f = _read_obj(path)
    else:
        raise FormatError(f"unknown mesh format {ext!r} (expected .ply or .obj)")
    return compute_vertex_normals(TriangleMesh(v, f))


def write_mesh(path, mesh, binary=True):
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".ply":
        _write_ply(path, mesh, binary)
    elif ext == ".obj":
        _write_obj(path, mesh)
    else:
        raise FormatError(f"unknown mesh format {ext!r} (expected .ply or .obj)")


# images ----------------------------------------------------------------------


def read_pfm(path):
    """Single-channel PFM as a float64 array (top row first)."""
    with open(path, "rb") as fh:
        kind = fh.readline().strip()
        if kind not in (b"Pf", b"PF"):
            raise FormatError(f"{path}: not a PFM file")
        dims = fh.readline().split()
        while not dims:
            dims = fh.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        end = "<" if scale < 0 else ">"
        ch = 3 if kind == b"PF" else 1
        data = np.frombuffer(fh.read(), dtype=end + "f4", count=w * h * ch)
    a = data.reshape(h, w, ch)[::-1, :, 0] if ch == 3 else data.reshape(h, w)[::-1]
    return a.astype(np.float64)


def write_pfm(path, array):
    a = np.asarray(array, dtype="<f4")
    if a.ndim != 2:
        raise FormatError("PFM writer expects a 2D array")
    h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(a[::-1]).tobytes())


def _read_png(path):
    img = Image.open(path)
    a = np.asarray(img)
    if a.ndim == 3:
        raise FormatError(f"{path}: expected a single-channel image")
    if a.dtype == np.uint8:
        return a.astype(np.float64) / 255.0
    if img.mode in ("I;16", "I;16B", "I;16L", "I") or a.dtype in (np.uint16, np.int32):
        return a.astype(np.float64) / 65535.0
    raise FormatError(f"{path}: unsupported PNG mode {img.mode}")


def _write_png16(path, values01):
    q = np.round(np.clip(values01, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(q).save(path)


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def read_image(path, gamma_applied=None, gamma=None):
    """Load a shading image from 16-bit PNG (value / 65535) or PFM.

    Gamma state comes from the JSON sidecar when present; explicit
    arguments override it. Without either the image is a raw capture.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    ext = path.suffix.lower()
    if ext == ".png":
        a = _read_png(path)
    elif ext == ".pfm":
        a = read_pfm(path)
    else:
        raise FormatError(f"unknown image format {ext!r} (expected .png or .pfm)")
    meta = {"gamma_applied": True, "gamma": 1.0}
    side = sidecar_path(path)
    if side.exists():
        meta.update(json.loads(side.read_text()))
    if gamma_applied is not None:
        meta["gamma_applied"] = bool(gamma_applied)
    if gamma is not None:
        meta["gamma"] = float(gamma)
    return ShadingImage(np.clip(a, 0.0, 1.0), bool(meta["gamma_applied"]), float(meta["gamma"]))


def write_image(path, image):
    """Write a shading image (PNG is 16-bit) plus its gamma sidecar."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".png":
        _write_png16(path, image.intensity)
    elif ext == ".pfm":
        write_pfm(path, image.intensity)
    else:
        raise FormatError(f"unknown image format {ext!r} (expected .png or .pfm)")
    sidecar_path(path).write_text(json.dumps({"gamma_applied": bool(image.gamma_applied),
                                              "gamma": float(image.gamma)}))


def read_depth(path, mm_per_unit=1.0):
    """Depth map from 16-bit PNG (scaled by ``mm_per_unit``) or PFM (mm)."""
    path = Path(path)
    ext = path.suffix.lower()
    if ext == ".png":
        a = np.asarray(Image.open(path)).astype(np.float64) * float(mm_per_unit)
    elif ext == ".pfm":
        a = read_pfm(path)
        a[~np.isfinite(a)] = 0.0
    else:
        raise FormatError(f"unknown depth format {ext!r} (expected .png or .pfm)")
    return DepthMap(a)


def write_depth(path, depth, mm_per_unit=1.0):
    path = Path(path)
    d = depth.depth if isinstance(depth, DepthMap) else np.asarray(depth, float)
    if path.suffix.lower() == ".png":
        q = np.round(d / float(mm_per_unit))
        if q.max(initial=0) > 65535:
            raise FormatError("depth exceeds the 16-bit range at this mm_per_unit")
        Image.fromarray(q.astype(np.uint16)).save(path)
    elif path.suffix.lower() == ".pfm":
        write_pfm(path, d)
    else:
        raise FormatError(f"unknown depth format {path.suffix!r}")


# views -----------------------------------------------------------------------

_VIEW_FIELDS = 1 + 6 + 12 + 3 + 1


def load_views(path, load_images=True, gamma_applied=None, gamma=None):
    """Parse a views file; see the module docstring for the layout."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"views file not found: {path}")
    views = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        tok = line.split()
        if len(tok) != _VIEW_FIELDS:
            raise FormatError(f"{path}:{lineno}: expected {_VIEW_FIELDS} fields, got {len(tok)}")
        try:
            num = [float(t) for t in tok[1:-1]]
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        try:
            intr = CameraIntrinsics(num[0], num[1], num[2], num[3], int(num[4]), int(num[5]))
            P = np.array(num[6:18]).reshape(3, 4)
            pose = CameraPose(P[:, :3], P[:, 3])
        except CameraError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
        image = None
        if tok[-1] != "-" and load_images:
            ipath = path.parent / tok[-1]
            if not ipath.exists():
                raise FileNotFoundError(f"{path}:{lineno}: image file not found: {ipath}")
            image = read_image(ipath, gamma_applied, gamma)
        try:
            views.append(View(intr, pose, np.array(num[18:21]), image, tok[0]))
        except CameraError as exc:
            raise FormatError(f"{path}:{lineno}: {exc}") from None
    return views


def save_views(path, views, image_format="pfm"):
    """Write a views file; images go next to it as ``<name>.<image_format>``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["# name fx fy cx cy width height  R|t (3x4 row-major, mm)  light_offset (mm)  image"]
    for k, v in enumerate(views):
        name = v.name or f"view{k:02d}"
        if any(c.isspace() for c in name):
            raise FormatError(f"view name {name!r} contains whitespace")
        img = "-"
        if v.image is not None:
            img = f"{name}.{image_format}"
            write_image(path.parent / img, v.image)
        k_ = v.intrinsics
        P = np.hstack([v.pose.rotation, v.pose.translation[:, None]]).ravel()
        nums = [k_.fx, k_.fy, k_.cx, k_.cy]
        fields = [name] + [repr(float(x)) for x in nums] + [str(k_.width), str(k_.height)]
        fields += [repr(float(x)) for x in P] + [repr(float(x)) for x in v.light_offset] + [img]
        lines.append(" ".join(fields))
    path.write_text("\n".join(lines) + "\n")


# albedo ----------------------------------------------------------------------


def save_albedo(path, model):
    lines = ["# irshade albedo", f"mode {model.mode}"]
    if model.mode == "global":
        lines.append(f"value {float(model.global_value)!r}")
    else:
        lines.append(f"groups {len(model.group_values)}")
        lines += [repr(float(x)) for x in model.group_values]
        lines.append(f"labels {len(model.labels)}")
        lines += [str(int(x)) for x in model.labels]
    Path(path).write_text("\n".join(lines) + "\n")


def load_albedo(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"albedo file not found: {path}")
    rows = [(n, l.split("#", 1)[0].split()) for n, l in enumerate(path.read_text().splitlines(), 1)]
    rows = [(n, t) for n, t in rows if t]
    it = iter(rows)

    def expect(key):
        try:
            n, t = next(it)
        except StopIteration:
            raise FormatError(f"{path}: unexpected end of file, expected {key!r}") from None
        if t[0] != key or len(t) != 2:
            raise FormatError(f"{path}:{n}: expected '{key} <value>'")
        return n, t[1]

    def numbers(count, kind):
        out = []
        for _ in range(count):
            try:
                n, t = next(it)
                out.append(kind(t[0]))
            except StopIteration:
                raise FormatError(f"{path}: file ends inside a block of {count} values") from None
            except ValueError:
                raise FormatError(f"{path}:{n}: bad value {t[0]!r}") from None
        return out

    _, mode = expect("mode")
    try:
        if mode == "global":
            n, v = expect("value")
            return AlbedoModel.global_(float(v))
        if mode == "grouped":
            _, k = expect("groups")
            values = numbers(int(k), float)
            _, n = expect("labels")
            labels = numbers(int(n), int)
            return AlbedoModel.grouped(np.array(labels), np.array(values))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    raise FormatError(f"{path}: unknown albedo mode {mode!r}")


# csv -------------------------------------------------------------------------


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


def read_falloff_csv(path):
    """``distance,intensity`` columns (header required) as two arrays."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"distance", "intensity"} <= set(reader.fieldnames):
            raise FormatError(f"{path}: needs a header with 'distance' and 'intensity' columns")
        d, i = [], []
        for lineno, row in enumerate(reader, 2):
            try:
                d.append(float(row["distance"]))
                i.append(float(row["intensity"]))
            except (TypeError, ValueError):
                raise FormatError(f"{path}:{lineno}: malformed row") from None
    return np.array(d), np.array(i)


def iteration_rows(history):
    """Diagnostics CSV rows for a refinement history."""
    return [{"iteration": r.iteration, "n_obs": r.n_obs, "E_p": r.E_p, "E_s": r.E_s, "E_r": r.E_r,
             "max_delta": r.max_delta} for r in history]



# scene directories -------------------------------------------------------------


def save_scene(directory, scene):
    """Write a synthetic scene: meshes, views with images, albedo and metadata.

    Layout: ``truth.ply``, ``degraded.ply``, ``views.txt`` (+ images),
    ``albedo.txt``, ``materials.txt`` and ``scene.yaml`` (kind, light
    model, generation parameters).
    """
    import yaml

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_mesh(d / "truth.ply", scene.truth)
    write_mesh(d / "degraded.ply", scene.degraded)
    save_views(d / "views.txt", scene.views)
    save_albedo(d / "albedo.txt", scene.albedo)
    np.savetxt(d / "materials.txt", np.asarray(scene.materials, dtype=np.int64), fmt="%d")
    params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in scene.params.items()
              if k != "intrinsics"}
    meta = {"kind": scene.kind,
            "light": {"brightness_c": scene.light.brightness_c, "ambient": scene.light.ambient,
                      "gamma": scene.light.gamma},
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.items()}}
    (d / "scene.yaml").write_text(yaml.safe_dump(meta, sort_keys=True))
    return d


def load_scene(directory):
    """Read a directory written by :func:`save_scene` into a SyntheticScene."""
    import yaml

    from .shading import LightModel
    from .synth import SyntheticScene

    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"scene directory not found: {d}")
    meta = yaml.safe_load((d / "scene.yaml").read_text()) if (d / "scene.yaml").exists() else {}
    light = LightModel(**meta.get("light", {}))
    truth = read_mesh(d / "truth.ply") if (d / "truth.ply").exists() else None
    degraded = read_mesh(d / "degraded.ply")
    materials = (np.loadtxt(d / "materials.txt", dtype=np.int64).reshape(-1)
                 if (d / "materials.txt").exists() else np.zeros(degraded.n_vertices, np.int64))
    return SyntheticScene(meta.get("kind", "custom"), truth, degraded, load_views(d / "views.txt"),
                          light, load_albedo(d / "albedo.txt"), materials,
                          params=meta.get("params", {}))
