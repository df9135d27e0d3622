"""Scene meshes, sparse annotations, predictions and pseudo labels.

Meshes are read from and written to PLY (ASCII or binary little-endian).
Label files are small UTF-8 CSVs with LF line endings.
"""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_NUM_CATEGORIES = 20

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PLYError(ValueError):
    """Malformed or inconsistent PLY input; ``offset`` is the byte position."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class LabelError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SceneMesh:
    """Triangle mesh with optional per-vertex RGB and dense ground-truth labels.

    ``labels`` comes from an optional integer ``label`` vertex property and is only used
    for evaluation.
    """

    vertices: np.ndarray
    faces: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    colors: np.ndarray | None = None
    scene_id: str = ""
    labels: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (N, 3), got {v.shape}")
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        n = len(v)
        if f.size:
            if f.min() < 0 or f.max() >= n:
                raise ValueError(f"face index out of range for {n} vertices")
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face with repeated vertex index")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))
        if self.colors is not None:
            c = np.asarray(self.colors, dtype=np.float64)
            if c.shape != (n, 3):
                raise ValueError(f"colors must be ({n}, 3), got {c.shape}")
            if np.any(c < 0) or np.any(c > 255):
                raise ValueError("colors must lie in [0, 255]")
            object.__setattr__(self, "colors", _frozen(c))
        if self.labels is not None:
            lab = np.asarray(self.labels, dtype=np.int64)
            if lab.shape != (n,):
                raise ValueError(f"labels must have shape ({n},), got {lab.shape}")
            object.__setattr__(self, "labels", _frozen(lab))

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def num_faces(self) -> int:
        return len(self.faces)

    def replace(self, **changes) -> "SceneMesh":
        kw = dict(vertices=self.vertices, faces=self.faces, colors=self.colors,
                  scene_id=self.scene_id, labels=self.labels)
        kw.update(changes)
        return SceneMesh(**kw)


@dataclass(frozen=True)
class SparseLabelSet:
    entries: dict[int, int]
    num_categories: int = DEFAULT_NUM_CATEGORIES

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def indices(self) -> np.ndarray:
        return np.fromiter(self.entries.keys(), dtype=np.int64, count=len(self.entries))

    @property
    def categories(self) -> np.ndarray:
        return np.fromiter(self.entries.values(), dtype=np.int64, count=len(self.entries))


@dataclass(frozen=True, eq=False)
class PredictionField:
    logits: np.ndarray

    def __post_init__(self):
        lg = np.asarray(self.logits, dtype=np.float64)
        if lg.ndim != 2:
            raise ValueError("logits must be (N, C)")
        object.__setattr__(self, "logits", _frozen(lg))

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.logits, axis=1)


@dataclass(frozen=True, eq=False)
class PseudoLabelSet:
    """Harvested ``(vertex, category, reliable posterior)`` triples."""

    indices: np.ndarray
    categories: np.ndarray
    posteriors: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1)
        cat = np.asarray(self.categories, dtype=np.int64).reshape(-1)
        post = np.asarray(self.posteriors, dtype=np.float64).reshape(-1)
        if not (len(idx) == len(cat) == len(post)):
            raise ValueError("indices, categories and posteriors differ in length")
        if len(np.unique(idx)) != len(idx):
            raise ValueError("duplicate vertex index in pseudo labels")
        if np.any(~np.isfinite(post)) or np.any(post < 0) or np.any(post > 1):
            raise ValueError("posteriors must lie in [0, 1]")
        object.__setattr__(self, "indices", _frozen(idx))
        object.__setattr__(self, "categories", _frozen(cat))
        object.__setattr__(self, "posteriors", _frozen(post))

    @classmethod
    def empty(cls) -> "PseudoLabelSet":
        return cls(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0))

    def __len__(self) -> int:
        return len(self.indices)

    def as_dict(self) -> dict[int, int]:
        return dict(zip(self.indices.tolist(), self.categories.tolist()))


# ---------------------------------------------------------------------------
# PLY


@dataclass
class _Element:
    name: str
    count: int
    props: list  # (name, dtype) or (name, count_dtype, item_dtype)


def _parse_header(data: bytes):
    if not data.startswith(b"ply"):
        raise PLYError("missing 'ply' magic", 0)
    fmt = None
    elements: list[_Element] = []
    pos = 0
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise PLYError("header not terminated by end_header", pos)
        line = data[pos:nl].decode("ascii", errors="replace").strip()
        start = pos
        pos = nl + 1
        if not line or line.startswith(("comment", "obj_info")) or line == "ply":
            continue
        tok = line.split()
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] not in ("ascii", "binary_little_endian"):
                raise PLYError(f"unsupported format {line!r}", start)
            fmt = tok[1]
        elif tok[0] == "element":
            try:
                elements.append(_Element(tok[1], int(tok[2]), []))
            except (IndexError, ValueError):
                raise PLYError(f"bad element line {line!r}", start) from None
            if elements[-1].count < 0:
                raise PLYError("negative element count", start)
        elif tok[0] == "property":
            if not elements:
                raise PLYError("property before any element", start)
            try:
                if tok[1] == "list":
                    prop = (tok[4], _PLY_TYPES[tok[2]], _PLY_TYPES[tok[3]])
                else:
                    prop = (tok[2], _PLY_TYPES[tok[1]])
            except (IndexError, KeyError):
                raise PLYError(f"bad property line {line!r}", start) from None
            elements[-1].props.append(prop)
        elif tok[0] == "end_header":
            break
        else:
            raise PLYError(f"unknown header keyword {tok[0]!r}", start)
    if fmt is None:
        raise PLYError("missing format line", 0)
    return fmt, elements, pos


def _read_binary(data: bytes, el: _Element, pos: int):
    """Return (dict of columns, list-property lists, new position)."""
    if all(len(p) == 2 for p in el.props):
        dt = np.dtype([(p[0], "<" + p[1]) for p in el.props])
        end = pos + dt.itemsize * el.count
        if end > len(data):
            raise PLYError(f"truncated {el.name} payload", len(data))
        arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
        return {name: arr[name] for name in arr.dtype.names}, {}, end
    # fast path: single list property whose every count is 3
    if len(el.props) == 1 and len(el.props[0]) == 3:
        name, cdt, idt = el.props[0]
        dt = np.dtype([("n", "<" + cdt), ("v", "<" + idt, (3,))])
        end = pos + dt.itemsize * el.count
        if end <= len(data):
            arr = np.frombuffer(data, dtype=dt, count=el.count, offset=pos)
            if np.all(arr["n"] == 3):
                return {}, {name: arr["v"].astype(np.int64)}, end
    cols: dict = {p[0]: [] for p in el.props}
    for _ in range(el.count):
        for p in el.props:
            if len(p) == 2:
                dt = np.dtype("<" + p[1])
                if pos + dt.itemsize > len(data):
                    raise PLYError(f"truncated {el.name} payload", len(data))
                cols[p[0]].append(np.frombuffer(data, dt, 1, pos)[0])
                pos += dt.itemsize
            else:
                cdt, idt = np.dtype("<" + p[1]), np.dtype("<" + p[2])
                if pos + cdt.itemsize > len(data):
                    raise PLYError(f"truncated {el.name} payload", len(data))
                n = int(np.frombuffer(data, cdt, 1, pos)[0])
                pos += cdt.itemsize
                if pos + n * idt.itemsize > len(data):
                    raise PLYError(f"truncated {el.name} payload", len(data))
                cols[p[0]].append(np.frombuffer(data, idt, n, pos).astype(np.int64))
                pos += n * idt.itemsize
    scalars = {k: np.asarray(v) for k, v in cols.items() if not _is_list(el, k)}
    lists = {k: v for k, v in cols.items() if _is_list(el, k)}
    return scalars, lists, pos


def _is_list(el: _Element, name: str) -> bool:
    return any(p[0] == name and len(p) == 3 for p in el.props)


def _read_ascii(data: bytes, elements: list[_Element], pos: int):
    out = {}
    for el in elements:
        scalars: dict = {p[0]: [] for p in el.props if len(p) == 2}
        lists: dict = {p[0]: [] for p in el.props if len(p) == 3}
        for _ in range(el.count):
            while True:
                if pos >= len(data):
                    raise PLYError(f"truncated {el.name} payload", len(data))
                nl = data.find(b"\n", pos)
                nl = len(data) if nl < 0 else nl
                line_start, line = pos, data[pos:nl]
                pos = nl + 1
                if line.strip():
                    break
            tok = line.split()
            k = 0
            try:
                for p in el.props:
                    if len(p) == 2:
                        scalars[p[0]].append(float(tok[k]))
                        k += 1
                    else:
                        n = int(tok[k])
                        lists[p[0]].append(np.array([int(t) for t in tok[k + 1:k + 1 + n]], dtype=np.int64))
                        if len(lists[p[0]][-1]) != n:
                            raise IndexError
                        k += 1 + n
            except (IndexError, ValueError):
                raise PLYError(f"malformed {el.name} record", line_start) from None
        out[el.name] = ({k: np.asarray(v) for k, v in scalars.items()}, lists, pos)
    return out


def _faces_from_lists(polys, offset: int) -> np.ndarray:
    if isinstance(polys, np.ndarray):
        return polys
    tris = []
    for poly in polys:
        if len(poly) < 3:
            raise PLYError("face with fewer than 3 vertices", offset)
        for j in range(1, len(poly) - 1):
            tris.append((poly[0], poly[j], poly[j + 1]))
    return np.asarray(tris, dtype=np.int64).reshape(-1, 3)


def load_scene(path: str | os.PathLike, scene_id: str | None = None) -> SceneMesh:
    """Read a PLY mesh. Vertex normals in the file are ignored."""
    path = Path(path)
    data = path.read_bytes()
    fmt, elements, pos = _parse_header(data)
    names = [e.name for e in elements]
    if "vertex" not in names:
        raise PLYError("no vertex element", 0)
    payload = {}
    if fmt == "ascii":
        payload = _read_ascii(data, elements, pos)
    else:
        for el in elements:
            scalars, lists, pos = _read_binary(data, el, pos)
            payload[el.name] = (scalars, lists, pos)
    vel = elements[names.index("vertex")]
    vs, _, vend = payload["vertex"]
    for axis in "xyz":
        if axis not in vs:
            raise PLYError(f"vertex property {axis!r} missing", 0)
    vertices = np.column_stack([vs[a].astype(np.float32) for a in "xyz"]).astype(np.float64)
    vertices = vertices.reshape(vel.count, 3)
    colors = None
    if all(c in vs for c in ("red", "green", "blue")):
        colors = np.column_stack([vs[c] for c in ("red", "green", "blue")]).astype(np.float64)
    labels = vs["label"].astype(np.int64) if "label" in vs else None

    faces = np.zeros((0, 3), dtype=np.int64)
    if "face" in payload:
        fel = elements[names.index("face")]
        _, lists, fend = payload["face"]
        key = next((p[0] for p in fel.props if len(p) == 3), None)
        if key is None:
            raise PLYError("face element without a list property", vend)
        faces = _faces_from_lists(lists[key], vend)
        if faces.size and (faces.min() < 0 or faces.max() >= len(vertices)):
            bad = int(np.flatnonzero((faces < 0).any(1) | (faces >= len(vertices)).any(1))[0])
            raise PLYError(f"face {bad} references a vertex outside [0, {len(vertices)})", vend)
    try:
        return SceneMesh(vertices, faces, colors, scene_id if scene_id is not None else path.stem, labels)
    except ValueError as err:
        raise PLYError(str(err), vend) from None


def save_scene(mesh: SceneMesh, path: str | os.PathLike, binary: bool = True) -> None:
    n = mesh.num_vertices
    cols = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if mesh.colors is not None:
        cols += [("red", "u1"), ("green", "u1"), ("blue", "u1")]
    if mesh.labels is not None:
        cols += [("label", "<i4")]
    vert = np.empty(n, dtype=np.dtype(cols))
    for k, a in enumerate("xyz"):
        vert[a] = mesh.vertices[:, k]
    if mesh.colors is not None:
        rgb = np.clip(np.rint(mesh.colors), 0, 255).astype(np.uint8)
        for k, c in enumerate(("red", "green", "blue")):
            vert[c] = rgb[:, k]
    if mesh.labels is not None:
        vert["label"] = mesh.labels
    tname = {"<f4": "float", "u1": "uchar", "<i4": "int"}
    header = ["ply", f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
              f"element vertex {n}"]
    header += [f"property {tname[t]} {c}" for c, t in cols]
    header += [f"element face {mesh.num_faces}", "property list uchar int vertex_indices", "end_header"]
    head = ("\n".join(header) + "\n").encode("ascii")
    if binary:
        fdt = np.dtype([("n", "u1"), ("v", "<i4", (3,))])
        fa = np.empty(mesh.num_faces, dtype=fdt)
        fa["n"] = 3
        fa["v"] = mesh.faces
        body = vert.tobytes() + fa.tobytes()
    else:
        buf = io.StringIO()
        for row in vert:
            vals = [repr(float(np.float32(row[c]))) if t == "<f4" else str(int(row[c])) for c, t in cols]
            buf.write(" ".join(vals) + "\n")
        for f in mesh.faces:
            buf.write(f"3 {f[0]} {f[1]} {f[2]}\n")
        body = buf.getvalue().encode("ascii")
    Path(path).write_bytes(head + body)


# ---------------------------------------------------------------------------
# label CSVs


def _csv_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not row[0].strip().lstrip("-").isdigit():
                continue  # header
            yield lineno, row


def load_sparse_labels(path, mesh: SceneMesh, num_categories: int = DEFAULT_NUM_CATEGORIES) -> SparseLabelSet:
    entries: dict[int, int] = {}
    for lineno, row in _csv_rows(path):
        try:
            idx, cat = int(row[0]), int(row[1])
        except (IndexError, ValueError):
            raise LabelError(f"{path}:{lineno}: expected 'vertex_index,category_id'") from None
        if not 0 <= idx < mesh.num_vertices:
            raise LabelError(f"{path}:{lineno}: vertex index {idx} out of range [0, {mesh.num_vertices})")
        if not 0 <= cat < num_categories:
            raise LabelError(f"{path}:{lineno}: category {cat} not in [0, {num_categories})")
        if idx in entries:
            raise LabelError(f"{path}:{lineno}: duplicate vertex index {idx}")
        entries[idx] = cat
    return SparseLabelSet(entries, num_categories)


def save_sparse_labels(labels: SparseLabelSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("vertex_index,category_id\n")
        for idx, cat in labels.entries.items():
            fh.write(f"{idx},{cat}\n")


def save_pseudo_labels(labels: PseudoLabelSet, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("vertex_index,category_id,posterior\n")
        for idx, cat, post in zip(labels.indices.tolist(), labels.categories.tolist(),
                                  labels.posteriors.tolist()):
            fh.write(f"{idx},{cat},{post:.6f}\n")


def load_pseudo_labels(path) -> PseudoLabelSet:
    idx, cat, post = [], [], []
    for lineno, row in _csv_rows(path):
        try:
            idx.append(int(row[0]))
            cat.append(int(row[1]))
            post.append(float(row[2]))
        except (IndexError, ValueError):
            raise LabelError(f"{path}:{lineno}: expected 'vertex_index,category_id,posterior'") from None
    return PseudoLabelSet(np.array(idx, np.int64), np.array(cat, np.int64), np.array(post))
