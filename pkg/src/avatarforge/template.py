"""Template bodies used to initialise the avatar field, plus ASCII OBJ/PLY loading."""
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from skimage import measure

from .exceptions import ValidationError
from .geometry import clean_mesh, icosphere, is_watertight
from .sampler import PoseSkeleton


@dataclass
class TemplateBody:
    vertices: np.ndarray
    faces: np.ndarray
    face_center: np.ndarray
    body_center: np.ndarray
    pose_skeleton: Optional[PoseSkeleton] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        self.face_center = np.asarray(self.face_center, dtype=np.float64)
        self.body_center = np.asarray(self.body_center, dtype=np.float64)

    @property
    def bbox(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def validate(self):
        if self.faces.size == 0 or self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
            raise ValidationError("template faces reference missing vertices")
        if not is_watertight(self.faces):
            raise ValidationError("template mesh is not watertight "
                                  "(some edge is not shared by exactly two faces)")
        lo, hi = self.bbox
        upper = lo[1] + 2.0 * (hi[1] - lo[1]) / 3.0
        inside = np.all(self.face_center >= lo - 1e-9) and np.all(self.face_center <= hi + 1e-9)
        if not inside or self.face_center[1] < upper - 1e-9:
            raise ValidationError("face_center must lie in the upper third of the template bounding box")
        return self


def sphere_template(radius=1.0, subdivisions=4):
    v, f = icosphere(subdivisions, radius)
    return TemplateBody(v, f, face_center=(0.0, 0.75 * radius, 0.0), body_center=(0.0, 0.0, 0.0))


def _capsule(p, a, b, r):
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    h = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - a - h[:, None] * ab, axis=1) - r


def _smooth_min(a, b, k):
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def humanoid_sdf(points, skeleton=None):
    """Analytic capsule-humanoid distance (approximate; smooth union of capsules)."""
    s = skeleton or PoseSkeleton.canonical()
    j = s.joints
    head_c = np.array([0.0, 0.68, 0.0])
    parts = [
        np.linalg.norm(points - head_c, axis=1) - 0.11,
        _capsule(points, j["neck"] + (0, -0.02, 0), head_c + (0, -0.06, 0), 0.05),
        _capsule(points, (0.0, 0.08, 0.0), (0.0, 0.4, 0.0), 0.13),
        _capsule(points, j["right_shoulder"] * (0.6, 1, 1), j["left_shoulder"] * (0.6, 1, 1), 0.08),
        _capsule(points, j["right_hip"] * (0.5, 1, 1) + (0, 0.04, 0), j["left_hip"] * (0.5, 1, 1) + (0, 0.04, 0), 0.1),
    ]
    for side in ("right", "left"):
        parts += [
            _capsule(points, j[f"{side}_shoulder"], j[f"{side}_elbow"], 0.05),
            _capsule(points, j[f"{side}_elbow"], j[f"{side}_wrist"], 0.045),
            _capsule(points, j[f"{side}_hip"], j[f"{side}_knee"], 0.075),
            _capsule(points, j[f"{side}_knee"], j[f"{side}_ankle"], 0.06),
        ]
    d = parts[0]
    for p in parts[1:]:
        d = _smooth_min(d, p, 0.03)
    return d


@lru_cache(maxsize=4)
def _humanoid_mesh(resolution):
    lin = np.linspace(-1.0, 1.0, resolution)
    grid = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    vol = humanoid_sdf(grid).reshape((resolution,) * 3)
    step = lin[1] - lin[0]
    v, f, _, _ = measure.marching_cubes(vol, 0.0, spacing=(step,) * 3)
    v = v - 1.0
    return clean_mesh(v, f)


def humanoid_template(resolution=96):
    """Bundled generic capsule humanoid in A-pose, about 1.7 units tall, facing +z."""
    v, f = _humanoid_mesh(resolution)
    sk = PoseSkeleton.canonical()
    return TemplateBody(v.copy(), f.copy(), face_center=sk.face_center,
                        body_center=(0.0, 0.0, 0.0), pose_skeleton=sk)


def load_mesh(path):
    """Read an ASCII OBJ or PLY file -> (vertices, faces, colors or None)."""
    path = str(path)
    if path.lower().endswith(".obj"):
        return _load_obj(path)
    if path.lower().endswith(".ply"):
        return _load_ply(path)
    raise ValidationError(f"unsupported mesh format: {path}")


def _load_obj(path):
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v":
                vals = [float(x) for x in parts[1:]]
                verts.append(vals[:3])
                if len(vals) >= 6:
                    colors.append(vals[3:6])
            elif parts[0] == "f":
                idx = [int(p.split("/")[0]) for p in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                for k in range(1, len(idx) - 1):
                    faces.append((idx[0], idx[k], idx[k + 1]))
    v = np.asarray(verts, dtype=np.float64).reshape(-1, 3)
    c = np.asarray(colors, dtype=np.float64) if len(colors) == len(verts) and colors else None
    return v, np.asarray(faces, dtype=np.int64).reshape(-1, 3), c


def _load_ply(path):
    with open(path) as fh:
        if fh.readline().strip() != "ply":
            raise ValidationError(f"{path} is not a PLY file")
        n_vert = n_face = 0
        props = []
        current = None
        while True:
            line = fh.readline()
            if not line:
                raise ValidationError(f"{path}: truncated PLY header")
            parts = line.split()
            if parts[0] == "format" and parts[1] != "ascii":
                raise ValidationError("only ASCII PLY is supported")
            if parts[0] == "element":
                current = parts[1]
                if current == "vertex":
                    n_vert = int(parts[2])
                elif current == "face":
                    n_face = int(parts[2])
            elif parts[0] == "property" and current == "vertex":
                props.append(parts[-1])
            elif parts[0] == "end_header":
                break
        rows = [fh.readline().split() for _ in range(n_vert)]
        data = np.asarray(rows, dtype=np.float64).reshape(n_vert, len(props))
        v = data[:, [props.index("x"), props.index("y"), props.index("z")]]
        c = None
        if all(k in props for k in ("red", "green", "blue")):
            c = data[:, [props.index("red"), props.index("green"), props.index("blue")]] / 255.0
        faces = []
        for _ in range(n_face):
            idx = [int(x) for x in fh.readline().split()]
            n, idx = idx[0], idx[1:]
            for k in range(1, n - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return v, np.asarray(faces, dtype=np.int64).reshape(-1, 3), c


def template_from_mesh(path, face_center=None, body_center=None, skeleton=None):
    """Build a template from a user-supplied mesh (e.g. an SMPL export)."""
    v, f, _ = load_mesh(path)
    lo, hi = v.min(axis=0), v.max(axis=0)
    if body_center is None:
        body_center = 0.5 * (lo + hi)
    if face_center is None:
        face_center = skeleton.face_center if skeleton else np.array(
            [0.5 * (lo[0] + hi[0]), lo[1] + 0.9 * (hi[1] - lo[1]), 0.5 * (lo[2] + hi[2])])
    return TemplateBody(v, f, face_center, body_center, skeleton)
