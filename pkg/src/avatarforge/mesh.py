"""Zero-level-set extraction and OBJ/PLY export."""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from skimage import measure

from .exceptions import ContractError
from .geometry import clean_mesh, face_areas


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    colors: Optional[np.ndarray] = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.clip(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3), 0.0, 1.0)

    def validate(self, area_tol=1e-10):
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ContractError("triangle index out of range")
        if len(self.triangles) and face_areas(self.vertices, self.triangles).min() <= area_tol:
            raise ContractError("mesh has degenerate triangles")
        if self.colors is not None and len(self.colors) != len(self.vertices):
            raise ContractError("one colour per vertex required")
        return self


def _grid_sdf(field, res, chunk=65536):
    b = field.bound
    lin = np.linspace(-b, b, res)
    xs, ys, zs = np.meshgrid(lin, lin, lin, indexing="ij")
    pts = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    out = np.empty(len(pts), dtype=np.float32)
    dtype = getattr(field, "dtype", torch.float32)
    with torch.no_grad():
        for s in range(0, len(pts), chunk):
            out[s:s + chunk] = field.sdf(torch.as_tensor(pts[s:s + chunk], dtype=dtype)).float().numpy()
    return out.reshape(res, res, res), lin[1] - lin[0]


def _bake_colors(field, vertices, chunk=16384):
    dtype = getattr(field, "dtype", torch.float32)
    cols = np.empty_like(vertices)
    for s in range(0, len(vertices), chunk):
        x = torch.as_tensor(vertices[s:s + chunk], dtype=dtype).requires_grad_(True)
        with torch.enable_grad():
            f, feat = field.sdf_features(x)
            (g,) = torch.autograd.grad(f.sum(), x)
        n = g / g.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        with torch.no_grad():
            # viewer placed along the outward normal, looking back at the surface
            c = field.color(x.detach(), -n, None if feat is None else feat.detach())
        cols[s:s + chunk] = c.double().numpy()
    return cols


def marching_cubes(field, grid_resolution=256, iso=0.0, with_colors=True):
    if grid_resolution < 16:
        raise ContractError("grid_resolution must be at least 16")
    vol, step = _grid_sdf(field, grid_resolution)
    if not vol.min() < iso < vol.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64),
                            np.zeros((0, 3)) if with_colors else None)
    v, f, _, _ = measure.marching_cubes(vol, iso, spacing=(step,) * 3)
    v = v - field.bound
    v, f = clean_mesh(v, f)
    colors = _bake_colors(field, v) if with_colors and len(v) else None
    return TriangleMesh(v, f, colors)


def export(mesh, path, format=None):
    """Write ASCII OBJ (``v x y z r g b``) or ASCII PLY with uchar vertex colours."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in ("obj", "ply"):
        raise ContractError(f"unsupported export format {fmt!r}")
    mesh.validate()
    lines = []
    cols = mesh.colors
    if fmt == "obj":
        for i, v in enumerate(mesh.vertices):
            if cols is not None:
                c = cols[i]
                lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}")
            else:
                lines.append(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}")
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    else:
        lines += ["ply", "format ascii 1.0", f"element vertex {len(mesh.vertices)}",
                  "property float x", "property float y", "property float z"]
        if cols is not None:
            lines += ["property uchar red", "property uchar green", "property uchar blue"]
        lines += [f"element face {len(mesh.triangles)}", "property list uchar int vertex_indices",
                  "end_header"]
        q = None if cols is None else np.clip(np.round(cols * 255.0), 0, 255).astype(int)
        for i, v in enumerate(mesh.vertices):
            row = f"{v[0]:.6f} {v[1]:.6f} {v[2]:.6f}"
            if q is not None:
                row += f" {q[i, 0]} {q[i, 1]} {q[i, 2]}"
            lines.append(row)
        lines += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    # raises OSError for unwritable paths
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path
