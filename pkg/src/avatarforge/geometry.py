"""Triangle-mesh geometry: closest points, signed distance, topology checks."""
import numpy as np
from scipy.spatial import cKDTree

# region codes returned by closest_point_on_triangles
FACE, VERT_A, VERT_B, VERT_C, EDGE_AB, EDGE_AC, EDGE_BC = range(7)


def _dot(u, v):
    return np.einsum("...i,...i->...", u, v)


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangle ``abc`` to ``p``, all arrays ``(..., 3)``.

    Returns ``(q, region)`` where ``region`` tells which feature (face interior,
    vertex or edge) contains ``q``.  Voronoi-region walk after Ericson,
    *Real-Time Collision Detection*, 5.1.5.
    """
    ab, ac = b - a, c - a
    ap, bp, cp = p - a, p - b, p - c
    d1, d2 = _dot(ab, ap), _dot(ac, ap)
    d3, d4 = _dot(ab, bp), _dot(ac, bp)
    d5, d6 = _dot(ab, cp), _dot(ac, cp)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    with np.errstate(divide="ignore", invalid="ignore"):
        denom = va + vb + vc
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        q = a + ab * v[..., None] + ac * w[..., None]
        region = np.full(p.shape[:-1], FACE, dtype=np.int8)

        # assigned in reverse priority so earlier tests win
        m = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        t = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        q = np.where(m[..., None], b + (c - b) * t[..., None], q)
        region[m] = EDGE_BC

        m = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        t = d2 / (d2 - d6)
        q = np.where(m[..., None], a + ac * t[..., None], q)
        region[m] = EDGE_AC

        m = (d6 >= 0) & (d5 <= d6)
        q = np.where(m[..., None], c, q)
        region[m] = VERT_C

        m = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        t = d1 / (d1 - d3)
        q = np.where(m[..., None], a + ab * t[..., None], q)
        region[m] = EDGE_AB

        m = (d3 >= 0) & (d4 <= d3)
        q = np.where(m[..., None], b, q)
        region[m] = VERT_B

        m = (d1 <= 0) & (d2 <= 0)
        q = np.where(m[..., None], a, q)
        region[m] = VERT_A
    return q, region


def face_normals(vertices, faces, normalize=True):
    v = vertices[faces]
    n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    if normalize:
        n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return n


def face_areas(vertices, faces):
    return 0.5 * np.linalg.norm(face_normals(vertices, faces, normalize=False), axis=1)


def edge_face_counts(faces):
    """Map each undirected edge to the number of faces using it."""
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    uniq, counts = np.unique(e, axis=0, return_counts=True)
    return uniq, counts


def is_watertight(faces):
    faces = np.asarray(faces)
    if len(faces) == 0:
        return False
    _, counts = edge_face_counts(faces)
    return bool(np.all(counts == 2))


def euler_characteristic(vertices, faces):
    edges, _ = edge_face_counts(faces)
    return len(vertices) - len(edges) + len(faces)


class MeshDistance:
    """Signed distance queries against a closed triangle mesh.

    Distances come from the nearest of ``k`` candidate triangles (by centroid);
    sign from angle-weighted pseudo-normals (Baerentzen & Aanaes, 2005), which is
    exact for watertight manifold meshes.  Negative inside.
    """

    def __init__(self, vertices, faces, k=24):
        self.vertices = np.asarray(vertices, dtype=np.float64)
        self.faces = np.asarray(faces, dtype=np.int64)
        self.k = min(k, len(self.faces))
        tri = self.vertices[self.faces]
        self._tree = cKDTree(tri.mean(axis=1))
        self._fn = face_normals(self.vertices, self.faces)

        # angle-weighted vertex normals
        vn = np.zeros_like(self.vertices)
        for i in range(3):
            e1 = tri[:, (i + 1) % 3] - tri[:, i]
            e2 = tri[:, (i + 2) % 3] - tri[:, i]
            cosang = _dot(e1, e2) / np.maximum(
                np.linalg.norm(e1, axis=1) * np.linalg.norm(e2, axis=1), 1e-300)
            ang = np.arccos(np.clip(cosang, -1.0, 1.0))
            np.add.at(vn, self.faces[:, i], self._fn * ang[:, None])
        self._vn = vn

        # edge pseudo-normals: sum of the two adjacent face normals
        edges = np.sort(np.stack([self.faces[:, [0, 1]], self.faces[:, [0, 2]],
                                  self.faces[:, [1, 2]]], axis=1), axis=2)
        flat = edges.reshape(-1, 2)
        _, inverse = np.unique(flat, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        en = np.zeros((inverse.max() + 1, 3))
        np.add.at(en, inverse, np.repeat(self._fn, 3, axis=0))
        self._en = en[inverse].reshape(-1, 3, 3)  # (F, [ab, ac, bc], 3)

    def __call__(self, points, chunk=16384):
        points = np.asarray(points, dtype=np.float64)
        out = np.empty(len(points))
        for s in range(0, len(points), chunk):
            out[s:s + chunk] = self._query(points[s:s + chunk])
        return out

    def _query(self, p):
        _, cand = self._tree.query(p, k=self.k)
        cand = cand.reshape(len(p), -1)
        tri = self.vertices[self.faces[cand]]  # (n, k, 3, 3)
        pp = np.broadcast_to(p[:, None, :], tri.shape[:2] + (3,))
        q, region = closest_point_on_triangles(pp, tri[..., 0, :], tri[..., 1, :], tri[..., 2, :])
        d2 = np.sum((pp - q) ** 2, axis=-1)
        best = np.argmin(d2, axis=1)
        rows = np.arange(len(p))
        fid = cand[rows, best]
        reg = region[rows, best]
        q = q[rows, best]

        normal = self._fn[fid].copy()
        for code, col in ((EDGE_AB, 0), (EDGE_AC, 1), (EDGE_BC, 2)):
            m = reg == code
            normal[m] = self._en[fid[m], col]
        for code, col in ((VERT_A, 0), (VERT_B, 1), (VERT_C, 2)):
            m = reg == code
            normal[m] = self._vn[self.faces[fid[m], col]]
        sign = np.where(_dot(p - q, normal) < 0, -1.0, 1.0)
        return sign * np.sqrt(d2[rows, best])


def icosphere(subdivisions=3, radius=1.0):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.asarray(verts) * radius, np.asarray(faces, dtype=np.int64)


def clean_mesh(vertices, faces, area_tol=1e-10):
    """Merge coincident vertices and drop collapsed triangles."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    if len(vertices) == 0:
        return vertices.reshape(0, 3), faces.reshape(0, 3)
    key = np.round(vertices / 1e-9).astype(np.int64)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    inverse = inverse.reshape(-1)
    vertices = vertices[first]
    faces = inverse[faces]
    keep = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
    faces = faces[keep]
    faces = faces[face_areas(vertices, faces) > area_tol]
    used = np.unique(faces)
    remap = -np.ones(len(vertices), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return vertices[used], remap[faces]
