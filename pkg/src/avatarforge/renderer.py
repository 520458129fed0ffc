"""Differentiable SDF volume rendering with NeuS-style unbiased weights."""
from dataclasses import dataclass, field as dc_field
from typing import Optional, Tuple

import numpy as np
import torch

from ._validation import check_positive, check_rotation, check_unit_vector
from .exceptions import ContractError

RENDER_TYPES = ("color", "normal", "textureless")
AMBIENT = 0.3
DIFFUSE = 0.7
COLOR_BACKGROUND = 1.0
NORMAL_BACKGROUND = 0.5
OPACITY_EPS = 1e-3


@dataclass
class Camera:
    """Pinhole camera in OpenCV convention (x right, y down, z forward).

    ``rotation`` maps world to camera coordinates: ``x_cam = R @ x_world + t``.
    """
    rotation: np.ndarray
    translation: np.ndarray
    focal: Tuple[float, float]
    principal: Tuple[float, float]
    resolution: Tuple[int, int]

    def __post_init__(self):
        self.rotation = check_rotation(self.rotation)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.focal = (float(self.focal[0]), float(self.focal[1]))
        self.principal = (float(self.principal[0]), float(self.principal[1]))
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if min(self.resolution) < 8:
            raise ContractError(f"camera resolution must be at least 8x8, got {self.resolution}")
        if min(self.focal) <= 0:
            raise ContractError("focal lengths must be positive")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov=40.0, resolution=(64, 64)):
        """Camera at ``eye`` looking at ``target``; ``fov`` is vertical, in degrees."""
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        forward = target - eye
        dist = np.linalg.norm(forward)
        if dist < 1e-12:
            raise ContractError("eye and target coincide")
        forward /= dist
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(forward, up)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(forward, (0.0, 0.0, 1.0) if abs(forward[2]) < 0.9 else (1.0, 0.0, 0.0))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        H, W = resolution
        fy = 0.5 * H / np.tan(np.radians(fov) / 2.0)
        return cls(R, -R @ eye, (fy, fy), (W / 2.0, H / 2.0), (H, W))

    @property
    def center(self):
        return -self.rotation.T @ self.translation

    @property
    def forward(self):
        return self.rotation[2].copy()

    def project(self, points):
        """World points -> (pixel uv, camera depth)."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.focal[0] * pc[:, 0] / z + self.principal[0]
            v = self.focal[1] * pc[:, 1] / z + self.principal[1]
        return np.stack([u, v], axis=1), z


def generate_rays(camera):
    """One ray per pixel through pixel centres; returns ``(origins, dirs)`` of shape (H*W, 3)."""
    if not isinstance(camera, Camera):
        raise ContractError("generate_rays expects a Camera")
    check_rotation(camera.rotation)
    H, W = camera.resolution
    v, u = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, indexing="ij")
    d_cam = np.stack([(u - camera.principal[0]) / camera.focal[0],
                      (v - camera.principal[1]) / camera.focal[1],
                      np.ones_like(u)], axis=-1).reshape(-1, 3)
    d = d_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def ray_box(origins, dirs, bound):
    """Slab intersection with the cube [-bound, bound]^3 -> (near, far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (-bound - origins) * inv
        t1 = (bound - origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(tmin, 0.0)
    return near, tmax, tmax > near + 1e-9


def neus_weights(sdf, s):
    """Discrete unbiased weights from SDF values along rays (last axis).

    ``alpha_i = max((Phi(f_i) - Phi(f_{i+1})) / Phi(f_i), 0)`` with ``Phi`` the
    logistic CDF of scale ``s``; ``w_i = T_i * alpha_i``.  One weight per interval,
    so the output has one fewer entry than the input along the last axis.
    """
    as_numpy = not torch.is_tensor(sdf)
    if as_numpy:
        sdf = torch.as_tensor(np.asarray(sdf, dtype=np.float64))
    if sdf.shape[-1] < 2:
        raise ContractError("neus_weights needs at least 2 samples per ray")
    s_val = float(s.detach()) if torch.is_tensor(s) else float(s)
    if not s_val > 0:
        raise ContractError(f"logistic scale must be positive, got {s_val}")
    cdf = torch.sigmoid(sdf * s)
    prev, nxt = cdf[..., :-1], cdf[..., 1:]
    alpha = ((prev - nxt) / prev.clamp_min(1e-6)).clamp(0.0, 1.0)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1)
    w = trans * alpha
    return w.numpy() if as_numpy else w


@dataclass
class RaySamples:
    t_values: torch.Tensor  # (R, n) strictly increasing per ray
    points: torch.Tensor  # (R, n, 3)
    hit: np.ndarray  # (R,) False marks background rays

    @property
    def count(self):
        return self.t_values.shape[-1]


def _stratified(near, far, n, rng):
    u = np.full((len(near), n), 0.5) if rng is None else rng.uniform(size=(len(near), n))
    return near[:, None] + (far - near)[:, None] * (np.arange(n)[None, :] + u) / n


def _sample_pdf(bins, weights, n, rng):
    """Inverse-CDF sampling of ``n`` points per ray from piecewise-constant weights."""
    w = weights + 1e-5
    pdf = w / w.sum(axis=-1, keepdims=True)
    cdf = np.concatenate([np.zeros_like(pdf[:, :1]), np.cumsum(pdf, axis=-1)], axis=-1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n) + 0.5) / n, (len(bins), n))
    else:
        u = rng.uniform(size=(len(bins), n))
    out = np.empty((len(bins), n))
    for r in range(len(bins)):
        out[r] = np.interp(u[r], cdf[r], bins[r])
    return out


def sample_rays(field, origins, dirs, n_samples=64, n_importance=32, rng=None):
    """Stratified coarse samples plus importance samples guided by NeuS weights."""
    bound = float(field.bound)
    near, far, hit = ray_box(origins, dirs, bound)
    near, far = np.where(hit, near, 0.0), np.where(hit, far, 1e-3)
    t = _stratified(near, far, n_samples, rng)
    if n_importance > 0 and hit.any():
        dtype = field_dtype(field)
        w = np.zeros((len(t), n_samples - 1))
        with torch.no_grad():
            pts = torch.as_tensor(origins[hit, None] + dirs[hit, None] * t[hit, :, None], dtype=dtype)
            f = field.sdf(_clamp_cube(pts, bound))
            w[hit] = neus_weights(f, field.logistic_scale()).double().numpy()
        extra = _sample_pdf(t, w, n_importance, rng)
        t = np.sort(np.concatenate([t, extra], axis=-1), axis=-1)
        # keep strictly increasing
        t = np.maximum.accumulate(t + np.arange(t.shape[1]) * 1e-9, axis=-1)
    dtype = field_dtype(field)
    tt = torch.as_tensor(t, dtype=dtype)
    pts = torch.as_tensor(origins, dtype=dtype)[:, None] + torch.as_tensor(dirs, dtype=dtype)[:, None] * tt[..., None]
    return RaySamples(tt, _clamp_cube(pts, bound), hit)


def _clamp_cube(pts, bound):
    return pts.clamp(-bound, bound)


def field_dtype(field):
    return getattr(field, "dtype", torch.float32)


@dataclass
class RenderBundle:
    """One camera's renders; images are (H, W, 3) tensors in [0, 1]."""
    color: Optional[torch.Tensor]
    normal: Optional[torch.Tensor]
    textureless: Optional[torch.Tensor]
    opacity: torch.Tensor
    depth: torch.Tensor
    render_type_emitted: str
    weight_sums: torch.Tensor = dc_field(repr=False, default=None)

    def image(self, kind=None):
        return getattr(self, kind or self.render_type_emitted)

    def numpy(self, kind=None):
        return self.image(kind).detach().cpu().numpy()


def render(field, camera, kinds=("color",), light_dir=None, n_samples=64, n_importance=32,
           rng=None, chunk=4096, emit=None):
    """Render ``kinds`` (subset of color/normal/textureless) from ``camera``.

    Differentiable w.r.t. field parameters when grad mode is on.
    """
    kinds = tuple(kinds)
    for k in kinds:
        if k not in RENDER_TYPES:
            raise ContractError(f"unknown render type {k!r}")
    if "textureless" in kinds:
        if light_dir is None:
            light_dir = -camera.forward
        light_dir = check_unit_vector(light_dir, "light_dir")
    check_positive(float(field.logistic_scale().detach()) if torch.is_tensor(field.logistic_scale())
                   else float(field.logistic_scale()), "logistic scale")

    dtype = field_dtype(field)
    H, W = camera.resolution
    origins, dirs = generate_rays(camera)
    need_grad = "normal" in kinds or "textureless" in kinds
    n_rays = H * W
    outs = {k: [] for k in ("color", "normal", "opacity", "depth")}
    for s in range(0, n_rays, chunk):
        o, d = origins[s:s + chunk], dirs[s:s + chunk]
        samples = sample_rays(field, o, d, n_samples, n_importance, rng)
        res = _render_chunk(field, samples, torch.as_tensor(d, dtype=dtype), kinds, need_grad)
        for k, v in res.items():
            outs[k].append(v)

    opacity = torch.cat(outs["opacity"]).reshape(H, W)
    depth = torch.cat(outs["depth"]).reshape(H, W)
    bg_mask = (opacity < OPACITY_EPS)[..., None]
    op = opacity[..., None]
    color = normal = textureless = None
    if "color" in kinds:
        rgb = torch.cat(outs["color"]).reshape(H, W, 3) + (1.0 - op) * COLOR_BACKGROUND
        color = torch.where(bg_mask, torch.full_like(rgb, COLOR_BACKGROUND), rgb)
    if need_grad:
        n = torch.cat(outs["normal"]).reshape(H, W, 3)
        n = n / n.norm(dim=-1, keepdim=True).clamp_min(1e-8)
        if "normal" in kinds:
            nrgb = (n + 1.0) / 2.0 * op + (1.0 - op) * NORMAL_BACKGROUND
            normal = torch.where(bg_mask, torch.full_like(nrgb, NORMAL_BACKGROUND), nrgb)
        if "textureless" in kinds:
            l = torch.as_tensor(light_dir, dtype=dtype)
            shade = AMBIENT + DIFFUSE * (n * l).sum(-1, keepdim=True).clamp_min(0.0)
            gray = (shade * op + (1.0 - op) * COLOR_BACKGROUND).expand(H, W, 3)
            textureless = torch.where(bg_mask, torch.full_like(gray, COLOR_BACKGROUND), gray)
    emitted = emit or kinds[0]
    return RenderBundle(color, normal, textureless, opacity, depth, emitted,
                        weight_sums=opacity.detach())


def _render_chunk(field, samples, dirs, kinds, need_grad):
    R, n = samples.t_values.shape
    hit = torch.as_tensor(samples.hit)
    dtype = dirs.dtype
    out = {
        "opacity": torch.zeros(R, dtype=dtype),
        "depth": torch.zeros(R, dtype=dtype),
        "color": torch.zeros(R, 3, dtype=dtype),
        "normal": torch.zeros(R, 3, dtype=dtype),
    }
    if not hit.any():
        return out
    pts = samples.points[hit]
    t = samples.t_values[hit]
    d = dirs[hit]
    if need_grad:
        outer = torch.is_grad_enabled()
        with torch.enable_grad():
            pts = pts.detach().requires_grad_(True)
            f, feat = field.sdf_features(pts)
            g = torch.autograd.grad(f.sum(), pts, create_graph=outer, retain_graph=True)[0]
        if not outer:
            f, g, pts = f.detach(), g.detach(), pts.detach()
            feat = None if feat is None else feat.detach()
    else:
        f, feat = field.sdf_features(pts)
    w = neus_weights(f, field.logistic_scale())
    acc = w.sum(-1)
    tmid = 0.5 * (t[:, :-1] + t[:, 1:])
    depth = (w * tmid).sum(-1) / acc.clamp_min(1e-8)
    hit_idx = hit.nonzero().squeeze(-1)
    out["opacity"] = out["opacity"].index_put((hit_idx,), acc)
    out["depth"] = out["depth"].index_put((hit_idx,), depth)
    if "color" in kinds:
        p = pts[:, :-1]
        dd = d[:, None, :].expand_as(p)
        fe = None if feat is None else feat[:, :-1].reshape(-1, feat.shape[-1])
        c = field.color(p.reshape(-1, 3), dd.reshape(-1, 3), fe).reshape(p.shape)
        out["color"] = out["color"].index_put((hit_idx,), (w[..., None] * c).sum(1))
    if need_grad:
        out["normal"] = out["normal"].index_put((hit_idx,), (w[..., None] * g[:, :-1]).sum(1))
    return out


def render_color(field, camera, **kwargs):
    return render(field, camera, kinds=("color",), **kwargs)


def render_normal(field, camera, **kwargs):
    return render(field, camera, kinds=("normal",), **kwargs)


def render_textureless(field, camera, light_dir, **kwargs):
    return render(field, camera, kinds=("textureless",), light_dir=light_dir, **kwargs)
