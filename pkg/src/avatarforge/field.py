"""Neural signed-distance avatar field: SDF MLP, colour MLP and logistic scale."""
import io
import json
import math
import struct
import zlib

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_points, check_unit_vector
from .exceptions import CheckpointError, IncompatibleCheckpointError, ValidationError
from .geometry import MeshDistance
from .template import TemplateBody

BLOB_MAGIC = b"AVBF"
BLOB_VERSION = 1


def positional_encoding(x, octaves):
    if octaves == 0:
        return x
    freqs = 2.0 ** torch.arange(octaves, dtype=x.dtype)
    xf = x[..., None, :] * freqs[:, None]
    enc = torch.cat([torch.sin(xf), torch.cos(xf)], dim=-1).flatten(-2)
    return torch.cat([x, enc], dim=-1)


class _CenteredSoftplus(torch.nn.Module):
    """Softplus shifted so act(0) = 0; keeps the geometric init exact at the sphere centre."""

    def __init__(self, beta):
        super().__init__()
        self.beta = beta
        self.offset = math.log(2.0) / beta

    def forward(self, x):
        return F.softplus(x, beta=self.beta) - self.offset


class FieldParams(torch.nn.Module):
    """SDF network (6 linear layers, skip at the middle), colour network (4 layers)
    and a learnable logistic scale ``s = exp(log_scale)``.

    The SDF net uses the sphere-geometric initialisation of implicit-surface
    networks so the untrained field is close to a sphere of ``init_radius``.
    """

    def __init__(self, hidden=64, bound=1.0, point_octaves=6, view_octaves=4,
                 init_scale=30.0, init_radius=0.5, seed=0):
        super().__init__()
        self.config = dict(hidden=hidden, bound=float(bound), point_octaves=point_octaves,
                           view_octaves=view_octaves, init_scale=float(init_scale),
                           init_radius=float(init_radius))
        self.bound = float(bound)
        self.point_octaves = point_octaves
        self.view_octaves = view_octaves
        gen = torch.Generator().manual_seed(int(seed))

        d_in = 3 + 6 * point_octaves
        self.skip = 3
        sdf_dims = [d_in] + [hidden] * 5 + [1 + hidden]
        layers = []
        for i in range(6):
            in_dim = sdf_dims[i] + (d_in if i == self.skip else 0)
            out_dim = sdf_dims[i + 1]
            lin = torch.nn.Linear(in_dim, out_dim)
            with torch.no_grad():
                lin.bias.zero_()
                if i == 5:
                    lin.weight.normal_(math.sqrt(math.pi) / math.sqrt(in_dim), 1e-4, generator=gen)
                    lin.bias.fill_(-init_radius)
                else:
                    lin.weight.normal_(0.0, math.sqrt(2.0) / math.sqrt(out_dim), generator=gen)
                    if i == 0:
                        lin.weight[:, 3:] = 0.0
                    elif i == self.skip:
                        lin.weight[:, -(d_in - 3):] = 0.0
            layers.append(lin)
        self.sdf_layers = torch.nn.ModuleList(layers)
        self.act = _CenteredSoftplus(100.0)
        self._calibrate_slope(init_radius)

        c_in = d_in + 3 + 6 * view_octaves + hidden
        c_dims = [c_in, hidden, hidden, hidden, 3]
        clayers = []
        for i in range(4):
            lin = torch.nn.Linear(c_dims[i], c_dims[i + 1])
            with torch.no_grad():
                if i == 3:
                    lin.weight.zero_()
                else:
                    bound_w = 1.0 / math.sqrt(c_dims[i])
                    lin.weight.uniform_(-bound_w, bound_w, generator=gen)
                lin.bias.zero_()
            clayers.append(lin)
        self.color_layers = torch.nn.ModuleList(clayers)
        self.log_scale = torch.nn.Parameter(torch.tensor(math.log(init_scale)))

    def _calibrate_slope(self, radius):
        # the untrained SDF net is positively homogeneous: f(x) + r ~ |x| a(x/|x|).
        # Rescale the output row so that a averages to one over the sphere.
        n = 512
        k = torch.arange(n, dtype=torch.float32) + 0.5
        phi = torch.acos(1 - 2 * k / n)
        theta = math.pi * (1 + 5 ** 0.5) * k
        dirs = torch.stack([torch.cos(theta) * torch.sin(phi), torch.sin(theta) * torch.sin(phi),
                            torch.cos(phi)], dim=-1)
        with torch.no_grad():
            a = (self.sdf(dirs) + radius).mean()
            if a > 0:
                self.sdf_layers[-1].weight[0] /= a

    @property
    def dtype(self):
        return self.log_scale.dtype

    def logistic_scale(self):
        return self.log_scale.exp()

    def sdf_features(self, x):
        h0 = positional_encoding(x, self.point_octaves)
        h = h0
        for i, lin in enumerate(self.sdf_layers):
            if i == self.skip:
                h = torch.cat([h, h0], dim=-1) / math.sqrt(2.0)
            h = lin(h)
            if i < len(self.sdf_layers) - 1:
                h = self.act(h)
        return h[..., 0], h[..., 1:]

    def sdf(self, x):
        return self.sdf_features(x)[0]

    def color(self, x, d, feat=None):
        if feat is None:
            _, feat = self.sdf_features(x)
        h = torch.cat([positional_encoding(x, self.point_octaves),
                       positional_encoding(d, self.view_octaves), feat], dim=-1)
        for i, lin in enumerate(self.color_layers):
            h = lin(h)
            if i < len(self.color_layers) - 1:
                h = torch.relu(h)
        return torch.sigmoid(h)


class AnalyticField(torch.nn.Module):
    """Closed-form fields sharing the FieldParams interface (tests, references)."""

    def __init__(self, kind="sphere", radius=1.0, center=(0.0, 0.0, 0.0), rgb=(0.5, 0.5, 0.5),
                 bound=1.5, scale=64.0, normal=(0.0, 0.0, 1.0), offset=0.0):
        super().__init__()
        self.kind = kind
        self.radius = radius
        self.bound = float(bound)
        self.register_buffer("center", torch.tensor(center, dtype=torch.float32))
        self.register_buffer("rgb", torch.tensor(rgb, dtype=torch.float32))
        self.register_buffer("plane_normal", torch.tensor(normal, dtype=torch.float32))
        self.offset = offset
        self.register_buffer("scale", torch.tensor(float(scale)))

    @property
    def dtype(self):
        return self.center.dtype

    def logistic_scale(self):
        return self.scale

    def sdf_features(self, x):
        return self.sdf(x), None

    def sdf(self, x):
        if self.kind == "sphere":
            return (x - self.center).norm(dim=-1) - self.radius
        if self.kind == "plane":
            return (x * self.plane_normal).sum(-1) - self.offset
        if self.kind == "empty":
            return torch.full(x.shape[:-1], 10.0, dtype=x.dtype) + 0.0 * x.sum(-1)
        raise ValueError(self.kind)

    def color(self, x, d, feat=None):
        return self.rgb.expand(x.shape[:-1] + (3,)).to(x.dtype)


def _to_tensor(params, X):
    return torch.as_tensor(X, dtype=getattr(params, "dtype", torch.float32))


def sdf_eval(params, points):
    """Signed distances (negative inside) for points inside the modeling cube."""
    X = check_points(points, bound=params.bound)
    with torch.no_grad():
        return params.sdf(_to_tensor(params, X)).double().numpy()


def sdf_gradient(params, points):
    X = check_points(points, bound=params.bound)
    x = _to_tensor(params, X).requires_grad_(True)
    with torch.enable_grad():
        f = params.sdf(x)
        (g,) = torch.autograd.grad(f.sum(), x)
    return g.double().numpy()


def color_eval(params, points, view_dir):
    X = check_points(points, bound=params.bound)
    d = check_unit_vector(view_dir, "view_dir")
    d = np.broadcast_to(d, X.shape)
    with torch.no_grad():
        return params.color(_to_tensor(params, X), _to_tensor(params, np.ascontiguousarray(d))).double().numpy()


def template_samples(template, n, bound, rng, sigma=0.02, radial_fraction=0.5):
    """Training points for SDF regression; returns (points, exact signed distance).

    Half are volume samples, half are jittered around the surface.  Most volume
    samples are uniform in the cube; ``radial_fraction`` of them are uniform in
    radius around ``body_center`` (density ~ 1/r^2), which pins down the deep
    interior where the distance function has its ridge.
    """
    dist = MeshDistance(template.vertices, template.faces)
    n_uni = n // 2
    n_rad = int(radial_fraction * n_uni)
    c = template.body_center
    reach = np.linalg.norm(template.vertices - c, axis=1).max()
    dirs = rng.normal(size=(n_rad, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    rad = np.clip(c + dirs * rng.uniform(0.0, reach, size=(n_rad, 1)), -bound, bound)
    uni = np.concatenate([rng.uniform(-bound, bound, size=(n_uni - n_rad, 3)), rad])
    tri = template.vertices[template.faces]
    areas = 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)
    fid = rng.choice(len(tri), size=n - n_uni, p=areas / areas.sum())
    r1, r2 = rng.uniform(size=(2, n - n_uni))
    s1 = np.sqrt(r1)
    surf = (tri[fid, 0] * (1 - s1)[:, None] + tri[fid, 1] * (s1 * (1 - r2))[:, None]
            + tri[fid, 2] * (s1 * r2)[:, None])
    near = np.clip(surf + rng.normal(scale=sigma, size=surf.shape), -bound, bound)
    pts = np.concatenate([uni, near])
    return pts, dist(pts)


def init_from_template(template, fit_steps=2000, rng_seed=0, hidden=64, bound=1.0,
                       point_octaves=6, view_octaves=4, init_scale=30.0, batch_size=4096,
                       learning_rate=1e-3, eikonal_weight=0.1, pool_size=200_000, log_every=0,
                       verbose=False):
    """Fit a fresh field to the template by direct SDF regression (L1 + eikonal)."""
    if not isinstance(template, TemplateBody):
        raise ValidationError("init_from_template expects a TemplateBody")
    template.validate()
    if np.abs(template.vertices).max() > bound:
        raise ValidationError("template does not fit inside the modeling cube")
    # start from the sphere of the template's mean vertex radius
    radius = np.linalg.norm(template.vertices - template.body_center, axis=1).mean()
    params = FieldParams(hidden=hidden, bound=bound, point_octaves=point_octaves,
                         view_octaves=view_octaves, init_scale=init_scale,
                         init_radius=float(radius), seed=rng_seed)
    if fit_steps <= 0:
        return params
    rng = np.random.default_rng(rng_seed)
    pts, d = template_samples(template, pool_size, bound, rng)
    pts_t = torch.as_tensor(pts, dtype=torch.float32)
    d_t = torch.as_tensor(d, dtype=torch.float32)
    sdf_params = [p for n, p in params.named_parameters() if n.startswith("sdf_layers")]
    opt = torch.optim.Adam(sdf_params, lr=learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=fit_steps, eta_min=learning_rate * 0.05)
    half = pool_size // 2
    for step in range(fit_steps):
        # equal uniform / near-surface counts in every batch
        idx = np.concatenate([rng.integers(0, half, batch_size // 2),
                              rng.integers(half, pool_size, batch_size - batch_size // 2)])
        x = pts_t[idx].requires_grad_(True)
        f = params.sdf(x)
        (g,) = torch.autograd.grad(f.sum(), x, create_graph=True)
        loss = (f - d_t[idx]).abs().mean()
        if eikonal_weight:
            loss = loss + eikonal_weight * ((g.norm(dim=-1) - 1.0) ** 2).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if verbose and log_every and step % log_every == 0:
            print(f"fit step {step}: loss {loss.item():.5f}")
    return params


# -- checkpoint blob ---------------------------------------------------------

def params_to_bytes(params):
    """Serialise to ``AVBF | version | header | shapes | float32 LE weights | crc32``."""
    state = params.state_dict()
    names = list(state)
    header = json.dumps({"config": params.config, "tensors": [[n, list(state[n].shape)] for n in names]},
                        sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(BLOB_MAGIC)
    buf.write(struct.pack("<II", BLOB_VERSION, len(header)))
    buf.write(header)
    for n in names:
        buf.write(np.ascontiguousarray(state[n].detach().cpu().numpy(), dtype="<f4").tobytes())
    payload = buf.getvalue()
    return payload + struct.pack("<I", zlib.crc32(payload))


def params_from_bytes(blob):
    if len(blob) < 16 or blob[:4] != BLOB_MAGIC:
        raise CheckpointError("not an AVBF field blob")
    payload, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(payload) != crc:
        raise CheckpointError("field blob checksum mismatch (corrupt file)")
    version, hlen = struct.unpack("<II", payload[4:12])
    if version != BLOB_VERSION:
        raise IncompatibleCheckpointError(f"field blob version {version} != supported {BLOB_VERSION}")
    header = json.loads(payload[12:12 + hlen])
    params = FieldParams(**header["config"])
    offset = 12 + hlen
    state = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=offset).reshape(shape)
        state[name] = torch.from_numpy(arr.astype(np.float32))
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointError("field blob has trailing or missing bytes")
    params.load_state_dict(state)
    return params


def save_params(params, path):
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path):
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())


class AvatarField(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit(template)`` regresses the field onto a template,
    ``predict(X)`` returns signed distances."""

    def __init__(self, hidden=64, bound=1.0, point_octaves=6, view_octaves=4, init_scale=30.0,
                 fit_steps=2000, batch_size=4096, learning_rate=1e-3, eikonal_weight=0.1,
                 random_state=0):
        self.hidden = hidden
        self.bound = bound
        self.point_octaves = point_octaves
        self.view_octaves = view_octaves
        self.init_scale = init_scale
        self.fit_steps = fit_steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.eikonal_weight = eikonal_weight
        self.random_state = random_state

    def fit(self, template, y=None):
        self.params_ = init_from_template(
            template, fit_steps=self.fit_steps, rng_seed=self.random_state, hidden=self.hidden,
            bound=self.bound, point_octaves=self.point_octaves, view_octaves=self.view_octaves,
            init_scale=self.init_scale, batch_size=self.batch_size,
            learning_rate=self.learning_rate, eikonal_weight=self.eikonal_weight)
        self.n_features_in_ = 3
        return self

    def predict(self, X):
        check_is_fitted(self, "params_")
        return sdf_eval(self.params_, X)

    def gradient(self, X):
        check_is_fitted(self, "params_")
        return sdf_gradient(self.params_, X)
