"""Score distillation: noise schedule, latent codecs, guidance backends and the SDS step."""
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import BackendError, ContractError
from .renderer import render
from .schedule import upsample


# -- noise schedule ------------------------------------------------------------

@dataclass
class NoiseSchedule:
    alpha_bar: np.ndarray
    t_min: int = 20
    t_max: int = 980

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=np.float64)
        if ab.ndim != 1 or len(ab) < 2:
            raise ContractError("alpha_bar must be a 1-D sequence of length >= 2")
        if np.any(ab <= 0) or np.any(ab > 1) or np.any(np.diff(ab) > 0) or not ab[0] > ab[-1]:
            raise ContractError("alpha_bar must lie in (0, 1] and be monotone nonincreasing")
        if not 1 <= self.t_min < self.t_max <= len(ab):
            raise ContractError("need 1 <= t_min < t_max <= T")
        self.alpha_bar = ab

    @classmethod
    def linear(cls, T=1000, beta_start=1e-4, beta_end=2e-2, t_min=20, t_max=980):
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        return cls(np.cumprod(1.0 - betas), t_min, t_max)

    @property
    def T(self):
        return len(self.alpha_bar)

    def at(self, t):
        """alpha_bar for 1-based timestep ``t``."""
        if not 1 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [1, {self.T}]")
        return float(self.alpha_bar[int(t) - 1])

    def sample_t(self, rng):
        return int(rng.integers(self.t_min, self.t_max + 1))


def add_noise(z0, t, eps, schedule):
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    ab = schedule.at(t)
    return math.sqrt(ab) * z0 + math.sqrt(1.0 - ab) * eps


# -- latent codecs -------------------------------------------------------------

class LatentCodec:
    """Maps (H, W, 3) images to (C, h, w) latents and back; differentiable in torch."""
    spatial_stride = 1
    tolerance = 0.0

    def encode(self, image):
        raise NotImplementedError

    def decode(self, latent):
        raise NotImplementedError


class AvgPoolCodec(LatentCodec):
    """Stride-``s`` average-pool encoder with nearest-neighbour decoder.

    Round-trips exactly on images that are constant over ``s x s`` blocks; ``tolerance``
    is the worst case for arbitrary images in [0, 1].
    """

    def __init__(self, stride=8):
        if stride < 1:
            raise ContractError("stride must be a positive integer")
        self.spatial_stride = int(stride)
        self.tolerance = 0.0 if stride == 1 else 1.0

    def encode(self, image):
        as_numpy = not torch.is_tensor(image)
        x = torch.as_tensor(np.asarray(image)) if as_numpy else image
        if x.ndim != 3:
            raise ContractError("encode expects an (H, W, C) image")
        z = x.permute(2, 0, 1)
        if self.spatial_stride > 1:
            H, W = x.shape[:2]
            if H % self.spatial_stride or W % self.spatial_stride:
                raise ContractError(f"image size {H}x{W} not divisible by stride {self.spatial_stride}")
            z = F.avg_pool2d(z[None], self.spatial_stride)[0]
        return z.numpy() if as_numpy else z

    def decode(self, latent):
        as_numpy = not torch.is_tensor(latent)
        z = torch.as_tensor(np.asarray(latent)) if as_numpy else latent
        if self.spatial_stride > 1:
            z = F.interpolate(z[None], scale_factor=self.spatial_stride, mode="nearest")[0]
        x = z.permute(1, 2, 0)
        return x.numpy() if as_numpy else x


class IdentityCodec(AvgPoolCodec):
    def __init__(self):
        super().__init__(stride=1)


def resize_image(image, size):
    """Bilinear (antialiased when shrinking) resize of (H, W, C) numpy image to ``(h, w)``."""
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] == tuple(size):
        return image
    x = torch.as_tensor(image).permute(2, 0, 1)[None]
    out = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False,
                        antialias=size[0] < image.shape[0] or size[1] < image.shape[1])
    return out[0].permute(1, 2, 0).clamp(0, 1).numpy()


# -- backends ------------------------------------------------------------------

class GuidanceBackend:
    """Contract for noise prediction, personalisation and conditioned generation.

    Subclasses implement ``_predict``; classifier-free guidance is applied here by
    mixing the prompt-conditioned and empty-prompt predictions.
    """
    name = "backend"

    def predict_noise(self, z_t, t, prompt, condition=None, guidance_scale=1.0):
        z_t = np.asarray(z_t, dtype=np.float64)
        eps_c = np.asarray(self._predict(z_t, t, prompt, condition), dtype=np.float64)
        if guidance_scale != 1.0:
            eps_u = np.asarray(self._predict(z_t, t, "", condition), dtype=np.float64)
            eps_c = eps_u + guidance_scale * (eps_c - eps_u)
        if eps_c.shape != z_t.shape:
            raise BackendError(f"backend returned shape {eps_c.shape} for latent {z_t.shape}")
        return eps_c

    def _predict(self, z_t, t, prompt, condition):
        raise NotImplementedError

    def finetune(self, dataset, steps):
        raise NotImplementedError

    def generate(self, prompt, condition, rng):
        raise NotImplementedError

    def health(self):
        return True


class OracleBackend(GuidanceBackend):
    """Analytic backend whose denoiser is exact for a known target latent ``z*``.

    ``eps_hat(z_t, t) = (z_t - sqrt(ab_t) z*) / sqrt(1 - ab_t)``, so SDS pulls renders
    toward the target image.  ``z*`` is recomputed at whatever latent size is asked for.
    """

    def __init__(self, target_image=None, codec=None, schedule=None, images=None,
                 noise_std=0.02, name="oracle"):
        if images is None:
            if target_image is None:
                raise ContractError("oracle backend needs a target image")
            images = [target_image]
        self.images = [np.asarray(im, dtype=np.float64) for im in images]
        if not self.images:
            raise ContractError("oracle backend needs at least one image")
        self.codec = codec or IdentityCodec()
        self.schedule = schedule or NoiseSchedule.linear()
        self.noise_std = noise_std
        self.name = name
        self._cache = {}

    def target_latent(self, shape=None):
        if shape is None:
            shape = self.codec.encode(self.images[0]).shape
        shape = tuple(shape)
        if shape not in self._cache:
            s = self.codec.spatial_stride
            size = (shape[1] * s, shape[2] * s)
            zs = [self.codec.encode(resize_image(im, size)) for im in self.images]
            self._cache[shape] = np.mean(zs, axis=0)
        return self._cache[shape]

    def _predict(self, z_t, t, prompt, condition):
        ab = self.schedule.at(t)
        z_star = self.target_latent(z_t.shape)
        return (z_t - math.sqrt(ab) * z_star) / math.sqrt(max(1.0 - ab, 1e-300))

    def finetune(self, dataset, steps):
        images = [img for img, _ in dataset]
        if not images:
            raise ContractError("finetune dataset is empty")
        return OracleBackend(images=images, codec=self.codec, schedule=self.schedule,
                             noise_std=self.noise_std, name=f"{self.name}+ft{steps}")

    def generate(self, prompt, condition, rng):
        if condition is not None:
            size = np.asarray(condition).shape[:2]
        else:
            size = self.images[0].shape[:2]
        s = self.codec.spatial_stride
        z = self.target_latent((3, size[0] // s, size[1] // s))
        img = self.codec.decode(z) + rng.normal(0.0, self.noise_std, size=tuple(size) + (3,))
        return np.clip(img, 0.0, 1.0)


def oracle_backend(target_image, codec=None, schedule=None):
    return OracleBackend(target_image, codec, schedule)


class RecordingBackend(GuidanceBackend):
    """Wraps a backend and appends every call to a shared ``log`` list."""

    def __init__(self, inner, log=None, label=None):
        self.inner = inner
        self.log = [] if log is None else log
        self.label = label or getattr(inner, "name", "backend")
        self.name = self.label

    def predict_noise(self, z_t, t, prompt, condition=None, guidance_scale=1.0):
        self.log.append(("predict_noise", self.label, prompt, int(t)))
        return self.inner.predict_noise(z_t, t, prompt, condition, guidance_scale)

    def finetune(self, dataset, steps):
        self.log.append(("finetune", self.label, len(dataset), int(steps)))
        return RecordingBackend(self.inner.finetune(dataset, steps), self.log, f"{self.label}+ft{steps}")

    def generate(self, prompt, condition, rng):
        self.log.append(("generate", self.label, prompt))
        return self.inner.generate(prompt, condition, rng)

    def health(self):
        return self.inner.health()


# -- routing -------------------------------------------------------------------

@dataclass
class GuidanceRouter:
    face_backend: GuidanceBackend
    body_backend: GuidanceBackend
    face_prompt: str
    body_prompt: str

    def __post_init__(self):
        if self.face_backend is None or self.body_backend is None:
            raise ContractError("router needs both face and body backends")

    @classmethod
    def single(cls, backend, face_prompt, body_prompt=None):
        """Prompt-only mode: one pre-trained backend serves both foci."""
        return cls(backend, backend, face_prompt, body_prompt or face_prompt)


def route(router, focus_tag):
    if focus_tag == "face":
        return router.face_backend, router.face_prompt
    if focus_tag == "body":
        return router.body_backend, router.body_prompt
    raise ContractError(f"unknown focus tag {focus_tag!r}")


# -- SDS -----------------------------------------------------------------------

def one_minus_alpha_bar(t, schedule):
    return 1.0 - schedule.at(t)


@dataclass
class SdsConfig:
    weighting: Callable = one_minus_alpha_bar
    guidance_scale: float = 100.0
    learning_rate: float = 0.005
    eikonal_weight: float = 0.1
    eikonal_samples: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.guidance_scale < 1:
            raise ContractError("guidance_scale must be >= 1")


def sds_grad(z0, backend, prompt, condition, t, eps, config, schedule):
    """``weight(t) * (eps_hat - eps)``: the SDS gradient w.r.t. the clean latent.

    The backend is queried on numpy copies, so no gradient ever flows through it.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    z_t = add_noise(z0, t, eps, schedule)
    try:
        eps_hat = backend.predict_noise(z_t, t, prompt, condition, config.guidance_scale)
    except (BackendError, ContractError):
        raise
    except Exception as exc:  # transport / model failures are retriable
        raise BackendError(f"guidance backend failed: {exc}") from exc
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != z0.shape:
        raise BackendError(f"backend returned shape {eps_hat.shape} for latent {z0.shape}")
    return config.weighting(t, schedule) * (eps_hat - np.asarray(eps, dtype=np.float64))


def sds_surrogate_loss(z, grad):
    """``0.5 * ||z - stopgrad(z - grad)||^2``; its gradient w.r.t. ``z`` is exactly ``grad``."""
    target = (z - grad).detach()
    return 0.5 * ((z - target) ** 2).sum()


def eikonal_loss(field, rng, n):
    b = field.bound
    x = torch.as_tensor(rng.uniform(-b, b, size=(n, 3)), dtype=field.dtype).requires_grad_(True)
    f = field.sdf(x)
    (g,) = torch.autograd.grad(f.sum(), x, create_graph=True)
    return ((g.norm(dim=-1) - 1.0) ** 2).mean()


@dataclass
class StepInfo:
    grad_norm: float
    t: int
    focus: str
    render_type: str
    resolution: Optional[int] = None
    extras: dict = field(default_factory=dict)


def sds_step(params, optimizer, camera, focus_tag, render_type, router, codec, config, schedule,
             rng, resolution=None, n_samples=64, n_importance=32, condition=None, t=None, eps=None):
    """One SDS update of ``params`` in place; returns a StepInfo diagnostic.

    ``t`` and ``eps`` are drawn from ``rng`` unless given.  Any backend failure aborts
    before the optimizer is touched.
    """
    backend, prompt = route(router, focus_tag)
    optimizer.zero_grad(set_to_none=True)
    bundle = render(params, camera, kinds=(render_type,), n_samples=n_samples,
                    n_importance=n_importance, rng=rng)
    image = bundle.image()
    if resolution is not None:
        image = upsample(image, resolution)
    z0 = codec.encode(image)
    if t is None:
        t = schedule.sample_t(rng)
    if eps is None:
        eps = rng.standard_normal(tuple(z0.shape))
    try:
        g = sds_grad(z0.detach().double().numpy(), backend, prompt, condition, t, eps, config, schedule)
    except Exception:
        optimizer.zero_grad(set_to_none=True)
        raise
    loss = sds_surrogate_loss(z0, torch.as_tensor(g, dtype=z0.dtype))
    if config.eikonal_weight:
        loss = loss + config.eikonal_weight * eikonal_loss(params, rng, config.eikonal_samples)
    loss.backward()
    optimizer.step()
    return StepInfo(float(np.linalg.norm(g)), t, focus_tag, render_type, resolution)
