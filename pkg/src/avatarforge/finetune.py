"""Personalisation orchestration: image sets, pose-consistent face fine-tuning, body fine-tuning.

All model work happens behind the GuidanceBackend contract; this module only
sequences calls and keeps track of data and provenance.
"""
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .exceptions import BackendError, ContractError, FinetuneInterrupted, ValidationError
from .sampler import render_skeleton_conditioning

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_FACE_CAPTION = "a photo of {token} person's face"
DEFAULT_BODY_CAPTION = "a full body photo of {token} person"


def read_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_png(path, image):
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path, format="PNG")


@dataclass
class ImageSet:
    face_images: List[Tuple[np.ndarray, str]]
    body_images: List[Tuple[np.ndarray, str]]
    source_dir: Optional[str] = None
    rare_token: str = "[V]"

    def validate(self):
        bad = [c for _, c in self.face_images + self.body_images if self.rare_token not in c]
        if bad:
            raise ValidationError(f"captions missing rare token {self.rare_token!r}: {bad}")
        return self

    @property
    def counts(self):
        return len(self.face_images), len(self.body_images)


@dataclass
class FinetuneRecipe:
    stage1_steps: int = 900
    stage2_steps: int = 500
    body_steps: int = 800
    multiview_count: int = 16
    rare_token: str = "[V]"
    caption_template: str = DEFAULT_FACE_CAPTION

    def __post_init__(self):
        for name in ("stage1_steps", "stage2_steps", "body_steps", "multiview_count"):
            if getattr(self, name) <= 0:
                raise ContractError(f"{name} must be positive")

    @property
    def face_caption(self):
        return self.caption_template.format(token=self.rare_token)


@dataclass
class SyntheticViews:
    images: List[np.ndarray]
    conditioning: List[np.ndarray]
    provenance: List[dict]

    def __post_init__(self):
        if not len(self.images) == len(self.conditioning) == len(self.provenance):
            raise ContractError("synthetic views, conditioning and provenance must align")

    def save(self, out_dir):
        mv = Path(out_dir) / "mv"
        mv.mkdir(parents=True, exist_ok=True)
        for i, (img, cond) in enumerate(zip(self.images, self.conditioning)):
            write_png(mv / f"view_{i:03d}.png", img)
            write_png(mv / f"cond_{i:03d}.png", cond)
        with open(mv / "provenance.json", "w") as fh:
            json.dump(self.provenance, fh, indent=2)
        return mv


@dataclass
class FinetuneCheckpoint:
    """Progress marker for pose_consistent_finetune.

    ``stage`` is the last completed stage: 'start', 'stage1', 'generate' (partial
    or complete, see ``views``) or 'stage2'.
    """
    stage: str = "start"
    seeds: List[int] = field(default_factory=list)
    d_init: object = None
    images: List[np.ndarray] = field(default_factory=list)
    conditioning: List[np.ndarray] = field(default_factory=list)
    provenance: List[dict] = field(default_factory=list)


def _hash(arr):
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


def pose_consistent_finetune(base, faces, skeleton, cameras, recipe, rng, resume=None):
    """Two-stage face personalisation with keypoint-conditioned multi-view synthesis.

    1. ``D_init = base.finetune(faces, stage1_steps)``
    2. one conditioned ``D_init.generate`` per camera (K surround views)
    3. ``D_final = base.finetune(faces + views, stage2_steps)``

    On failure raises FinetuneInterrupted whose checkpoint resumes the sequence.
    """
    face_data = list(faces.face_images)
    if not face_data:
        raise ValidationError("pose-consistent fine-tuning needs at least one face image")
    K = recipe.multiview_count
    if len(cameras) != K:
        raise ContractError(f"expected {K} cameras, got {len(cameras)}")
    ck = resume or FinetuneCheckpoint(seeds=[int(s) for s in rng.integers(0, 2**63 - 1, size=K)])
    caption = recipe.face_caption

    if ck.stage == "start":
        try:
            ck.d_init = base.finetune(face_data, recipe.stage1_steps)
        except Exception as exc:
            raise FinetuneInterrupted(f"stage-1 fine-tuning failed: {exc}", ck) from exc
        ck.stage = "stage1"

    if ck.stage in ("stage1", "generate"):
        ck.stage = "generate"
        for i in range(len(ck.images), K):
            cond = render_skeleton_conditioning(skeleton, cameras[i])
            try:
                img = ck.d_init.generate(caption, cond.astype(np.float64) / 255.0,
                                         np.random.default_rng(ck.seeds[i]))
            except Exception as exc:
                raise FinetuneInterrupted(f"multi-view generation {i} failed: {exc}", ck) from exc
            ck.images.append(np.asarray(img))
            ck.conditioning.append(cond)
            ck.provenance.append({"index": i, "seed": ck.seeds[i],
                                  "conditioning_sha256": _hash(cond),
                                  "backend": getattr(ck.d_init, "name", type(ck.d_init).__name__)})

    views = SyntheticViews(list(ck.images), list(ck.conditioning), list(ck.provenance))
    merged = face_data + [(img, caption) for img in views.images]
    try:
        d_final = base.finetune(merged, recipe.stage2_steps)
    except Exception as exc:
        raise FinetuneInterrupted(f"stage-2 fine-tuning failed: {exc}", ck) from exc
    ck.stage = "stage2"
    return d_final, views


def body_finetune(base, bodies, steps):
    data = list(bodies.body_images)
    if not data:
        raise ValidationError("body fine-tuning needs at least one body image")
    if steps <= 0:
        raise ContractError("steps must be positive")
    try:
        return base.finetune(data, steps)
    except BackendError:
        raise
    except Exception as exc:
        raise BackendError(f"body fine-tuning failed: {exc}") from exc


def _read_captions(path):
    captions = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValidationError(f"{path}:{n}: expected filename<TAB>caption")
            name, caption = line.split("\t", 1)
            captions[name.strip()] = caption.strip()
    return captions


def load_image_set(root, captions_file=None, rare_token="[V]",
                   face_caption=DEFAULT_FACE_CAPTION, body_caption=DEFAULT_BODY_CAPTION):
    """Load ``<root>/face/*`` and ``<root>/body/*`` with optional tab-separated captions."""
    root = Path(root)
    if not root.is_dir():
        raise ValidationError(f"image directory {root} does not exist")
    if captions_file is None and (root / "captions.txt").exists():
        captions_file = root / "captions.txt"
    captions = _read_captions(captions_file) if captions_file else {}

    def load(sub, template):
        out, missing = [], []
        folder = root / sub
        if not folder.is_dir():
            return out, missing
        for p in sorted(folder.iterdir()):
            if p.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            try:
                img = read_image(p)
            except (UnidentifiedImageError, OSError) as exc:
                raise ValidationError(f"cannot decode image {p.name}: {exc}") from exc
            rel = f"{sub}/{p.name}"
            cap = captions.get(rel, captions.get(p.name, template.format(token=rare_token)))
            if rare_token not in cap:
                missing.append(rel)
            out.append((img, cap))
        return out, missing

    faces, bad_f = load("face", face_caption)
    bodies, bad_b = load("body", body_caption)
    if not faces and not bodies:
        raise ValidationError(f"no images found under {root}")
    if bad_f or bad_b:
        raise ValidationError(f"captions missing rare token {rare_token!r}: {bad_f + bad_b}")
    return ImageSet(faces, bodies, os.fspath(root), rare_token)
