"""Camera / render-type sampling policies and skeleton conditioning images."""
import json
from dataclasses import dataclass, field
from typing import Dict, Tuple

import cv2
import numpy as np

from .exceptions import ContractError, ValidationError
from .renderer import RENDER_TYPES, Camera

# 18-joint body layout, in the order used by keypoint-conditioned generators
JOINT_NAMES = (
    "nose", "neck",
    "right_shoulder", "right_elbow", "right_wrist",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_hip", "right_knee", "right_ankle",
    "left_hip", "left_knee", "left_ankle",
    "right_eye", "left_eye", "right_ear", "left_ear",
)
FACE_JOINTS = ("nose", "right_eye", "left_eye", "right_ear", "left_ear")

# 1-based joint pairs and per-limb colours of the usual 18-keypoint drawing
LIMB_SEQ = ((2, 3), (2, 6), (3, 4), (4, 5), (6, 7), (7, 8), (2, 9), (9, 10), (10, 11),
            (2, 12), (12, 13), (13, 14), (2, 1), (1, 15), (15, 17), (1, 16), (16, 18))
JOINT_COLORS = ((255, 0, 0), (255, 85, 0), (255, 170, 0), (255, 255, 0), (170, 255, 0),
                (85, 255, 0), (0, 255, 0), (0, 255, 85), (0, 255, 170), (0, 255, 255),
                (0, 170, 255), (0, 85, 255), (0, 0, 255), (85, 0, 255), (170, 0, 255),
                (255, 0, 255), (255, 0, 170), (255, 0, 85))

# canonical A-pose, y up, subject facing +z (subject's right is -x)
_CANONICAL = {
    "nose": (0.0, 0.665, 0.11),
    "neck": (0.0, 0.52, 0.0),
    "right_shoulder": (-0.18, 0.46, 0.0),
    "right_elbow": (-0.36, 0.26, 0.0),
    "right_wrist": (-0.52, 0.08, 0.02),
    "right_hip": (-0.09, 0.0, 0.0),
    "right_knee": (-0.1, -0.4, 0.01),
    "right_ankle": (-0.1, -0.78, 0.0),
    "right_eye": (-0.035, 0.7, 0.09),
    "right_ear": (-0.105, 0.68, 0.0),
}


@dataclass
class PoseSkeleton:
    joints: Dict[str, np.ndarray]

    def __post_init__(self):
        missing = [n for n in JOINT_NAMES if n not in self.joints]
        if missing:
            raise ValidationError(f"skeleton is missing joints: {missing}")
        self.joints = {n: np.asarray(self.joints[n], dtype=np.float64).reshape(3) for n in JOINT_NAMES}

    @classmethod
    def canonical(cls, scale=1.0, offset=(0.0, 0.0, 0.0)):
        joints = {}
        for name, p in _CANONICAL.items():
            joints[name] = np.asarray(p)
            if name.startswith("right_"):
                q = np.asarray(p) * (-1.0, 1.0, 1.0)
                joints["left_" + name[len("right_"):]] = q
        joints["nose"], joints["neck"] = np.asarray(_CANONICAL["nose"]), np.asarray(_CANONICAL["neck"])
        return cls({n: joints[n] * scale + np.asarray(offset) for n in JOINT_NAMES})

    @classmethod
    def from_json(cls, path_or_dict):
        if isinstance(path_or_dict, dict):
            data = path_or_dict
        else:
            with open(path_or_dict) as fh:
                data = json.load(fh)
        return cls({k: v for k, v in data.items()})

    def to_json(self, path=None):
        data = {n: [float(x) for x in self.joints[n]] for n in JOINT_NAMES}
        if path is not None:
            with open(path, "w") as fh:
                json.dump(data, fh, indent=2)
        return data

    def array(self):
        return np.stack([self.joints[n] for n in JOINT_NAMES])

    @property
    def face_center(self):
        return np.mean([self.joints[n] for n in FACE_JOINTS], axis=0)


@dataclass
class CameraPolicy:
    face_center: np.ndarray
    body_center: np.ndarray
    face_fraction: float = 0.25
    radius_range_face: Tuple[float, float] = (0.8, 1.0)
    radius_range_body: Tuple[float, float] = (2.2, 2.8)
    elevation_range: Tuple[float, float] = (-10.0, 30.0)
    azimuth_range: Tuple[float, float] = (-180.0, 180.0)
    fov_range: Tuple[float, float] = (35.0, 45.0)
    resolution: Tuple[int, int] = (128, 128)

    def __post_init__(self):
        self.face_center = np.asarray(self.face_center, dtype=np.float64)
        self.body_center = np.asarray(self.body_center, dtype=np.float64)
        if not 0.0 <= self.face_fraction <= 1.0:
            raise ContractError("face_fraction must lie in [0, 1]")
        for name in ("radius_range_face", "radius_range_body"):
            lo, hi = getattr(self, name)
            if not 0 < lo < hi:
                raise ContractError(f"{name} must satisfy 0 < min < max")
        for name in ("elevation_range", "azimuth_range", "fov_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ContractError(f"{name} min exceeds max")

    @classmethod
    def from_template(cls, template, **kwargs):
        return cls(face_center=template.face_center, body_center=template.body_center, **kwargs)


@dataclass
class RenderTypePolicy:
    """Categorical weights over (normal, textureless, color)."""
    weights: Tuple[float, float, float] = (1.0, 1.0, 8.0)
    order: Tuple[str, ...] = field(default=("normal", "textureless", "color"), repr=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.shape != (3,) or np.any(w < 0) or w.sum() <= 0:
            raise ContractError("render-type weights must be 3 nonnegative numbers, not all zero")
        self.weights = tuple(float(x) for x in w)

    @property
    def probabilities(self):
        w = np.asarray(self.weights)
        return w / w.sum()


def orbit_camera(center, radius, azimuth, elevation, fov, resolution):
    """Camera on a sphere around ``center``; azimuth 0 looks at the subject's front (+z)."""
    az, el = np.radians(azimuth), np.radians(elevation)
    offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
    return Camera.look_at(np.asarray(center) + offset, center, fov=fov, resolution=resolution)


def sample_camera(policy, rng):
    """Draw a camera and its focus tag ('face' or 'body')."""
    is_face = rng.uniform() < policy.face_fraction
    center = policy.face_center if is_face else policy.body_center
    radius = rng.uniform(*(policy.radius_range_face if is_face else policy.radius_range_body))
    azimuth = rng.uniform(*policy.azimuth_range)
    elevation = rng.uniform(*policy.elevation_range)
    fov = rng.uniform(*policy.fov_range)
    cam = orbit_camera(center, radius, azimuth, elevation, fov, policy.resolution)
    return cam, ("face" if is_face else "body")


def sample_render_type(policy, rng):
    return policy.order[int(rng.choice(3, p=policy.probabilities))]


def surround_cameras(center, radius=0.9, azimuths=8, elevations=(0.0, 20.0), fov=40.0,
                     resolution=(512, 512)):
    """Fixed ring of views used for multi-view synthesis (default 8 x 2 = 16)."""
    cams = []
    for el in elevations:
        for i in range(azimuths):
            cams.append(orbit_camera(center, radius, 360.0 * i / azimuths, el, fov, resolution))
    return cams


def _visible_joints(skeleton, camera):
    pts = skeleton.array()
    uv, depth = camera.project(pts)
    visible = depth > 1e-6
    # ears on the far side of the head are hidden: depth test against the face centre
    fc = skeleton.face_center
    _, fc_depth = camera.project(fc[None])
    ears = [JOINT_NAMES.index("right_ear"), JOINT_NAMES.index("left_ear")]
    half_span = 0.5 * np.linalg.norm(pts[ears[0]] - pts[ears[1]])
    for i in ears:
        if depth[i] - fc_depth[0] > 0.8 * half_span:
            visible[i] = False
    return uv, visible


def render_skeleton_conditioning(skeleton, camera, stick_width=None):
    """Draw the projected skeleton as a keypoint-conditioning RGB image (uint8, H x W x 3)."""
    H, W = camera.resolution
    uv, visible = _visible_joints(skeleton, camera)
    if not visible.any():
        raise ContractError("no visible joints")
    stick = stick_width or max(2, int(round(min(H, W) / 128)))
    canvas = np.zeros((H, W, 3), dtype=np.uint8)
    shift = 4  # sub-pixel precision for cv2 drawing
    fp = lambda p: (int(round(p[0] * (1 << shift))), int(round(p[1] * (1 << shift))))

    for k, (a, b) in enumerate(LIMB_SEQ):
        i, j = a - 1, b - 1
        if visible[i] and visible[j]:
            # pixel centres sit at +0.5
            cv2.line(canvas, fp(uv[i] - 0.5), fp(uv[j] - 0.5), JOINT_COLORS[k],
                     thickness=stick, lineType=cv2.LINE_AA, shift=shift)
    radius = max(2, int(round(min(H, W) / 128 * 4)))
    for i in range(len(JOINT_NAMES)):
        if visible[i]:
            cv2.circle(canvas, fp(uv[i] - 0.5), radius << shift, JOINT_COLORS[i],
                       thickness=-1, lineType=cv2.LINE_AA, shift=shift)
    return canvas


def joint_pixels(skeleton, camera):
    """Projected pixel positions of visible joints, keyed by name."""
    uv, visible = _visible_joints(skeleton, camera)
    return {n: uv[i] for i, n in enumerate(JOINT_NAMES) if visible[i]}
