"""Configuration, mode dispatch, the SDS training loop, checkpoints and turntables."""
import csv
import dataclasses
import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field as _field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import (BackendError, CheckpointError, IncompatibleCheckpointError,
                         ValidationError)
from .field import init_from_template, params_from_bytes, params_to_bytes
from .finetune import (FinetuneRecipe, body_finetune, load_image_set, pose_consistent_finetune,
                       read_image, write_png)
from .guidance import (AvgPoolCodec, GuidanceRouter, NoiseSchedule, OracleBackend, SdsConfig,
                       sds_step)
from .mesh import export, marching_cubes
from .renderer import render
from .sampler import (CameraPolicy, PoseSkeleton, RenderTypePolicy, orbit_camera, sample_camera,
                      sample_render_type, surround_cameras)
from .schedule import ResolutionLadder, stage_for_step
from .template import humanoid_template, sphere_template, template_from_mesh
from .wire import ENDPOINT_ENV, HttpBackend

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

log = logging.getLogger(__name__)

MODES = ("prompt", "customized", "hybrid")
CKPT_MAGIC = b"AVBC"
CKPT_VERSION = 1
DIAG_RING = 256


@dataclass
class FieldSettings:
    template: str = "humanoid"
    template_fit_steps: int = 2000
    hidden: int = 64
    bound: float = 1.0
    point_octaves: int = 6
    view_octaves: int = 4
    init_scale: float = 30.0


@dataclass
class CameraSettings:
    face_fraction: float = 0.25
    radius_range_face: Tuple[float, float] = (0.8, 1.0)
    radius_range_body: Tuple[float, float] = (2.2, 2.8)
    elevation_range: Tuple[float, float] = (-10.0, 30.0)
    azimuth_range: Tuple[float, float] = (-180.0, 180.0)
    fov_range: Tuple[float, float] = (35.0, 45.0)
    face_center: Optional[Tuple[float, float, float]] = None
    body_center: Optional[Tuple[float, float, float]] = None


@dataclass
class RenderSettings:
    resolution: int = 128
    n_samples: int = 64
    n_importance: int = 32
    type_weights: Tuple[float, float, float] = (1.0, 1.0, 8.0)


@dataclass
class SdsSettings:
    guidance_scale: float = 100.0
    learning_rate: float = 0.005
    eikonal_weight: float = 0.1
    t_min: int = 20
    t_max: int = 980
    codec_stride: int = 8


@dataclass
class GenerationConfig:
    mode: str = "prompt"
    face_prompt: str = ""
    body_prompt: str = ""
    image_root: Optional[str] = None
    captions_file: Optional[str] = None
    ladder: ResolutionLadder = _field(default_factory=ResolutionLadder)
    field: FieldSettings = _field(default_factory=FieldSettings)
    camera: CameraSettings = _field(default_factory=CameraSettings)
    render: RenderSettings = _field(default_factory=RenderSettings)
    sds: SdsSettings = _field(default_factory=SdsSettings)
    recipe: FinetuneRecipe = _field(default_factory=FinetuneRecipe)
    seed: int = 0
    output_dir: str = "out"
    backend_kind: str = "oracle"
    oracle_target: Optional[str] = None
    finetuned_dir: Optional[str] = None
    conditioning_resolution: int = 512
    checkpoint_every: int = 500
    turntable_views: int = 25
    turntable_radius: float = 2.5
    mesh_grid: int = 256
    mesh_format: str = "obj"

    def validate(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.backend_kind not in ("oracle", "external"):
            raise ValidationError("backend_kind must be 'oracle' or 'external'")
        if self.mode == "prompt" and not self.face_prompt:
            raise ValidationError("prompt mode needs face_prompt (body_prompt defaults to it)")
        if self.mode in ("customized", "hybrid") and not self.image_root and not self.finetuned_dir:
            raise ValidationError(f"{self.mode} mode requires image_root")
        if self.mode == "hybrid":
            if not (self.face_prompt and self.body_prompt):
                raise ValidationError("hybrid mode requires both face_prompt and body_prompt")
            for p in (self.face_prompt, self.body_prompt):
                if self.recipe.rare_token not in compose_prompt(p, self.recipe.rare_token):
                    raise ValidationError(f"hybrid prompt {p!r} must reference the subject token "
                                          f"{self.recipe.rare_token!r} (or the {{token}} placeholder)")
        if self.checkpoint_every <= 0:
            raise ValidationError("checkpoint_every must be positive")
        if self.render.resolution > self.ladder.stages[0][0]:
            raise ValidationError("render resolution exceeds the first ladder resolution")
        if self.mesh_format not in ("obj", "ply"):
            raise ValidationError("mesh_format must be obj or ply")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["ladder"] = {"stages": [list(s) for s in self.ladder.stages]}
        return _jsonable(d)

    def fingerprint(self):
        """The settings that determine the optimisation trajectory."""
        d = self.to_dict()
        for k in ("output_dir", "checkpoint_every", "turntable_views", "turntable_radius",
                  "mesh_grid", "mesh_format"):
            d.pop(k, None)
        return d


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


_SECTIONS = {"field": FieldSettings, "camera": CameraSettings, "render": RenderSettings,
             "sds": SdsSettings, "recipe": FinetuneRecipe}


def config_from_dict(data):
    data = dict(data)
    kwargs = {}
    known = {f.name for f in dataclasses.fields(GenerationConfig)}
    unknown = set(data) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    for key, value in data.items():
        if key == "ladder":
            stages = value["stages"] if isinstance(value, dict) else value
            kwargs[key] = ResolutionLadder.from_pairs(stages)
        elif key in _SECTIONS:
            cls = _SECTIONS[key]
            names = {f.name for f in dataclasses.fields(cls)}
            bad = set(value) - names
            if bad:
                raise ValidationError(f"unknown keys in [{key}]: {sorted(bad)}")
            kwargs[key] = cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in value.items()})
        else:
            kwargs[key] = value
    return GenerationConfig(**kwargs)


def load_config(path):
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    cfg = config_from_dict(data)
    base = Path(path).parent
    for attr in ("image_root", "captions_file", "oracle_target", "finetuned_dir"):
        val = getattr(cfg, attr)
        if val and not os.path.isabs(val):
            setattr(cfg, attr, str(base / val))
    return cfg


def compose_prompt(prompt, token):
    """Substitute the rare token into a ``{token}`` placeholder; other prompts pass verbatim."""
    return prompt.replace("{token}", token)


# -- components ----------------------------------------------------------------

def make_schedule(config):
    return NoiseSchedule.linear(t_min=config.sds.t_min, t_max=config.sds.t_max)


def make_codec(config):
    return AvgPoolCodec(config.sds.codec_stride)


def make_sds_config(config):
    return SdsConfig(guidance_scale=config.sds.guidance_scale, learning_rate=config.sds.learning_rate,
                     eikonal_weight=config.sds.eikonal_weight)


def make_base_backend(config):
    if config.backend_kind == "external":
        endpoint = os.environ.get(ENDPOINT_ENV)
        if not endpoint:
            raise BackendError(f"external backend selected but {ENDPOINT_ENV} is not set")
        return HttpBackend(endpoint)
    if not config.oracle_target:
        raise BackendError("oracle backend needs oracle_target (an image path)")
    return OracleBackend(read_image(config.oracle_target), make_codec(config), make_schedule(config))


def load_template(config):
    t = config.field.template
    if t == "humanoid":
        return humanoid_template()
    if t == "sphere":
        return sphere_template(radius=0.5 * config.field.bound)
    return template_from_mesh(t)


def make_camera_policy(config, template):
    c = config.camera
    return CameraPolicy(
        face_center=c.face_center if c.face_center is not None else template.face_center,
        body_center=c.body_center if c.body_center is not None else template.body_center,
        face_fraction=c.face_fraction, radius_range_face=tuple(c.radius_range_face),
        radius_range_body=tuple(c.radius_range_body), elevation_range=tuple(c.elevation_range),
        azimuth_range=tuple(c.azimuth_range), fov_range=tuple(c.fov_range),
        resolution=(config.render.resolution, config.render.resolution))


def run_finetune(config, base, out_dir=None, rng=None):
    """Personalise face and body backends from the configured image set."""
    recipe = config.recipe
    images = load_image_set(config.image_root, config.captions_file, recipe.rare_token)
    template = load_template(config)
    skeleton = template.pose_skeleton or PoseSkeleton.canonical()
    res = config.conditioning_resolution
    cams = surround_cameras(skeleton.face_center, resolution=(res, res))
    if len(cams) != recipe.multiview_count:
        cams = surround_cameras(skeleton.face_center, azimuths=recipe.multiview_count,
                                elevations=(0.0,), resolution=(res, res))
    rng = rng or np.random.default_rng([config.seed, 2])
    face, views = pose_consistent_finetune(base, images, skeleton, cams, recipe, rng)
    body = body_finetune(base, images, recipe.body_steps)
    if out_dir is not None:
        views.save(out_dir)
        _save_backends(Path(out_dir) / "finetuned", {"face": face, "body": body})
    return face, body, views


def _save_backends(folder, backends):
    folder.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for key, b in backends.items():
        inner = getattr(b, "inner", b)
        if isinstance(inner, OracleBackend):
            np.savez(folder / f"{key}.npz", *inner.images)
            manifest[key] = {"kind": "oracle", "file": f"{key}.npz"}
        elif isinstance(inner, HttpBackend):
            manifest[key] = {"kind": "http", "endpoint": inner.endpoint, "model_id": inner.model_id}
        else:
            manifest[key] = {"kind": "unpersisted", "name": getattr(inner, "name", "")}
    with open(folder / "finetuned.json", "w") as fh:
        json.dump(manifest, fh, indent=2)


def _load_backends(folder, config):
    folder = Path(folder)
    with open(folder / "finetuned.json") as fh:
        manifest = json.load(fh)
    out = {}
    for key, spec in manifest.items():
        if spec["kind"] == "oracle":
            with np.load(folder / spec["file"]) as data:
                imgs = [data[k] for k in data.files]
            out[key] = OracleBackend(images=imgs, codec=make_codec(config), schedule=make_schedule(config),
                                     name=f"oracle:{key}")
        elif spec["kind"] == "http":
            out[key] = HttpBackend(spec["endpoint"], spec["model_id"])
        else:
            raise ValidationError(f"cannot reload fine-tuned backend {key!r} ({spec['kind']})")
    return out


def build_router(config, base, finetuned=None, out_dir=None):
    token = config.recipe.rare_token
    if config.mode == "prompt":
        return GuidanceRouter.single(base, config.face_prompt, config.body_prompt or config.face_prompt)
    if finetuned is None and config.finetuned_dir:
        finetuned = _load_backends(config.finetuned_dir, config)
    if finetuned is None:
        face, body, _ = run_finetune(config, base, out_dir)
        finetuned = {"face": face, "body": body}
    if config.mode == "customized":
        face_prompt = compose_prompt(config.face_prompt or "a photo of {token} person's face", token)
        body_prompt = compose_prompt(config.body_prompt or "a full body photo of {token} person", token)
    else:
        face_prompt = compose_prompt(config.face_prompt, token)
        body_prompt = compose_prompt(config.body_prompt, token)
    return GuidanceRouter(finetuned["face"], finetuned["body"], face_prompt, body_prompt)


# -- checkpoints -----------------------------------------------------------------

@dataclass
class RunCheckpoint:
    step: int
    params: torch.nn.Module
    optimizer_state: dict
    rng_state: dict
    ladder: ResolutionLadder
    diagnostics: list
    fingerprint: dict


def _optimizer_bytes(optimizer):
    state = optimizer.state_dict()
    parts = [json.dumps({"param_groups": state["param_groups"]}, sort_keys=True).encode()]
    blobs = []
    n_params = len(state["param_groups"][0]["params"])
    for i in range(n_params):
        s = state["state"].get(i)
        if not s:
            blobs.append(struct.pack("<B", 0))
            continue
        blobs.append(struct.pack("<Bf", 1, float(s["step"])))
        for key in ("exp_avg", "exp_avg_sq"):
            blobs.append(np.ascontiguousarray(s[key].detach().numpy(), dtype="<f4").tobytes())
    return struct.pack("<I", len(parts[0])) + parts[0] + b"".join(blobs)


def _optimizer_state_from_bytes(data, params):
    (hlen,) = struct.unpack("<I", data[:4])
    header = json.loads(data[4:4 + hlen])
    pos = 4 + hlen
    state = {}
    for i, p in enumerate(params):
        (flag,) = struct.unpack("<B", data[pos:pos + 1])
        pos += 1
        if not flag:
            continue
        (step,) = struct.unpack("<f", data[pos:pos + 4])
        pos += 4
        n = p.numel()
        entry = {"step": torch.tensor(step)}
        for key in ("exp_avg", "exp_avg_sq"):
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(tuple(p.shape))
            entry[key] = torch.from_numpy(arr.astype(np.float32))
            pos += 4 * n
        state[i] = entry
    if pos != len(data):
        raise CheckpointError("optimizer section has unexpected length")
    return {"state": state, "param_groups": header["param_groups"]}


def save_checkpoint(path, step, params, optimizer, rng, ladder, diagnostics, fingerprint):
    meta = json.dumps({"step": int(step), "rng": rng.bit_generator.state,
                       "ladder": [list(s) for s in ladder.stages],
                       "diagnostics": diagnostics[-DIAG_RING:], "fingerprint": fingerprint},
                      sort_keys=True).encode()
    fblob = params_to_bytes(params)
    oblob = _optimizer_bytes(optimizer)
    body = (CKPT_MAGIC + struct.pack("<I", CKPT_VERSION)
            + struct.pack("<I", len(meta)) + meta
            + struct.pack("<Q", len(fblob)) + fblob
            + struct.pack("<Q", len(oblob)) + oblob)
    data = body + hashlib.sha256(body).digest()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return Path(path)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] == b"AVBF":
        raise CheckpointError(f"{path} is a bare field blob, not a run checkpoint")
    if len(data) < 44 or data[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path} is not a run checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"checkpoint {path} failed its checksum (corrupt or truncated)")
    (version,) = struct.unpack("<I", body[4:8])
    if version != CKPT_VERSION:
        raise IncompatibleCheckpointError(f"checkpoint version {version} is not supported "
                                          f"(expected {CKPT_VERSION})")
    pos = 8
    (mlen,) = struct.unpack("<I", body[pos:pos + 4])
    meta = json.loads(body[pos + 4:pos + 4 + mlen])
    pos += 4 + mlen
    (flen,) = struct.unpack("<Q", body[pos:pos + 8])
    params = params_from_bytes(body[pos + 8:pos + 8 + flen])
    pos += 8 + flen
    (olen,) = struct.unpack("<Q", body[pos:pos + 8])
    opt_state = _optimizer_state_from_bytes(body[pos + 8:pos + 8 + olen], list(params.parameters()))
    return RunCheckpoint(meta["step"], params, opt_state, meta["rng"],
                         ResolutionLadder.from_pairs(meta["ladder"]), meta["diagnostics"],
                         meta["fingerprint"])


def load_field(path):
    """Field parameters from either a run checkpoint or a bare AVBF blob."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"AVBF":
        from .field import load_params
        return load_params(path)
    return load_checkpoint(path).params


DIAG_COLUMNS = ["step", "t", "focus", "render_type", "resolution", "grad_norm"]


def _previous_rows(path, start):
    if not Path(path).exists():
        return []
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return [r for r in rows if r and int(r[0]) < start]


def _diff(a, b, prefix=""):
    out = []
    for k in sorted(set(a) | set(b)):
        va, vb = a.get(k), b.get(k)
        key = f"{prefix}{k}"
        if isinstance(va, dict) and isinstance(vb, dict):
            out += _diff(va, vb, key + ".")
        elif va != vb:
            out.append(f"{key}: checkpoint={va!r} config={vb!r}")
    return out


# -- training ------------------------------------------------------------------

@dataclass
class RunResult:
    params: torch.nn.Module
    output_dir: Path
    checkpoint: Path
    turntable: list
    mesh: Optional[Path]
    diagnostics: list
    router: GuidanceRouter = None


def run_generate(config, base_backend=None, finetuned=None, resume_from=None,
                 turntable=True, mesh=True):
    """Run the full ladder of SDS steps and write checkpoints, turntable and mesh."""
    config.validate()
    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "run.json", "w") as fh:
        json.dump({"config": config.to_dict(), "seeds": {"field": config.seed, "train": [config.seed, 1],
                                                        "finetune": [config.seed, 2]}},
                  fh, indent=2, sort_keys=True)

    base = base_backend if base_backend is not None else make_base_backend(config)
    if not base.health():
        raise BackendError("guidance backend is unavailable")
    router = build_router(config, base, finetuned, out)
    template = load_template(config)
    policy = make_camera_policy(config, template)
    rt_policy = RenderTypePolicy(tuple(config.render.type_weights))
    schedule = make_schedule(config)
    codec = make_codec(config)
    sds_cfg = make_sds_config(config)
    ladder = config.ladder

    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        diffs = _diff(ck.fingerprint, config.fingerprint())
        if diffs:
            raise IncompatibleCheckpointError("checkpoint does not match config:\n  " + "\n  ".join(diffs))
        params = ck.params
        optimizer = torch.optim.Adam(params.parameters(), lr=sds_cfg.learning_rate)
        optimizer.load_state_dict(ck.optimizer_state)
        rng = np.random.default_rng()
        rng.bit_generator.state = ck.rng_state
        start = ck.step
        diagnostics = list(ck.diagnostics)
    else:
        fs = config.field
        params = init_from_template(template, fit_steps=fs.template_fit_steps, rng_seed=config.seed,
                                    hidden=fs.hidden, bound=fs.bound, point_octaves=fs.point_octaves,
                                    view_octaves=fs.view_octaves, init_scale=fs.init_scale)
        optimizer = torch.optim.Adam(params.parameters(), lr=sds_cfg.learning_rate)
        rng = np.random.default_rng([config.seed, 1])
        start = 0
        diagnostics = []

    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    fingerprint = config.fingerprint()
    diag_path = out / "diagnostics.csv"
    previous = _previous_rows(diag_path, start) if start else []
    with open(diag_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(DIAG_COLUMNS)
        # keep history from an earlier run in this directory, else what the checkpoint carried
        writer.writerows(previous or [r for r in diagnostics if r[0] < start])
        for step in range(start, ladder.total_steps):
            cam, tag = sample_camera(policy, rng)
            rtype = sample_render_type(rt_policy, rng)
            res = stage_for_step(ladder, step)
            info = sds_step(params, optimizer, cam, tag, rtype, router, codec, sds_cfg, schedule, rng,
                            resolution=res, n_samples=config.render.n_samples,
                            n_importance=config.render.n_importance)
            row = [step, info.t, tag, rtype, res, info.grad_norm]
            writer.writerow(row)
            diagnostics.append(row)
            done = step + 1
            if done % config.checkpoint_every == 0:
                fh.flush()
                save_checkpoint(ckpt_dir / f"step_{done:06d}.avbc", done, params, optimizer, rng,
                                ladder, diagnostics, fingerprint)
                log.info("checkpoint at step %d", done)

    final = save_checkpoint(out / "final.avbc", ladder.total_steps, params, optimizer, rng, ladder,
                            diagnostics, fingerprint)
    views = []
    if turntable:
        views = run_turntable(params, out / "turntable", n_views=config.turntable_views,
                              center=policy.body_center, radius=config.turntable_radius,
                              resolution=config.render.resolution, n_samples=config.render.n_samples,
                              n_importance=config.render.n_importance)
    mesh_path = None
    if mesh:
        m = marching_cubes(params, config.mesh_grid)
        if len(m.vertices):
            mesh_path = export(m, out / f"avatar.{config.mesh_format}", config.mesh_format)
    return RunResult(params, out, final, views, mesh_path, diagnostics, router)


def resume(checkpoint_path, config, base_backend=None, finetuned=None, **kwargs):
    return run_generate(config, base_backend=base_backend, finetuned=finetuned,
                        resume_from=checkpoint_path, **kwargs)


def turntable_cameras(n_views=25, center=(0.0, 0.0, 0.0), radius=2.5, elevation=0.0, fov=40.0,
                      resolution=128):
    if n_views < 1:
        raise ValidationError("n_views must be >= 1")
    return [orbit_camera(center, radius, 360.0 * i / n_views, elevation, fov, (resolution, resolution))
            for i in range(n_views)]


def run_turntable(params, out_dir, n_views=25, center=(0.0, 0.0, 0.0), radius=2.5, elevation=0.0,
                  fov=40.0, resolution=128, n_samples=64, n_importance=32):
    """Colour renders at equal azimuth spacing, written as ``view_{i:03}.png``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, cam in enumerate(turntable_cameras(n_views, center, radius, elevation, fov, resolution)):
        with torch.no_grad():
            img = render(params, cam, kinds=("color",), n_samples=n_samples,
                         n_importance=n_importance).numpy()
        p = out_dir / f"view_{i:03}.png"
        write_png(p, img)
        paths.append(p)
    return paths


class AvatarGenerator(BaseEstimator):
    """Estimator facade over run_generate: ``fit()`` optimises the avatar field,
    ``predict(cameras)`` renders colour images from it."""

    def __init__(self, config=None, base_backend=None, turntable=False, mesh=False):
        self.config = config
        self.base_backend = base_backend
        self.turntable = turntable
        self.mesh = mesh

    def fit(self, X=None, y=None):
        cfg = self.config if self.config is not None else GenerationConfig()
        self.result_ = run_generate(cfg, base_backend=self.base_backend, turntable=self.turntable,
                                    mesh=self.mesh)
        self.params_ = self.result_.params
        return self

    def predict(self, cameras, n_samples=64, n_importance=32):
        check_is_fitted(self, "params_")
        with torch.no_grad():
            return [render(self.params_, c, n_samples=n_samples, n_importance=n_importance).numpy()
                    for c in cameras]

    def export_mesh(self, path, grid=256, format=None):
        check_is_fitted(self, "params_")
        return export(marching_cubes(self.params_, grid), path, format)
