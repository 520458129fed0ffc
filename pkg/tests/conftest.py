import time
from dataclasses import dataclass

import numpy as np
import pytest
import torch

from avatarforge.field import AnalyticField, init_from_template
from avatarforge.finetune import write_png
from avatarforge.guidance import IdentityCodec, NoiseSchedule, OracleBackend
from avatarforge.pipeline import config_from_dict
from avatarforge.renderer import render
from avatarforge.sampler import orbit_camera
from avatarforge.schedule import upsample
from avatarforge.template import humanoid_template, sphere_template

torch.set_num_threads(1)


@dataclass
class Fitted:
    params: object
    template: object
    seconds: float


@pytest.fixture(scope="session")
def unit_sphere_fit():
    """Unit-sphere template fitted at reduced width with the full step budget."""
    template = sphere_template(1.0)
    t0 = time.perf_counter()
    params = init_from_template(template, fit_steps=2000, rng_seed=0, hidden=32, bound=1.5,
                                batch_size=2048)
    return Fitted(params, template, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def humanoid_fit():
    template = humanoid_template()
    t0 = time.perf_counter()
    params = init_from_template(template, fit_steps=1500, rng_seed=0, hidden=64, bound=1.0)
    return Fitted(params, template, time.perf_counter() - t0)


# -- oracle-guided optimisation of a small sphere toward a red target ----------

SPHERE_R, SPHERE_BOUND, BASE_RES, SUPERVISION = 0.75, 1.5, 32, 64


def orbit(az, res=BASE_RES):
    return orbit_camera((0.0, 0.0, 0.0), 3.0, az, 0.0, 45.0, (res, res))


def red_target():
    red = AnalyticField("sphere", radius=SPHERE_R, bound=SPHERE_BOUND, rgb=(1.0, 0.0, 0.0))
    with torch.no_grad():
        return upsample(render(red, orbit(0.0)).image(), SUPERVISION).numpy()


def view_mse(params, az, target):
    with torch.no_grad():
        img = render(params, orbit(az), n_samples=32, n_importance=16).image()
        img = upsample(img, SUPERVISION).numpy()
    return float(((img - target) ** 2).mean())


def oracle_config(out_dir, steps, hidden=32, azimuth=(-0.01, 0.01), **extra):
    """Mode-I run on the sphere template toward the red target.

    The camera ranges are pinned (radius 3, elevation 0, fov 45) except azimuth."""
    data = dict(
        mode="prompt", face_prompt="a red ball", ladder={"stages": [[SUPERVISION, steps]]},
        field={"template": "sphere", "template_fit_steps": 300, "hidden": hidden,
               "bound": SPHERE_BOUND},
        camera={"face_fraction": 0.0, "radius_range_body": (2.999, 3.001),
                "elevation_range": (-0.01, 0.01), "azimuth_range": azimuth,
                "fov_range": (44.99, 45.01), "body_center": (0.0, 0.0, 0.0)},
        render={"resolution": BASE_RES, "n_samples": 32, "n_importance": 16,
                "type_weights": (0.0, 0.0, 1.0)},
        sds={"codec_stride": 1}, output_dir=str(out_dir), checkpoint_every=100, mesh_grid=64,
        turntable_views=4)
    data.update(extra)
    return config_from_dict(data)


def oracle(target):
    return OracleBackend(target, IdentityCodec(), NoiseSchedule.linear())


@dataclass
class OracleRun:
    result: object
    initial: object
    target: np.ndarray
    seconds: float


def _oracle_run(tmp, steps, azimuth, hidden):
    from avatarforge.pipeline import run_generate
    target = red_target()
    cfg = oracle_config(tmp, steps, hidden=hidden, azimuth=azimuth)
    initial = init_from_template(sphere_template(SPHERE_R), fit_steps=300, rng_seed=cfg.seed,
                                 hidden=hidden, bound=SPHERE_BOUND)
    t0 = time.perf_counter()
    result = run_generate(cfg, base_backend=oracle(target), turntable=False, mesh=False)
    return OracleRun(result, initial, target, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def single_camera_run(tmp_path_factory):
    return _oracle_run(tmp_path_factory.mktemp("single"), 300, (-0.01, 0.01), 32)


@pytest.fixture(scope="session")
def multi_camera_run(tmp_path_factory):
    return _oracle_run(tmp_path_factory.mktemp("multi"), 400, (-180.0, 180.0), 64)


@pytest.fixture
def tiny_config(tmp_path):
    """A seconds-long mode-I configuration."""
    target = np.tile(np.array([0.8, 0.2, 0.2]), (32, 32, 1))
    write_png(tmp_path / "target.png", target)

    def make(out="run", **extra):
        data = dict(mode="prompt", face_prompt="a person", oracle_target=str(tmp_path / "target.png"),
                    ladder={"stages": [[16, 6], [32, 4]]},
                    field={"template": "sphere", "template_fit_steps": 20, "hidden": 16},
                    render={"resolution": 16, "n_samples": 16, "n_importance": 8},
                    sds={"codec_stride": 1}, output_dir=str(tmp_path / out), checkpoint_every=5,
                    turntable_views=2, mesh_grid=24)
        data.update(extra)
        return config_from_dict(data)
    return make


# -- acceptance summary ------------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[n])
