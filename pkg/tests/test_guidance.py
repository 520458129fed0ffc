import math

import numpy as np
import pytest
import torch

from avatarforge.exceptions import BackendError, ContractError
from avatarforge.field import AnalyticField, FieldParams, color_eval, params_to_bytes
from avatarforge.guidance import (AvgPoolCodec, GuidanceBackend, GuidanceRouter, IdentityCodec, NoiseSchedule,
                                  RecordingBackend, SdsConfig, add_noise, oracle_backend, route,
                                  sds_grad, sds_step, sds_surrogate_loss)
from avatarforge.renderer import generate_rays, render
from avatarforge.sampler import orbit_camera

from oracles import fd_grad

SCHED = NoiseSchedule.linear()


def rand_image(rng, size=8):
    return rng.uniform(size=(size, size, 3))


# -- noise schedule / forward process ---------------------------------------------

def test_linear_schedule_values():
    betas = np.linspace(1e-4, 2e-2, 1000)
    assert SCHED.at(1) == pytest.approx(1 - 1e-4)
    assert SCHED.at(1000) == pytest.approx(np.prod(1 - betas))
    assert (np.diff(SCHED.alpha_bar) < 0).all()


def test_schedule_contract_errors():
    with pytest.raises(ContractError):
        NoiseSchedule(np.array([0.5, 0.9]))
    with pytest.raises(ContractError):
        NoiseSchedule(SCHED.alpha_bar, t_min=500, t_max=400)
    with pytest.raises(ContractError):
        SCHED.at(0)
    with pytest.raises(ContractError):
        add_noise(np.zeros(3), 1001, np.zeros(3), SCHED)


def test_sampled_t_within_range():
    rng = np.random.default_rng(0)
    ts = [SCHED.sample_t(rng) for _ in range(5000)]
    assert min(ts) >= 20 and max(ts) <= 980


def test_add_noise_endpoints():
    sched = NoiseSchedule(np.array([1.0, 0.5, 1e-300]), t_min=1, t_max=3)
    rng = np.random.default_rng(1)
    z0, eps = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4))
    assert np.array_equal(add_noise(z0, 1, eps, sched), z0)
    assert np.allclose(add_noise(z0, 3, eps, sched), eps, atol=1e-140)


def test_add_noise_monte_carlo_variance():
    rng = np.random.default_rng(2)
    z0 = rng.normal(size=16)
    t = 400
    draws = np.stack([add_noise(z0, t, rng.standard_normal(16), SCHED) for _ in range(10_000)])
    cov = np.cov(draws.T)
    target = 1 - SCHED.at(t)
    assert np.allclose(np.diag(cov), target, rtol=0.05)
    assert np.abs(cov - np.diag(np.diag(cov))).max() < 0.05 * target
    assert np.allclose(draws.mean(0), math.sqrt(SCHED.at(t)) * z0, atol=0.05)


# -- codecs --------------------------------------------------------------------------

def test_identity_codec_roundtrip_exact():
    x = rand_image(np.random.default_rng(3), 12)
    c = IdentityCodec()
    assert c.encode(x).shape == (3, 12, 12)
    assert np.array_equal(c.decode(c.encode(x)), x)


def test_avgpool_codec():
    rng = np.random.default_rng(4)
    block = rng.uniform(size=(2, 2, 3))
    x = np.repeat(np.repeat(block, 8, axis=0), 8, axis=1)
    c = AvgPoolCodec(8)
    z = c.encode(x)
    assert z.shape == (3, 2, 2)
    assert np.allclose(z, block.transpose(2, 0, 1))
    assert np.allclose(c.decode(z), x)
    y = rand_image(rng, 16)
    assert np.abs(c.decode(c.encode(y)) - y).max() <= c.tolerance
    with pytest.raises(ContractError):
        c.encode(rand_image(rng, 12))


def test_codec_is_differentiable():
    x = torch.rand(16, 16, 3, dtype=torch.float64, requires_grad=True)
    AvgPoolCodec(4).encode(x).sum().backward()
    assert torch.allclose(x.grad, torch.full_like(x, 1 / 16))


# -- oracle backend ---------------------------------------------------------------

def test_oracle_denoises_exactly():
    rng = np.random.default_rng(5)
    target = rand_image(rng)
    ob = oracle_backend(target)
    z_star = IdentityCodec().encode(target)
    for t in (1, 20, 500, 980, 1000):
        eps = rng.standard_normal(z_star.shape)
        assert np.allclose(ob.predict_noise(add_noise(z_star, t, eps, SCHED), t, "p"), eps, atol=1e-9)


def test_guidance_scale_mixes_conditional_and_unconditional():
    class PromptAware(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            return np.full_like(z_t, 1.0 if prompt else 0.25)

    out = PromptAware().predict_noise(np.zeros((3, 2, 2)), 10, "p", guidance_scale=7.5)
    assert np.allclose(out, 0.25 + 7.5 * 0.75)


def test_oracle_finetune_single_image_fixed_point():
    rng = np.random.default_rng(6)
    x = rand_image(rng)
    ft = oracle_backend(rand_image(rng)).finetune([(x, "a [V] person")], 900)
    z0 = IdentityCodec().encode(x)
    g = sds_grad(z0, ft, "p", None, 300, rng.standard_normal(z0.shape), SdsConfig(), SCHED)
    assert np.abs(g).max() < 1e-9


def test_oracle_finetune_two_images_mean():
    rng = np.random.default_rng(7)
    a, b = rand_image(rng), rand_image(rng)
    base = oracle_backend(rand_image(rng))
    ft = base.finetune([(a, ""), (b, "")], 10)
    assert np.abs(ft.target_latent() - (a + b).transpose(2, 0, 1) / 2).max() < 1e-6
    # the receiver is not mutated
    assert not np.allclose(base.target_latent(), ft.target_latent())


def test_oracle_generate_is_seeded():
    ob = oracle_backend(np.full((16, 16, 3), 0.5))
    a = ob.generate("p", np.zeros((16, 16, 3)), np.random.default_rng(0))
    b = ob.generate("p", np.zeros((16, 16, 3)), np.random.default_rng(0))
    assert np.array_equal(a, b) and a.shape == (16, 16, 3)
    assert np.abs(a - 0.5).mean() < 0.05


# -- sds gradient ------------------------------------------------------------------

def test_sds_grad_zero_at_target():
    rng = np.random.default_rng(8)
    target = rand_image(rng)
    z_star = IdentityCodec().encode(target)
    for _ in range(10):
        eps = rng.standard_normal(z_star.shape)
        g = sds_grad(z_star, oracle_backend(target), "p", None, int(rng.integers(20, 981)), eps, SdsConfig(), SCHED)
        assert np.abs(g).max() < 1e-9


def test_sds_grad_sign_matches_offset():
    rng = np.random.default_rng(9)
    target = rand_image(rng)
    z_star = IdentityCodec().encode(target)
    z0 = z_star + rng.normal(size=z_star.shape)
    g = sds_grad(z0, oracle_backend(target), "p", None, 500, rng.standard_normal(z0.shape),
                 SdsConfig(guidance_scale=1.0), SCHED)
    assert np.array_equal(np.sign(g), np.sign(z0 - z_star))


def test_sds_grad_matches_surrogate_finite_differences():
    rng = np.random.default_rng(10)
    for _ in range(50):
        target = rand_image(rng, 4)
        z0 = rng.uniform(size=(3, 4, 4))
        t, eps = int(rng.integers(20, 981)), rng.standard_normal((3, 4, 4))
        g = sds_grad(z0, oracle_backend(target), "p", None, t, eps, SdsConfig(), SCHED)
        anchor = torch.as_tensor(z0 - g)

        def loss(z):
            return float(0.5 * ((torch.as_tensor(z) - anchor) ** 2).sum())
        fd = fd_grad(loss, z0, h=1e-3)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd)
        zt = torch.tensor(z0, requires_grad=True)
        sds_surrogate_loss(zt, torch.as_tensor(g)).backward()
        assert np.allclose(zt.grad.numpy(), g, rtol=1e-12, atol=1e-12)


def test_weighting_is_one_minus_alpha_bar():
    class Constant(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            return np.ones_like(z_t)

    z0 = np.zeros((3, 2, 2))
    g = sds_grad(z0, Constant(), "p", None, 700, np.zeros_like(z0), SdsConfig(guidance_scale=1.0), SCHED)
    assert np.allclose(g, 1 - SCHED.at(700))


def test_backend_exception_becomes_backend_error():
    class Broken(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            raise ConnectionError("socket closed")

    class WrongShape(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            return np.zeros(3)

    for backend in (Broken(), WrongShape()):
        with pytest.raises(BackendError):
            sds_grad(np.zeros((3, 2, 2)), backend, "p", None, 50, np.zeros((3, 2, 2)), SdsConfig(), SCHED)
    assert not issubclass(BackendError, ContractError)


def test_plain_gradient_descent_on_latent_is_monotone():
    # with eps = 0 the oracle SDS field is the gradient of a convex quadratic in z0
    rng = np.random.default_rng(11)
    target = rand_image(rng, 16)
    ob = oracle_backend(target)
    z_star = IdentityCodec().encode(target)
    cfg = SdsConfig(guidance_scale=1.0)
    for lr in (0.005, 0.001):
        for t in (20, 500, 980):
            z = torch.tensor(rng.uniform(size=z_star.shape), requires_grad=True)
            opt = torch.optim.SGD([z], lr=lr)
            dist = []
            for _ in range(200):
                dist.append(np.linalg.norm(z.detach().numpy() - z_star))
                g = sds_grad(z.detach().numpy(), ob, "p", None, t, np.zeros(z_star.shape), cfg, SCHED)
                opt.zero_grad()
                sds_surrogate_loss(z, torch.as_tensor(g)).backward()
                opt.step()
            assert (np.diff(dist) <= 0).all()


# -- routing -------------------------------------------------------------------------

def test_route_pairs():
    a, b = oracle_backend(np.zeros((4, 4, 3))), oracle_backend(np.ones((4, 4, 3)))
    r = GuidanceRouter(a, b, "face p", "body p")
    assert route(r, "face") == (a, "face p")
    assert route(r, "body") == (b, "body p")
    with pytest.raises(ContractError):
        route(r, "hands")
    single = GuidanceRouter.single(a, "f", "b")
    assert route(single, "face")[0] is route(single, "body")[0]
    assert route(single, "face")[1] != route(single, "body")[1]
    with pytest.raises(ContractError):
        GuidanceRouter(a, None, "f", "b")


# -- sds step -------------------------------------------------------------------------

def _step_setup(res=16, seed=0, hidden=16):
    cam = orbit_camera((0, 0, 0), 3.0, 0.0, 0.0, 45.0, (res, res))
    red = AnalyticField("sphere", radius=0.75, bound=1.5, rgb=(1.0, 0.0, 0.0))
    with torch.no_grad():
        target = render(red, cam).image().numpy()
    params = FieldParams(hidden=hidden, bound=1.5, seed=seed, init_radius=0.6)
    return cam, target, params


def test_face_steps_never_call_body_backend():
    cam, target, params = _step_setup()
    log = []
    face = RecordingBackend(oracle_backend(target), log, "face")
    body = RecordingBackend(oracle_backend(target), log, "body")
    router = GuidanceRouter(face, body, "fp", "bp")
    opt = torch.optim.Adam(params.parameters(), lr=0.005)
    rng = np.random.default_rng(0)
    tags = ["face", "body", "face", "face", "body"]
    for tag in tags:
        sds_step(params, opt, cam, tag, "color", router, IdentityCodec(), SdsConfig(guidance_scale=1.0),
                 SCHED, rng, n_samples=16, n_importance=0)
    assert [(entry[1], entry[2]) for entry in log] == [(tag, tag[0] + "p") for tag in tags]


def test_step_failure_leaves_params_untouched():
    class Broken(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            raise TimeoutError("backend timed out")

    cam, _, params = _step_setup()
    opt = torch.optim.Adam(params.parameters(), lr=0.005)
    before = params_to_bytes(params)
    with pytest.raises(BackendError):
        sds_step(params, opt, cam, "body", "color", GuidanceRouter.single(Broken(), "p"), IdentityCodec(),
                 SdsConfig(), SCHED, np.random.default_rng(0), n_samples=16, n_importance=0)
    assert params_to_bytes(params) == before
    assert not opt.state


def test_all_background_step_has_finite_gradients():
    cam, target, _ = _step_setup()
    params = FieldParams(hidden=16, bound=1.5, seed=0, init_radius=0.6)
    with torch.no_grad():
        params.sdf_layers[-1].bias[0] += 5.0  # pushes the whole cube outside the surface
    assert float(render(params, cam, n_samples=16, n_importance=0).opacity.detach().max()) < 1e-3
    opt = torch.optim.Adam(params.parameters(), lr=0.005)
    info = sds_step(params, opt, cam, "body", "color", GuidanceRouter.single(oracle_backend(target), "p"),
                    IdentityCodec(), SdsConfig(eikonal_weight=0.0), SCHED, np.random.default_rng(1),
                    n_samples=16, n_importance=0)
    assert np.isfinite(info.grad_norm)
    for p in params.parameters():
        assert p.grad is None or torch.isfinite(p.grad).all()
    for p in params.parameters():
        assert torch.isfinite(p).all()


def test_no_jacobian_through_backend():
    """A backend replaying the oracle's values (zero Jacobian) gives an identical update."""
    cam, target, _ = _step_setup()
    oracle = oracle_backend(target)
    seen = []

    class Recorder(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            out = oracle._predict(z_t, t, prompt, condition)
            seen.append(out.copy())
            return out

    class Replay(GuidanceBackend):
        def _predict(self, z_t, t, prompt, condition):
            return seen.pop(0)

    results = []
    for backend in (Recorder(), Replay()):
        params = FieldParams(hidden=16, bound=1.5, seed=3, init_radius=0.6)
        opt = torch.optim.Adam(params.parameters(), lr=0.005)
        rng = np.random.default_rng(5)
        for _ in range(3):
            sds_step(params, opt, cam, "body", "color", GuidanceRouter.single(backend, "p"), IdentityCodec(),
                     SdsConfig(guidance_scale=1.0), SCHED, rng, n_samples=16, n_importance=0)
        results.append(params_to_bytes(params))
    assert results[0] == results[1]


def test_sds_steps_reproducible():
    cam, target, _ = _step_setup()

    def run():
        params = FieldParams(hidden=16, bound=1.5, seed=3, init_radius=0.6)
        opt = torch.optim.Adam(params.parameters(), lr=0.005)
        rng = np.random.default_rng(9)
        infos = [sds_step(params, opt, cam, "body", "color", GuidanceRouter.single(oracle_backend(target), "p"),
                          IdentityCodec(), SdsConfig(), SCHED, rng, n_samples=16, n_importance=8)
                 for _ in range(4)]
        return [(i.grad_norm, i.t) for i in infos], params_to_bytes(params)
    assert run() == run()


def test_single_camera_surface_color_converges_to_red(single_camera_run):
    from conftest import BASE_RES, orbit
    params = single_camera_run.result.params
    cam = orbit(0.0, BASE_RES)
    with torch.no_grad():
        b = render(params, cam, n_samples=32, n_importance=16)
    fg = b.opacity.numpy().reshape(-1) > 0.99
    assert fg.sum() > 50
    o, d = generate_rays(cam)
    hits = o[fg] + b.depth.numpy().reshape(-1, 1)[fg] * d[fg]
    color = color_eval(params, hits, cam.forward)
    assert np.abs(color.mean(0) - [1.0, 0.0, 0.0]).max() < 0.1
