import json

import numpy as np
import pytest
import torch
from sklearn.base import clone

from avatarforge.exceptions import BackendError, CheckpointError, IncompatibleCheckpointError, ValidationError
from avatarforge.field import AnalyticField, params_to_bytes
from avatarforge.finetune import write_png
from avatarforge.guidance import GuidanceBackend, OracleBackend, RecordingBackend
from avatarforge.pipeline import (AvatarGenerator, GenerationConfig, config_from_dict, load_checkpoint,
                                  load_config, resume, run_generate, run_turntable, turntable_cameras)
from avatarforge.renderer import render
from avatarforge.wire import ENDPOINT_ENV, BackendServer


def oracle_for(cfg):
    from avatarforge.pipeline import make_base_backend
    return make_base_backend(cfg)


# -- configuration -----------------------------------------------------------------

def test_defaults():
    cfg = GenerationConfig(face_prompt="x")
    assert cfg.ladder.total_steps == 8000
    assert (cfg.sds.learning_rate, cfg.sds.guidance_scale) == (0.005, 100)
    assert cfg.camera.face_fraction == 0.25
    assert tuple(cfg.render.type_weights) == (1, 1, 8)
    assert (cfg.recipe.stage1_steps, cfg.recipe.stage2_steps) == (900, 500)
    assert cfg.checkpoint_every == 500 and cfg.turntable_views == 25


@pytest.mark.parametrize("data,match", [
    (dict(mode="customized", face_prompt="x"), "image_root"),
    (dict(mode="hybrid", image_root="imgs", face_prompt="a [V] man"), "both"),
    (dict(mode="hybrid", image_root="imgs", face_prompt="a man", body_prompt="a [V] man"), "token"),
    (dict(mode="sketch", face_prompt="x"), "mode"),
    (dict(mode="prompt"), "face_prompt"),
    (dict(mode="prompt", face_prompt="x", checkpoint_every=0), "checkpoint_every"),
    (dict(mode="prompt", face_prompt="x", mesh_format="stl"), "mesh_format"),
])
def test_validation_errors(data, match):
    with pytest.raises(ValidationError, match=match):
        config_from_dict(data).validate()


def test_unknown_keys_rejected():
    with pytest.raises(ValidationError, match="colour"):
        config_from_dict(dict(mode="prompt", colour="red"))
    with pytest.raises(ValidationError, match="sds"):
        config_from_dict(dict(mode="prompt", sds={"lr": 1}))


def test_toml_config_paths_resolved(tmp_path):
    (tmp_path / "run.toml").write_text(
        'mode = "prompt"\nface_prompt = "a person"\noracle_target = "t.png"\n'
        "ladder = [[16, 5], [32, 5]]\n[field]\nhidden = 16\n[sds]\nguidance_scale = 7.5\n")
    cfg = load_config(tmp_path / "run.toml")
    assert cfg.oracle_target == str(tmp_path / "t.png")
    assert cfg.ladder.stages == ((16, 5), (32, 5))
    assert (cfg.field.hidden, cfg.sds.guidance_scale) == (16, 7.5)


# -- runs ------------------------------------------------------------------------------

def test_mode_one_run_artifacts_and_no_finetune(tiny_config):
    cfg = tiny_config()
    log = []
    base = RecordingBackend(oracle_for(cfg), log, "base")
    res = run_generate(cfg, base_backend=base)
    assert not [e for e in log if e[0] in ("finetune", "generate")]
    assert {e[2] for e in log} == {"a person"}
    out = res.output_dir
    manifest = json.loads((out / "run.json").read_text())
    assert manifest["config"]["ladder"]["stages"] == [[16, 6], [32, 4]]
    assert manifest["seeds"]["field"] == cfg.seed
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == ["step_000005.avbc", "step_000010.avbc"]
    assert (out / "final.avbc").exists() and len(res.turntable) == 2
    rows = (out / "diagnostics.csv").read_text().splitlines()
    assert len(rows) == 11 and rows[0].startswith("step,")
    assert [int(r.split(",")[4]) for r in rows[1:]] == [16] * 6 + [32] * 4
    assert res.mesh is None or res.mesh.suffix == ".obj"


def test_equal_manifests_equal_checkpoints(tiny_config):
    a = run_generate(tiny_config("a"), turntable=False, mesh=False)
    b = run_generate(tiny_config("b"), turntable=False, mesh=False)
    ja = json.loads((a.output_dir / "run.json").read_text())
    jb = json.loads((b.output_dir / "run.json").read_text())
    ja["config"].pop("output_dir"), jb["config"].pop("output_dir")
    assert ja == jb
    assert a.checkpoint.read_bytes() == b.checkpoint.read_bytes()


class FailAfter(GuidanceBackend):
    def __init__(self, inner, n):
        self.inner, self.n, self.calls = inner, n, 0

    def predict_noise(self, z_t, t, prompt, condition=None, guidance_scale=1.0):
        self.calls += 1
        if self.calls > self.n:
            raise ConnectionError("backend went away")
        return self.inner.predict_noise(z_t, t, prompt, condition, guidance_scale)


def test_interrupted_run_resumes_bit_identically(tiny_config):
    kw = dict(ladder={"stages": [[16, 300]]}, checkpoint_every=150)
    ref = run_generate(tiny_config("ref", **kw), turntable=False, mesh=False)
    cfg = tiny_config("broken", **kw)
    with pytest.raises(BackendError):
        run_generate(cfg, base_backend=FailAfter(oracle_for(cfg), 200), turntable=False, mesh=False)
    ck = cfg.output_dir + "/checkpoints/step_000150.avbc"
    assert load_checkpoint(ck).step == 150
    res = resume(ck, cfg, turntable=False, mesh=False)
    assert res.checkpoint.read_bytes() == ref.checkpoint.read_bytes()
    assert params_to_bytes(res.params) == params_to_bytes(ref.params)
    assert (res.output_dir / "diagnostics.csv").read_text() == (ref.output_dir / "diagnostics.csv").read_text()


def test_corrupt_checkpoint_rejected(tiny_config, tmp_path):
    res = run_generate(tiny_config(), turntable=False, mesh=False)
    data = bytearray(res.checkpoint.read_bytes())
    data[len(data) // 2] ^= 0x01
    bad = tmp_path / "bad.avbc"
    bad.write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(bad)
    with pytest.raises(CheckpointError):
        resume(bad, tiny_config(), turntable=False, mesh=False)


def test_altered_ladder_rejected_with_diff(tiny_config):
    res = run_generate(tiny_config(), turntable=False, mesh=False)
    ck = res.output_dir / "checkpoints" / "step_000005.avbc"
    other = tiny_config("other", ladder={"stages": [[16, 6], [32, 8]]})
    with pytest.raises(IncompatibleCheckpointError, match=r"ladder\.stages"):
        resume(ck, other, turntable=False, mesh=False)


def test_checkpoint_version_mismatch(tiny_config, tmp_path):
    import hashlib
    import struct
    res = run_generate(tiny_config(), turntable=False, mesh=False)
    body = bytearray(res.checkpoint.read_bytes()[:-32])
    body[4:8] = struct.pack("<I", 99)
    (tmp_path / "v.avbc").write_bytes(bytes(body) + hashlib.sha256(body).digest())
    with pytest.raises(IncompatibleCheckpointError, match="version"):
        load_checkpoint(tmp_path / "v.avbc")


def test_unhealthy_backend_fails_before_step_zero(tiny_config):
    class Down(OracleBackend):
        def health(self):
            return False

    cfg = tiny_config()
    rec = RecordingBackend(Down(np.zeros((8, 8, 3))))
    with pytest.raises(BackendError, match="unavailable"):
        run_generate(cfg, base_backend=rec)
    assert rec.log == []
    assert not (tmp := __import__("pathlib").Path(cfg.output_dir) / "checkpoints").exists(), tmp


def test_external_backend_from_environment(tiny_config, monkeypatch):
    cfg = tiny_config(backend_kind="external", ladder={"stages": [[16, 3]]})
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    with pytest.raises(BackendError, match=ENDPOINT_ENV):
        run_generate(cfg, turntable=False, mesh=False)
    local = oracle_for(tiny_config())
    with BackendServer(local) as server:
        monkeypatch.setenv(ENDPOINT_ENV, server.endpoint)
        res = run_generate(cfg, turntable=False, mesh=False)
    assert len(res.diagnostics) == 3


# -- personalised modes ------------------------------------------------------------------

@pytest.fixture
def image_root(tmp_path):
    rng = np.random.default_rng(0)
    for sub, n in (("face", 2), ("body", 2)):
        (tmp_path / "imgs" / sub).mkdir(parents=True)
        for i in range(n):
            write_png(tmp_path / "imgs" / sub / f"{i}.png", rng.uniform(size=(32, 32, 3)))
    return tmp_path / "imgs"


def test_customized_mode_finetunes_then_routes(tiny_config, image_root):
    cfg = tiny_config(mode="customized", face_prompt=None, image_root=str(image_root),
                      conditioning_resolution=32, ladder={"stages": [[16, 4]]})
    log = []
    res = run_generate(cfg, base_backend=RecordingBackend(oracle_for(cfg), log, "base"),
                       turntable=False, mesh=False)
    kinds = [e[0] for e in log]
    first_predict = kinds.index("predict_noise")
    assert kinds[:first_predict] == ["finetune"] + ["generate"] * 16 + ["finetune", "finetune"]
    assert [e[3] for e in log if e[0] == "finetune"] == [900, 500, 800]
    r = res.router
    assert r.face_backend is not r.body_backend
    assert r.face_prompt == "a photo of [V] person's face"
    assert r.body_prompt == "a full body photo of [V] person"
    assert (res.output_dir / "mv" / "provenance.json").exists()
    assert (res.output_dir / "finetuned" / "finetuned.json").exists()
    # the saved fine-tuned backends are reused without another round of fine-tuning
    log2 = []
    again = tiny_config("again", mode="customized", face_prompt=None, image_root=str(image_root),
                        finetuned_dir=str(res.output_dir / "finetuned"), ladder={"stages": [[16, 4]]})
    run_generate(again, base_backend=RecordingBackend(oracle_for(cfg), log2, "base"), turntable=False, mesh=False)
    assert not [e for e in log2 if e[0] != "predict_noise"]


def test_hybrid_mode_prompts_verbatim(tiny_config, image_root):
    cfg = tiny_config(mode="hybrid", face_prompt="a [V] man with yellow hair", body_prompt="a [V] man in a suit",
                      image_root=str(image_root), conditioning_resolution=32, ladder={"stages": [[16, 4]]})
    log = []
    res = run_generate(cfg, base_backend=RecordingBackend(oracle_for(cfg), log, "base"),
                       turntable=False, mesh=False)
    assert (res.router.face_prompt, res.router.body_prompt) == (cfg.face_prompt, cfg.body_prompt)
    used = {e[2] for e in log if e[0] == "predict_noise"}
    assert used <= {cfg.face_prompt, cfg.body_prompt} and used
    assert "finetune" in [e[0] for e in log]


def test_hybrid_token_placeholder(tiny_config, image_root):
    cfg = tiny_config(mode="hybrid", face_prompt="a {token} man with yellow hair", body_prompt="a {token} man",
                      image_root=str(image_root), conditioning_resolution=32, ladder={"stages": [[16, 2]]})
    res = run_generate(cfg, turntable=False, mesh=False)
    assert res.router.face_prompt == "a [V] man with yellow hair"


# -- turntable ------------------------------------------------------------------------------

def test_turntable_files_and_azimuths(tmp_path):
    sphere = AnalyticField("sphere", radius=0.5, bound=1.0)
    paths = run_turntable(sphere, tmp_path, n_views=25, resolution=16, n_samples=16, n_importance=0)
    assert [p.name for p in paths] == [f"view_{i:03}.png" for i in range(25)]
    for i, cam in enumerate(turntable_cameras(25)):
        az = np.degrees(np.arctan2(cam.center[0], cam.center[2])) % 360
        assert az == pytest.approx(14.4 * i, abs=1e-9) or az == pytest.approx(14.4 * i - 360, abs=1e-9)
        assert cam.center[1] == pytest.approx(0.0, abs=1e-12)


def test_single_view_is_frontal():
    (cam,) = turntable_cameras(1)
    assert np.allclose(cam.center, [0, 0, 2.5]) and np.allclose(cam.forward, [0, 0, -1])


def test_turntable_rejects_zero_views(tmp_path):
    with pytest.raises(ValidationError):
        run_turntable(AnalyticField("empty"), tmp_path, n_views=0)


def test_adjacent_view_silhouettes_overlap(single_camera_run):
    params = single_camera_run.result.params
    masks = []
    for cam in turntable_cameras(25, radius=3.0, resolution=32):
        with torch.no_grad():
            masks.append(render(params, cam, n_samples=32, n_importance=16).opacity.numpy() > 0.5)
    for a, b in zip(masks, masks[1:] + masks[:1]):
        assert (a & b).sum() / (a | b).sum() > 0.5


# -- estimator facade --------------------------------------------------------------------------

def test_avatar_generator_estimator(tiny_config, tmp_path):
    est = AvatarGenerator(config=tiny_config(ladder={"stages": [[16, 3]]}))
    assert clone(est).get_params().keys() == est.get_params().keys()
    est.fit()
    imgs = est.predict(turntable_cameras(2, resolution=16), n_samples=16, n_importance=0)
    assert len(imgs) == 2 and imgs[0].shape == (16, 16, 3)
    path = est.export_mesh(tmp_path / "m.ply", grid=24)
    assert path.read_text().startswith("ply")
