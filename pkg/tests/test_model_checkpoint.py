"""Assembled model forward path and checkpoint serialization."""

import numpy as np
import pytest

from splatface.camera import CameraModel, look_at
from splatface.checkpoint import (Checkpoint, CheckpointError, checkpoint_from_model,
                                  group_checksums, load_checkpoint, model_sections,
                                  restore_model, save_checkpoint)
from splatface.model import (STAGE_TRAINABLE, STAGES, FaceModel, ModelConfig,
                             color_slots, project_landmarks,
                             recover_style_descriptor)
from splatface.oracle import (BACKGROUND, build_avatar, oracle_splats_for_frame)
from splatface.rasterizer import rasterize
from splatface.tensor import Tensor

from conftest import small_oracle_config


def _small_model_cfg(seed=0):
    return ModelConfig(triplane_resolutions=(4, 8), triplane_channels=4,
                       decoder_hidden=(16,), deformer_hidden=(16,),
                       pos_hidden=(8,), style_hidden=(8,), d_model=8,
                       ff_hidden=12, n_blocks=1, seed=seed)


def _points(rng, n=30):
    return rng.uniform(-0.4, 0.4, (n, 3)).astype(np.float32)


def _frame_inputs(rng, radius=2):
    window = rng.normal(0, 0.1, (2 * radius + 1, 16, 29)).astype(np.float32)
    e = rng.normal(0, 0.1, 64).astype(np.float32)
    v = rng.normal(0, 0.5, 12).astype(np.float32)
    return window, e, 0.2, v


def _camera(size=24):
    w = look_at(eye=(0.0, 0.0, 2.0), target=(0.0, 0.0, 0.0))
    return CameraModel(w, fx=30.0, fy=30.0, cx=size / 2, cy=size / 2,
                       width=size, height=size)


# -- model wiring -------------------------------------------------------------------

def test_parameter_groups_cover_all_params_uniquely():
    rng = np.random.default_rng(0)
    model = FaceModel(_points(rng), _small_model_cfg())
    groups = model.groups()
    assert set(groups) == {"generator", "esam", "pos_encoder", "p_emo",
                           "style_extractor", "p_sty"}
    all_ids = [id(p) for ps in groups.values() for p in ps]
    assert len(all_ids) == len(set(all_ids))
    names = [p.name for p in model.parameters()]
    assert len(names) == len(set(names))


def test_trainable_sets_match_stage_contract():
    rng = np.random.default_rng(1)
    model = FaceModel(_points(rng), _small_model_cfg())
    g = model.groups()
    for stage in STAGES:
        expect = {id(p) for name in STAGE_TRAINABLE[stage] for p in g[name]}
        assert {id(p) for p in model.trainable(stage)} == expect
    assert "generator" not in STAGE_TRAINABLE["emotion"]
    assert STAGE_TRAINABLE["stylization"] == ("style_extractor", "p_sty")
    with pytest.raises(ValueError, match="unknown stage"):
        model.trainable("warmup")


def test_fresh_model_renders_seed_identity():
    rng = np.random.default_rng(2)
    pts = _points(rng)
    model = FaceModel(pts, _small_model_cfg())
    window, e, y, v = _frame_inputs(rng)
    res = model.forward(window, e, y, v)
    # zero-initialized decoder and deformer final layers: output == seed splats
    np.testing.assert_allclose(res.splats.mu.data, pts, atol=1e-6)
    assert np.abs(res.delta_emo.flat().data).max() == 0.0
    img = model.render(res, _camera(), BACKGROUND).data
    seed_img = rasterize(model.generator.seed, _camera(), BACKGROUND).color
    assert np.abs(img - seed_img).max() <= 1e-6


def test_forward_with_style_path():
    rng = np.random.default_rng(3)
    model = FaceModel(_points(rng), _small_model_cfg())
    window, e, y, v = _frame_inputs(rng)
    desc = rng.normal(size=32).astype(np.float32)
    res = model.forward(window, e, y, v, style_descriptor=desc,
                        record_attention=True)
    assert res.style_code.shape == (128,)
    assert res.delta_sty is not None
    assert res.attention is not None and len(res.attention.aga) == 1


def test_forward_canonical_and_z_caches_give_identical_output():
    rng = np.random.default_rng(4)
    model = FaceModel(_points(rng), _small_model_cfg())
    # non-trivial deformer so caching actually matters
    for p in model.p_emo.params:
        p.data += rng.normal(0, 0.02, p.data.shape).astype(np.float32)
    window, e, y, v = _frame_inputs(rng)
    full = model.forward(window, e, y, v)
    cached = model.forward(window, e, y, v, canonical=model.frozen_canonical())
    np.testing.assert_allclose(cached.splats.mu.data, full.splats.mu.data, atol=1e-6)
    z_cached = model.forward(window, e, y, v, canonical=model.frozen_canonical(),
                             z=Tensor(full.z.data.copy()))
    np.testing.assert_allclose(z_cached.splats.mu.data, full.splats.mu.data,
                               atol=1e-6)


def test_project_landmarks_matches_numpy_projection():
    rng = np.random.default_rng(5)
    mu = Tensor(rng.uniform(-0.3, 0.3, (12, 3)).astype(np.float64))
    cam = _camera()
    idx = [2, 7, 11]
    got = project_landmarks(mu, idx, cam).data
    p = mu.data[idx] @ cam.rotation.T + cam.translation
    expect = np.stack([cam.fx * p[:, 0] / p[:, 2] + cam.cx,
                       cam.fy * p[:, 1] / p[:, 2] + cam.cy], axis=1)
    np.testing.assert_allclose(got, expect, atol=1e-9)


# -- style descriptor recovery --------------------------------------------------------

def test_recover_style_descriptor_from_oracle_render_pair():
    cfg = small_oracle_config()
    avatar = build_avatar(cfg)
    style = avatar.style_descriptors[0]
    cam_cfg = cfg
    from splatface.oracle import frame_camera
    cam = frame_camera(cam_cfg, 1)
    plain = rasterize(oracle_splats_for_frame(avatar, cfg, 0.5, 0.0, "neutral"),
                      cam, BACKGROUND).color
    styled = rasterize(oracle_splats_for_frame(avatar, cfg, 0.5, 0.0, "neutral",
                                               style), cam, BACKGROUND).color
    desc = recover_style_descriptor(Tensor(plain), Tensor(styled)).data
    np.testing.assert_allclose(desc[0:9], style[0:9], atol=0.05)
    assert np.abs(desc[9:]).max() == 0.0


def test_color_slots_masks_trailing_entries():
    d = Tensor(np.arange(32, dtype=np.float64))
    out = color_slots(d).data
    np.testing.assert_array_equal(out[:9], np.arange(9))
    assert np.abs(out[9:]).max() == 0.0


def test_silhouette_scale_applies_at_splat_level():
    cfg = small_oracle_config(style_silhouette=0.08)
    avatar = build_avatar(cfg)
    style = avatar.style_descriptors[0]
    assert abs(style[9] - 1.08) < 1e-12
    plain = oracle_splats_for_frame(avatar, cfg, 0.3, 0.0, "neutral")
    styled = oracle_splats_for_frame(avatar, cfg, 0.3, 0.0, "neutral", style)
    spread_p = np.linalg.norm(plain.mu - avatar.centroid, axis=1)
    spread_s = np.linalg.norm(styled.mu - avatar.centroid, axis=1)
    np.testing.assert_allclose(spread_s, 1.08 * spread_p, rtol=1e-4)


# -- checkpointing --------------------------------------------------------------------

def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(6)
    model = FaceModel(_points(rng), _small_model_cfg(seed=3))
    for p in model.parameters():
        p.data += rng.normal(0, 0.01, p.data.shape).astype(np.float32)
    ck = checkpoint_from_model(model, "emotion", 1234,
                               {"note": "round-trip", "background": list(BACKGROUND)})
    path = tmp_path / "m.esgc"
    save_checkpoint(str(path), ck)
    back = load_checkpoint(str(path))
    assert back.stage == "emotion" and back.iteration == 1234
    assert back.meta["note"] == "round-trip"
    assert sorted(back.sections) == sorted(ck.sections)
    for name, arr in ck.sections.items():
        assert back.sections[name].tobytes() == arr.astype("<f4").tobytes(), name


def test_restored_model_renders_identically(tmp_path):
    rng = np.random.default_rng(7)
    model = FaceModel(_points(rng), _small_model_cfg(seed=4))
    for p in model.parameters():
        p.data += rng.normal(0, 0.02, p.data.shape).astype(np.float32)
    window, e, y, v = _frame_inputs(rng)
    desc = rng.normal(size=32).astype(np.float32)
    cam = _camera()
    img1 = model.render(model.forward(window, e, y, v, style_descriptor=desc),
                        cam, BACKGROUND).data

    path = tmp_path / "m.esgc"
    save_checkpoint(str(path), checkpoint_from_model(model, "stylization", 1, {}))
    restored = restore_model(load_checkpoint(str(path)))
    img2 = restored.render(restored.forward(window, e, y, v, style_descriptor=desc),
                           cam, BACKGROUND).data
    assert img1.tobytes() == img2.tobytes()


def test_checkpoint_rejects_corruption(tmp_path):
    rng = np.random.default_rng(8)
    model = FaceModel(_points(rng), _small_model_cfg())
    path = tmp_path / "m.esgc"
    save_checkpoint(str(path), checkpoint_from_model(model, "neutral", 0, {}))

    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    bad = tmp_path / "bad.esgc"
    bad.write_bytes(raw)
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(str(bad))

    raw = bytearray(path.read_bytes())
    raw[4] = 99  # version
    bad.write_bytes(raw)
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(str(bad))

    truncated = path.read_bytes()[:-100]
    bad.write_bytes(truncated)
    with pytest.raises((CheckpointError, ValueError)):
        load_checkpoint(str(bad))


def test_restore_rejects_missing_section(tmp_path):
    rng = np.random.default_rng(9)
    model = FaceModel(_points(rng), _small_model_cfg())
    ck = checkpoint_from_model(model, "neutral", 0, {})
    victim = model.parameters()[0].name
    del ck.sections[victim]
    path = tmp_path / "m.esgc"
    save_checkpoint(str(path), ck)
    with pytest.raises(CheckpointError, match="missing section"):
        restore_model(load_checkpoint(str(path)))


def test_group_checksums_detect_any_group_change():
    rng = np.random.default_rng(10)
    model = FaceModel(_points(rng), _small_model_cfg())
    before = group_checksums(model)
    assert group_checksums(model) == before
    model.p_emo.params[0].data[0, 0] += 1.0
    after = group_checksums(model)
    assert after["p_emo"] != before["p_emo"]
    assert {k: v for k, v in after.items() if k != "p_emo"} == \
           {k: v for k, v in before.items() if k != "p_emo"}


def test_model_sections_include_seed_and_bbox():
    rng = np.random.default_rng(11)
    model = FaceModel(_points(rng), _small_model_cfg())
    sec = model_sections(model)
    for name in ("seed.mu", "seed.s", "seed.q", "seed.sh", "seed.alpha_raw",
                 "triplane.bbox"):
        assert name in sec
    assert sec["triplane.bbox"].shape == (2, 3)


def test_model_config_round_trip():
    cfg = _small_model_cfg(seed=9)
    back = ModelConfig.from_dict(cfg.to_dict())
    assert back == cfg
    assert isinstance(back.triplane_resolutions, tuple)
