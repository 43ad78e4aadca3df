"""End-to-end smoke test of the compiled extension: render, train a tiny
generator and editor on analytic pairs, dub, evaluate, and run a couple of
closed-form sanity checks against the toy world's ground truth."""

import numpy as np
import pytest

import dubflow as df


def test_render_has_exact_ground_truth():
    scene = df.ToyScene.random(seed=11, frames=9)
    audio = df.synth_audio(speaker=3, frames=9, seed=12)
    r = df.render_scene(scene, audio)
    assert r.video.shape == (9, 1, 32, 32)
    # the aperture extractor recovers the analytic track on a clean render
    extracted = df.aperture_extract(r.video, r.masks)
    assert np.allclose(extracted, r.aperture, atol=1e-2)
    # silence closes the mouth
    silent = df.render_scene(scene, df.silent_audio(9))
    assert max(silent.aperture) == 0.0


def test_identity_embed_is_lip_invariant():
    scene = df.ToyScene.random(seed=21, frames=9)
    a, b = (df.synth_audio(3, 9, seed=s) for s in (22, 23))
    pair = df.analytic_pair(scene, a, b)
    e_tgt = df.identity_embed(pair.v_tgt, pair.masks)
    e_ref = df.identity_embed(pair.v_ref, pair.masks)
    cos = float(np.dot(e_tgt.ravel(), e_ref.ravel()))
    assert cos == pytest.approx(1.0, abs=1e-6)


def test_timestep_shift_matches_closed_form():
    t = np.linspace(0.05, 0.95, 7)
    for alpha in (0.2, 1.5, 5.0):
        expected = alpha * t / (1 + (alpha - 1) * t)
        got = np.array([df.timestep_shift(alpha, x) for x in t])
        assert np.allclose(got, expected, atol=1e-15)
    assert df.shifted_density_mode(5.0, 0.0, 1.0) == pytest.approx(0.921, abs=0.03)


def test_pair_filter_accepts_analytic_pairs():
    scene = df.ToyScene.random(seed=31, frames=9)
    a, b = df.synth_audio(5, 9, seed=32), df.synth_audio(5, 9, seed=33)
    res = df.filter_pair(df.analytic_pair(scene, a, b))
    assert res["accepted"]
    assert res["id_cos"] >= 0.85
    assert res["residual"] <= 0.04


def test_tiny_pipeline_runs(tmp_path):
    rng_scenes = [df.ToyScene.random(seed=41 + i, frames=9) for i in range(2)]
    pairs = [
        df.analytic_pair(s, df.synth_audio(i, 9, seed=51 + i), df.synth_audio(i, 9, seed=61 + i))
        for i, s in enumerate(rng_scenes)
    ]
    model = df.train_editor(pairs, base_steps=2, batch=1, dim=24, depth=1, heads=2,
                            ffn=48, patch=16, seed=7)
    assert sorted(model.adapter_names) == ["lip", "texture"]

    ckpt = str(tmp_path / "editor.ckpt")
    model.save(ckpt)
    reloaded = df.DiT.load(ckpt)
    assert reloaded.param_count == model.param_count

    audio_new = df.synth_audio(0, 9, seed=71)
    v_hat = df.dub(pairs[0].v_ref, audio_new, reloaded, steps=4, window=9, seed=8)
    assert v_hat.shape == pairs[0].v_ref.shape

    truth = df.analytic_pair(rng_scenes[0], audio_new, df.synth_audio(0, 9, seed=51))
    row = df.evaluate(v_hat, truth, "smoke")
    assert set(row) == {"clip_id", "sync_corr", "sync_mae", "id_cos", "off_lip_psnr", "success"}
    assert np.isfinite(row["id_cos"])


def test_oracle_battery_negative_control():
    checks = df.verify_oracles(sabotage_density=True)
    assert any(not c["pass"] for c in checks)
