import json
import math

import numpy as np
import pytest

from daedalus.attack import AttackConfig, ImageObjective
from daedalus.detector import build_micro, train_micro
from daedalus.eot import (
    NOISE_LIMIT,
    ROTATION_LIMIT,
    Poster,
    TransformSample,
    apply_transform,
    eot_objective,
    evaluate_poster,
    optimize_poster,
    printable_palette,
    rotate_image,
    sample_transform,
    save_poster,
    snps,
    snps_grad,
    snps_sample,
    zoom_range,
)
from daedalus.losses import TargetSet
from daedalus.scenes import generate


@pytest.fixture(scope="module")
def model():
    return train_micro(build_micro(0), generate(0, 32), epochs=4, batch_size=8)


@pytest.fixture(scope="module")
def scenes():
    return generate(2, 4)


def test_transform_ranges():
    rng = np.random.default_rng(0)
    zlo, zhi = zoom_range((64, 64), (32, 32))
    assert (zlo, zhi) == pytest.approx((0.2, 1.4))
    rot, nmin, nmax = [], 1.0, 0.0
    for _ in range(10_000):
        t = sample_transform(rng, (64, 64), (32, 32))
        rot.append(t.rotation)
        nmin, nmax = min(nmin, t.noise.min()), max(nmax, t.noise.max())
        assert zlo <= t.zoom <= zhi
        x, y = t.position
        assert 0 <= x <= 64 - t.zoom * 32 and 0 <= y <= 64 - t.zoom * 32
    assert min(rot) >= -ROTATION_LIMIT and max(rot) <= ROTATION_LIMIT
    assert nmin >= 0.0 and nmax < NOISE_LIMIT


def test_transform_deterministic():
    a = [sample_transform(np.random.default_rng(5), (64, 64), (32, 32)) for _ in range(2)]
    assert a[0] == a[1] and a[0].noise.tobytes() == a[1].noise.tobytes()


def test_transform_aspect_ratio_for_non_square_frames():
    t = sample_transform(np.random.default_rng(1), (128, 64), (16, 16), input_side=64)
    assert t.aspect_ratio == (0.5, 1.0)


def test_transform_infeasible_rejected():
    with pytest.raises(ValueError):
        sample_transform(np.random.default_rng(0), (0, 64), (32, 32))


def test_identity_placement_replaces_frame():
    rng = np.random.default_rng(2)
    frame, poster = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    out = apply_transform(frame, poster, TransformSample.identity())
    np.testing.assert_allclose(out, poster, rtol=0, atol=1e-15)


def test_rotation_composition():
    rng = np.random.default_rng(3)
    img = rng.random((32, 32, 3))
    twice = rotate_image(rotate_image(img, math.pi / 2), math.pi / 2)
    once = rotate_image(img, math.pi)
    assert np.mean(np.abs(twice - once)) <= 1e-2


def test_composite_clips_to_unit_range():
    frame = np.ones((16, 16, 3))
    t = TransformSample(0.5, 0.1, (2.0, 2.0), noise=np.full((16, 16, 3), 0.009))
    out = apply_transform(frame, np.ones((16, 16, 3)), t)
    assert out.max() <= 1.0 and out.min() >= 0.0


def test_snps_zero_on_palette():
    pal = printable_palette(4)
    poster = Poster(np.stack([pal[[0, 1]], pal[[2, 3]]]), beta=1.0, palette=pal)
    assert snps(poster) == 0.0


def test_snps_mid_gray_example():
    poster = Poster(np.full((2, 2, 3), 0.5), beta=1.0, palette=np.array([[0, 0, 0], [1, 1, 1.0]]))
    assert abs(snps(poster) - 3.0) <= 1e-9


def test_snps_sample_count():
    poster = Poster(np.zeros((400, 400, 3)), beta=0.005)
    rows = snps_sample(poster, np.random.default_rng(0))
    assert rows.size == 800 and np.unique(rows).size == 800


def test_snps_nonnegative_and_gradient():
    rng = np.random.default_rng(4)
    pal = rng.random((5, 3))
    poster = Poster(rng.random((6, 6, 3)), beta=1.0, palette=pal)
    rows = np.arange(36)
    v, g = snps_grad(poster, rows)
    assert v >= 0
    eps = 1e-6
    for idx in [(0, 0, 0), (2, 3, 1), (5, 5, 2)]:
        up, dn = poster.pixels.copy(), poster.pixels.copy()
        up[idx] += eps
        dn[idx] -= eps
        d = (snps(Poster(up, 1.0, pal), rows=rows) - snps(Poster(dn, 1.0, pal), rows=rows)) / (2 * eps)
        assert g[idx] == pytest.approx(d, rel=1e-6)


def test_poster_validation():
    with pytest.raises(ValueError):
        Poster(np.zeros((2, 2, 3)), beta=0.0)
    with pytest.raises(ValueError):
        Poster(np.zeros((2, 2, 3)), palette=np.zeros((0, 3)))


def test_eot_gradient_finite_difference(model, scenes):
    rng = np.random.default_rng(6)
    poster = Poster(rng.uniform(0.2, 0.8, (12, 12, 3)))
    samples = [TransformSample(2.0, 0.2, (20.0, 18.0)), TransformSample(1.5, -0.25, (5.0, 30.0))]
    frames = [scenes[0].image, scenes[1].image]
    obj = ImageObjective([model], "f3", TargetSet.all())
    _, g = eot_objective(poster, frames, samples, obj)
    eps, worst = 1e-4, 0.0
    for idx in [(3, 4, 0), (6, 6, 1), (8, 2, 2), (10, 9, 0), (1, 1, 1)]:
        up, dn = poster.pixels.copy(), poster.pixels.copy()
        up[idx] += eps
        dn[idx] -= eps
        fu = eot_objective(Poster(up), frames, samples, obj, need_grad=False)[0]
        fd = eot_objective(Poster(dn), frames, samples, obj, need_grad=False)[0]
        d = (fu - fd) / (2 * eps)
        worst = max(worst, abs(g[idx] - d) / max(abs(g[idx]), abs(d), 1e-12))
    assert worst <= 1e-2


def test_eot_estimator_variance_shrinks(model, scenes):
    poster = Poster(np.random.default_rng(7).uniform(0, 1, (16, 16, 3)))
    obj = ImageObjective([model], "f3", TargetSet.all())
    rng = np.random.default_rng(8)
    vals = []
    for k in range(48):
        t = sample_transform(rng, (64, 64), (16, 16))
        vals.append(eot_objective(poster, [scenes[k % 4].image], [t], obj, need_grad=False)[0])
    vals = np.array(vals)
    batch_means = vals.reshape(6, 8).mean(axis=1)
    assert batch_means.var() < 0.5 * vals.var()


def test_optimize_poster_stays_in_range_and_reduces_loss(model, scenes):
    cfg = AttackConfig(eta=50.0, max_iteration=40, seed=0)
    p = optimize_poster(scenes, [model], cfg, (16, 16), 0.05, 4)
    assert p.pixels.min() >= 0.0 and p.pixels.max() <= 1.0
    assert len(p.history) == 40
    assert np.mean(p.history[-10:]) < np.mean(p.history[:10])


def test_snps_ablation(model, scenes):
    cfg = AttackConfig(eta=50.0, max_iteration=15, seed=0)
    pal = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])  # short palette so the term has weight
    with_term = optimize_poster(scenes, [model], cfg, (8, 8), 1.0, 2, use_snps=True, palette=pal)
    without = optimize_poster(scenes, [model], cfg, (8, 8), 1.0, 2, use_snps=False, palette=pal)
    rows = np.arange(64)
    assert snps(without, rows=rows) > snps(with_term, rows=rows)


def test_optimize_rejects_bad_scenes(model):
    with pytest.raises(ValueError):
        optimize_poster([], [model], AttackConfig())
    with pytest.raises(ValueError):
        optimize_poster([np.zeros((32, 32, 3))], [model], AttackConfig())


def test_evaluate_and_save(model, scenes, tmp_path):
    p = Poster(np.random.default_rng(9).random((16, 16, 3)))
    ev = evaluate_poster(p, scenes, model, samples=5)
    assert len(ev["rates"]) == 5
    side = save_poster(p, tmp_path / "p.png", 3, scenes)
    meta = json.loads(open(side).read())
    assert meta["seed"] == 3 and meta["size"] == [16, 16]
    assert len(meta["palette_sha256"]) == 64 and meta["scenes_sha256"]
