import csv
from dataclasses import replace

import numpy as np
import pytest

from daedalus import attack as attack_mod
from daedalus.attack import (
    TRACE_FIELDS,
    AttackConfig,
    ImageObjective,
    from_tanh_space,
    l0_attack,
    l0_count,
    l2_attack,
    run_attack,
    success_test,
    to_tanh_space,
)
from daedalus.detector import build_micro, train_micro
from daedalus.losses import LossValue, TargetSet
from daedalus.scenes import generate


@pytest.fixture(scope="module")
def model():
    return train_micro(build_micro(0), generate(0, 32), epochs=4, batch_size=8)


@pytest.fixture(scope="module")
def image():
    return generate(2, 1)[0].image


FAST = AttackConfig(eta=0.05, max_iteration=6, binary_steps=3)


def test_tanh_examples():
    adv, d = from_tanh_space(np.array([0.5]), np.array([0.0]))
    assert d[0] == 0.0
    adv, d = from_tanh_space(np.array([0.0]), np.array([50.0]))
    assert d[0] == pytest.approx(1.0)
    adv, d = from_tanh_space(np.array([0.25]), np.array([np.arctanh(2 * 0.75 - 1)]))
    assert d[0] == pytest.approx(0.5, abs=1e-15)


def test_tanh_round_trip_exact_with_anchor():
    x = np.random.default_rng(0).random((4, 4, 3))
    x[0, 0] = [0.0, 1.0, 0.5]
    w0 = to_tanh_space(x)
    adv, d = from_tanh_space(x, w0.copy(), w0)
    assert adv.tobytes() == x.tobytes() and not d.any()


def test_success_test_examples():
    assert success_test(1.0, 1.0, 0.0)
    assert success_test(0.69, 1.0, 0.3)
    assert not success_test(0.71, 1.0, 0.3)


def test_l0_count_tolerance():
    d = np.zeros((2, 2, 3))
    d[0, 0, 1] = 2e-6
    d[1, 1, 2] = 5e-7
    assert l0_count(d) == 1


def test_config_validation():
    for bad in ({"gamma": 1.0}, {"gamma": -0.1}, {"norm": "linf"}, {"eta": 0.0},
                {"c_min": 5.0, "c_max": 1.0}, {"loss_kind": "f9"}, {"binary_steps": 0},
                {"l0_top_fraction": 0.0}):
        with pytest.raises(ValueError):
            AttackConfig(**bad)


def test_gamma_zero_immediate_success(model, image):
    r = run_attack(image, model, replace(FAST, gamma=0.0))
    assert r.success
    assert r.l2_distortion == 0.0
    assert r.adversarial.tobytes() == image.tobytes()


def test_attack_invariants(model, image):
    r = run_attack(image, model, replace(FAST, gamma=0.3))
    assert r.adversarial.min() >= 0.0 and r.adversarial.max() <= 1.0
    # binary-search interval never widens
    widths = [hi - lo for _c, lo, hi, _ok in r.intervals]
    assert all(b <= a for a, b in zip(widths, widths[1:]))
    assert r.intervals[0][0] == 10.0
    # success flag is the recomputed test on the returned example
    v, _ = ImageObjective([model], "f3", TargetSet.all())(r.adversarial, need_grad=False)
    assert r.success == success_test(v.total, r.loss_init, 0.3)
    assert r.loss.total == v.total
    assert len(r.trace) == 3 * (FAST.max_iteration + 1)


def test_binary_search_updates(model, image):
    r = run_attack(image, model, replace(FAST, gamma=0.3))
    for (c, lo, hi, ok), nxt in zip(r.intervals, r.intervals[1:]):
        if ok:
            assert nxt[2] == min(c, hi) and nxt[1] == lo
        else:
            assert nxt[1] == max(c, lo) and nxt[2] == hi
        assert nxt[0] == 0.5 * (nxt[1] + nxt[2])


def test_reproducible(model, image):
    a = run_attack(image, model, replace(FAST, gamma=0.3))
    b = run_attack(image, model, replace(FAST, gamma=0.3))
    assert a.adversarial.tobytes() == b.adversarial.tobytes()
    assert a.trace == b.trace


def test_l0_untouched_pixels_identical(model, image):
    r = l0_attack(image, model, replace(FAST, norm="l0", gamma=0.3, l0_top_fraction=0.05))
    untouched = ~np.any(np.abs(r.perturbation) > 0, axis=-1)
    assert untouched.any()
    assert r.adversarial[untouched].tobytes() == image[untouched].tobytes()
    assert r.l0_distortion < 64 * 64


def test_l0_full_fraction_matches_l2_steps(model, image):
    a = run_attack(image, model, replace(FAST, norm="l2", gamma=0.3))
    b = run_attack(image, model, replace(FAST, norm="l0", gamma=0.3, l0_top_fraction=1.0))
    assert [t[3] for t in a.trace] == [t[3] for t in b.trace]


def test_norm_guards(model, image):
    with pytest.raises(ValueError):
        l2_attack(image, model, replace(FAST, norm="l0"))
    with pytest.raises(ValueError):
        l0_attack(image, model, FAST)
    with pytest.raises(ValueError):
        run_attack(np.zeros((32, 32, 3)), model, FAST)


def test_target_subset_masks_loss(model, image):
    obj_all = ImageObjective([model], "f3", TargetSet.all())
    obj_one = ImageObjective([model], "f3", TargetSet.of([1]))
    assert obj_all(image, False)[0].total != obj_one(image, False)[0].total


def test_non_finite_loss_aborts_round(model, image, monkeypatch):
    real = ImageObjective.__call__
    calls = {"n": 0}

    def flaky(self, images, need_grad=True):
        calls["n"] += 1
        value, grad = real(self, images, need_grad)
        if calls["n"] == 3:  # inside the first round
            value = LossValue(float("nan"), 0.0, 0.0, 0.0)
        return value, grad

    monkeypatch.setattr(attack_mod.ImageObjective, "__call__", flaky)
    r = run_attack(image, model, replace(FAST, gamma=0.3))
    assert r.intervals[0][3] is False
    first_round = [t for t in r.trace if t[0] == 0]
    assert len(first_round) == 2 and np.isnan(first_round[-1][3])


def test_trace_csv(model, image, tmp_path):
    path = tmp_path / "trace.csv"
    r = run_attack(image, model, replace(FAST, gamma=0.3), trace_path=path)
    rows = list(csv.reader(path.open()))
    assert tuple(rows[0]) == TRACE_FIELDS
    assert len(rows) == len(r.trace) + 1
    assert float(rows[1][3]) == r.trace[0][3]


def test_ensemble_objective_is_mean(model, image):
    other = build_micro(1, "B")
    ens = ImageObjective([model, other], "f3", TargetSet.all())
    a = ImageObjective([model], "f3", TargetSet.all())(image)
    b = ImageObjective([other], "f3", TargetSet.all())(image)
    v, g = ens(image)
    assert v.total == pytest.approx((a[0].total + b[0].total) / 2, rel=1e-14)
    np.testing.assert_allclose(g, (a[1] + b[1]) / 2, rtol=1e-12, atol=1e-18)
    with pytest.raises(ValueError):
        ImageObjective([model, build_micro(0, input_side=128)], "f3", TargetSet.all())
