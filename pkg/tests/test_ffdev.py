import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from devdet.checkpoint import load_checkpoint, parameter_hash, save_checkpoint
from devdet.data import Sample, SampleSet
from devdet.detector import make_detector
from devdet.ffdev import (
    Stage1Config,
    apply_developer,
    developing_loss,
    generate_developer,
    make_generator,
    stage1_gradient_check,
    stage1_loss,
    train_stage1,
    tv_loss,
)


def tiny_set(n=8, size=16, seed=0):
    rng = np.random.default_rng(seed)
    return SampleSet(tuple(
        Sample(rng.random((size, size, 3)).astype(np.float32), i % 2, 0, f"g{i:02d}") for i in range(n)
    ))


# -- total variation --------------------------------------------------------------


def test_tv_two_by_two_hand_computed():
    img = np.array([[0.0, 3.0], [4.0, 0.0]])[None]  # 1 x 2 x 2
    # (0,0): dr=4, dc=3 -> 5 ; (0,1): dr=-3 -> 3 ; (1,0): dc=-4 -> 4 ; (1,1): 0
    assert tv_loss(img, eps=0.0) == pytest.approx(12.0, abs=1e-12)
    e = 1e-8
    expected = math.sqrt(25 + e) + math.sqrt(9 + e) + math.sqrt(16 + e) + math.sqrt(e)
    assert tv_loss(img, eps=e) == pytest.approx(expected, abs=1e-12)


def test_tv_constant_image_is_smoothing_floor():
    img = np.full((3, 5, 5), 0.7)
    assert tv_loss(img, eps=1e-8) == pytest.approx(75 * 1e-4, rel=1e-12)


def test_tv_torch_matches_numpy():
    x = np.random.default_rng(0).random((2, 3, 6, 7))
    assert float(tv_loss(torch.as_tensor(x))) == pytest.approx(tv_loss(x), rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.1, 10.0), st.integers(0, 1000))
def test_tv_positively_homogeneous_without_smoothing(c, seed):
    x = np.random.default_rng(seed).random((3, 4, 4))
    assert tv_loss(c * x, eps=0.0) == pytest.approx(c * tv_loss(x, eps=0.0), rel=1e-9)


def test_tv_rejects_degenerate_image():
    with pytest.raises(ValueError):
        tv_loss(np.zeros((3, 1, 5)))


# -- developer arithmetic -----------------------------------------------------------


def test_apply_developer_examples():
    img = np.array([0.2, 0.5, 0.9])
    delta = np.array([1.0, -1.0, 1.0])
    np.testing.assert_allclose(apply_developer(img, delta, 0.25), [0.45, 0.25, 1.0])
    np.testing.assert_array_equal(apply_developer(img, delta, 0.0), img)


def test_apply_developer_per_image_doses():
    img = np.full((2, 3, 2, 2), 0.5)
    delta = np.ones_like(img)
    out = apply_developer(img, delta, np.array([0.0, 0.2]))
    assert np.all(out[0] == 0.5) and np.allclose(out[1], 0.7)
    t = apply_developer(torch.as_tensor(img), torch.as_tensor(delta), np.array([0.0, 0.2]))
    np.testing.assert_allclose(t.numpy(), out)


def test_apply_developer_validates():
    with pytest.raises(ValueError):
        apply_developer(np.zeros(3), np.zeros(4), 0.1)
    with pytest.raises(ValueError):
        apply_developer(np.zeros(3), np.zeros(3), -0.1)


def test_developing_loss_values():
    assert developing_loss(0.5, 1) == pytest.approx(math.log(2))
    assert developing_loss(0.9, 0) == pytest.approx(-math.log(0.1))
    # clamped at 1e-7: finite at the extremes
    assert developing_loss(0.0, 1) == pytest.approx(-math.log(1e-7))
    assert developing_loss(1.0, 1) == pytest.approx(-math.log(1 - 1e-7))


def test_generator_output_bounded_and_shaped():
    gen = make_generator(0)
    x = np.random.default_rng(0).random((3, 3, 32, 32)).astype(np.float32)
    d = generate_developer(gen, x)
    assert d.shape == x.shape
    assert np.abs(d).max() <= 1.0


# -- training ----------------------------------------------------------------------


def test_stage1_freezes_detector_and_lowers_loss():
    det = make_detector(0)
    h = parameter_hash(det)
    gen = train_stage1(make_generator(1), det, tiny_set(16), Stage1Config(epochs=4, batch_size=8, learning_rate=1e-3))
    assert parameter_hash(det) == h
    assert gen.loss_history[-1] < gen.loss_history[0]


def test_stage1_deterministic():
    det = make_detector(0)
    cfg = Stage1Config(epochs=2, batch_size=4, seed=9)
    a = train_stage1(make_generator(1), det, tiny_set(), cfg)
    b = train_stage1(make_generator(1), det, tiny_set(), cfg)
    assert parameter_hash(a) == parameter_hash(b)


def test_huge_tv_weight_gives_flat_developer():
    det = make_detector(0)
    s1 = tiny_set(8)
    cfg = Stage1Config(lambda_tv=1e6, epochs=6, batch_size=8, learning_rate=1e-2, augment=False)
    gen = train_stage1(make_generator(2), det, s1, cfg)
    delta = generate_developer(gen, s1.images())
    for d in delta:
        flat = np.broadcast_to(d.mean(axis=(1, 2), keepdims=True), d.shape)
        assert abs(tv_loss(d) - tv_loss(flat)) < 1e-3


def test_empty_stage1_set_rejected():
    with pytest.raises(ValueError):
        train_stage1(make_generator(0), make_detector(0), SampleSet(()), Stage1Config(epochs=1))


def test_stage1_gradient_check_including_tv():
    rng = np.random.default_rng(3)
    gen = make_generator(4, width=2)
    with torch.no_grad():
        gen.out.weight.normal_(0, 0.3, generator=torch.Generator().manual_seed(0))
    det = make_detector(5, widths=(4, 4, 4, 4), hidden=4)
    err = stage1_gradient_check(gen, det, rng.random((2, 3, 8, 8)), np.array([1, 0]), Stage1Config(lambda_tv=0.05))
    assert err < 1e-4


def test_stage1_loss_decomposes():
    gen = make_generator(0).double()
    det = make_detector(0).double()
    x = torch.as_tensor(np.random.default_rng(0).random((2, 3, 16, 16)))
    y = torch.as_tensor([1, 0])
    with torch.no_grad():
        a = float(stage1_loss(gen, det, x, y, Stage1Config(lambda_tv=0.0)))
        b = float(stage1_loss(gen, det, x, y, Stage1Config(lambda_tv=1.0)))
        dev = apply_developer(x, gen(x), 0.25)
    assert b - a == pytest.approx(float(tv_loss(dev)) / 2, rel=1e-10)


def test_generator_checkpoint_round_trip(tmp_path):
    gen = make_generator(3)
    again, _ = load_checkpoint(save_checkpoint(gen, tmp_path / "g.ckpt"))
    x = np.random.default_rng(0).random((1, 3, 32, 32)).astype(np.float32)
    assert generate_developer(gen, x).tobytes() == generate_developer(again, x).tobytes()
