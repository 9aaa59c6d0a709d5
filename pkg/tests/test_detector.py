import copy

import numpy as np
import pytest
import torch

from devdet.checkpoint import file_hash, load_checkpoint, parameter_hash, read_header, save_checkpoint
from devdet.data import Sample, SampleSet
from devdet.detector import (
    TrainConfig,
    accuracy,
    gradient_check,
    make_detector,
    predict,
    predict_batch,
    pretrain,
)


def conv2d(x, w, b, stride):
    """Plain-loop 2-D convolution with zero padding 1 (x: C x H x W)."""
    c_out, c_in, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    h_out = (x.shape[1] + 2 - k) // stride + 1
    w_out = (x.shape[2] + 2 - k) // stride + 1
    out = np.zeros((c_out, h_out, w_out))
    for o in range(c_out):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i * stride:i * stride + k, j * stride:j * stride + k]
                out[o, i, j] = (patch * w[o]).sum() + b[o]
    return out


def numpy_forward(model, image_chw):
    """Independent float64 re-implementation of ConvDetector.forward."""
    sd = {k: v.double().numpy() for k, v in model.state_dict().items()}
    h = 2.0 * image_chw - 1.0
    n_blocks = len(model.arch["widths"])
    for blk in range(n_blocks):
        a, b = 4 * blk, 4 * blk + 2
        h = np.maximum(conv2d(h, sd[f"body.{a}.weight"], sd[f"body.{a}.bias"], 1), 0)
        h = np.maximum(conv2d(h, sd[f"body.{b}.weight"], sd[f"body.{b}.bias"], 2), 0)
    pooled = h.mean(axis=(1, 2))
    z = np.maximum(sd["hidden.weight"] @ pooled + sd["hidden.bias"], 0)
    logit = sd["head.weight"] @ z + sd["head.bias"]
    return 1.0 / (1.0 + np.exp(-logit[0])), z


def test_forward_matches_numpy_oracle():
    model = make_detector(3).double()
    rng = np.random.default_rng(0)
    for _ in range(3):
        x = rng.random((1, 3, 4, 4))
        conf, feat = predict_batch(model, x)
        conf_ref, feat_ref = numpy_forward(model, x[0])
        assert abs(conf[0] - conf_ref) < 1e-10
        np.testing.assert_allclose(feat[0], feat_ref, atol=1e-10)


def test_predict_single_matches_batch():
    model = make_detector(0)
    rng = np.random.default_rng(1)
    x = rng.random((5, 3, 32, 32)).astype(np.float32)
    conf, feat = predict_batch(model, x)
    c, f = predict(model, x[2].transpose(1, 2, 0))
    # float32 convolution kernels may sum in a batch-size dependent order
    assert c == pytest.approx(conf[2], abs=1e-6)
    np.testing.assert_allclose(f, feat[2], atol=1e-5)
    assert np.all((conf > 0) & (conf < 1))


def test_predict_rejects_bad_shape():
    with pytest.raises(ValueError):
        predict(make_detector(0), np.zeros((32, 32)))


def test_init_is_seeded_and_isolated():
    torch.manual_seed(123)
    before = torch.rand(1)
    a = make_detector(5)
    torch.manual_seed(123)
    make_detector(9)
    assert torch.rand(1) == before  # global torch RNG untouched
    assert parameter_hash(a) == parameter_hash(make_detector(5))
    assert parameter_hash(a) != parameter_hash(make_detector(6))


def generic_point(model, seed=0):
    """Random nonzero biases: with the zero-bias init, units fed only by dead
    ReLUs sit exactly on the kink, where finite differences are meaningless."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name.endswith("bias"):
                p.add_(0.1 * torch.randn(p.shape, generator=g))
    return model


def test_gradient_check_small_batch():
    rng = np.random.default_rng(2)
    model = generic_point(make_detector(1, widths=(4, 4, 4, 4), hidden=4))
    err = gradient_check(model, rng.random((3, 3, 8, 8)), np.array([1, 0, 1]))
    assert err < 1e-4


def _toy_set(n_per_class=16, seed=0):
    """Dark reals, bright fakes: linearly separable by mean intensity."""
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(2 * n_per_class):
        label = i % 2
        base = 0.7 if label else 0.3
        img = np.clip(base + rng.normal(0, 0.03, (32, 32, 3)), 0, 1).astype(np.float32)
        samples.append(Sample(img, label, 0, f"t{i:03d}"))
    return SampleSet(tuple(samples))


def test_pretrain_learns_separable_pair():
    pair = SampleSet(_toy_set(1).samples)
    model = pretrain(make_detector(0), pair, TrainConfig(learning_rate=1e-2, epochs=10, batch_size=2, augment=False))
    conf, _ = predict_batch(model, pair.images())
    assert accuracy(conf, pair.labels) == 1.0


def test_pretrain_reduces_loss_and_is_deterministic():
    data = _toy_set()
    cfg = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=8, seed=4)
    a = pretrain(make_detector(0), data, cfg)
    b = pretrain(make_detector(0), data, cfg)
    assert a.loss_history[-1] < a.loss_history[0]
    assert parameter_hash(a) == parameter_hash(b)


def test_pretrain_does_not_touch_input_model():
    model = make_detector(0)
    h = parameter_hash(model)
    pretrain(model, _toy_set(4), TrainConfig(epochs=1, batch_size=4))
    assert parameter_hash(model) == h


def test_pretrain_needs_both_classes():
    only_fake = _toy_set(4).subset(lambda s: s.label == 1)
    with pytest.raises(ValueError):
        pretrain(make_detector(0), only_fake, TrainConfig(epochs=1))


def test_checkpoint_round_trip_bit_exact(tmp_path):
    model = make_detector(7)
    path = save_checkpoint(model, tmp_path / "d.ckpt", seed=7, note="x")
    again, header = load_checkpoint(path)
    assert parameter_hash(again) == parameter_hash(model)
    assert header["seed"] == 7 and header["architecture_id"] == "convdet-v1"
    x = np.random.default_rng(0).random((2, 3, 32, 32)).astype(np.float32)
    assert predict_batch(model, x)[0].tobytes() == predict_batch(again, x)[0].tobytes()
    save_checkpoint(again, tmp_path / "e.ckpt", seed=7, note="x")
    assert file_hash(tmp_path / "d.ckpt") == file_hash(tmp_path / "e.ckpt")
    assert read_header(path)["shapes"][0][0] == "body.0.weight"


def test_checkpoint_rejects_truncated_file(tmp_path):
    path = save_checkpoint(make_detector(0), tmp_path / "d.ckpt")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ValueError, match="parameters"):
        load_checkpoint(path)
    path.write_bytes(b"garbage!" + raw[8:])
    with pytest.raises(ValueError, match="not a devdet checkpoint"):
        load_checkpoint(path)


def test_deepcopy_preserves_architecture_id():
    m = copy.deepcopy(make_detector(0))
    assert m.architecture_id == "convdet-v1"
