import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midccnn import tensor as T
from midccnn.data import synth_generate
from midccnn.layers import Module
from midccnn.mil import MilHead
from midccnn.runner import build_network, desk_profile, gradcheck_profile
from midccnn.tensor import Tensor, backward
from midccnn.training import (
    AdamState,
    TrainConfig,
    adam_step,
    cross_entropy_bag,
    decays,
    gradcheck,
    lr_at_epoch,
    total_epochs,
    train,
    write_history_csv,
)


class HeadOnly(Module):
    """Wraps a bare MIL head so the gradcheck harness can drive it with feature maps."""

    def __init__(self, head):
        self.head = head
        self.num_classes = head.num_classes

    def __call__(self, x):
        return self.head(x).p_bag


def random_head_net(seed=0, method="attention"):
    head = MilHead(8, 3, 6, method)
    rng = np.random.default_rng(seed)
    for p in head.parameters():
        p.data = rng.standard_normal(p.shape)
    return HeadOnly(head)


def small_net(seed=0, method="attention"):
    cfg = gradcheck_profile()
    cfg.head.method = method
    cfg.model.seed = seed
    return build_network(cfg)


def test_cross_entropy_examples():
    assert cross_entropy_bag(Tensor([[0.0, 1.0, 0.0]]), [1]).item() == 0.0
    assert abs(cross_entropy_bag(Tensor(np.full((1, 21), 1 / 21)), [4]).item() - 3.0445) < 1e-4
    clamped = cross_entropy_bag(Tensor([[1.0, 0.0]]), [1]).item()
    assert abs(clamped - 27.631) < 1e-3
    assert clamped == -math.log(1e-12)


def test_cross_entropy_batch_mean_and_grad():
    p = Tensor(np.array([[0.2, 0.8], [0.6, 0.4]]), requires_grad=True)
    loss = cross_entropy_bag(p, [1, 0])
    assert abs(loss.item() - (-math.log(0.8) - math.log(0.6)) / 2) < 1e-15
    backward(loss)
    assert np.allclose(p.grad, [[0, -0.5 / 0.8], [-0.5 / 0.6, 0]], rtol=1e-14)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError):
        cross_entropy_bag(Tensor([[0.5, 0.5]]), [2])
    with pytest.raises(ValueError):
        cross_entropy_bag(Tensor([[0.5, 0.5]]), [-1])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=6), st.integers(0, 5))
def test_cross_entropy_always_finite(values, label):
    p = np.array(values)
    label = label % len(values)
    assert math.isfinite(cross_entropy_bag(Tensor(p[None]), [label]).item())


def test_lr_ladder():
    cfg = TrainConfig(stage_epochs=100)
    assert lr_at_epoch(cfg, 0) == 1e-3
    assert abs(lr_at_epoch(cfg, 100) - 1e-4) < 1e-18
    assert abs(lr_at_epoch(cfg, 300) - 1e-6) < 1e-20
    assert lr_at_epoch(cfg, 399) is not None
    assert lr_at_epoch(cfg, 400) is None
    assert total_epochs(cfg) == 400
    assert total_epochs(TrainConfig(stage_epochs=40)) == 160


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 50), st.integers(0, 300))
def test_lr_non_increasing_and_periodic(stage, epoch):
    cfg = TrainConfig(stage_epochs=stage)
    a, b = lr_at_epoch(cfg, epoch), lr_at_epoch(cfg, epoch + 1)
    if a is None:
        assert b is None
    elif b is not None:
        assert b <= a
    start = (epoch // stage) * stage
    assert lr_at_epoch(cfg, start) == a


def test_lr_negative_epoch():
    with pytest.raises(ValueError):
        lr_at_epoch(TrainConfig(), -1)


def test_decay_selection():
    assert decays("backbone.stem.weight") and decays("head.W1") and decays("head.w2")
    assert not any(decays(n) for n in ("head.b", "backbone.stem.bias", "x.bn.gamma", "x.bn.beta"))


def scalar_adam_oracle(w, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        g = g + wd * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w = w - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return w


def run_adam(w0, grads, lr, wd, name="layer.weight"):
    p = Tensor(np.array([w0]), requires_grad=True)
    cfg = TrainConfig(weight_decay=wd)
    state = AdamState()
    for g in grads:
        p.grad = np.array([g])
        adam_step({name: p}, state, lr, cfg)
    return p.data[0], state


def test_adam_first_step():
    w, state = run_adam(0.0, [1.0], 1e-3, 0.0)
    assert abs(w - (-1e-3 / (1 + 1e-8))) < 1e-18
    assert state.t == 1


def test_adam_matches_scalar_recurrence():
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    for wd in (0.0, 1e-6, 0.1):
        w, state = run_adam(0.4, grads, 1e-2, wd)
        assert abs(w - scalar_adam_oracle(0.4, grads, 1e-2, wd)) < 1e-15
        assert np.all(state.v["layer.weight"] >= 0)


def test_adam_zero_grad_no_decay_is_fixed_point():
    assert run_adam(0.7, [0.0, 0.0], 1e-3, 0.0)[0] == 0.7


def test_adam_weight_decay_shrinks():
    w, _ = run_adam(1.0, [0.0], 1e-3, 1e-6)
    assert w < 1.0


def test_adam_bias_is_not_decayed():
    assert run_adam(1.0, [0.0], 1e-3, 1e-6, name="conv.bias")[0] == 1.0


def test_adam_rejects_non_finite():
    p = Tensor(np.zeros(2), requires_grad=True)
    p.grad = np.array([0.0, np.nan])
    with pytest.raises(FloatingPointError, match="head.W1"):
        adam_step({"head.W1": p}, AdamState(), 1e-3, TrainConfig())


def short_cfg(**kw):
    base = dict(stage_epochs=1, lr_min=1e-4, batch_size=4, dropout=0.2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    ds = synth_generate(3, 4, 64, seed=3)
    return ds.images, ds.labels


def test_train_history_and_determinism(tiny_data, tmp_path):
    images, labels = tiny_data
    runs = []
    for _ in range(2):
        net = small_net()
        _, history = train(net, images, labels, short_cfg())
        runs.append((history, net.state_dict()))
    (h1, s1), (h2, s2) = runs
    assert [r["epoch"] for r in h1] == [0, 1]
    assert [r["lr"] for r in h1] == [1e-3, 1e-3 * 0.1]
    assert h1 == h2
    assert all(s1[k].tobytes() == s2[k].tobytes() for k in s1)
    write_history_csv(h1, tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,mean_loss,train_acc" and len(lines) == 3
    assert float(lines[1].split(",")[2]) == h1[0]["mean_loss"]


def test_train_early_stop_and_errors(tiny_data):
    images, labels = tiny_data
    _, history = train(small_net(), images, labels, short_cfg(stage_epochs=50), on_epoch=lambda r: True)
    assert len(history) == 1
    with pytest.raises(ValueError):
        train(small_net(), images[:0], labels[:0], short_cfg())
    with pytest.raises(ValueError):
        train(small_net(), images, labels + 5, short_cfg())


def test_initial_loss_near_log_classes():
    ds = synth_generate(3, 8, 96, seed=11)
    for method in ("attention", "mean", "max"):
        cfg = desk_profile(method=method)
        net = build_network(cfg)
        net.eval()
        with T.no_grad():
            loss = cross_entropy_bag(net(Tensor(ds.images)), ds.labels).item()
        assert abs(loss / math.log(3) - 1) < 0.1, method


def test_single_step_decreases_bag_loss(tiny_data):
    images, labels = tiny_data
    net = small_net(seed=4)
    net.set_dropout(0.0)
    net.eval()
    x = Tensor(images[:1])
    loss = cross_entropy_bag(net(x), labels[:1])
    net.zero_grad()
    backward(loss)
    params = dict(net.named_parameters())
    cfg = TrainConfig(weight_decay=0.0)
    adam_step(params, AdamState(), 1e-4, cfg)
    after = cross_entropy_bag(net(x), labels[:1]).item()
    assert after < loss.item()


def test_gradcheck_small_network(tiny_data):
    images, labels = tiny_data
    report = gradcheck(small_net(), images[:2], labels[:2], tolerance=1e-4, n_coords=200)
    assert report.checked + report.skipped >= 200
    assert report.passed, report.summary()


def test_gradcheck_covers_every_tensor(tiny_data):
    images, labels = tiny_data
    net = small_net()
    report = gradcheck(net, images[:1], labels[:1], n_coords=10)
    # with fewer requested coordinates than tensors, each tensor still gets one
    assert report.checked + report.skipped == len(net.parameters())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradcheck_attention_params(seed):
    net = random_head_net(seed)
    x = np.random.default_rng(seed + 10).standard_normal((2, 8, 3, 3))
    report = gradcheck(net, x, [0, 2], tolerance=1e-6, n_coords=200, names=["head.W1", "head.w2", "head.b"])
    assert report.passed, report.summary()


def test_gradcheck_catches_corrupted_backward(monkeypatch):
    net = random_head_net(5)
    x = np.random.default_rng(6).standard_normal((2, 8, 3, 3))
    monkeypatch.setattr(T.Tanh, "backward", lambda self, g: (g * (1.0 - self.out),))
    report = gradcheck(net, x, [1, 2], n_coords=200, names=["head.W1", "head.w2", "head.b"])
    assert not report.passed
    assert report.max_rel_err > 1e-2
