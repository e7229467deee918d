import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from accentstream.nn import (
    CheckpointError,
    ContextWindow,
    ConvNeXtBlock,
    CTCInfeasibleError,
    GatedSkip,
    GraphError,
    NonFiniteError,
    Tensor,
    TransformerLayer,
    ctc_loss,
    load_checkpoint,
    save_checkpoint,
)
from accentstream.nn import tensor as F
from accentstream.nn.ctc import min_frames

from oracles import brute_ctc_nll, numeric_grad, rel_error


def _param(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


# ----------------------------------------------------------------- autodiff


def test_product_rule_example():
    x = Tensor(3.0, requires_grad=True)
    y = Tensor(4.0, requires_grad=True)
    (x * y + x).backward()
    assert x.grad == 5.0 and y.grad == 3.0


def test_reused_tensor_accumulates():
    x = Tensor(2.0, requires_grad=True)
    (x * x * x).backward()
    assert x.grad == pytest.approx(12.0)


def test_broadcast_add_unbroadcasts(rng):
    a = _param(rng, 3, 4)
    b = _param(rng, 4)
    (a + b).sum().backward()
    assert np.array_equal(b.grad, np.full(4, 3.0)) and np.array_equal(a.grad, np.ones((3, 4)))


def test_non_scalar_backward_rejected(rng):
    with pytest.raises(GraphError):
        (_param(rng, 2) * 2.0).backward()


def test_second_backward_rejected(rng):
    loss = (_param(rng, 3) * 2.0).sum()
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        F.log(Tensor(np.array([0.0, 1.0]), requires_grad=True))


def test_constants_get_no_grad(rng):
    a = _param(rng, 3)
    c = Tensor(rng.normal(size=3))
    (a * c).sum().backward()
    assert c.grad is None


@pytest.mark.parametrize(
    "op",
    [
        lambda a, b: F.exp(a) * b,
        lambda a, b: F.tanh(a) * b,
        lambda a, b: F.sigmoid(a) * b,
        lambda a, b: F.gelu(a) * b,
        lambda a, b: F.softmax(a, axis=-1) * b,
        lambda a, b: F.log_softmax(a, axis=-1) * b,
        lambda a, b: (a @ F.transpose(b, None)) * 0.5,
        lambda a, b: F.concat([a, b], axis=0)[1:3] * 2.0,
        lambda a, b: a.mean(axis=0, keepdims=True) * b,
        lambda a, b: F.swapaxes(a.reshape(2, 2, 3), 0, 1).reshape(4, 3) * b,
    ],
    ids=["exp", "tanh", "sigmoid", "gelu", "softmax", "log_softmax", "matmul", "concat", "mean", "swapaxes"],
)
def test_elementary_gradients_match_differences(op, rng):
    a = _param(rng, 4, 3)
    b = Tensor(rng.normal(size=(4, 3)))

    def loss():
        return op(a, b).sum()

    loss().backward()
    idx, est = numeric_grad(loss, a, h=1e-6)
    assert rel_error(a.grad.reshape(-1)[idx], est) < 1e-6


def test_embedding_gradient_scatters_repeats(rng):
    table = _param(rng, 5, 2)
    F.embedding(table, np.array([1, 1, 3])).sum().backward()
    assert table.grad[:, 0].tolist() == [0.0, 2.0, 0.0, 1.0, 0.0]


# ------------------------------------------------------------------ layers


def test_conv_by_hand():
    x = Tensor(np.array([[1.0], [2.0], [3.0], [4.0]]))
    w = Tensor(np.array([[1.0], [10.0], [100.0]]))
    b = Tensor(np.array([0.5]))
    out = F.causal_depthwise_conv(x, w, b).data[:, 0]
    assert out.tolist() == [100.5, 210.5, 321.5, 432.5]


def test_attention_by_hand(rng):
    x = rng.normal(size=(3, 2))
    layer = TransformerLayer(2, 1, ContextWindow(1, 1), rng)
    layer.qkv.weight.data[:] = np.hstack([np.eye(2)] * 3)
    layer.out.weight.data[:] = np.eye(2)
    got = layer.attention(Tensor(x)).data
    for t in range(3):
        keys = [s for s in range(3) if abs(s - t) <= 1]
        sc = np.array([x[t] @ x[s] / math.sqrt(2) for s in keys])
        w = np.exp(sc - sc.max())
        w /= w.sum()
        assert np.allclose(got[t], sum(wi * x[s] for wi, s in zip(w, keys)), atol=1e-12)


def test_full_band_equals_unmasked_attention(rng):
    T = 6
    x = rng.normal(size=(T, 4))
    layer = TransformerLayer(4, 2, ContextWindow(T, T), rng)
    assert layer.window.mask(T).all()
    got = layer.attention(Tensor(x)).data
    qkv = x @ layer.qkv.weight.data + layer.qkv.bias.data
    q, k, v = (qkv[:, i * 4 : (i + 1) * 4].reshape(T, 2, 2).transpose(1, 0, 2) for i in range(3))
    s = q @ k.transpose(0, 2, 1) / math.sqrt(2)
    a = np.exp(s - s.max(axis=-1, keepdims=True))
    a /= a.sum(axis=-1, keepdims=True)
    ctx = (a @ v).transpose(1, 0, 2).reshape(T, 4)
    assert np.allclose(got, ctx @ layer.out.weight.data + layer.out.bias.data, atol=1e-12)


def test_zero_projections_give_identity(rng):
    x = Tensor(rng.normal(size=(5, 4)))
    conv = ConvNeXtBlock(4, 3, rng)
    conv.project.weight.data[:] = 0
    assert np.array_equal(conv(x).data, x.data)
    layer = TransformerLayer(4, 2, ContextWindow(2, 1), rng)
    layer.out.weight.data[:] = 0
    layer.fc2.weight.data[:] = 0
    assert np.array_equal(layer(x).data, x.data)


@pytest.mark.parametrize("past, future", [(0, 0), (2, 0), (1, 2), (3, 1)])
def test_layers_respect_their_window(past, future, rng):
    T, D = 12, 4
    conv = ConvNeXtBlock(D, 3, rng)
    layer = TransformerLayer(D, 2, ContextWindow(past, future), rng)
    x = rng.normal(size=(T, D))
    base_c, base_t = conv(Tensor(x)).data, layer(Tensor(x)).data
    for t in range(T):
        y = x.copy()
        y[t] += 1.0
        dc = np.any(conv(Tensor(y)).data != base_c, axis=1)
        dt = np.any(layer(Tensor(y)).data != base_t, axis=1)
        changed_c = np.flatnonzero(dc)
        changed_t = np.flatnonzero(dt)
        assert changed_c.min() >= t and changed_c.max() <= t + 2
        assert changed_t.min() >= t - future and changed_t.max() <= t + past


def test_gated_skip_extremes(rng):
    deep = Tensor(rng.normal(size=(3, 2)))
    skip = Tensor(rng.normal(size=(3, 2)))
    gs = GatedSkip(2, rng)
    gs.gate.weight.data[:] = 0
    for bias, want in ((50.0, deep.data), (-50.0, skip.data), (0.0, (deep.data + skip.data) / 2)):
        gs.gate.bias.data[:] = bias
        assert np.allclose(gs(deep, skip).data, want, atol=1e-12)
    with pytest.raises(ValueError):
        gs(deep, Tensor(np.zeros((2, 2))))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_gated_skip_is_convex(seed):
    rng = np.random.default_rng(seed)
    deep, skip = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    out = GatedSkip(3, rng)(Tensor(deep), Tensor(skip)).data
    lo, hi = np.minimum(deep, skip), np.maximum(deep, skip)
    assert np.all(out >= lo - 1e-12) and np.all(out <= hi + 1e-12)


def test_odd_widths_rejected(rng):
    with pytest.raises(ValueError):
        TransformerLayer(5, 2, ContextWindow(1, 1), rng)
    with pytest.raises(ValueError):
        ContextWindow(-1, 0)


# --------------------------------------------------------------------- CTC


def test_single_frame_ctc():
    logits = np.log(np.array([[0.2, 0.5, 0.3]]))
    assert ctc_loss(Tensor(logits), [1]).item() == pytest.approx(-math.log(0.5), abs=1e-12)


def test_two_uniform_frames_give_ln3():
    assert ctc_loss(Tensor(np.zeros((2, 3))), [0]).item() == pytest.approx(math.log(3), abs=1e-12)


def test_repeat_needs_separating_blank():
    assert min_frames([4, 4]) == 3 and min_frames([1, 2]) == 2
    with pytest.raises(CTCInfeasibleError):
        ctc_loss(Tensor(np.zeros((2, 3))), [0, 0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), T=st.integers(1, 5), L=st.integers(0, 3))
def test_ctc_against_enumeration(seed, T, L):
    rng = np.random.default_rng(seed)
    target = rng.integers(0, 2, size=L).tolist()
    logits = rng.normal(size=(T, 3))
    if min_frames(target) > T:
        with pytest.raises(CTCInfeasibleError):
            ctc_loss(Tensor(logits), target)
        return
    got = ctc_loss(Tensor(logits), target).item()
    assert got == pytest.approx(brute_ctc_nll(logits, target, blank=2), abs=1e-9)
    # adding a constant to a frame's logits leaves probabilities unchanged
    shifted = logits + rng.normal(size=(T, 1)) * 5
    assert ctc_loss(Tensor(shifted), target).item() == pytest.approx(got, abs=1e-9)


def test_ctc_gradient_matches_differences(rng):
    logits = Tensor(rng.normal(size=(2, 6, 4)), requires_grad=True)
    targets = [[0, 1, 1], [2]]

    def loss():
        return ctc_loss(logits, targets)

    loss().backward()
    idx, est = numeric_grad(loss, logits, h=1e-6)
    assert rel_error(logits.grad.reshape(-1)[idx], est) < 1e-6


def test_input_lengths_match_truncated_batch(rng):
    z = rng.normal(size=(2, 7, 4))
    targets = [[0, 1], [2, 2]]
    lens = [4, 7]
    logits = Tensor(z.copy(), requires_grad=True)
    loss = ctc_loss(logits, targets, input_lengths=lens)
    loss.backward()
    want = np.mean([brute_ctc_nll(z[b, : lens[b]], targets[b], blank=3) for b in range(2)])
    assert loss.item() == pytest.approx(want, abs=1e-9)
    assert np.all(logits.grad[0, 4:] == 0)
    single = Tensor(z[0, :4].copy(), requires_grad=True)
    ctc_loss(single, targets[0]).backward()
    assert np.allclose(logits.grad[0, :4], single.grad / 2, atol=1e-12)


def test_cross_entropy_examples():
    assert F.cross_entropy(Tensor(np.zeros((3, 201))), [0, 5, 200]).item() == pytest.approx(math.log(201))
    sure = np.full((1, 4), -100.0)
    sure[0, 2] = 100.0
    assert F.cross_entropy(Tensor(sure), [2]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        F.cross_entropy(Tensor(np.zeros((1, 4))), [4])


def test_label_smoothing_gradient(rng):
    logits = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    tgt = rng.integers(0, 4, size=5)

    def loss():
        return F.cross_entropy(logits, tgt, label_smoothing=0.1)

    loss().backward()
    idx, est = numeric_grad(loss, logits, h=1e-6)
    assert rel_error(logits.grad.reshape(-1)[idx], est) < 1e-6


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"a.w": rng.normal(size=(3, 4)).astype(np.float32), "b": np.float32(2.5) * np.ones(())}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, tensors, "model.width = 8\n")
    cfg, back = load_checkpoint(p)
    assert cfg == "model.width = 8\n"
    assert back.keys() == tensors.keys()
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_checkpoint_errors(tmp_path):
    p = tmp_path / "m.ckpt"
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    p.write_bytes(b"nope")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    save_checkpoint(p, {"w": np.ones((4, 4))})
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
    with pytest.raises(CheckpointError):
        save_checkpoint(p, {"bad name": np.ones(1)})
