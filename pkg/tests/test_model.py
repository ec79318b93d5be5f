from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedsar import model as nn
from fedsar.errors import ContractViolation
from naive_net import naive_probs

SMALL = nn.Architecture(num_classes=3, height=8, width=8)

# Frozen output of the loop-by-loop oracle in naive_net.py for the case
# built by _frozen_case().
FROZEN_PROBS = [0.3628881298851234, 0.2527687356116533, 0.3843431345032233]


def _frozen_case():
    g = np.random.default_rng(123)
    flat = np.round(g.uniform(-0.5, 0.5, SMALL.num_params), 2)
    img = np.round(g.uniform(0, 2, (8, 8)), 2)
    return nn.ModelParams(flat, SMALL), img


def _random_params(arch, seed, noise=0.1):
    g = np.random.default_rng(seed)
    p = nn.init_params(arch, g)
    p.flat += g.normal(0, noise, p.flat.size)
    return p


def _fd(params, x, y, coords, h):
    out = []
    for i in coords:
        a = params.flat.copy()
        a[i] += h
        b = params.flat.copy()
        b[i] -= h
        out.append((nn.backward(nn.ModelParams(a, params.arch), x, y)[0]
                    - nn.backward(nn.ModelParams(b, params.arch), x, y)[0]) / (2 * h))
    return np.array(out)


def _rel(a, b, floor=1e-6):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------- layout

def test_parameter_count_default():
    # conv1 8*9+8, squeeze 4*8+4, excite 8*4+8, spatial 18+1, conv2 16*72+16, fc 10*16+10
    assert nn.Architecture().num_params == 80 + 36 + 40 + 19 + 1168 + 170


def test_layout_partitions_vector():
    layout = nn.Architecture().layout()
    pos = 0
    for spec in layout:
        assert spec.offset == pos
        pos += spec.size
    assert pos == nn.Architecture().num_params


def test_wrong_length_rejected():
    with pytest.raises(ContractViolation):
        nn.ModelParams(np.zeros(5), SMALL)


def test_glorot_and_he_bounds():
    for scheme, denom in (("he", lambda s: s.fans[0]), ("glorot", lambda s: sum(s.fans))):
        p = nn.init_params(SMALL, np.random.default_rng(0), scheme)
        for spec, (w, b) in zip(p.layout, p.unpack().values()):
            assert np.all(np.abs(w) <= math.sqrt(6 / denom(spec)))
            assert np.all(b == 0)


def test_serialization_round_trip():
    p = _random_params(SMALL, 1)
    blob = nn.params_to_bytes(p)
    q = nn.params_from_bytes(blob)
    assert q.arch == p.arch and np.array_equal(q.flat, p.flat)
    with pytest.raises(ContractViolation):
        nn.params_from_bytes(b"XXXX" + blob[4:])


# ---------------------------------------------------------------- forward

def test_zero_params_uniform():
    probs = nn.forward(nn.zeros_like_arch(SMALL), np.random.default_rng(0).random((5, 8, 8)))
    np.testing.assert_allclose(probs, np.full((5, 3), 1 / 3), atol=1e-15)


def test_forward_matches_frozen_oracle():
    params, img = _frozen_case()
    probs = nn.forward(params, img)[0]
    np.testing.assert_allclose(probs, FROZEN_PROBS, atol=1e-12)
    np.testing.assert_allclose(naive_probs(list(params.flat), img.tolist(), 3), FROZEN_PROBS, atol=1e-15)


def test_forward_matches_oracle_random_batch():
    params = _random_params(SMALL, 4, noise=0.3)
    x = np.random.default_rng(5).gamma(2, 0.5, (3, 8, 8))
    probs = nn.forward(params, x)
    for i in range(3):
        np.testing.assert_allclose(probs[i], naive_probs(list(params.flat), x[i].tolist(), 3), atol=1e-12)


def test_dimension_mismatch():
    with pytest.raises(ContractViolation):
        nn.forward(nn.zeros_like_arch(SMALL), np.zeros((2, 16, 16)))


@given(st.integers(0, 10_000), st.floats(0.01, 3.0))
def test_rows_sum_to_one_property(seed, scale):
    g = np.random.default_rng(seed)
    params = nn.ModelParams(g.normal(0, scale, SMALL.num_params), SMALL)
    probs = nn.forward(params, g.gamma(1.5, 1.0, (4, 8, 8)))
    assert np.all(np.abs(probs.sum(axis=1) - 1) < 1e-6)
    assert np.all(probs >= 0)


# ---------------------------------------------------------------- backward

def test_uniform_prediction_loss_ln2():
    arch = nn.Architecture(num_classes=2, height=8, width=8)
    loss, _ = nn.backward(nn.zeros_like_arch(arch), np.ones((1, 8, 8)), [0])
    assert loss == pytest.approx(math.log(2), abs=1e-6)


def test_gradient_sampled_coordinates():
    params = _random_params(SMALL, 7)
    g = np.random.default_rng(8)
    x = g.gamma(2, 0.5, (4, 8, 8))
    y = np.array([0, 2, 1, 1])
    _, grad = nn.backward(params, x, y)
    coords = g.choice(SMALL.num_params, 50, replace=False)
    assert _rel(grad[coords], _fd(params, x, y, coords, 1e-4)).max() < 1e-4


def test_gradient_default_architecture_sampled():
    arch = nn.Architecture(num_classes=10, height=16, width=16)
    params = _random_params(arch, 9)
    g = np.random.default_rng(10)
    x = g.gamma(2, 0.5, (3, 16, 16))
    y = np.array([3, 0, 9])
    _, grad = nn.backward(params, x, y)
    coords = g.choice(arch.num_params, 40, replace=False)
    # 768 ReLU inputs per image: some sit within 1e-5 of a kink, so the
    # central difference uses a smaller step.
    assert _rel(grad[coords], _fd(params, x, y, coords, 1e-6)).max() < 1e-4


def test_duplicated_batch_invariance():
    params = _random_params(SMALL, 11)
    x = np.random.default_rng(12).gamma(2, 0.5, (3, 8, 8))
    y = np.array([0, 1, 2])
    l1, g1 = nn.backward(params, x, y)
    l2, g2 = nn.backward(params, np.concatenate([x, x]), np.concatenate([y, y]))
    assert l1 == pytest.approx(l2, abs=1e-14)
    np.testing.assert_allclose(g1, g2, atol=1e-14)


def test_bad_labels():
    with pytest.raises(ContractViolation):
        nn.backward(nn.zeros_like_arch(SMALL), np.zeros((2, 8, 8)), [0, 3])
    with pytest.raises(ContractViolation):
        nn.backward(nn.zeros_like_arch(SMALL), np.zeros((2, 8, 8)), [0])


# ---------------------------------------------------------------- attention gates

def test_zero_gate_params_quarter_input():
    feats = np.random.default_rng(0).random((2, 8, 6, 6))
    out = nn.attention_gates(feats, nn.zeros_like_arch(SMALL))
    np.testing.assert_allclose(out, 0.25 * feats, atol=1e-15)


@pytest.mark.parametrize("shape", [(8, 4, 4), (3, 8, 5, 7)])
def test_gate_shape_preserved(shape):
    params = _random_params(SMALL, 2)
    assert nn.attention_gates(np.random.default_rng(1).random(shape), params).shape == shape


def test_gate_gradient_matches_finite_differences():
    g = np.random.default_rng(13)
    C, B, H, W = 8, 2, 5, 5
    x = g.random((C, B, H, W))
    wc1, bc1 = g.normal(size=(4, C)), g.normal(size=4)
    wc2, bc2 = g.normal(size=(C, 4)), g.normal(size=C)
    ws, bs = g.normal(size=(1, 2, 3, 3)), g.normal(size=1)
    r = g.normal(size=x.shape)

    def f(x_, wc1_=wc1, ws_=ws):
        return float((nn.attention_forward(x_, wc1_, bc1, wc2, bc2, ws_, bs)[0] * r).sum())

    out, cache = nn.attention_forward(x, wc1, bc1, wc2, bc2, ws, bs)
    dx, dwc1, _, _, _, dws, _ = nn.attention_backward(r, cache)
    h = 1e-6
    for idx in [(0, 0, 0, 0), (3, 1, 2, 4), (7, 0, 4, 1)]:
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        assert _rel(dx[idx], (f(xp) - f(xm)) / (2 * h)) < 1e-4
    for idx in [(0, 0), (2, 5)]:
        a, b = wc1.copy(), wc1.copy()
        a[idx] += h
        b[idx] -= h
        assert _rel(dwc1[idx], (f(x, a) - f(x, b)) / (2 * h)) < 1e-4
    for idx in [(0, 0, 1, 1), (0, 1, 0, 2)]:
        a, b = ws.copy(), ws.copy()
        a[idx] += h
        b[idx] -= h
        assert _rel(dws[idx], (f(x, wc1, a) - f(x, wc1, b)) / (2 * h)) < 1e-4


# ---------------------------------------------------------------- optimizer

def test_plain_sgd_step():
    arch = nn.Architecture(num_classes=2, height=8, width=8)
    p = nn.zeros_like_arch(arch)
    grad = np.zeros(arch.num_params)
    grad[:2] = [1.0, -2.0]
    opt = nn.OptState.fresh(arch.num_params, lr=0.1, momentum=0.0, weight_decay=0.0)
    new, _ = nn.sgd_step(p, grad, opt)
    np.testing.assert_allclose(new.flat[:2], [-0.1, 0.2])
    assert np.all(new.flat[2:] == 0)


def test_momentum_and_decay_buffer():
    arch = nn.Architecture(num_classes=2, height=8, width=8)
    p = nn.ModelParams(np.full(arch.num_params, 2.0), arch)
    opt = nn.OptState(np.full(arch.num_params, 1.0), lr=0.1, momentum=0.5, weight_decay=0.1)
    new, opt2 = nn.sgd_step(p, np.full(arch.num_params, 3.0), opt)
    # buffer = 0.5*1 + 3 + 0.1*2 = 3.7 ; theta = 2 - 0.1*3.7
    np.testing.assert_allclose(opt2.buffer, 3.7)
    np.testing.assert_allclose(new.flat, 2 - 0.37)


def test_cosine_schedule_endpoints():
    opt = nn.OptState.fresh(3, lr=0.02, total_rounds=60)
    assert opt.learning_rate() == 0.02
    assert nn.OptState.fresh(3, lr=0.02, total_rounds=60, round_index=60).learning_rate() == pytest.approx(0.0, abs=1e-18)
    assert nn.OptState.fresh(3, lr=0.02, total_rounds=60, round_index=30).learning_rate() == pytest.approx(0.01)


def test_paper_defaults():
    opt = nn.OptState.fresh(1)
    assert (opt.lr, opt.momentum, opt.weight_decay) == (0.02, 0.9, 1e-4)


def test_mismatched_lengths():
    with pytest.raises(ContractViolation):
        nn.sgd_step(nn.zeros_like_arch(SMALL), np.zeros(3), nn.OptState.fresh(SMALL.num_params))


def test_full_batch_descent_on_separable_task():
    arch = nn.Architecture(num_classes=2, height=8, width=8)
    g = np.random.default_rng(21)
    y = np.array([0, 1] * 8)
    x = np.full((16, 8, 8), 0.2) + g.gamma(4, 0.05, (16, 8, 8))
    x[y == 1, 2:6, 2:6] += 2.0
    params = nn.init_params(arch, g)
    opt = nn.OptState.fresh(arch.num_params, lr=0.02, total_rounds=10**6)
    losses = []
    for _ in range(20):
        loss, grad = nn.backward(params, x, y)
        losses.append(loss)
        params, opt = nn.sgd_step(params, grad, opt)
    ups = sum(b > a for a, b in zip(losses, losses[1:]))
    assert ups <= 2
    assert losses[-1] < losses[0]


def test_training_is_bit_deterministic():
    def run():
        g = np.random.default_rng(3)
        params = nn.init_params(SMALL, g)
        opt = nn.OptState.fresh(SMALL.num_params)
        x = g.gamma(2, 0.5, (6, 8, 8))
        y = g.integers(0, 3, 6)
        for _ in range(5):
            _, grad = nn.backward(params, x, y)
            params, opt = nn.sgd_step(params, grad, opt)
        return params.flat

    assert np.array_equal(run(), run())
