"""Numeric core: frozen op values, gradient oracle, Adam, determinism."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfa_lab import numeric as nm
from cfa_lab.errors import ConfigurationError, DimensionError, NumericError, PreconditionError
from cfa_lab.numeric import Grid

RNG_SEEDS = [0, 1, 2, 3, 4]


def rand_grid(rng, shape, scale=1.0):
    return Grid(rng.standard_normal(shape).astype(np.float32) * scale, requires_grad=True)


# ---------------------------------------------------------------------------
# frozen forward values


def test_conv_identity_kernel_single_cell():
    x = Grid(np.array([[[[5.0]]]], dtype=np.float32))
    k = Grid(np.ones((1, 1, 1, 1), dtype=np.float32))
    out = nm.conv2d(x, k)
    assert out.shape == (1, 1, 1, 1)
    assert out.values[0, 0, 0, 0] == 5.0


def test_conv_sum_kernel_2x2():
    x = Grid(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], dtype=np.float32))
    k = Grid(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = nm.conv2d(x, k)
    assert out.shape == (1, 1, 1, 1)
    assert out.values[0, 0, 0, 0] == 10.0


def test_conv_output_size_formula():
    # (H + 2p - k)/s + 1, exact division required
    x = Grid(np.zeros((1, 1, 9, 9), dtype=np.float32))
    k = Grid(np.zeros((2, 1, 3, 3), dtype=np.float32))
    assert nm.conv2d(x, k, stride=2, padding=1).shape == (1, 2, 5, 5)
    bad = Grid(np.zeros((1, 1, 8, 8), dtype=np.float32))
    with pytest.raises(ConfigurationError):
        nm.conv2d(bad, k, stride=2, padding=0)


def test_conv_channel_mismatch_names_axis():
    x = Grid(np.zeros((1, 3, 4, 4), dtype=np.float32))
    k = Grid(np.zeros((2, 4, 3, 3), dtype=np.float32))
    with pytest.raises(DimensionError, match="channel"):
        nm.conv2d(x, k, padding=1)


def test_resize_identity_is_bitwise():
    rng = np.random.default_rng(0)
    x = Grid(rng.standard_normal((2, 3, 7, 5)).astype(np.float32))
    out = nm.resize_bilinear(x, 7, 5)
    assert out.values.tobytes() == x.values.tobytes()


def test_resize_1x2_to_1x4_midpoints():
    x = Grid(np.array([[[[1.0, 3.0]]]], dtype=np.float32))
    out = nm.resize_bilinear(x, 1, 4)
    assert np.allclose(out.values[0, 0, 0], [1.0, 1.5, 2.5, 3.0])


def test_resize_constant_grid_stays_constant():
    c = np.float32(0.7371)
    x = Grid(np.full((1, 2, 6, 6), c, dtype=np.float32))
    up = nm.resize_bilinear(x, 17, 13)
    down = nm.resize_bilinear(up, 4, 5)
    assert np.all(up.values == c)
    assert np.all(down.values == c)


def test_layer_norm_constant_channels_are_zeroed():
    x = Grid(np.full((1, 4, 3, 3), 2.5, dtype=np.float32))
    out = nm.layer_norm(x)
    assert np.allclose(out.values, 0.0)


def test_layer_norm_moments():
    rng = np.random.default_rng(3)
    x = Grid(rng.standard_normal((2, 8, 5, 5)).astype(np.float32) * 3.0 + 1.0)
    out = nm.layer_norm(x)
    mean = out.values.mean(axis=1)
    var = out.values.var(axis=1)
    assert np.allclose(mean, 0.0, atol=1e-5)
    assert np.allclose(var, 1.0, atol=1e-3)


def test_pointwise_fixed_points():
    z = Grid(np.zeros((1, 1, 1, 1), dtype=np.float32))
    assert nm.sigmoid(z).values[0, 0, 0, 0] == 0.5
    assert nm.gelu(z).values[0, 0, 0, 0] == 0.0


def test_scale_by_zero():
    rng = np.random.default_rng(1)
    x = rand_grid(rng, (2, 3, 4, 4))
    assert np.all(nm.scale(x, 0.0).values == 0.0)


def test_max_axes_rejected():
    with pytest.raises(DimensionError, match="4"):
        Grid(np.zeros((1, 1, 1, 1, 1), dtype=np.float32))


# ---------------------------------------------------------------------------
# gradients against the central finite-difference oracle


def op_cases(seed: int):
    """One small input per differentiable op, scaled to stay well-conditioned."""
    rng = np.random.default_rng(seed)
    x = rand_grid(rng, (2, 3, 5, 4))
    y = rand_grid(rng, (2, 3, 5, 4))
    kern = rand_grid(rng, (2, 3, 3, 3), scale=0.5)
    bias = rand_grid(rng, (2,))
    dw_kern = rand_grid(rng, (3, 3, 3), scale=0.5)
    dw_bias = rand_grid(rng, (3,))
    pos = Grid(rng.uniform(0.5, 2.0, (2, 3, 5, 4)).astype(np.float32), requires_grad=True)
    targets = rng.uniform(0.0, 1.0, (2, 3, 5, 4)).astype(np.float32)
    cols = (rng.uniform(-0.7, 4.2, (6, 5))).astype(np.float64)
    rows = (rng.uniform(-0.7, 5.2, (6, 5))).astype(np.float64)
    mat_a = rand_grid(rng, (2, 4, 3))
    mat_b = rand_grid(rng, (2, 3, 5))

    cases = {
        "add": (lambda g: nm.add(g, y), x),
        "sub": (lambda g: nm.sub(g, y), x),
        "mul": (lambda g: nm.mul(g, y), x),
        "div": (lambda g: nm.div(y, g), pos),
        "scale": (lambda g: nm.scale(g, -1.7), x),
        "maximum": (lambda g: nm.maximum(g, y), x),
        "exp": (lambda g: nm.exp(g), x),
        "log": (lambda g: nm.log(g), pos),
        "sqrt": (lambda g: nm.sqrt(g), pos),
        "gelu": (lambda g: nm.gelu(g), x),
        "sigmoid": (lambda g: nm.sigmoid(g), x),
        "huber": (lambda g: nm.huber(g), x),
        "bce_logits": (lambda g: nm.bce_logits(g, targets), x),
        "sum_all": (lambda g: nm.sum_all(g), x),
        "sum_axis": (lambda g: nm.sum_axis(g, 1), x),
        "reshape": (lambda g: nm.reshape(g, (2, 3, 20)), x),
        "transpose": (lambda g: nm.transpose(g, (0, 2, 3, 1)), x),
        "matmul_a": (lambda g: nm.matmul(g, mat_b), mat_a),
        "matmul_b": (lambda g: nm.matmul(mat_a, g), mat_b),
        "softmax": (lambda g: nm.softmax(g, 1), x),
        "log_softmax": (lambda g: nm.log_softmax(g, 1), x),
        "conv2d_x": (lambda g: nm.conv2d(g, kern, bias, stride=1, padding=1), x),
        "conv2d_w": (lambda g: nm.conv2d(x, g, bias, stride=1, padding=1), kern),
        "conv2d_b": (lambda g: nm.conv2d(x, kern, g, padding=1), bias),
        "conv2d_stride2": (
            lambda g: nm.conv2d(g, kern, bias, stride=2, padding=1),
            rand_grid(rng, (1, 3, 7, 7)),
        ),
        "depthwise_x": (lambda g: nm.depthwise_conv2d(g, dw_kern, dw_bias, padding=1), x),
        "depthwise_w": (lambda g: nm.depthwise_conv2d(x, g, dw_bias, padding=1), dw_kern),
        "resize_up": (lambda g: nm.resize_bilinear(g, 8, 7), x),
        "resize_down": (lambda g: nm.resize_bilinear(g, 3, 2), x),
        "bilinear_sample": (lambda g: nm.bilinear_sample(g, cols, rows), x),
        "layer_norm": (lambda g: nm.layer_norm(g), x),
        "broadcast_mul": (lambda g: nm.mul(x, g), rand_grid(rng, (1, 3, 1, 1))),
    }
    return cases


@pytest.mark.parametrize("seed", RNG_SEEDS)
def test_gradients_match_finite_differences(seed):
    for name, (fn, point) in op_cases(seed).items():
        err = nm.grad_check(fn, point)
        assert err < 1e-3, f"op {name}: max relative gradient error {err:.2e}"


@pytest.mark.parametrize("seed", RNG_SEEDS[:3])
def test_composed_path_gradient(seed):
    """conv -> layer_norm -> gelu -> resize -> huber, checked end to end."""
    rng = np.random.default_rng(seed + 100)
    kern = rand_grid(rng, (4, 2, 3, 3), scale=0.4)
    bias = rand_grid(rng, (4,))
    target = rng.standard_normal((1, 4, 8, 8)).astype(np.float32)

    def path(g):
        h = nm.conv2d(g, kern, bias, stride=1, padding=1)
        h = nm.gelu(nm.layer_norm(h))
        h = nm.resize_bilinear(h, 8, 8)
        return nm.mean_all(nm.huber(nm.sub(h, Grid(target))))

    x = rand_grid(rng, (1, 2, 6, 6))
    assert nm.grad_check(path, x) < 1e-3


def test_gradient_accumulates_when_reused():
    x = Grid(np.array([3.0], dtype=np.float32), requires_grad=True)
    out = nm.add(nm.mul(x, x), x)  # x^2 + x -> d/dx = 2x + 1 = 7
    nm.sum_all(out).backward()
    assert np.allclose(x.grad, [7.0])


def test_no_grad_blocks_tape():
    x = Grid(np.ones((1, 1, 2, 2), dtype=np.float32), requires_grad=True)
    with nm.no_grad():
        out = nm.mul(x, x)
    assert out._backward is None
    out2 = nm.mul(x, x)
    nm.sum_all(out2).backward()
    assert x.grad is not None


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_matches_closed_form():
    store = nm.ParamStore()
    store.add("w", Grid(np.array([1.0], dtype=np.float32)))
    nm.adam_step(store, {"w": np.array([1.0], dtype=np.float32)}, lr=0.1)
    # bias-corrected first step is lr * g / (|g| + eps) = -0.1
    assert abs(store["w"].values[0] - 0.9) < 1e-6
    assert store.step_count == 1


def test_adam_missing_grad_names_parameter():
    store = nm.ParamStore()
    store.add("kernel", Grid(np.ones(3, dtype=np.float32)))
    with pytest.raises(PreconditionError, match="kernel"):
        nm.adam_step(store, {}, lr=0.1)


def test_adam_nonfinite_grad_raises():
    store = nm.ParamStore()
    store.add("w", Grid(np.ones(2, dtype=np.float32)))
    with pytest.raises(NumericError, match="w"):
        nm.adam_step(store, {"w": np.array([np.nan, 0.0], dtype=np.float32)}, lr=0.1)


def test_adam_trajectory_is_deterministic():
    def run():
        store = nm.ParamStore()
        rng = np.random.default_rng(7)
        store.add("w", Grid(rng.standard_normal(8).astype(np.float32)))
        for step in range(5):
            g = rng.standard_normal(8).astype(np.float32)
            nm.adam_step(store, {"w": g}, lr=0.01)
        return store["w"].values.tobytes()

    assert run() == run()


# ---------------------------------------------------------------------------
# property tests


@settings(max_examples=30, deadline=None)
@given(
    st.integers(1, 3),
    st.integers(1, 4),
    st.integers(1, 6),
    st.integers(1, 6),
    st.integers(0, 2**32 - 1),
)
def test_resize_round_trip_shapes(b, c, h, w, seed):
    rng = np.random.default_rng(seed)
    x = Grid(rng.standard_normal((b, c, h, w)).astype(np.float32))
    up = nm.resize_bilinear(x, h * 2, w * 3)
    back = nm.resize_bilinear(up, h, w)
    assert back.shape == x.shape


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_sum_all_linear_in_scale(seed):
    rng = np.random.default_rng(seed)
    x = Grid(rng.standard_normal((2, 3, 4)).astype(np.float32))
    a = nm.sum_all(nm.scale(x, 2.0)).item()
    b = nm.sum_all(x).item()
    assert abs(a - 2.0 * b) < 1e-4 * max(1.0, abs(b))
