import math

import numpy as np
import pytest

from core.autodiff import (
    Layer,
    MlpMap,
    MlpParams,
    elu,
    huber,
    huber_grad,
    init_mlp,
    load_arrays,
    mlp_backward,
    mlp_forward,
    save_arrays,
)
from core.errors import ArtifactError, ParameterError, StructuralError


@pytest.mark.parametrize(
    "x, expected",
    [
        (0.0, 0.0),
        (1.0, 1.0),
        (-1.0, math.exp(-1.0) - 1.0),
    ],
)
def test_elu(x, expected):
    assert elu(x) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize(
    "error, delta, expected",
    [
        (0.0, 1.0, 0.0),
        (0.5, 1.0, 0.125),
        (2.0, 1.0, 1.5),
        (-2.0, 1.0, 1.5),
    ],
)
def test_huber(error, delta, expected):
    assert huber(error, delta) == expected


@pytest.mark.parametrize("delta", [0.0, -1.0])
def test_huber_rejects_non_positive_delta(delta):
    with pytest.raises(ParameterError):
        huber(0.3, delta)
    with pytest.raises(ParameterError):
        huber_grad(0.3, delta)


def test_huber_grad_clips_to_delta():
    np.testing.assert_array_equal(huber_grad(np.array([-3.0, -0.2, 0.0, 0.7, 5.0])), [-1.0, -0.2, 0.0, 0.7, 1.0])


def test_forward_zero_weight_returns_bias():
    params = MlpParams((Layer(np.zeros((1, 3)), np.array([0.5])),))
    out, _ = mlp_forward(params, np.array([4.0, -2.0, 7.0]))
    np.testing.assert_array_equal(out, [0.5])


def test_forward_identity_weights_with_elu():
    params = MlpParams(
        (
            Layer(np.eye(2), np.zeros(2), "elu"),
            Layer(np.eye(2), np.zeros(2)),
        )
    )
    out, _ = mlp_forward(params, np.array([1.0, -1.0]))
    np.testing.assert_allclose(out, [1.0, math.exp(-1.0) - 1.0], rtol=0, atol=1e-15)


def test_forward_two_layers_matches_hand_computation():
    # --- 准备 (Arrange) ---
    w1 = np.array([[1.0, 2.0], [-1.0, 0.5]])
    b1 = np.array([0.0, -1.0])
    w2 = np.array([[2.0, -3.0]])
    b2 = np.array([0.25])
    params = MlpParams((Layer(w1, b1, "elu"), Layer(w2, b2)))

    # --- 执行 (Act) ---
    out, _ = mlp_forward(params, np.array([0.5, 1.0]))

    # --- 断言 (Assert) ---
    # 第一层: z = (2.5, -1.0) -> elu = (2.5, e^-1 - 1)
    hidden = np.array([2.5, math.exp(-1.0) - 1.0])
    expected = 2.0 * hidden[0] - 3.0 * hidden[1] + 0.25
    assert out[0] == pytest.approx(expected, abs=1e-14)


def test_batched_forward_matches_rows():
    rng = np.random.default_rng(3)
    params = init_mlp(3, (5, 4), 2, rng)
    batch = rng.normal(size=(6, 3))
    out, _ = mlp_forward(params, batch)
    for i in range(6):
        row, _ = mlp_forward(params, batch[i])
        np.testing.assert_allclose(out[i], row, rtol=0, atol=1e-14)


def test_backward_zero_upstream_gives_zero_gradients():
    params = init_mlp(3, (4,), 2, np.random.default_rng(0))
    _, tape = mlp_forward(params, np.array([0.1, -0.4, 2.0]))
    grads, input_grad = mlp_backward(tape, np.zeros(2))
    assert all(np.all(layer.weight == 0) and np.all(layer.bias == 0) for layer in grads.layers)
    assert np.all(input_grad == 0)


def test_backward_affine_layer():
    w = np.array([[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]])
    params = MlpParams((Layer(w, np.array([0.1, 0.2])),))
    x = np.array([0.3, -0.7, 1.1])
    upstream = np.array([2.0, -1.5])
    _, tape = mlp_forward(params, x)
    grads, input_grad = mlp_backward(tape, upstream)
    np.testing.assert_allclose(input_grad, w.T @ upstream)
    np.testing.assert_allclose(grads.layers[0].weight, np.outer(upstream, x))
    np.testing.assert_allclose(grads.layers[0].bias, upstream)


def _scalar_output(params: MlpParams, x: np.ndarray, upstream: np.ndarray) -> float:
    out, _ = mlp_forward(params, x)
    return float(upstream @ out)


def test_backward_matches_central_differences():
    # --- 准备 (Arrange) ---
    rng = np.random.default_rng(11)
    params = init_mlp(4, (6, 5), 3, rng)
    x = rng.normal(size=4)
    upstream = rng.normal(size=3)
    h = 1e-5

    # --- 执行 (Act) ---
    _, tape = mlp_forward(params, x)
    grads, input_grad = mlp_backward(tape, upstream)

    # --- 断言 (Assert) ---
    arrays = params.arrays()
    analytic = grads.arrays()
    for name, value in arrays.items():
        numeric = np.zeros_like(value)
        for idx in np.ndindex(value.shape):
            plus = {k: v.copy() for k, v in arrays.items()}
            minus = {k: v.copy() for k, v in arrays.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            numeric[idx] = (
                _scalar_output(params.with_arrays(plus), x, upstream)
                - _scalar_output(params.with_arrays(minus), x, upstream)
            ) / (2 * h)
        np.testing.assert_allclose(analytic[name], numeric, rtol=1e-5, atol=1e-8)
    numeric_input = np.array(
        [
            (_scalar_output(params, x + h * e, upstream) - _scalar_output(params, x - h * e, upstream)) / (2 * h)
            for e in np.eye(4)
        ]
    )
    np.testing.assert_allclose(input_grad, numeric_input, rtol=1e-5, atol=1e-8)


def test_backward_is_linear_in_upstream():
    rng = np.random.default_rng(5)
    params = init_mlp(2, (3,), 2, rng)
    x = rng.normal(size=2)
    a, b = rng.normal(size=2), rng.normal(size=2)
    results = []
    for upstream in (a, b, 2.0 * a + b):
        _, tape = mlp_forward(params, x)
        results.append(mlp_backward(tape, upstream)[1])
    np.testing.assert_allclose(results[2], 2.0 * results[0] + results[1], atol=1e-12)


def test_stale_tape_is_rejected():
    params = init_mlp(2, (3,), 1, np.random.default_rng(0))
    _, tape = mlp_forward(params, np.array([0.1, 0.2]))
    mlp_backward(tape, np.ones(1))
    with pytest.raises(StructuralError):
        mlp_backward(tape, np.ones(1))


def test_upstream_shape_mismatch_is_rejected():
    params = init_mlp(2, (3,), 1, np.random.default_rng(0))
    _, tape = mlp_forward(params, np.array([0.1, 0.2]))
    with pytest.raises(StructuralError):
        mlp_backward(tape, np.ones(2))


def test_input_width_mismatch_is_rejected():
    params = init_mlp(3, (4,), 1, np.random.default_rng(0))
    with pytest.raises(StructuralError):
        mlp_forward(params, np.ones(2))


def test_params_structure_invariants():
    with pytest.raises(StructuralError):
        MlpParams((Layer(np.ones((2, 2)), np.zeros(2)), Layer(np.ones((1, 3)), np.zeros(1))))
    with pytest.raises(StructuralError):
        MlpParams((Layer(np.ones((1, 2)), np.zeros(1), "elu"),))


def test_non_finite_parameters_are_rejected_on_load():
    arrays = {"layers.0.weight": np.array([[np.nan]]), "layers.0.bias": np.zeros(1)}
    with pytest.raises(ParameterError):
        MlpParams.from_arrays(arrays, ["identity"])


def test_init_is_deterministic_and_glorot_bounded():
    a = init_mlp(3, (128, 128), 1, np.random.default_rng(42))
    b = init_mlp(3, (128, 128), 1, np.random.default_rng(42))
    for la, lb in zip(a.layers, b.layers):
        np.testing.assert_array_equal(la.weight, lb.weight)
        limit = math.sqrt(6.0 / (la.in_width + la.out_width))
        assert np.all(np.abs(la.weight) <= limit)
        assert np.all(la.bias == 0)
    assert a.activations == ("elu", "elu", "identity")


def test_mlp_map_gradient_only_covers_state_columns():
    params = init_mlp(3, (4,), 2, np.random.default_rng(1))
    f = MlpMap(params, prefix="f.")
    x = np.array([[0.2, -0.1]])
    u = np.array([[0.5]])
    _, ctx = f.forward(x, u)
    grads, x_grad = f.backward(ctx, np.ones((1, 2)))
    assert x_grad.shape == (1, 2)
    assert set(grads) == {"f.layers.0.weight", "f.layers.0.bias", "f.layers.1.weight", "f.layers.1.bias"}


def test_save_and_load_arrays_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    arrays = init_mlp(3, (5,), 1, rng).arrays("g.0.")
    path = tmp_path / "params.npz"

    save_arrays(str(path), arrays, {"note": "测试", "hidden": [5]})
    loaded, meta = load_arrays(str(path))

    assert meta == {"note": "测试", "hidden": [5]}
    assert set(loaded) == set(arrays)
    for name in arrays:
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_load_missing_file_names_path(tmp_path):
    missing = tmp_path / "nope.npz"
    with pytest.raises(ArtifactError) as info:
        load_arrays(str(missing))
    assert info.value.path == str(missing)
