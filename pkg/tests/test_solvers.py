import numpy as np
import pytest

from core.errors import ParameterError, StructuralError
from core.solvers import (
    METHODS,
    TABLEAUS,
    SolverKind,
    explicit_step,
    explicit_step_backward,
    interpolate_midpoint,
    resample_inputs,
    simulate,
    simulate_backward,
    step_ef,
    step_mp,
    step_rk4,
)


def decay(x, u):
    return -x


def identity_output(x, u):
    return x


class LinearField:
    """f(x, u) = a * x + b * u，带 forward/backward，用于检查 BPTT。"""

    def __init__(self, a: float, b: float):
        self.a = a
        self.b = b

    def __call__(self, x, u):
        return self.a * x + self.b * u

    def forward(self, x, u):
        return self(x, u), (np.asarray(x), np.asarray(u))

    def backward(self, ctx, upstream):
        x, u = ctx
        grads = {"a": np.array(np.sum(upstream * x)), "b": np.array(np.sum(upstream * u))}
        return grads, self.a * upstream


class Readout:
    def __call__(self, x, u):
        return x

    def forward(self, x, u):
        return x, None

    def backward(self, ctx, upstream):
        return {}, np.asarray(upstream, dtype=np.float64)


def test_interpolate_midpoint():
    np.testing.assert_allclose(interpolate_midpoint([0.2, -1.0], [0.6, 3.0]), [0.4, 1.0])


def test_interpolate_midpoint_width_mismatch():
    with pytest.raises(StructuralError):
        interpolate_midpoint([0.0, 1.0], [1.0])


@pytest.mark.parametrize(
    "stepper, expected",
    [
        # 1. 前向欧拉
        (lambda: step_ef(decay, np.array([1.0]), np.zeros(0), 0.1), 0.9),
        # 2. 中点法
        (lambda: step_mp(decay, np.array([1.0]), np.zeros(0), np.zeros(0), 0.1), 0.905),
        # 3. RK4
        (lambda: step_rk4(decay, np.array([1.0]), np.zeros(0), np.zeros(0), 0.1), 0.9048375),
    ],
)
def test_single_step_on_decay(stepper, expected):
    assert stepper()[0] == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("method", METHODS)
def test_zero_field_is_fixed_point(method):
    x0 = np.array([0.3, -2.0])
    x1, _ = explicit_step(TABLEAUS[method], lambda x, u: np.zeros_like(x), x0, np.zeros(0), np.zeros(0), 0.2)
    np.testing.assert_array_equal(x1, x0)


@pytest.mark.parametrize("method", METHODS)
def test_constant_field_is_exact(method):
    x1, _ = explicit_step(TABLEAUS[method], lambda x, u: np.full_like(x, 2.0), np.array([1.0]), np.zeros(0), np.zeros(0), 0.1)
    assert x1[0] == pytest.approx(1.2, abs=1e-15)


def test_mp_and_rk4_use_interpolated_input():
    # f = u，u 从 0 线性变到 1：积分恰为 T/2
    def f(x, u):
        return np.asarray(u, dtype=np.float64).copy()

    for stepper in (step_mp, step_rk4):
        x1 = stepper(f, np.array([0.0]), np.array([0.0]), np.array([1.0]), 0.2)
        assert x1[0] == pytest.approx(0.1, abs=1e-15)


@pytest.mark.parametrize("T", [0.0, -0.1])
def test_non_positive_step_rejected(T):
    with pytest.raises(ParameterError):
        step_ef(decay, np.array([1.0]), np.zeros(0), T)


def test_simulate_hundred_ef_steps():
    result = simulate(decay, identity_output, SolverKind("ef", 0.1), np.array([1.0]), np.zeros((101, 0)))
    assert not result.diverged
    assert result.states.shape == (101, 1)
    assert result.states[100, 0] == pytest.approx(0.9**100, rel=1e-12)
    assert result.states[100, 0] == pytest.approx(2.656e-5, rel=1e-3)
    # outputs[k] 使用 states[k]
    np.testing.assert_array_equal(result.outputs[:, 0], result.states[:, 0])


def test_simulate_reports_divergence():
    # lambda * T = 2.5：EF 每步放大 3.5 倍，远在 100 步之前超出界限
    grow = lambda x, u: 25.0 * x  # noqa: E731
    result = simulate(grow, identity_output, SolverKind("ef", 0.1), np.array([1.0]), np.zeros((100, 0)))
    assert result.diverged
    assert result.diverged_at < 100
    assert np.all(np.isfinite(result.states))


def test_simulate_divergence_index_is_deterministic():
    grow = lambda x, u: 10.0 * x  # noqa: E731
    result = simulate(grow, identity_output, SolverKind("ef", 1.0), np.array([1.0]), np.zeros((50, 0)))
    # 11^8 ≈ 2.1e8 <= 1e9 < 11^9
    assert result.diverged_at == 9
    assert result.states.shape[0] == 9


def test_simulate_stops_after_last_output():
    # 最后一个输入非常大: 如果还推进一步就会发散，但这一步没有对应的输出
    field = LinearField(0.0, 1.0)
    inputs = np.array([[0.0], [0.0], [1e12]])
    result = simulate(field, Readout(), SolverKind("ef", 0.1), np.array([1.0]), inputs, record=True)
    assert not result.diverged
    assert result.states.shape == (3, 1)
    assert result.outputs.shape == (3, 1)
    assert len(result.tape.steps) == 2


def test_simulate_accepts_one_dimensional_inputs():
    field = LinearField(-1.0, 0.5)
    u = np.linspace(0.0, 1.0, 8)
    flat = simulate(field, Readout(), SolverKind("rk4", 0.1), np.array([0.3]), u)
    column = simulate(field, Readout(), SolverKind("rk4", 0.1), np.array([0.3]), u[:, None])
    np.testing.assert_array_equal(flat.states, column.states)
    np.testing.assert_array_equal(flat.outputs, column.outputs)


def test_simulate_rejects_empty_inputs():
    with pytest.raises(StructuralError):
        simulate(decay, identity_output, SolverKind("ef", 0.1), np.array([1.0]), np.zeros((0, 1)))


@pytest.mark.parametrize(
    "method, step",
    [
        # 1. 未知方法
        ("euler", 0.1),
        # 2. 零步长
        ("ef", 0.0),
        # 3. 非有限步长
        ("rk4", float("nan")),
    ],
)
def test_solver_kind_validation(method, step):
    with pytest.raises(ParameterError):
        SolverKind(method, step)


def test_solver_kind_scaled():
    solver = SolverKind("mp", 0.2).scaled(0.5)
    assert solver.method == "mp"
    assert solver.step == pytest.approx(0.1)
    assert solver.order == 2


@pytest.mark.parametrize("method", METHODS)
def test_simulate_backward_matches_finite_differences(method):
    # --- 准备 (Arrange) ---
    rng = np.random.default_rng(4)
    inputs = rng.normal(size=(12, 1))
    weights = rng.normal(size=(12, 1))
    x0 = np.array([0.7])
    solver = SolverKind(method, 0.1)

    def objective(a, b, x_init):
        result = simulate(LinearField(a, b), Readout(), solver, x_init, inputs)
        return float(np.sum(weights * result.outputs))

    # --- 执行 (Act) ---
    field = LinearField(-1.3, 0.8)
    result = simulate(field, Readout(), solver, x0, inputs, record=True)
    grads, x0_grad = simulate_backward(field, Readout(), result.tape, weights)

    # --- 断言 (Assert) ---
    h = 1e-6
    numeric_a = (objective(-1.3 + h, 0.8, x0) - objective(-1.3 - h, 0.8, x0)) / (2 * h)
    numeric_b = (objective(-1.3, 0.8 + h, x0) - objective(-1.3, 0.8 - h, x0)) / (2 * h)
    numeric_x0 = (objective(-1.3, 0.8, x0 + h) - objective(-1.3, 0.8, x0 - h)) / (2 * h)
    assert float(grads["a"]) == pytest.approx(numeric_a, rel=1e-6, abs=1e-9)
    assert float(grads["b"]) == pytest.approx(numeric_b, rel=1e-6, abs=1e-9)
    assert float(x0_grad[0]) == pytest.approx(numeric_x0, rel=1e-6, abs=1e-9)


def test_step_backward_skips_zero_weight_stage():
    # MP 的第一阶段权重为 0，但仍通过 a21 影响第二阶段
    field = LinearField(-2.0, 0.0)
    x = np.array([1.0])
    _, rec = explicit_step(TABLEAUS["mp"], field, x, np.zeros(1), np.zeros(1), 0.1, record=True)
    _, g_x = explicit_step_backward(field, rec, np.array([1.0]))
    # d/dx [x + T * a * (x + T/2 * a * x)] = 1 + T a + (T a)^2 / 2
    ta = -0.2
    assert g_x[0] == pytest.approx(1 + ta + ta * ta / 2, abs=1e-15)


@pytest.mark.parametrize(
    "method, expected",
    [
        # 1. EF 只有 k1
        ("ef", [-1.0]),
        # 2. MP: k2 = f(x + T/2 k1)
        ("mp", [-1.0, -0.95]),
        # 3. RK4 的四个阶段
        ("rk4", [-1.0, -0.95, -0.9525, -0.90475]),
    ],
)
def test_step_record_keeps_stage_derivatives(method, expected):
    field = LinearField(-1.0, 0.0)
    _, rec = explicit_step(TABLEAUS[method], field, np.array([1.0]), np.zeros(1), np.zeros(1), 0.1, record=True)
    assert len(rec.stages) == TABLEAUS[method].stages
    np.testing.assert_allclose([k[0] for k in rec.stages], expected, rtol=0, atol=1e-15)


def test_resample_inputs_linear_interpolation():
    coarse = np.array([[0.0, 10.0], [1.0, 20.0], [3.0, 20.0]])
    fine = resample_inputs(coarse, 0.5)
    np.testing.assert_allclose(fine, [[0.0, 10.0], [0.5, 15.0], [1.0, 20.0], [2.0, 20.0], [3.0, 20.0]])
    assert resample_inputs(coarse, 1.0) is not None
    assert resample_inputs(np.zeros((3, 0)), 0.5).shape == (5, 0)


@pytest.mark.parametrize("factor", [0.0, 0.3, 2.0])
def test_resample_inputs_rejects_non_integer_ratio(factor):
    with pytest.raises(ParameterError):
        resample_inputs(np.zeros((3, 1)), factor)
