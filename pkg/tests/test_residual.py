import json
import os

import numpy as np
import pytest

from core.autodiff import Differentiable
from core.errors import ArtifactError, SpecError, StructuralError
from core.residual import (
    WIRING_DIR,
    ResidualSpec,
    _Wiring,
    build_model,
    builtin_specs,
    load_model,
    load_spec,
    residual_sequence,
    resolve_spec,
    save_model,
)
from core.solvers import SolverKind

RK4 = SolverKind("rk4", 0.2)


@pytest.fixture
def specs():
    return builtin_specs()


@pytest.mark.parametrize(
    "name, n_states, g_widths, reference",
    [
        # 1. 单状态残差
        ("r1", 1, [3], "y_p_du"),
        # 2. 双状态残差
        ("r2", 2, [4, 4], "y_p_ap"),
        # 3. 三状态残差
        ("r3", 3, [3, 4, 4], "y_p_du"),
    ],
)
def test_builtin_wiring(specs, name, n_states, g_widths, reference):
    spec = specs[name]
    assert len(spec.states) == n_states
    assert [len(inputs) for inputs in spec.g_inputs] == g_widths
    assert len(spec.h_inputs) == 1
    assert spec.reference == reference
    assert spec.reference not in spec.h_inputs


def test_r3_pump_state_inputs(specs):
    r3 = specs["r3"]
    i = r3.states.index("p_ap")
    assert r3.g_inputs[i] == ("p_ap", "p_bp", "p_du", "n_p")


def test_input_signals_are_unique_measurements(specs):
    assert specs["r1"].input_signals == ("y_p_ap", "DC")
    assert specs["r2"].input_signals == ("y_p_du", "n_p", "y_p_tp")


def test_build_model_widths(specs):
    model = build_model(specs["r1"], (8,), seed=0)
    assert model.g_params[0].in_width == 3
    assert model.g_params[0].out_width == 1
    assert model.h_params.in_width == 1
    assert model.h_params.out_width == 1
    assert model.hidden == (8,)


def test_build_model_is_deterministic(specs):
    a = build_model(specs["r3"], (4, 4), seed=7).parameters()
    b = build_model(specs["r3"], (4, 4), seed=7).parameters()
    c = build_model(specs["r3"], (4, 4), seed=8).parameters()
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_build_model_rejects_empty_hidden(specs):
    with pytest.raises(SpecError):
        build_model(specs["r1"], (), seed=0)


def test_model_rejects_mismatched_network(specs):
    model = build_model(specs["r1"], (4,), seed=0)
    wrong = build_model(specs["r2"], (4,), seed=0)
    with pytest.raises(StructuralError):
        type(model)(model.spec, wrong.g_params[:1], model.h_params, model.norm)


@pytest.mark.parametrize("name", ["r1", "r2", "r3"])
def test_residual_sequence_shapes(specs, synthetic_signals, name):
    data = synthetic_signals.slice(0, 10)
    model = build_model(specs[name], (4, 4), seed=1, stats=synthetic_signals.stats)
    result = residual_sequence(model, RK4, data)
    assert result.r.shape == (10,)
    assert result.states.shape[1] == len(specs[name].states)
    assert not result.diverged
    assert np.all(np.isfinite(result.r))
    np.testing.assert_allclose(result.r_norm, result.r / model.norm[specs[name].reference][1])


def test_reference_shift_moves_residual(specs, synthetic_signals):
    # --- 准备 (Arrange) ---
    data = synthetic_signals.slice(0, 20)
    model = build_model(specs["r1"], (4,), seed=2, stats=synthetic_signals.stats)
    x0 = model.initial_state(data)
    shifted_frame = data.frame.copy()
    shifted_frame["y_p_du"] = shifted_frame["y_p_du"] + 5.0
    shifted = type(data)(shifted_frame, data.sample_time)

    # --- 执行 (Act) ---
    base = residual_sequence(model, RK4, data, x0=x0)
    moved = residual_sequence(model, RK4, shifted, x0=x0)

    # --- 断言 (Assert) ---
    np.testing.assert_allclose(moved.r, base.r - 5.0, atol=1e-9)


def test_unwired_signals_do_not_affect_residual(specs, synthetic_signals):
    data = synthetic_signals.slice(0, 20)
    model = build_model(specs["r1"], (4,), seed=3, stats=synthetic_signals.stats)
    frame = data.frame.copy()
    frame["y_p_tp"] = frame["y_p_tp"] * 3.0 + 17.0
    frame["n_p"] = frame["n_p"][::-1].to_numpy()
    perturbed = type(data)(frame, data.sample_time)
    np.testing.assert_array_equal(
        residual_sequence(model, RK4, data).r, residual_sequence(model, RK4, perturbed).r
    )


def test_wired_signal_affects_residual(specs, synthetic_signals):
    data = synthetic_signals.slice(0, 20)
    model = build_model(specs["r1"], (4,), seed=3, stats=synthetic_signals.stats)
    frame = data.frame.copy()
    frame["y_p_ap"] = frame["y_p_ap"] + 100.0
    perturbed = type(data)(frame, data.sample_time)
    assert not np.allclose(
        residual_sequence(model, RK4, data).r, residual_sequence(model, RK4, perturbed).r
    )


def test_initial_state_uses_state_signals(specs, synthetic_signals):
    model = build_model(specs["r2"], (4,), seed=0, stats=synthetic_signals.stats)
    x0 = model.initial_state(synthetic_signals, 5)
    mean_ap, std_ap = model.norm["y_p_ap"]
    mean_tp, std_tp = model.norm["y_p_tp"]
    expected = [
        (synthetic_signals.signal("y_p_ap")[5] - mean_ap) / std_ap,
        (synthetic_signals.signal("y_p_tp")[5] - mean_tp) / std_tp,
    ]
    np.testing.assert_allclose(x0, expected)


@pytest.mark.parametrize(
    "data, fragment",
    [
        # 1. 拼错的字段名给出建议
        (
            {"states": ["x"], "g_input": {"x": ["x"]}, "h_inputs": ["x"], "reference": "y"},
            "g_inputs",
        ),
        # 2. g_inputs 引用了不存在的状态
        (
            {"states": ["p_du"], "g_inputs": {"p_dv": ["p_du"]}, "h_inputs": ["p_du"], "reference": "y_p_du"},
            "p_du",
        ),
        # 3. 缺少必填字段
        ({"states": ["x"], "g_inputs": {"x": ["x"]}, "h_inputs": ["x"]}, "reference"),
    ],
)
def test_spec_errors_name_the_problem(data, fragment):
    with pytest.raises(SpecError) as info:
        ResidualSpec.from_dict(data, source="broken.json")
    assert fragment in str(info.value)


def test_unknown_signal_suggests_close_match(tmp_path):
    path = tmp_path / "typo.json"
    path.write_text(
        json.dumps(
            {
                "states": ["p_du"],
                "g_inputs": {"p_du": ["p_du", "y_p_apx", "DC"]},
                "h_inputs": ["p_du"],
                "reference": "y_p_du",
            }
        ),
        encoding="utf-8",
    )
    with pytest.raises(SpecError) as info:
        load_spec(str(path))
    assert "y_p_ap" in str(info.value)


@pytest.mark.parametrize(
    "kwargs",
    [
        # 1. 参考信号是状态
        dict(states=("x",), g_inputs=(("x",),), h_inputs=("x",), reference="x"),
        # 2. g 网络没有输入
        dict(states=("x",), g_inputs=((),), h_inputs=("x",), reference="y"),
        # 3. 参考信号被当作 h 的输入
        dict(states=("x",), g_inputs=(("x",),), h_inputs=("y",), reference="y"),
        # 4. g_inputs 数量与状态数不一致
        dict(states=("x", "z"), g_inputs=(("x",),), h_inputs=("x",), reference="y"),
    ],
)
def test_invalid_specs_are_rejected(kwargs):
    with pytest.raises(SpecError):
        ResidualSpec(name="bad", **kwargs)


def test_resolve_spec_by_name_and_path():
    assert resolve_spec("r2").reference == "y_p_ap"
    assert resolve_spec(os.path.join(WIRING_DIR, "r3.json")).name == "r3"
    with pytest.raises(SpecError) as info:
        resolve_spec("r4")
    assert "r4" in str(info.value)


def test_spec_dict_roundtrip(specs):
    for spec in specs.values():
        assert ResidualSpec.from_dict(spec.to_dict()) == spec


def test_save_and_load_model(tmp_path, specs, synthetic_signals):
    # --- 准备 (Arrange) ---
    model = build_model(specs["r3"], (4, 3), seed=5, stats=synthetic_signals.stats)
    model = model.with_provenance(solver="rk4", seed=5)
    path = tmp_path / "models" / "r3_rk4.npz"

    # --- 执行 (Act) ---
    save_model(str(path), model)
    loaded = load_model(str(path))

    # --- 断言 (Assert) ---
    assert loaded.spec == model.spec
    assert loaded.hidden == (4, 3)
    assert loaded.norm == model.norm
    assert loaded.provenance["solver"] == "rk4"
    original = model.parameters()
    restored = loaded.parameters()
    assert set(original) == set(restored)
    for name in original:
        assert restored[name].tobytes() == original[name].tobytes()
    data = synthetic_signals.slice(0, 10)
    np.testing.assert_array_equal(residual_sequence(model, RK4, data).r, residual_sequence(loaded, RK4, data).r)


def test_load_model_missing_file(tmp_path):
    with pytest.raises(ArtifactError):
        load_model(str(tmp_path / "missing.npz"))


def test_wired_maps_are_differentiable():
    model = build_model(builtin_specs()["r2"], (4,), seed=0)
    assert isinstance(model.dynamics, Differentiable)
    assert isinstance(model.output, Differentiable)


@pytest.mark.parametrize(
    "idx, expected_first",
    [
        # 1. 各列互不相同
        ([0, 1], [1.0, 2.0]),
        # 2. 同一列出现两次时梯度累加
        ([1, 1], [0.0, 3.0]),
    ],
)
def test_scatter_accumulates_repeated_columns(idx, expected_first):
    wiring = _Wiring(builtin_specs()["r1"])
    grad = np.array([[1.0, 2.0], [10.0, 20.0]])
    into = wiring.scatter(2, np.array(idx, dtype=np.intp), grad, None)
    np.testing.assert_array_equal(into[0, :2], expected_first)
    np.testing.assert_array_equal(into[1, :2], 10.0 * np.array(expected_first))
    assert not into[:, 2:].any()
