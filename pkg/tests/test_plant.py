import numpy as np
import pandas as pd
import pytest

from config.config_plant import PLANT, SIGNAL_RANGES
from core.dataset import NOMINAL, Dataset, FaultScenario, read_dataset, write_dataset
from core.errors import ArtifactError, ParameterError, StructuralError
from core.plant import (
    PlantState,
    excitation_profile,
    generate,
    operating_point_summary,
    plant_derivative,
    plant_flows,
    pwm_dosing,
    slew_limited,
    steady_state,
)


def test_derivative_is_zero_at_ambient_rest():
    d = plant_derivative(PlantState.ambient(), n_p=0.0, dc=0.0)
    assert (d.p_bp, d.p_ap, d.p_du) == (0.0, 0.0, 0.0)


def test_fully_clogged_orifice_blocks_flow():
    state = PlantState(90.0, 700.0, 650.0)
    flows = plant_flows(state, 2000.0, 0.3, FaultScenario("f_A_ori", 1.0))
    assert flows["q_ori"] == 0.0
    assert plant_flows(state, 2000.0, 0.3)["q_ori"] > 0.0


def test_steady_state_pressure_ordering():
    state = steady_state(2000.0, 0.0)
    assert state.p_ap > state.p_du > PLANT["p_amb"] > state.p_bp


@pytest.mark.parametrize(
    "dc, t, expected",
    [
        # 1. 关闭
        (0.0, 0.37, 0.0),
        # 2. 常开
        (1.0, 0.37, 1.0),
        # 3. 周期起点打开
        (0.5, 0.0, 1.0),
        # 4. 周期后半段关闭
        (0.5, 0.5, 0.0),
        # 5. 下一个周期重新打开
        (0.5, 0.95, 1.0),
    ],
)
def test_pwm_dosing(dc, t, expected):
    assert pwm_dosing(dc, t) == expected


def test_pwm_average_matches_duty_cycle():
    grid = np.arange(9000) * 0.01
    average = np.mean([pwm_dosing(0.3, t) for t in grid])
    assert average == pytest.approx(0.3, abs=0.02)


@pytest.mark.parametrize("dc", [-0.1, 1.5])
def test_pwm_rejects_out_of_range(dc):
    with pytest.raises(ParameterError):
        pwm_dosing(dc, 0.0)


def test_excitation_turns_dosing_off_in_second_half():
    n_p, dc = excitation_profile(400, seed=3)
    assert np.all(dc[200:] == 0.0)
    assert np.all((dc[:200] >= 0.1) & (dc[:200] <= 0.6))
    assert np.all((n_p >= 600) & (n_p <= 3000))


def test_pump_speed_is_slew_limited():
    n_p, _ = excitation_profile(2000, seed=4, T=0.2)
    # 150 rpm/s * 0.2 s = 30 rpm 每个样本
    assert np.max(np.abs(np.diff(n_p))) <= 30.0 + 1e-9
    # 设定值对数均匀: 低转速段 (< 1300 rpm) 占相当比例
    assert np.mean(n_p < 1300.0) > 0.2


@pytest.mark.parametrize(
    "target, max_step, expected",
    [
        # 1. 上升受限
        ([0.0, 10.0, 10.0, 10.0], 4.0, [0.0, 4.0, 8.0, 10.0]),
        # 2. 下降受限
        ([5.0, -5.0, -5.0], 6.0, [5.0, -1.0, -5.0]),
        # 3. 小变化直接跟随
        ([1.0, 1.5, 1.2], 1.0, [1.0, 1.5, 1.2]),
    ],
)
def test_slew_limited(target, max_step, expected):
    np.testing.assert_allclose(slew_limited(np.array(target), max_step), expected)


def test_zero_magnitude_fault_equals_nominal():
    nominal = generate(NOMINAL, length=30, seed=1)
    faulty = generate(FaultScenario("f_A_du", 0.0), length=30, seed=1)
    pd.testing.assert_frame_equal(nominal.frame, faulty.frame, check_exact=True)


def test_sensor_offset_applies_after_onset():
    # --- 准备 (Arrange) ---
    nominal = generate(NOMINAL, length=40, seed=2, noise=False)

    # --- 执行 (Act) ---
    faulty = generate(FaultScenario("f_y_ap", 10.0, onset=20), length=40, seed=2, noise=False)

    # --- 断言 (Assert) ---
    diff = faulty.signal("y_p_ap") - nominal.signal("y_p_ap")
    np.testing.assert_allclose(diff[:20], 0.0, atol=0)
    np.testing.assert_allclose(diff[20:], 10.0, atol=1e-9)
    for name in ("y_p_tp", "y_p_du", "n_p", "DC"):
        np.testing.assert_array_equal(faulty.signal(name), nominal.signal(name))


def test_clogged_outlet_raises_pump_pressure():
    nominal = generate(NOMINAL, length=40, seed=4, noise=False)
    clogged = generate(FaultScenario("f_A_du", 0.5), length=40, seed=4, noise=False)
    assert clogged.signal("y_p_ap").mean() > nominal.signal("y_p_ap").mean()


def test_clogging_is_monotone_in_magnitude():
    pressures = [steady_state(2000.0, 0.0, FaultScenario("f_A_du", m)).p_ap for m in (0.0, 0.25, 0.5)]
    assert pressures[0] < pressures[1] < pressures[2]


def test_generate_is_deterministic():
    a = generate(NOMINAL, length=25, seed=9)
    b = generate(NOMINAL, length=25, seed=9)
    c = generate(NOMINAL, length=25, seed=10)
    pd.testing.assert_frame_equal(a.frame, b.frame, check_exact=True)
    assert not a.frame.equals(c.frame)


def test_reference_integrator_is_converged():
    # T/20 与 T/40 的参考解在整个数据尺度上一致 (包含计量阀开关沿和低转速段)
    coarse = generate(NOMINAL, length=300, seed=5, noise=False)
    fine = generate(NOMINAL, length=300, seed=5, noise=False, refine=2)
    for name in ("y_p_tp", "y_p_ap", "y_p_du"):
        diff = np.max(np.abs(coarse.signal(name) - fine.signal(name)))
        assert diff <= 1e-6 * SIGNAL_RANGES[name], f"{name}: {diff:.3e}"


def test_nominal_operating_point_sets_sample_time():
    summary = operating_point_summary()
    assert summary["n_p"] == 2000.0
    assert summary["p_ap"] > summary["p_du"] > PLANT["p_amb"] > summary["p_bp"]
    assert summary["lambda_T"] == pytest.approx(-1.5, abs=0.05)
    # 在三个求解器的实轴稳定区间内，但离 EF 的边界 -2 不远
    assert -2.0 < summary["lambda_T"] < -1.0


@pytest.mark.parametrize(
    "kwargs",
    [
        # 1. 非正长度
        dict(length=0),
        # 2. 故障起始超出长度
        dict(scenario=FaultScenario("f_A_p", 0.5, onset=10), length=10),
        # 3. refine 非法
        dict(length=10, refine=0),
    ],
)
def test_generate_rejects_bad_arguments(kwargs):
    with pytest.raises(ParameterError):
        generate(**kwargs)


@pytest.mark.parametrize(
    "fault, magnitude",
    [
        # 1. 未知故障
        ("f_A_x", 0.5),
        # 2. 堵塞程度超过 1
        ("f_A_du", 1.5),
    ],
)
def test_fault_scenario_validation(fault, magnitude):
    with pytest.raises(ParameterError):
        FaultScenario(fault, magnitude)


def test_dataset_csv_roundtrip(tmp_path):
    data = generate(FaultScenario("f_p_du", 50.0, onset=5), length=15, seed=6)
    path = tmp_path / "data" / "fault_f_p_du.csv"

    write_dataset(str(path), data)
    loaded = read_dataset(str(path))

    pd.testing.assert_frame_equal(loaded.frame, data.frame, check_exact=True)
    assert loaded.sample_time == data.sample_time
    assert loaded.scenario == data.scenario
    assert loaded.seed == 6


def test_read_missing_dataset_mentions_generate(tmp_path):
    with pytest.raises(ArtifactError) as info:
        read_dataset(str(tmp_path / "train.csv"))
    assert "generate" in str(info.value)


def test_dataset_rejects_non_uniform_timestamps():
    frame = pd.DataFrame({"t": [0.0, 0.2, 0.5], "y_p_ap": [700.0, 701.0, 702.0]})
    with pytest.raises(StructuralError):
        Dataset(frame, 0.2)
    assert len(Dataset(frame.assign(t=[0.0, 0.2, 0.4]), 0.2)) == 3


def test_clogging_faults_move_p_du_in_opposite_directions():
    # --- 准备 (Arrange) ---
    nominal = steady_state(2000.0, 0.0)
    rise = nominal.p_ap - PLANT["p_amb"]

    # --- 执行 (Act) ---
    hose = steady_state(2000.0, 0.0, FaultScenario("f_A_du", 0.5)).p_du - nominal.p_du
    orifice = steady_state(2000.0, 0.0, FaultScenario("f_A_ori", 0.5)).p_du - nominal.p_du

    # --- 断言 (Assert) ---
    assert hose < -0.1 * rise
    assert orifice > 0.1 * rise
