# core/plant.py
# 合成的后处理液压回路 (三个压力状态)，用来代替无法获得的实车数据。
# 所有常数见 config/config_plant.py。
import logging
import math
from dataclasses import dataclass
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from config.config_fields import PRESSURE_SIGNALS, STATE_MEASUREMENTS, STATES
from config.config_plant import (
    EXCITATION,
    FAULT_AREAS,
    NOISE_FRACTION,
    PLANT,
    PWM,
    REFERENCE_SUBSTEPS,
    SAMPLE_TIME,
    SIGNAL_RANGES,
)
from core.dataset import NOMINAL, Dataset, FaultScenario
from core.errors import ParameterError
from core.solvers import TABLEAUS, explicit_step
from utils.utils import derive_seed

_RK4 = TABLEAUS["rk4"]


@dataclass(frozen=True)
class PlantState:
    p_bp: float
    p_ap: float
    p_du: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p_bp, self.p_ap, self.p_du], dtype=np.float64)

    @classmethod
    def from_array(cls, values) -> "PlantState":
        p_bp, p_ap, p_du = (float(v) for v in values)
        return cls(p_bp, p_ap, p_du)

    @classmethod
    def ambient(cls, params: Mapping[str, float] = PLANT) -> "PlantState":
        p = params["p_amb"]
        return cls(p, p, p)


def _ssqrt(dp: float, delta: float) -> float:
    """正则化的带符号平方根: dp / (dp^2 + delta^2)^(1/4)。"""
    return dp / (dp * dp + delta * delta) ** 0.25


def effective_areas(
    faults: Optional[FaultScenario] = None, params: Mapping[str, float] = PLANT
) -> Dict[str, float]:
    """堵塞故障把对应的有效面积乘以 (1 - magnitude)。"""
    areas = {name: params[name] for name in ("A_in", "A_byp", "A_du", "A_ori", "A_dose")}
    if faults is not None and faults.is_clogging:
        key = FAULT_AREAS[faults.fault]
        areas[key] = areas[key] * (1.0 - faults.magnitude)
    return areas


def _flows(p_bp, p_ap, p_du, n_p, valve, areas, params) -> Tuple[float, ...]:
    p_amb = params["p_amb"]
    delta = params["flow_delta"]
    q_in = areas["A_in"] * _ssqrt(p_amb - p_bp, delta)
    q_pump = params["k_n"] * n_p - params["k_s"] * (p_ap - p_bp)
    q_byp = areas["A_byp"] * _ssqrt(p_ap - p_amb, delta)
    q_du = areas["A_du"] * _ssqrt(p_ap - p_du, delta)
    q_ori = areas["A_ori"] * _ssqrt(p_du - p_amb, delta)
    q_dose = areas["A_dose"] * valve * _ssqrt(p_du - p_amb, delta)
    return q_in, q_pump, q_byp, q_du, q_ori, q_dose


def plant_flows(
    state: PlantState,
    n_p: float,
    dc: float,
    faults: Optional[FaultScenario] = None,
    params: Mapping[str, float] = PLANT,
) -> Dict[str, float]:
    names = ("q_in", "q_pump", "q_byp", "q_du", "q_ori", "q_dose")
    values = _flows(
        state.p_bp, state.p_ap, state.p_du, n_p, dc, effective_areas(faults, params), params
    )
    return dict(zip(names, values))


def _rhs(x, u, areas, params) -> np.ndarray:
    q_in, q_pump, q_byp, q_du, q_ori, q_dose = _flows(
        float(x[0]), float(x[1]), float(x[2]), float(u[0]), float(u[1]), areas, params
    )
    return np.array(
        [
            (q_in - q_pump) / params["C_bp"],
            (q_pump - q_byp - q_du) / params["C_ap"],
            (q_du - q_ori - q_dose) / params["C_du"],
        ]
    )


def plant_derivative(
    state: PlantState,
    n_p: float,
    dc: float,
    faults: Optional[FaultScenario] = None,
    params: Mapping[str, float] = PLANT,
) -> PlantState:
    """
    三状态集总压力模型的导数 (kPa/s)。
    dc 是计量阀的瞬时开度 (PWM 输出，0..1)；传感器故障不影响物理量，只在 generate 中作用于测量。
    """
    areas = effective_areas(faults, params)
    return PlantState.from_array(_rhs(state.as_array(), (n_p, dc), areas, params))


def pwm_dosing(
    dc: float, t: float, period: float = PWM["carrier_period"], phase: float = 0.0
) -> float:
    """占空比为 dc 的方波: 每个载波周期的前 dc 部分打开 (1.0)，其余关闭 (0.0)。"""
    if not 0.0 <= dc <= 1.0:
        raise ParameterError(f"DC 必须在 [0, 1] 内，收到 {dc}")
    if dc == 0.0:
        return 0.0
    if dc == 1.0:
        return 1.0
    position = ((t + phase) % period) / period
    return 1.0 if position < dc else 0.0


def steady_state(
    n_p: float,
    dc: float,
    faults: Optional[FaultScenario] = None,
    params: Mapping[str, float] = PLANT,
    duration: float = 60.0,
    step: float = 0.005,
) -> PlantState:
    """恒定激励下长时间积分得到的稳态 (阀门开度取平均值 dc)。"""
    areas = effective_areas(faults, params)
    u = np.array([n_p, dc], dtype=np.float64)
    x = PlantState.ambient(params).as_array()

    def f(x_, u_):
        return _rhs(x_, u_, areas, params)

    for _ in range(int(round(duration / step))):
        x, _rec = explicit_step(_RK4, f, x, u, u, step)
    return PlantState.from_array(x)


def linearized_eigenvalues(
    state: PlantState,
    n_p: float,
    dc: float,
    faults: Optional[FaultScenario] = None,
    params: Mapping[str, float] = PLANT,
    eps: float = 1e-4,
) -> np.ndarray:
    """中心差分雅可比矩阵的特征值 (按实部从小到大排序)。"""
    areas = effective_areas(faults, params)
    x0 = state.as_array()
    u = (n_p, dc)
    jac = np.zeros((3, 3))
    for j in range(3):
        e = np.zeros(3)
        e[j] = eps
        jac[:, j] = (_rhs(x0 + e, u, areas, params) - _rhs(x0 - e, u, areas, params)) / (2 * eps)
    eig = np.linalg.eigvals(jac)
    return eig[np.argsort(eig.real)]


def _piecewise_levels(
    rng: np.random.Generator,
    length: int,
    levels: Tuple[float, float],
    hold: Tuple[int, int],
    log_scale: bool = False,
) -> np.ndarray:
    out = np.empty(length)
    k = 0
    while k < length:
        duration = int(rng.integers(hold[0], hold[1] + 1))
        if log_scale:
            out[k : k + duration] = math.exp(rng.uniform(math.log(levels[0]), math.log(levels[1])))
        else:
            out[k : k + duration] = rng.uniform(levels[0], levels[1])
        k += duration
    return out


def slew_limited(target: np.ndarray, max_step: float) -> np.ndarray:
    """每个样本最多变化 max_step，从 target[0] 出发跟随设定值。"""
    if not max_step > 0:
        raise ParameterError(f"限速必须为正数，收到 {max_step}")
    out = np.empty_like(target)
    out[0] = target[0]
    for k in range(1, target.shape[0]):
        out[k] = out[k - 1] + min(max(target[k] - out[k - 1], -max_step), max_step)
    return out


def excitation_profile(length: int, seed: int, T: float = SAMPLE_TIME) -> Tuple[np.ndarray, np.ndarray]:
    """
    泵转速: 对数均匀的分段设定值，实际转速以 n_p_slew (rpm/s) 限速跟随，低转速段和高转速段覆盖得一样多。
    前半段 DC 随机分段，后半段 DC = 0。
    """
    rng = np.random.default_rng(derive_seed(seed, "excitation"))
    target = _piecewise_levels(
        rng, length, EXCITATION["n_p_range"], EXCITATION["n_p_hold"], log_scale=True
    )
    n_p = slew_limited(target, EXCITATION["n_p_slew"] * T)
    dc = np.zeros(length)
    active = length // 2
    if active > 0:
        dc[:active] = _piecewise_levels(rng, active, EXCITATION["dc_range"], EXCITATION["dc_hold"])
    return n_p, dc


def generate(
    scenario: FaultScenario = NOMINAL,
    length: int = 4600,
    T: float = SAMPLE_TIME,
    seed: int = 0,
    refine: int = 1,
    noise: bool = True,
    params: Mapping[str, float] = PLANT,
) -> Dataset:
    """
    生成一个数据集。
    内部参考积分器是 RK4，步长 T / (REFERENCE_SUBSTEPS * refine)。PWM 开关沿落在 T/20 网格上，
    refine > 1 只细分积分步，不改变阀门波形。
    """
    if length <= 0:
        raise ParameterError(f"数据集长度必须为正，收到 {length}")
    if scenario.onset >= length:
        raise ParameterError(f"故障起始下标 {scenario.onset} 超出数据集长度 {length}")
    if refine < 1:
        raise ParameterError(f"refine 必须 >= 1，收到 {refine}")

    logging.info(
        f"🔧 生成数据集: 场景 {scenario.label} (大小 {scenario.magnitude}, 起始 {scenario.onset}), "
        f"{length} 个样本, T={T}, seed={seed}"
    )
    n_p, dc = excitation_profile(length, seed, T)
    phase_rng = np.random.default_rng(derive_seed(seed, "pwm-phase"))
    valve_step = T / REFERENCE_SUBSTEPS
    period = PWM["carrier_period"]
    period_steps = max(1, int(round(period / valve_step)))
    phase = int(phase_rng.integers(0, period_steps)) * valve_step
    h = valve_step / refine

    nominal_areas = effective_areas(None, params)
    fault_areas = effective_areas(scenario, params)

    warmup = int(round(EXCITATION["warmup"] / T))
    x = PlantState.ambient(params).as_array()
    states = np.empty((length, 3))
    grid_index = 0
    for k in range(-warmup, length):
        idx = max(k, 0)
        active = (k >= scenario.onset) if k >= 0 else scenario.onset == 0
        areas = fault_areas if active else nominal_areas

        def f(x_, u_, areas=areas):
            return _rhs(x_, u_, areas, params)

        if k >= 0:
            states[k] = x
        for _ in range(REFERENCE_SUBSTEPS):
            valve = pwm_dosing(dc[idx], grid_index * valve_step, period, phase)
            u = np.array([n_p[idx], valve])
            for _ in range(refine):
                x, _rec = explicit_step(_RK4, f, x, u, u, h)
            grid_index += 1

    measured = {STATE_MEASUREMENTS[name]: states[:, i] for i, name in enumerate(STATES)}
    signals = {name: measured[name].copy() for name in PRESSURE_SIGNALS}

    sensor = scenario.sensor_signal
    if sensor is not None:
        signals[sensor][scenario.onset :] = signals[sensor][scenario.onset :] + scenario.magnitude

    if noise:
        noise_rng = np.random.default_rng(derive_seed(seed, "noise"))
        for name in PRESSURE_SIGNALS:
            std = NOISE_FRACTION * SIGNAL_RANGES[name]
            signals[name] = signals[name] + noise_rng.normal(0.0, std, size=length)

    signals["n_p"] = n_p
    signals["DC"] = dc
    if not np.all(np.isfinite(states)):
        logging.warning("⚠️ 参考仿真出现非有限值，请检查 config_plant 中的常数。")
    elif np.any(states < 0) and scenario.is_nominal:
        logging.warning("⚠️ 名义仿真出现负压力，请检查 config_plant 中的常数。")
    return Dataset.from_arrays(signals, T, scenario, seed=seed)


def operating_point_summary(n_p: float = 2000.0, T: float = SAMPLE_TIME) -> Dict[str, float]:
    """名义工作点的稳态与最快极点，用于说明默认采样时间的选择。"""
    state = steady_state(n_p, 0.0)
    eig = linearized_eigenvalues(state, n_p, 0.0)
    fastest = float(eig.real.min())
    summary = {
        "n_p": n_p,
        "p_bp": state.p_bp,
        "p_ap": state.p_ap,
        "p_du": state.p_du,
        "fastest_eigenvalue": fastest,
        "lambda_T": fastest * T,
    }
    logging.debug(f"🔍 名义工作点: {summary}")
    if not math.isfinite(fastest):
        raise ParameterError("线性化特征值非有限。")
    return summary
