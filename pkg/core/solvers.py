# core/solvers.py
# 定步长显式积分器 (EF / MP / RK4)。所有阶段都可以记录下来，供 BPTT 反向回放。
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import numpy as np

from core.autodiff import Differentiable, Grads, add_grads
from core.errors import ParameterError, StructuralError

DIVERGENCE_BOUND = 1e9


@dataclass(frozen=True)
class Tableau:
    """
    显式 Runge-Kutta 方法的 Butcher 表。
    增量按 sum(weights_i * k_i) / denominator 计算，权重保持整数形式
    (例如 RK4 为 (k1 + 2k2 + 2k3 + k4) / 6)。
    """

    a: Tuple[Tuple[float, ...], ...]
    weights: Tuple[int, ...]
    denominator: int
    c: Tuple[float, ...]
    order: int

    @property
    def stages(self) -> int:
        return len(self.weights)


TABLEAUS = {
    "ef": Tableau(a=((),), weights=(1,), denominator=1, c=(0.0,), order=1),
    "mp": Tableau(a=((), (0.5,)), weights=(0, 1), denominator=1, c=(0.0, 0.5), order=2),
    "rk4": Tableau(
        a=((), (0.5,), (0.0, 0.5), (0.0, 0.0, 1.0)),
        weights=(1, 2, 2, 1),
        denominator=6,
        c=(0.0, 0.5, 0.5, 1.0),
        order=4,
    ),
}
METHODS = tuple(TABLEAUS)


@dataclass(frozen=True)
class SolverKind:
    method: str
    step: float

    def __post_init__(self):
        if self.method not in TABLEAUS:
            raise ParameterError(f"未知求解器 '{self.method}'，可选: {', '.join(METHODS)}")
        if not (np.isfinite(self.step) and self.step > 0):
            raise ParameterError(f"步长 T 必须为正数，收到 {self.step}")

    @property
    def order(self) -> int:
        return TABLEAUS[self.method].order

    @property
    def tableau(self) -> Tableau:
        return TABLEAUS[self.method]

    def scaled(self, factor: float) -> "SolverKind":
        return SolverKind(self.method, self.step * factor)

    def __str__(self) -> str:
        return f"{self.method.upper()}(T={self.step:g})"


@dataclass
class StepRecord:
    tableau: Tableau
    step: float
    stages: List[np.ndarray]  # k1..k_s，低阶方法没有的阶段不出现
    contexts: List[object]


def interpolate_midpoint(u_k, u_k_plus_T) -> np.ndarray:
    a = np.asarray(u_k, dtype=np.float64)
    b = np.asarray(u_k_plus_T, dtype=np.float64)
    if a.shape != b.shape:
        raise StructuralError(f"输入样本宽度不一致: {a.shape} vs {b.shape}")
    return 0.5 * (a + b)


def _stage_input(u_k, u_next, c: float):
    if c == 0.0:
        return u_k
    if c == 1.0:
        return u_next
    if c == 0.5:
        return interpolate_midpoint(u_k, u_next)
    return u_k + c * (u_next - u_k)


def explicit_step(
    tableau: Tableau, f: Differentiable, x, u_k, u_next, T: float, record: bool = False
) -> Tuple[np.ndarray, Optional[StepRecord]]:
    """通用的显式 RK 单步。record=True 时 f 需要实现 forward/backward。"""
    if not T > 0:
        raise ParameterError(f"步长 T 必须为正数，收到 {T}")
    x = np.asarray(x, dtype=np.float64)
    ks: List[np.ndarray] = []
    contexts = []
    for i in range(tableau.stages):
        terms = [a * ks[j] for j, a in enumerate(tableau.a[i]) if a != 0.0]
        z = x + T * sum(terms) if terms else x
        u = _stage_input(u_k, u_next, tableau.c[i])
        if record:
            k, ctx = f.forward(z, u)
            contexts.append(ctx)
        else:
            k = f(z, u)
        ks.append(np.asarray(k, dtype=np.float64))
    incr = sum(w * k for w, k in zip(tableau.weights, ks) if w != 0)
    if tableau.denominator != 1:
        incr = incr / tableau.denominator
    x_next = x + T * incr
    rec = StepRecord(tableau, T, ks, contexts) if record else None
    return x_next, rec


def explicit_step_backward(f: Differentiable, rec: StepRecord, g_next: np.ndarray) -> Tuple[Grads, np.ndarray]:
    """单步的反向传播：给定 dL/dx_{k+1}，返回参数梯度与 dL/dx_k。"""
    tab = rec.tableau
    T = rec.step
    g_stage: List[Optional[np.ndarray]] = [
        (T * w / tab.denominator) * g_next if w != 0 else None for w in tab.weights
    ]
    g_x = np.array(g_next, dtype=np.float64, copy=True)
    grads: Grads = {}
    for i in reversed(range(tab.stages)):
        if g_stage[i] is None:
            continue
        param_grads, g_z = f.backward(rec.contexts[i], g_stage[i])
        add_grads(grads, param_grads)
        g_x = g_x + g_z
        for j, a in enumerate(tab.a[i]):
            if a == 0.0:
                continue
            contrib = (T * a) * g_z
            g_stage[j] = contrib if g_stage[j] is None else g_stage[j] + contrib
    return grads, g_x


def step_ef(f: Callable, x_k, u_k, T: float) -> np.ndarray:
    return explicit_step(TABLEAUS["ef"], f, x_k, u_k, u_k, T)[0]


def step_mp(f: Callable, x_k, u_k, u_k_plus_T, T: float) -> np.ndarray:
    return explicit_step(TABLEAUS["mp"], f, x_k, u_k, u_k_plus_T, T)[0]


def step_rk4(f: Callable, x_k, u_k, u_k_plus_T, T: float) -> np.ndarray:
    return explicit_step(TABLEAUS["rk4"], f, x_k, u_k, u_k_plus_T, T)[0]


def diverged_rows(x: np.ndarray, bound: float = DIVERGENCE_BOUND) -> np.ndarray:
    """逐行判断是否发散 (非有限或 |x| > bound)。一维状态返回长度为 1 的数组。"""
    arr = np.atleast_2d(x)
    return ~np.all(np.isfinite(arr) & (np.abs(arr) <= bound), axis=1)


@dataclass
class SimulationTape:
    steps: List[StepRecord] = field(default_factory=list)
    output_contexts: List[object] = field(default_factory=list)


@dataclass
class SimulationResult:
    states: np.ndarray
    outputs: np.ndarray
    diverged_at: Optional[int] = None
    diverged_rows: Optional[np.ndarray] = None
    tape: Optional[SimulationTape] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def simulate(
    f: Differentiable,
    h_out: Differentiable,
    solver: SolverKind,
    x0,
    inputs,
    record: bool = False,
    bound: float = DIVERGENCE_BOUND,
) -> SimulationResult:
    """
    展开仿真：states[0] = x0，states[k+1] 由所选求解器给出，outputs[k] = h(states[k], inputs[k])。
    只推进到最后一个输出所需的状态 (共 N 个状态)。一旦出现发散立即停止并报告状态下标。
    一维 inputs 视为单个输入通道的序列。
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 1:
        inputs = inputs[:, None]
    if inputs.ndim < 2 or inputs.shape[0] == 0:
        raise StructuralError(f"inputs 必须是非空的 (N, ...) 序列，收到形状 {inputs.shape}")
    x = np.asarray(x0, dtype=np.float64)
    n_samples = inputs.shape[0]
    tableau = solver.tableau
    tape = SimulationTape() if record else None
    states = [x]
    outputs = []
    diverged_at = None
    bad_rows = None
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_samples):
            if record:
                y, ctx = h_out.forward(x, inputs[k])
                tape.output_contexts.append(ctx)
            else:
                y = h_out(x, inputs[k])
            outputs.append(np.asarray(y, dtype=np.float64))
            if k + 1 == n_samples:
                break
            x_next, rec = explicit_step(tableau, f, x, inputs[k], inputs[k + 1], solver.step, record)
            bad = diverged_rows(x_next, bound)
            if bad.any():
                diverged_at = k + 1
                bad_rows = bad
                logging.debug(f"🔍 仿真在第 {k + 1} 个状态发散 ({solver})")
                break
            if record:
                tape.steps.append(rec)
            states.append(x_next)
            x = x_next
    return SimulationResult(
        states=np.stack(states),
        outputs=np.stack(outputs),
        diverged_at=diverged_at,
        diverged_rows=bad_rows,
        tape=tape,
    )


def simulate_backward(
    f: Differentiable, h_out: Differentiable, tape: SimulationTape, output_grads
) -> Tuple[Grads, np.ndarray]:
    """BPTT：对 sum_k <output_grads[k], outputs[k]> 求参数梯度与 x0 梯度。"""
    output_grads = np.asarray(output_grads, dtype=np.float64)
    if output_grads.shape[0] != len(tape.output_contexts):
        raise StructuralError(
            f"output_grads 长度 {output_grads.shape[0]} 与记录的输出数 {len(tape.output_contexts)} 不一致"
        )
    grads: Grads = {}
    g_next = None
    for k in reversed(range(len(tape.output_contexts))):
        g_x = None
        if g_next is not None and k < len(tape.steps) and np.any(g_next):
            step_grads, g_x = explicit_step_backward(f, tape.steps[k], g_next)
            add_grads(grads, step_grads)
        out_grads, g_out = h_out.backward(tape.output_contexts[k], output_grads[k])
        add_grads(grads, out_grads)
        g_x = g_out if g_x is None else g_x + g_out
        g_next = g_x
    return grads, g_next


def resample_inputs(inputs, factor: float) -> np.ndarray:
    """把输入线性插值到 T * factor 的细网格上 (1/factor 必须为整数)。"""
    if not factor > 0:
        raise ParameterError(f"步长因子必须为正数，收到 {factor}")
    m = int(round(1.0 / factor))
    if m < 1 or abs(m * factor - 1.0) > 1e-9:
        raise ParameterError(f"1/factor 必须为整数，收到 factor={factor}")
    inputs = np.asarray(inputs, dtype=np.float64)
    if m == 1:
        return inputs
    n = inputs.shape[0]
    coarse = np.arange(n, dtype=np.float64)
    fine = np.arange((n - 1) * m + 1, dtype=np.float64) / m
    width = int(np.prod(inputs.shape[1:]))
    if width == 0:
        return np.zeros((fine.size,) + inputs.shape[1:])
    flat = inputs.reshape(n, width)
    cols = [np.interp(fine, coarse, flat[:, j]) for j in range(flat.shape[1])]
    return np.stack(cols, axis=1).reshape((fine.size,) + inputs.shape[1:])
