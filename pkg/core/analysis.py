# core/analysis.py
# 实验分析: 训练/验证汇总、跨求解器评估矩阵、步长研究、稳定域、模型极点、故障散点。
import asyncio
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.dataset import Dataset, dosing_off_start
from core.errors import AnalysisError, ParameterError
from core.residual import ResidualModel, residual_sequence
from core.solvers import (
    DIVERGENCE_BOUND,
    METHODS,
    TABLEAUS,
    SolverKind,
    diverged_rows,
    explicit_step,
    resample_inputs,
    simulate,
)

DEFAULT_SETTLE = 50
DEGRADATION_FACTOR = 10.0
IMPROVEMENT_FACTOR = 2.0
REACTS_ABOVE = 5.0
QUIET_BELOW = 2.0
DIVERGED_MARK = "-"


@dataclass(frozen=True)
class Mse:
    """均方误差或发散标记 (发散时 value 为 NaN)。"""

    value: float
    diverged: bool = False

    @classmethod
    def divergence(cls) -> "Mse":
        return cls(math.nan, True)

    def __str__(self) -> str:
        return DIVERGED_MARK if self.diverged else f"{self.value:.3e}"


def mse(r, window: Optional[Tuple[int, int]] = None) -> Mse:
    r = np.asarray(r, dtype=np.float64)
    start, stop = window if window is not None else (0, r.shape[0])
    if not 0 <= start < stop <= r.shape[0]:
        raise ParameterError(f"窗口 [{start}, {stop}) 超出序列长度 {r.shape[0]}")
    segment = r[start:stop]
    if not np.all(np.isfinite(segment)):
        return Mse.divergence()
    return Mse(float(np.mean(segment * segment)))


def evaluation_window(length: int, settle: int = DEFAULT_SETTLE) -> Tuple[int, int]:
    """DC = 0 的后半段去掉 settle 个样本的过渡期。"""
    start = dosing_off_start(length) + settle
    if start >= length:
        raise ParameterError(f"数据集长度 {length} 不足以容纳 {settle} 个样本的过渡期")
    return start, length


def evaluation_mse(
    model: ResidualModel,
    solver: SolverKind,
    data: Dataset,
    settle: int = DEFAULT_SETTLE,
    inputs: Optional[np.ndarray] = None,
) -> Mse:
    """在后半段上仿真 (初值取测量估计)，窗口去掉过渡期后计算归一化残差的 MSE。"""
    half_start = dosing_off_start(len(data))
    start, stop = evaluation_window(len(data), settle)
    result = residual_sequence(model, solver, data.slice(half_start), inputs=inputs)
    if result.diverged:
        return Mse.divergence()
    return mse(result.r_norm, (start - half_start, stop - half_start))


def training_summary(
    models: Mapping[Tuple[str, str], ResidualModel], val: Dataset, settle: int = DEFAULT_SETTLE
) -> pd.DataFrame:
    """每个 (残差, 训练求解器) 的训练损失与验证 MSE，每个组合一行。"""
    rows = []
    for (residual, method), model in sorted(models.items()):
        solver = SolverKind(method, float(model.provenance.get("step", val.sample_time)))
        score = evaluation_mse(model, solver, val, settle)
        rows.append(
            {
                "residual": residual,
                "solver": method,
                "train_loss": float(model.provenance.get("train_loss", math.nan)),
                "val_loss": float(model.provenance.get("val_loss", math.nan)),
                "val_mse": score.value,
                "diverged": score.diverged,
                "seed": model.provenance.get("seed"),
            }
        )
    return pd.DataFrame(rows)


@dataclass
class CrossEvalMatrix:
    residual: str
    cells: Dict[Tuple[str, str], Mse] = field(default_factory=dict)  # (训练求解器, 评估求解器)

    def get(self, train: str, evaluate: str) -> Mse:
        return self.cells[(train, evaluate)]

    def diagonal(self) -> Dict[str, Mse]:
        return {t: m for (t, e), m in self.cells.items() if t == e}

    def to_frame(self) -> pd.DataFrame:
        rows = [
            {
                "residual": self.residual,
                "train_solver": t,
                "eval_solver": e,
                "mse": m.value,
                "diverged": m.diverged,
            }
            for (t, e), m in sorted(self.cells.items(), key=lambda kv: (METHODS.index(kv[0][0]), METHODS.index(kv[0][1])))
        ]
        return pd.DataFrame(rows, columns=["residual", "train_solver", "eval_solver", "mse", "diverged"])


async def cross_eval_async(
    models: Mapping[str, ResidualModel],
    data: Dataset,
    methods: Sequence[str] = METHODS,
    settle: int = DEFAULT_SETTLE,
    workers: int = 1,
) -> CrossEvalMatrix:
    if not models:
        raise ParameterError("cross_eval 至少需要一个训练好的模型。")
    names = {m.name for m in models.values()}
    if len(names) != 1:
        raise ParameterError(f"cross_eval 的模型必须属于同一个残差，收到 {sorted(names)}")
    semaphore = asyncio.Semaphore(max(1, workers))
    T = data.sample_time

    async def cell(train_method: str, eval_method: str):
        async with semaphore:
            score = await asyncio.to_thread(
                evaluation_mse, models[train_method], SolverKind(eval_method, T), data, settle
            )
        return (train_method, eval_method), score

    tasks = [cell(t, e) for t in models for e in methods]
    results = await asyncio.gather(*tasks)
    matrix = CrossEvalMatrix(residual=names.pop(), cells=dict(results))
    logging.info(f"✅ {matrix.residual} 跨求解器评估完成 ({len(matrix.cells)} 个单元)")
    return matrix


def cross_eval(
    models: Mapping[str, ResidualModel],
    data: Dataset,
    methods: Sequence[str] = METHODS,
    settle: int = DEFAULT_SETTLE,
    workers: int = 1,
) -> CrossEvalMatrix:
    """models: 训练求解器 -> 模型。每个模型在每个求解器下评估验证集后半段。"""
    return asyncio.run(cross_eval_async(models, data, methods, settle, workers))


def solver_pattern(matrix: CrossEvalMatrix) -> pd.DataFrame:
    """
    每个非对角单元相对于对角的变化:
    degraded = 发散或 MSE >= 10 倍对角值；improved_2x = MSE 比对角值小 2 倍以上。
    """
    rows = []
    diagonal = matrix.diagonal()
    for (train_m, eval_m), score in matrix.cells.items():
        if train_m == eval_m or train_m not in diagonal:
            continue
        base = diagonal[train_m]
        if base.diverged:
            ratio = math.nan
        elif score.diverged:
            ratio = math.inf
        else:
            ratio = score.value / base.value if base.value > 0 else math.inf
        rows.append(
            {
                "residual": matrix.residual,
                "train_solver": train_m,
                "eval_solver": eval_m,
                "ratio": ratio,
                "degraded": bool(score.diverged or ratio >= DEGRADATION_FACTOR),
                "improved_2x": bool(not score.diverged and ratio <= 1.0 / IMPROVEMENT_FACTOR),
            }
        )
    return pd.DataFrame(
        rows, columns=["residual", "train_solver", "eval_solver", "ratio", "degraded", "improved_2x"]
    )


def pattern_summary(patterns: pd.DataFrame) -> Dict[str, bool]:
    """把各残差的 solver_pattern 结果汇总成两条结论。"""
    ef_rows = patterns[patterns["train_solver"] == "ef"]
    ef_eval = patterns[(patterns["eval_solver"] == "ef") & (patterns["train_solver"] != "ef")]
    return {
        "ef_trained_no_2x_improvement": bool(len(ef_rows) > 0 and not ef_rows["improved_2x"].any()),
        "higher_order_degrades_on_ef": bool(ef_eval["degraded"].any()),
    }


def stability_polynomial(method: str) -> np.ndarray:
    """
    R(z) 的系数 (按 z 的升幂)。对显式 RK: c_0 = 1, c_j = b^T A^(j-1) 1。
    EF: 1 + z; MP: 1 + z + z^2/2; RK4: 1 + z + z^2/2 + z^3/6 + z^4/24。
    """
    if method not in TABLEAUS:
        raise ParameterError(f"未知求解器 '{method}'，可选: {', '.join(METHODS)}")
    tab = TABLEAUS[method]
    s = tab.stages
    a = np.zeros((s, s))
    for i, row in enumerate(tab.a):
        a[i, : len(row)] = row
    weights = np.array(tab.weights, dtype=np.float64)
    coeffs = [1.0]
    vec = np.ones(s)
    for _ in range(s):
        coeffs.append(float(weights @ vec) / tab.denominator)
        vec = a @ vec
    while len(coeffs) > 1 and coeffs[-1] == 0.0:
        coeffs.pop()
    return np.array(coeffs)


def amplification(method: str, z) -> np.ndarray:
    """R(z)，z 可以是复数数组。"""
    return np.polynomial.polynomial.polyval(np.asarray(z), stability_polynomial(method))


def real_axis_bound(method: str, scan_step: float = 0.01, tol: float = 1e-9) -> float:
    """[z, 0] 上 |R| <= 1 的最负的实数 z: 先以 scan_step 向左扫描，再二分到 tol。"""
    good = 0.0
    k = 1
    while True:
        z = -k * scan_step
        if abs(amplification(method, z)) > 1.0:
            bad = z
            break
        good = z
        k += 1
        if k > 100000:
            raise AnalysisError(f"{method} 的实轴稳定区间没有找到左端点")
    while good - bad > tol:
        mid = 0.5 * (good + bad)
        if abs(amplification(method, mid)) <= 1.0:
            good = mid
        else:
            bad = mid
    return good


@dataclass
class StabilityRegion:
    method: str
    coefficients: np.ndarray
    boundary: np.ndarray  # 复平面上的边界点
    intercept: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "method": self.method,
                "re": self.boundary.real,
                "im": self.boundary.imag,
            }
        )


def stability_region(method: str, n_points: int = 256) -> StabilityRegion:
    """边界轨迹: 对每个 phi 求 R(z) = e^{i phi} 的全部根，再做一步牛顿修正。"""
    coeffs = stability_polynomial(method)
    deriv = np.polynomial.polynomial.polyder(coeffs)
    points = []
    for phi in np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False):
        target = np.exp(1j * phi)
        shifted = coeffs.astype(np.complex128)
        shifted[0] -= target
        for z in np.roots(shifted[::-1]):
            slope = np.polynomial.polynomial.polyval(z, deriv)
            if slope != 0:
                z = z - (np.polynomial.polynomial.polyval(z, coeffs) - target) / slope
            points.append(z)
    boundary = np.array(points, dtype=np.complex128)
    order = np.lexsort((boundary.imag, np.angle(boundary + 1.0)))
    return StabilityRegion(method, coeffs, boundary[order], real_axis_bound(method))


def linear_verdict_grid(
    method: str,
    grid: Optional[Sequence[float]] = None,
    steps: int = 2000,
    bound: float = DIVERGENCE_BOUND,
) -> pd.DataFrame:
    """
    x' = lambda x, T = 1: |R(lambda T)| <= 1 的预测与实际仿真是否发散的对照。
    默认网格为 lambda T = k/10, k = -30..5。
    """
    if grid is None:
        grid = [k / 10 for k in range(-30, 6)]
    z = np.asarray(grid, dtype=np.float64)
    tableau = TABLEAUS[method]

    def f(x, u):
        return z * x

    x = np.ones_like(z)
    u = np.zeros((z.size, 0))
    diverged = np.zeros(z.size, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(steps):
            x, _rec = explicit_step(tableau, f, x, u, u, 1.0)
            bad = diverged_rows(x[:, None], bound)
            diverged |= bad
            x = np.where(diverged, 0.0, x)
    predicted = np.abs(amplification(method, z)) <= 1.0
    # 一致: 判定不稳定的点恰好是仿真发散的点
    return pd.DataFrame(
        {
            "method": method,
            "z": z,
            "abs_R": np.abs(amplification(method, z)),
            "predicted_stable": predicted,
            "simulated_diverged": diverged,
            "match": (~predicted) == diverged,
        }
    )


@dataclass
class OrderResult:
    method: str
    step: float
    error: float
    error_half: float

    @property
    def slope(self) -> float:
        return math.log2(self.error / self.error_half)


def order_study(method: str, T: float = 0.1, t_end: float = 1.0) -> OrderResult:
    """在 x' = -x, x(0) = 1 上比较步长 T 与 T/2 的终点误差，斜率即经验阶数。"""

    def f(x, u):
        return -x

    def h(x, u):
        return x

    errors = []
    for step in (T, T / 2):
        n = int(round(t_end / step))
        sim = simulate(f, h, SolverKind(method, step), np.array([1.0]), np.zeros((n + 1, 1)))
        errors.append(abs(float(sim.states[n, 0]) - math.exp(-t_end)))
    return OrderResult(method, T, errors[0], errors[1])


def _operating_point(model: ResidualModel, x=None, u=None) -> Tuple[np.ndarray, np.ndarray]:
    n = len(model.spec.states)
    m = len(model.spec.input_signals)
    x = np.zeros(n) if x is None else np.asarray(x, dtype=np.float64)
    u = np.zeros(m) if u is None else np.asarray(u, dtype=np.float64)
    return x, u


def jacobian_autodiff(model: ResidualModel, x=None, u=None) -> np.ndarray:
    """dg/dx: 每个输出分量一次反向传播。"""
    x, u = _operating_point(model, x, u)
    dynamics = model.dynamics
    n = x.shape[0]
    jac = np.zeros((n, n))
    for i in range(n):
        _, ctx = dynamics.forward(x[None, :], u[None, :])
        upstream = np.zeros((1, n))
        upstream[0, i] = 1.0
        _, x_grad = dynamics.backward(ctx, upstream)
        jac[i] = x_grad[0]
    return jac


def jacobian_central(model: ResidualModel, x=None, u=None, eps: float = 1e-6) -> np.ndarray:
    x, u = _operating_point(model, x, u)
    dynamics = model.dynamics
    n = x.shape[0]
    jac = np.zeros((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = eps
        jac[:, j] = (dynamics(x + e, u) - dynamics(x - e, u)) / (2.0 * eps)
    return jac


@dataclass
class PoleResult:
    eigenvalues: np.ndarray
    scaled: np.ndarray  # lambda * T
    jacobian: np.ndarray
    stable: Dict[str, bool]  # 方法 -> 所有 |R(lambda T)| <= 1
    max_amplification: Dict[str, float]


def model_poles(
    model: ResidualModel, x=None, u=None, T: float = 0.2, method: str = "autodiff"
) -> PoleResult:
    """
    工作点 (默认: 归一化均值状态与均值输入) 上 dg/dx 的特征值，乘以 T 后对每个求解器给出稳定性判定。
    method: "autodiff" 或 "central"。
    """
    if method == "autodiff":
        jac = jacobian_autodiff(model, x, u)
    elif method == "central":
        jac = jacobian_central(model, x, u)
    else:
        raise ParameterError(f"未知雅可比方法 '{method}'")
    if not np.all(np.isfinite(jac)):
        raise AnalysisError(f"{model.name} 的雅可比矩阵含有非有限值")
    eig = np.linalg.eigvals(jac)
    scaled = eig * T
    amp = {m: float(np.max(np.abs(amplification(m, scaled)))) for m in METHODS}
    return PoleResult(eig, scaled, jac, {m: a <= 1.0 for m, a in amp.items()}, amp)


def jacobian_deviation(model: ResidualModel, x=None, u=None) -> float:
    """自动微分与中心差分雅可比的最大相对偏差。"""
    a = jacobian_autodiff(model, x, u)
    c = jacobian_central(model, x, u)
    scale = np.maximum(np.abs(a), np.abs(c))
    scale = np.where(scale > 1e-8, scale, 1.0)
    return float(np.max(np.abs(a - c) / scale))


def trajectory_poles(
    model: ResidualModel, solver: SolverKind, data: Dataset, stride: int = 10
) -> pd.DataFrame:
    """
    沿着模型自身求解器下的状态轨迹 (后半段) 检查极点；每个求解器取轨迹上最大的 |R(lambda T)|。
    """
    half = data.slice(dosing_off_start(len(data)))
    result = residual_sequence(model, solver, half)
    inputs = model.normalized_inputs(half)
    T = data.sample_time
    rows = []
    last = result.states.shape[0] if not result.diverged else min(result.states.shape[0], result.diverged_at)
    for k in range(0, min(last, inputs.shape[0]), max(1, stride)):
        poles = model_poles(model, result.states[k], inputs[k], T)
        row = {"index": k}
        for m in METHODS:
            row[f"amp_{m}"] = poles.max_amplification[m]
        row["min_real_lambda_T"] = float(np.min(poles.scaled.real))
        rows.append(row)
    frame = pd.DataFrame(rows)
    if len(frame):
        worst = {m: float(frame[f"amp_{m}"].max()) for m in METHODS}
        logging.info(f"🔍 {model.name} 轨迹上最大 |R(λT)|: {worst}")
    return frame


@dataclass
class StepStudyRow:
    factor: float
    mse: Mse
    residual: np.ndarray


def step_size_study(
    model: ResidualModel,
    data: Dataset,
    factors: Sequence[float] = (1.0, 0.5),
    method: str = "ef",
    settle: int = DEFAULT_SETTLE,
) -> List[StepStudyRow]:
    """用 method 以 T*factor 的步长重新评估，输入线性插值到细网格，残差在原采样点比较。"""
    half_start = dosing_off_start(len(data))
    start, stop = evaluation_window(len(data), settle)
    half = data.slice(half_start)
    base_inputs = model.normalized_inputs(half)
    rows = []
    for factor in factors:
        if not factor > 0:
            raise ParameterError(f"步长因子必须为正数，收到 {factor}")
        solver = SolverKind(method, data.sample_time * factor)
        inputs = resample_inputs(base_inputs, factor)
        result = residual_sequence(model, solver, half, inputs=inputs)
        window = (start - half_start, stop - half_start)
        score = Mse.divergence() if result.diverged else mse(result.r_norm, window)
        logging.info(f"🔍 {model.name} {solver}: MSE {score}")
        rows.append(StepStudyRow(factor, score, result.r_norm))
    return rows


def step_study_frame(rows: Sequence[StepStudyRow], residual: str = "") -> pd.DataFrame:
    return pd.DataFrame(
        [
            {"residual": residual, "factor": row.factor, "mse": row.mse.value, "diverged": row.mse.diverged}
            for row in rows
        ],
        columns=["residual", "factor", "mse", "diverged"],
    )


@dataclass
class ScatterResult:
    points: pd.DataFrame  # 残差列 + label
    centroids: pd.DataFrame
    separation: Dict[str, float]
    reaction: pd.DataFrame  # 行: 场景, 列: 残差, 值: |质心偏移| / 名义标准差
    unusable: List[str]

    def reaction_pattern(self) -> pd.DataFrame:
        """> 5 记为 'reacts'，< 2 记为 'quiet'，其余 'ambiguous'。"""
        return self.reaction.apply(
            lambda col: col.map(
                lambda v: "reacts" if v > REACTS_ABOVE else ("quiet" if v < QUIET_BELOW else "ambiguous")
            )
        )


def fault_scatter(
    models: Mapping[str, ResidualModel],
    datasets: Mapping[str, Dataset],
    solver_method: Optional[str] = None,
    nominal: str = "none",
    settle: int = DEFAULT_SETTLE,
) -> ScatterResult:
    """
    每个场景在评估窗口内 (且在故障起始之后) 的残差三元组，以及质心与分离度。
    分离度 = 质心与名义质心的距离 / 名义类的合并标准差 (逐残差标准化后的欧氏距离)。
    """
    if nominal not in datasets:
        raise ParameterError(f"场景集合中缺少名义场景 '{nominal}'")
    methods = {m.provenance.get("solver") for m in models.values()}
    if solver_method is None:
        if len(methods) != 1 or None in methods:
            raise ParameterError(f"fault_scatter 的模型必须用同一求解器训练，收到 {sorted(map(str, methods))}")
        solver_method = methods.pop()
    residuals = list(models)

    frames, unusable = [], []
    for label, data in datasets.items():
        half_start = dosing_off_start(len(data))
        half = data.slice(half_start)
        start = max(min(settle, len(half) - 1), data.scenario.onset - half_start)
        if start >= len(half):
            logging.warning(f"⚠️ 场景 {label} 的故障起始晚于评估窗口，跳过")
            unusable.append(label)
            continue
        columns = {}
        for name, model in models.items():
            result = residual_sequence(model, SolverKind(solver_method, data.sample_time), half)
            segment = result.r_norm[start:]
            if result.diverged or not np.all(np.isfinite(segment)):
                columns = None
                break
            columns[name] = segment
        if columns is None:
            logging.warning(f"⚠️ 场景 {label} 的残差发散，标记为不可用")
            unusable.append(label)
            continue
        frame = pd.DataFrame(columns)
        frame["label"] = label
        frames.append(frame)

    if nominal in unusable:
        raise AnalysisError("名义场景的残差发散，无法计算分离度")
    points = pd.concat(frames, ignore_index=True)
    centroids = points.groupby("label", sort=False)[residuals].mean()
    nominal_points = points[points["label"] == nominal][residuals]
    sigma = nominal_points.std(ddof=0).replace(0.0, 1.0)
    offsets = (centroids - centroids.loc[nominal]) / sigma
    separation = {label: float(np.sqrt((offsets.loc[label] ** 2).sum())) for label in centroids.index}
    reaction = offsets.abs()
    for label, score in separation.items():
        logging.info(f"🔍 场景 {label}: 分离度 {score:.2f}")
    return ScatterResult(points, centroids.reset_index(), separation, reaction, unusable)
