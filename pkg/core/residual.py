# core/residual.py
# 灰箱 NODE 残差生成器: 按接线文件把若干 MLP 子网络组装成 x' = g(x, u)、y_hat = h(x)。
import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.config_fields import SIGNAL_NAMES
from core.autodiff import (
    Grads,
    MlpParams,
    add_grads,
    init_mlp,
    load_arrays,
    mlp_backward,
    mlp_forward,
    save_arrays,
)
from core.dataset import STD_FLOOR, Dataset, Stats
from core.errors import ArtifactError, SpecError, StructuralError
from core.solvers import SimulationResult, SolverKind, simulate
from utils.utils import get_close_matches_with_ratio

WIRING_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "wiring")
SPEC_KEYS = ("name", "states", "g_inputs", "h_inputs", "reference", "state_signals")
REQUIRED_SPEC_KEYS = ("states", "g_inputs", "h_inputs", "reference")
MODEL_FORMAT = "node-residuals/model"


def _unknown_name_error(kind: str, name: str, candidates: Sequence[str], where: str) -> SpecError:
    suggestions = get_close_matches_with_ratio(name, list(candidates))
    hint = f" 是否想用: {', '.join(suggestions)}?" if suggestions else ""
    return SpecError(f"{where}: 无法解析的{kind} '{name}'。{hint}")


@dataclass(frozen=True)
class ResidualSpec:
    """
    一个残差的接线描述 (与求解器无关)。
    g_inputs[i] 是第 i 个状态导数网络的输入名 (状态名或测量信号名)，
    state_signals[i] 是第 i 个状态归一化和初值估计所用的测量信号。
    """

    name: str
    states: Tuple[str, ...]
    g_inputs: Tuple[Tuple[str, ...], ...]
    h_inputs: Tuple[str, ...]
    reference: str
    state_signals: Tuple[str, ...] = ()

    def __post_init__(self):
        where = f"残差 '{self.name}'"
        if len(self.states) < 1:
            raise SpecError(f"{where}: 至少需要一个状态。")
        if len(set(self.states)) != len(self.states):
            raise SpecError(f"{where}: 状态名重复 {list(self.states)}")
        if len(self.g_inputs) != len(self.states):
            raise SpecError(f"{where}: g_inputs 数量 {len(self.g_inputs)} 与状态数 {len(self.states)} 不一致")
        for state, inputs in zip(self.states, self.g_inputs):
            if not inputs:
                raise SpecError(f"{where}: 状态 '{state}' 的 g 网络没有输入。")
        if not self.h_inputs:
            raise SpecError(f"{where}: h_inputs 不能为空。")
        if self.reference in self.states:
            raise SpecError(f"{where}: 参考信号 '{self.reference}' 必须是测量信号，不能是状态。")
        if self.reference in self.h_inputs:
            raise SpecError(f"{where}: 参考信号 '{self.reference}' 不能作为 h 的输入。")
        if not self.state_signals:
            object.__setattr__(self, "state_signals", (self.reference,) * len(self.states))
        if len(self.state_signals) != len(self.states):
            raise SpecError(f"{where}: state_signals 数量与状态数不一致")
        for name in self.state_signals:
            if name in self.states:
                raise SpecError(f"{where}: state_signals 中的 '{name}' 必须是测量信号。")

    @property
    def input_signals(self) -> Tuple[str, ...]:
        """g/h 网络用到的测量信号 (按首次出现的顺序，去重)。"""
        seen: List[str] = []
        for name in [n for inputs in self.g_inputs for n in inputs] + list(self.h_inputs):
            if name not in self.states and name not in seen:
                seen.append(name)
        return tuple(seen)

    @property
    def named_signals(self) -> Tuple[str, ...]:
        names = list(self.input_signals)
        for name in (*self.state_signals, self.reference):
            if name not in names:
                names.append(name)
        return tuple(names)

    def check_signals(self, available: Sequence[str]) -> "ResidualSpec":
        """每个非状态名都必须能在 available 中找到。"""
        where = f"残差 '{self.name}'"
        for state, inputs in zip(self.states, self.g_inputs):
            for name in inputs:
                if name not in self.states and name not in available:
                    raise _unknown_name_error(
                        "信号", name, [*self.states, *available], f"{where} 的 g[{state}] 输入"
                    )
        for name in self.h_inputs:
            if name not in self.states and name not in available:
                raise _unknown_name_error("信号", name, [*self.states, *available], f"{where} 的 h 输入")
        for name in (*self.state_signals, self.reference):
            if name not in available:
                raise _unknown_name_error("测量信号", name, available, where)
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "states": list(self.states),
            "g_inputs": {s: list(inputs) for s, inputs in zip(self.states, self.g_inputs)},
            "h_inputs": list(self.h_inputs),
            "reference": self.reference,
            "state_signals": dict(zip(self.states, self.state_signals)),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], source: str = "<dict>") -> "ResidualSpec":
        if not isinstance(data, Mapping):
            raise SpecError(f"{source}: 接线文件的顶层必须是对象。")
        for key in data:
            if key not in SPEC_KEYS:
                raise _unknown_name_error("字段", key, SPEC_KEYS, source)
        for key in REQUIRED_SPEC_KEYS:
            if key not in data:
                raise SpecError(f"{source}: 缺少必填字段 '{key}'")

        states = tuple(str(s) for s in data["states"])
        g_map = data["g_inputs"]
        if not isinstance(g_map, Mapping):
            raise SpecError(f"{source}: g_inputs 必须是 状态名 -> 输入列表 的对象")
        for key in g_map:
            if key not in states:
                raise _unknown_name_error("状态", key, states, f"{source} 的 g_inputs")
        missing = [s for s in states if s not in g_map]
        if missing:
            raise SpecError(f"{source}: g_inputs 缺少状态 {missing}")

        signal_map = data.get("state_signals") or {}
        for key in signal_map:
            if key not in states:
                raise _unknown_name_error("状态", key, states, f"{source} 的 state_signals")
        reference = str(data["reference"])
        return cls(
            name=str(data.get("name") or os.path.splitext(os.path.basename(source))[0]),
            states=states,
            g_inputs=tuple(tuple(str(n) for n in g_map[s]) for s in states),
            h_inputs=tuple(str(n) for n in data["h_inputs"]),
            reference=reference,
            state_signals=tuple(str(signal_map.get(s, reference)) for s in states),
        )


def load_spec(path: str, signals: Optional[Sequence[str]] = SIGNAL_NAMES) -> ResidualSpec:
    if not os.path.exists(path):
        raise ArtifactError(f"接线文件不存在: {path}", path=path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise SpecError(f"{path}: JSON 解析失败 (第 {e.lineno} 行): {e.msg}") from e
    spec = ResidualSpec.from_dict(data, source=path)
    if signals is not None:
        spec.check_signals(signals)
    logging.debug(f"🔍 已加载接线 {spec.name} 自 {path}")
    return spec


def builtin_specs() -> Dict[str, ResidualSpec]:
    """随仓库提供的三个残差接线 r1, r2, r3。"""
    return {name: load_spec(os.path.join(WIRING_DIR, f"{name}.json")) for name in ("r1", "r2", "r3")}


def resolve_spec(name_or_path: str) -> ResidualSpec:
    if os.path.exists(name_or_path):
        return load_spec(name_or_path)
    specs = builtin_specs()
    if name_or_path not in specs:
        raise _unknown_name_error("残差", name_or_path, list(specs), "residual")
    return specs[name_or_path]


class _Wiring:
    """把 [x | u] 拼接后的列按网络输入顺序取出，反向时再散回去。"""

    def __init__(self, spec: ResidualSpec):
        self.spec = spec
        self.n_states = len(spec.states)
        self.signals = spec.input_signals
        columns = {name: i for i, name in enumerate(spec.states)}
        columns.update({name: self.n_states + j for j, name in enumerate(self.signals)})
        self.columns = columns

    def index(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self.columns[n] for n in names], dtype=np.intp)

    def combine(self, x, u) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        batched = x.ndim == 2
        x2 = np.atleast_2d(x)
        u2 = np.atleast_2d(np.asarray(u, dtype=np.float64))
        if u2.shape[0] != x2.shape[0]:
            u2 = np.broadcast_to(u2, (x2.shape[0], u2.shape[1]))
        if x2.shape[1] != self.n_states or u2.shape[1] != len(self.signals):
            raise StructuralError(
                f"残差 '{self.spec.name}' 需要 {self.n_states} 个状态和 {len(self.signals)} 个输入信号，"
                f"收到 x 宽度 {x2.shape[1]}、u 宽度 {u2.shape[1]}"
            )
        return np.concatenate([x2, u2], axis=1), batched

    def scatter(self, batch: int, idx: np.ndarray, grad: np.ndarray, into: Optional[np.ndarray]):
        if into is None:
            into = np.zeros((batch, self.n_states + len(self.signals)))
        if np.unique(idx).size == idx.size:
            into[:, idx] += grad
        else:
            # 同一列在接线里出现多次时梯度要累加
            np.add.at(into, (slice(None), idx), grad)
        return into


class WiredDynamics(_Wiring):
    """x' = [g_1(...), ..., g_n(...)]，每个 g_i 只看接线允许的列。"""

    def __init__(self, spec: ResidualSpec, params: Sequence[MlpParams]):
        super().__init__(spec)
        self.params = tuple(params)
        self.indices = [self.index(inputs) for inputs in spec.g_inputs]

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def forward(self, x, u):
        z, batched = self.combine(x, u)
        outs, tapes = [], []
        for params, idx in zip(self.params, self.indices):
            out, tape = mlp_forward(params, z[:, idx])
            outs.append(out)
            tapes.append(tape)
        dx = np.concatenate(outs, axis=1)
        return (dx if batched else dx[0]), (tapes, batched, z.shape[0])

    def backward(self, ctx, upstream):
        tapes, batched, batch = ctx
        g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
        grads: Grads = {}
        comb = None
        for i, (tape, idx) in enumerate(zip(tapes, self.indices)):
            param_grads, input_grad = mlp_backward(tape, g[:, i : i + 1])
            add_grads(grads, param_grads.arrays(f"g.{i}."))
            comb = self.scatter(batch, idx, input_grad, comb)
        x_grad = comb[:, : self.n_states]
        return grads, (x_grad if batched else x_grad[0])


class WiredOutput(_Wiring):
    """y_hat = h(...)，输出为归一化的参考信号预测值 (宽度 1)。"""

    def __init__(self, spec: ResidualSpec, params: MlpParams):
        super().__init__(spec)
        self.params = params
        self.idx = self.index(spec.h_inputs)

    def __call__(self, x, u):
        return self.forward(x, u)[0]

    def forward(self, x, u):
        z, batched = self.combine(x, u)
        out, tape = mlp_forward(self.params, z[:, self.idx])
        return (out if batched else out[0]), (tape, batched, z.shape[0])

    def backward(self, ctx, upstream):
        tape, batched, batch = ctx
        param_grads, input_grad = mlp_backward(tape, np.atleast_2d(upstream))
        comb = self.scatter(batch, self.idx, input_grad, None)
        x_grad = comb[:, : self.n_states]
        return param_grads.arrays("h."), (x_grad if batched else x_grad[0])


def normalization_from_stats(stats: Stats, names: Sequence[str]) -> Stats:
    norm = {}
    for name in names:
        if name not in stats:
            raise _unknown_name_error("信号统计量", name, list(stats), "normalization")
        mean, std = stats[name]
        norm[name] = (float(mean), float(std) if std > STD_FLOOR else 1.0)
    return norm


@dataclass(frozen=True)
class ResidualModel:
    spec: ResidualSpec
    g_params: Tuple[MlpParams, ...]
    h_params: MlpParams
    norm: Stats
    hidden: Tuple[int, ...] = ()
    provenance: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.g_params) != len(self.spec.states):
            raise StructuralError(f"g 网络数量 {len(self.g_params)} 与状态数 {len(self.spec.states)} 不一致")
        for state, inputs, params in zip(self.spec.states, self.spec.g_inputs, self.g_params):
            if params.in_width != len(inputs) or params.out_width != 1:
                raise StructuralError(
                    f"g[{state}] 网络形状 {params.in_width}->{params.out_width} 与接线宽度 {len(inputs)}->1 不一致"
                )
        if self.h_params.in_width != len(self.spec.h_inputs) or self.h_params.out_width != 1:
            raise StructuralError(f"h 网络输入宽度 {self.h_params.in_width} 与接线宽度 {len(self.spec.h_inputs)} 不一致")
        missing = [n for n in self.spec.named_signals if n not in self.norm]
        if missing:
            raise StructuralError(f"缺少信号 {missing} 的归一化统计量")

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def dynamics(self) -> WiredDynamics:
        return WiredDynamics(self.spec, self.g_params)

    @property
    def output(self) -> WiredOutput:
        return WiredOutput(self.spec, self.h_params)

    def parameters(self) -> Grads:
        arrays: Grads = {}
        for i, params in enumerate(self.g_params):
            arrays.update(params.arrays(f"g.{i}."))
        arrays.update(self.h_params.arrays("h."))
        return arrays

    def with_parameters(self, arrays: Mapping[str, np.ndarray]) -> "ResidualModel":
        g_params = tuple(p.with_arrays(arrays, f"g.{i}.") for i, p in enumerate(self.g_params))
        return replace(self, g_params=g_params, h_params=self.h_params.with_arrays(arrays, "h."))

    def with_provenance(self, **provenance) -> "ResidualModel":
        return replace(self, provenance={**self.provenance, **provenance})

    def _normalize(self, data: Dataset, names: Sequence[str]) -> np.ndarray:
        cols = [(data.signal(n) - self.norm[n][0]) / self.norm[n][1] for n in names]
        if not cols:
            return np.zeros((len(data), 0))
        return np.stack(cols, axis=1)

    def normalized_inputs(self, data: Dataset) -> np.ndarray:
        """(N, m) 归一化输入序列，列顺序为 spec.input_signals。"""
        self.spec.check_signals(data.signal_names)
        return self._normalize(data, self.spec.input_signals)

    def normalized_reference(self, data: Dataset) -> np.ndarray:
        mean, std = self.norm[self.spec.reference]
        return (data.signal(self.spec.reference) - mean) / std

    def measured_states(self, data: Dataset) -> np.ndarray:
        """(N, n) 用各状态对应测量信号估计的归一化状态，作为初值分布的均值。"""
        return self._normalize(data, self.spec.state_signals)

    def initial_state(self, data: Dataset, index: int = 0) -> np.ndarray:
        return self.measured_states(data)[index]

    def denormalize_output(self, y_hat: np.ndarray) -> np.ndarray:
        mean, std = self.norm[self.spec.reference]
        return y_hat * std + mean


def build_model(
    spec: ResidualSpec,
    hidden: Sequence[int],
    seed: int,
    stats: Optional[Stats] = None,
    signals: Optional[Sequence[str]] = None,
) -> ResidualModel:
    """
    按接线分配网络并用 seed 确定性初始化。
    stats 为训练集统计量；不给时所有信号按 (0, 1) 归一化。
    """
    hidden = tuple(int(h) for h in hidden)
    if not hidden:
        raise SpecError("hidden 层配置不能为空。")
    if signals is None:
        signals = tuple(stats) if stats else SIGNAL_NAMES
    spec.check_signals(signals)
    rng = np.random.default_rng(seed)
    g_params = tuple(init_mlp(len(inputs), hidden, 1, rng) for inputs in spec.g_inputs)
    h_params = init_mlp(len(spec.h_inputs), hidden, 1, rng)
    if stats is None:
        norm = {name: (0.0, 1.0) for name in spec.named_signals}
    else:
        norm = normalization_from_stats(stats, spec.named_signals)
    logging.debug(f"🔧 构建模型 {spec.name}: hidden={hidden}, seed={seed}")
    return ResidualModel(spec, g_params, h_params, norm, hidden, {"init_seed": int(seed)})


@dataclass
class ResidualResult:
    r: np.ndarray  # 物理单位，发散之后为 NaN
    r_norm: np.ndarray  # r / sigma_ref
    prediction: np.ndarray  # 物理单位的 y_hat
    states: np.ndarray  # 归一化状态轨迹
    diverged_at: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def residual_sequence(
    model: ResidualModel,
    solver: SolverKind,
    data: Dataset,
    x0: Optional[np.ndarray] = None,
    inputs: Optional[np.ndarray] = None,
) -> ResidualResult:
    """
    r[k] = h(x_k) * sigma_ref + mu_ref - y_ref[k]。
    x0 为归一化状态，默认取各状态测量信号在第一个样本的值。
    inputs 可传入已插值到更细网格的归一化输入 (步长研究用)，此时输出按每 m 个步取一个对齐到原采样点。
    """
    model.spec.check_signals(data.signal_names)
    if x0 is None:
        x0 = model.initial_state(data)
    n = len(data)
    if inputs is None:
        inputs = model.normalized_inputs(data)
    stride = (inputs.shape[0] - 1) // (n - 1) if n > 1 else 1
    sim: SimulationResult = simulate(model.dynamics, model.output, solver, x0, inputs)
    outputs = sim.outputs[::stride, 0]
    y_hat = np.full(n, np.nan)
    y_hat[: min(n, outputs.shape[0])] = outputs[:n]
    diverged_at = None
    if sim.diverged:
        # 第 k 个原始采样点需要细网格上的第 k*stride 个状态
        diverged_at = int(-(-sim.diverged_at // stride))
    prediction = model.denormalize_output(y_hat)
    r = prediction - data.signal(model.spec.reference)
    r_norm = r / model.norm[model.spec.reference][1]
    return ResidualResult(r, r_norm, prediction, sim.states, diverged_at)


def save_model(path: str, model: ResidualModel) -> str:
    meta = {
        "format": MODEL_FORMAT,
        "version": 1,
        "spec": model.spec.to_dict(),
        "hidden": list(model.hidden),
        "activations": {
            **{f"g.{i}.": list(p.activations) for i, p in enumerate(model.g_params)},
            "h.": list(model.h_params.activations),
        },
        "norm": {name: [m, s] for name, (m, s) in model.norm.items()},
        "provenance": model.provenance,
    }
    try:
        save_arrays(path, model.parameters(), meta)
    except OSError as e:
        raise ArtifactError(f"无法写入模型文件 {path}: {e}", path=path) from e
    logging.info(f"🗂️ 模型 {model.name} 已保存到 {path}")
    return path


def load_model(path: str) -> ResidualModel:
    arrays, meta = load_arrays(path)
    if meta.get("format") != MODEL_FORMAT:
        raise ArtifactError(f"{path} 不是残差模型文件 (format={meta.get('format')})", path=path)
    spec = ResidualSpec.from_dict(meta["spec"], source=path)
    acts = meta["activations"]
    g_params = tuple(
        MlpParams.from_arrays(arrays, acts[f"g.{i}."], f"g.{i}.") for i in range(len(spec.states))
    )
    h_params = MlpParams.from_arrays(arrays, acts["h."], "h.")
    norm = {name: (float(m), float(s)) for name, (m, s) in meta["norm"].items()}
    return ResidualModel(
        spec, g_params, h_params, norm, tuple(meta.get("hidden", ())), dict(meta.get("provenance", {}))
    )
