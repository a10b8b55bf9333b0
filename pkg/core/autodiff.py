# core/autodiff.py
# 小型前馈网络的反向模式自动微分，只覆盖求解器展开 (BPTT) 所需的部分。
import io
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Mapping, Protocol, Sequence, Tuple, runtime_checkable

import numpy as np

from core.errors import ArtifactError, ParameterError, StructuralError
from utils.utils import atomic_write_bytes

ELU_ALPHA = 1.0
ACTIVATIONS = ("elu", "identity")
META_KEY = "__meta__"

Grads = Dict[str, np.ndarray]


def elu(x):
    """ELU (alpha = 1)。标量输入返回 float，数组输入逐元素计算。"""
    arr = np.asarray(x, dtype=np.float64)
    # expm1 只在负半轴求值，避免正半轴溢出
    out = np.where(arr > 0, arr, ELU_ALPHA * np.expm1(np.minimum(arr, 0.0)))
    return float(out) if out.ndim == 0 else out


def elu_grad(x):
    arr = np.asarray(x, dtype=np.float64)
    out = np.where(arr > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(arr, 0.0)))
    return float(out) if out.ndim == 0 else out


def huber(error, delta: float = 1.0):
    """Huber 损失：|e| <= delta 时为 e^2/2，否则为 delta * (|e| - delta/2)。"""
    if delta <= 0:
        raise ParameterError(f"Huber delta 必须为正数，收到 {delta}")
    e = np.asarray(error, dtype=np.float64)
    a = np.abs(e)
    out = np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    return float(out) if out.ndim == 0 else out


def huber_grad(error, delta: float = 1.0):
    if delta <= 0:
        raise ParameterError(f"Huber delta 必须为正数，收到 {delta}")
    e = np.asarray(error, dtype=np.float64)
    out = np.clip(e, -delta, delta)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    @property
    def in_width(self) -> int:
        return self.weight.shape[1]

    @property
    def out_width(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class MlpParams:
    """一个子网络 (g_i 或 h) 的全部参数。结构不变量在构造时检查。"""

    layers: Tuple[Layer, ...]

    def __post_init__(self):
        if not self.layers:
            raise StructuralError("MlpParams 至少需要一层。")
        for i, layer in enumerate(self.layers):
            if layer.weight.ndim != 2 or layer.bias.shape != (layer.out_width,):
                raise StructuralError(
                    f"第 {i} 层形状不一致: weight {layer.weight.shape}, bias {layer.bias.shape}"
                )
            if layer.activation not in ACTIVATIONS:
                raise StructuralError(f"未知激活函数 '{layer.activation}'")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.out_width != b.in_width:
                raise StructuralError(
                    f"第 {i} 层输出宽度 {a.out_width} 与第 {i + 1} 层输入宽度 {b.in_width} 不匹配"
                )
        if self.layers[-1].activation != "identity":
            raise StructuralError("最后一层必须是 identity (回归输出头)。")

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def out_width(self) -> int:
        return self.layers[-1].out_width

    @property
    def activations(self) -> Tuple[str, ...]:
        return tuple(layer.activation for layer in self.layers)

    def check_finite(self) -> "MlpParams":
        for i, layer in enumerate(self.layers):
            if not (np.all(np.isfinite(layer.weight)) and np.all(np.isfinite(layer.bias))):
                raise ParameterError(f"第 {i} 层参数含有非有限值。")
        return self

    def arrays(self, prefix: str = "") -> Grads:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{prefix}layers.{i}.weight"] = layer.weight
            out[f"{prefix}layers.{i}.bias"] = layer.bias
        return out

    def with_arrays(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> "MlpParams":
        """用扁平命名的数组替换参数值，保留激活函数配置。"""
        layers = []
        for i, layer in enumerate(self.layers):
            try:
                w = np.asarray(arrays[f"{prefix}layers.{i}.weight"], dtype=np.float64)
                b = np.asarray(arrays[f"{prefix}layers.{i}.bias"], dtype=np.float64)
            except KeyError as e:
                raise StructuralError(f"缺少参数 {e}") from None
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise StructuralError(f"参数 {prefix}layers.{i} 形状不匹配")
            layers.append(Layer(w, b, layer.activation))
        return MlpParams(tuple(layers))

    @classmethod
    def from_arrays(
        cls, arrays: Mapping[str, np.ndarray], activations: Sequence[str], prefix: str = ""
    ) -> "MlpParams":
        layers = []
        for i, act in enumerate(activations):
            try:
                w = np.asarray(arrays[f"{prefix}layers.{i}.weight"], dtype=np.float64)
                b = np.asarray(arrays[f"{prefix}layers.{i}.bias"], dtype=np.float64)
            except KeyError as e:
                raise StructuralError(f"缺少参数 {e}") from None
            layers.append(Layer(w, b, act))
        return cls(tuple(layers)).check_finite()


def init_mlp(
    in_width: int, hidden: Sequence[int], out_width: int, rng: np.random.Generator
) -> MlpParams:
    """Glorot 均匀初始化权重，偏置为零；隐藏层 ELU，输出层 identity。"""
    widths = [in_width, *hidden, out_width]
    if any(w <= 0 for w in widths):
        raise ParameterError(f"网络宽度必须为正: {widths}")
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(widths, widths[1:])):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weight = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        activation = "identity" if i == len(widths) - 2 else "elu"
        layers.append(Layer(weight, np.zeros(fan_out), activation))
    return MlpParams(tuple(layers))


@dataclass
class Tape:
    """一次前向计算记录下的中间量。默认只能反向回放一次。"""

    params: MlpParams
    inputs: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    batched: bool = False
    consumed: bool = False


def _as_batch(x: np.ndarray) -> Tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1:
        return arr[None, :], False
    if arr.ndim == 2:
        return arr, True
    raise StructuralError(f"输入必须是向量或 (batch, width) 矩阵，收到形状 {arr.shape}")


def mlp_forward(params: MlpParams, input) -> Tuple[np.ndarray, Tape]:
    x, batched = _as_batch(input)
    if x.shape[1] != params.in_width:
        raise StructuralError(f"输入宽度 {x.shape[1]} 与网络输入宽度 {params.in_width} 不匹配")
    tape = Tape(params=params, batched=batched)
    for layer in params.layers:
        tape.inputs.append(x)
        z = x @ layer.weight.T + layer.bias
        tape.pre_activations.append(z)
        x = elu(z) if layer.activation == "elu" else z
    return (x if batched else x[0]), tape


def mlp_backward(tape: Tape, upstream) -> Tuple[MlpParams, np.ndarray]:
    """反向回放：返回 upstream^T · output 对全部参数和输入的梯度 (批次内求和)。"""
    if tape.consumed:
        raise StructuralError("tape 已被使用过 (stale tape)。")
    g, batched = _as_batch(upstream)
    params = tape.params
    if batched != tape.batched or g.shape != (tape.inputs[0].shape[0], params.out_width):
        raise StructuralError(
            f"upstream 形状 {np.shape(upstream)} 与前向输出不匹配 (输出宽度 {params.out_width})"
        )
    grads = []
    for layer, x_in, z in zip(
        reversed(params.layers), reversed(tape.inputs), reversed(tape.pre_activations)
    ):
        if layer.activation == "elu":
            g = g * elu_grad(z)
        grads.append(Layer(g.T @ x_in, g.sum(axis=0), layer.activation))
        g = g @ layer.weight
    tape.consumed = True
    return MlpParams(tuple(reversed(grads))), (g if batched else g[0])


@runtime_checkable
class Differentiable(Protocol):
    """求解器可以反向传播穿过的函数 f(x, u)。"""

    def __call__(self, x: np.ndarray, u: np.ndarray) -> np.ndarray: ...

    def forward(self, x: np.ndarray, u: np.ndarray) -> Tuple[np.ndarray, Any]: ...

    def backward(self, ctx: Any, upstream: np.ndarray) -> Tuple[Grads, np.ndarray]: ...


class MlpMap:
    """把单个 MLP 包装为 f(x, u) = mlp([x, u]) (或仅 mlp(x))。"""

    def __init__(self, params: MlpParams, prefix: str = "", use_inputs: bool = True):
        self.params = params
        self.prefix = prefix
        self.use_inputs = use_inputs

    def _stack(self, x, u):
        x = np.atleast_2d(x)
        if not self.use_inputs:
            return x
        return np.concatenate([x, np.atleast_2d(u)], axis=1)

    def __call__(self, x, u):
        out, _ = mlp_forward(self.params, self._stack(x, u))
        return out if np.ndim(x) == 2 else out[0]

    def forward(self, x, u):
        n = np.atleast_2d(x).shape[1]
        out, tape = mlp_forward(self.params, self._stack(x, u))
        return out, (tape, n)

    def backward(self, ctx, upstream):
        tape, n = ctx
        grads, input_grad = mlp_backward(tape, np.atleast_2d(upstream))
        return grads.arrays(self.prefix), input_grad[:, :n]


def add_grads(into: Grads, grads: Mapping[str, np.ndarray]) -> Grads:
    for name, g in grads.items():
        if name in into:
            into[name] = into[name] + g
        else:
            into[name] = np.array(g, dtype=np.float64, copy=True)
    return into


def scale_grads(grads: Mapping[str, np.ndarray], factor: float) -> Grads:
    return {name: g * factor for name, g in grads.items()}


def save_arrays(path: str, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> None:
    """写入 .npz 容器：命名的 float64 数组 + 一段 JSON 元数据。原子写入。"""
    if META_KEY in arrays:
        raise StructuralError(f"数组名 '{META_KEY}' 为保留字段。")

    buffer = io.BytesIO()
    payload = {name: np.asarray(a, dtype=np.float64) for name, a in arrays.items()}
    payload[META_KEY] = np.array(json.dumps(meta, sort_keys=True, ensure_ascii=False))
    np.savez(buffer, **payload)
    atomic_write_bytes(path, buffer.getvalue())
    logging.debug(f"🗂️ 已写入参数文件 {path} ({len(arrays)} 个数组)")


def load_arrays(path: str) -> Tuple[Grads, Dict[str, Any]]:
    if not os.path.exists(path):
        raise ArtifactError(f"参数文件不存在: {path}", path=path)
    try:
        with np.load(path, allow_pickle=False) as data:
            arrays = {name: np.array(data[name]) for name in data.files if name != META_KEY}
            meta = json.loads(str(data[META_KEY])) if META_KEY in data.files else {}
    except (OSError, ValueError) as e:
        raise ArtifactError(f"无法读取参数文件 {path}: {e}", path=path) from e
    return arrays, meta


def flat_norm(grads: Iterable[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
