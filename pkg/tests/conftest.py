import numpy as np
import pytest

from core.autodiff import Layer, MlpParams
from core.dataset import Dataset
from core.residual import ResidualModel, ResidualSpec


def scalar_spec(name: str = "scalar") -> ResidualSpec:
    """x' = g(x), y_hat = h(x)，参考信号 y。"""
    return ResidualSpec(
        name=name,
        states=("x",),
        g_inputs=(("x",),),
        h_inputs=("x",),
        reference="y",
        state_signals=("y",),
    )


def _linear_model(a: float, h_weight: float = 1.0) -> ResidualModel:
    """g(x) = a*x, h(x) = h_weight*x 的单层线性模型，归一化为恒等变换。"""
    g = MlpParams((Layer(np.array([[a]]), np.zeros(1)),))
    h = MlpParams((Layer(np.array([[h_weight]]), np.zeros(1)),))
    return ResidualModel(scalar_spec(), (g,), h, {"y": (0.0, 1.0)})


@pytest.fixture
def linear_model():
    return _linear_model


@pytest.fixture
def decay_data() -> Dataset:
    """x(t) = e^{-t}，T = 0.1，51 个样本。"""
    t = np.arange(51) * 0.1
    return Dataset.from_arrays({"y": np.exp(-t)}, 0.1)


@pytest.fixture
def synthetic_signals() -> Dataset:
    """一段平滑的、带全部可测信号的小数据集 (不经过仿真，测试接线用)。"""
    n = 60
    k = np.arange(n)
    signals = {
        "y_p_tp": 90.0 + 2.0 * np.sin(0.1 * k),
        "y_p_ap": 700.0 + 50.0 * np.cos(0.07 * k),
        "y_p_du": 650.0 + 40.0 * np.sin(0.05 * k + 0.3),
        "n_p": 2000.0 + 300.0 * np.sign(np.sin(0.02 * k)),
        "DC": np.where(k < n // 2, 0.3, 0.0),
    }
    return Dataset.from_arrays(signals, 0.2)
