# core/dataset.py
# 数据集类型 (FaultScenario / Dataset) 及 CSV + stats 旁车文件的读写
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config.config_fields import (
    CLOGGING_FAULTS,
    FAULTS,
    SENSOR_FAULTS,
    TIME_COLUMN,
)
from core.errors import ArtifactError, ParameterError, StructuralError
from utils.utils import atomic_write_text, get_close_matches_with_ratio

# 标准差小于该值的信号 (例如整段恒定的 DC) 在归一化时按 1 处理
STD_FLOOR = 1e-12

Stats = Dict[str, Tuple[float, float]]


@dataclass(frozen=True)
class FaultScenario:
    fault: str = "none"
    magnitude: float = 0.0
    onset: int = 0

    def __post_init__(self):
        if self.fault not in FAULTS:
            suggestions = get_close_matches_with_ratio(self.fault, list(FAULTS))
            hint = f"，是否想用: {', '.join(suggestions)}" if suggestions else ""
            raise ParameterError(f"未知故障类型 '{self.fault}'{hint}")
        if not math.isfinite(self.magnitude):
            raise ParameterError(f"故障大小必须是有限值，收到 {self.magnitude}")
        if self.fault in CLOGGING_FAULTS and not 0.0 <= self.magnitude <= 1.0:
            raise ParameterError(f"堵塞故障 {self.fault} 的大小必须在 [0, 1] 内，收到 {self.magnitude}")
        if self.onset < 0:
            raise ParameterError(f"故障起始下标不能为负，收到 {self.onset}")

    @property
    def is_nominal(self) -> bool:
        return self.fault == "none" or self.magnitude == 0.0

    @property
    def is_clogging(self) -> bool:
        return self.fault in CLOGGING_FAULTS and self.magnitude != 0.0

    @property
    def sensor_signal(self) -> Optional[str]:
        return SENSOR_FAULTS.get(self.fault) if self.magnitude != 0.0 else None

    @property
    def label(self) -> str:
        return "none" if self.is_nominal else self.fault

    def to_dict(self) -> dict:
        return {"fault": self.fault, "magnitude": self.magnitude, "onset": self.onset}

    @classmethod
    def from_dict(cls, data: dict) -> "FaultScenario":
        unknown = set(data) - {"fault", "magnitude", "onset"}
        if unknown:
            raise ParameterError(f"故障场景含未知字段: {sorted(unknown)}")
        return cls(
            fault=str(data.get("fault", "none")),
            magnitude=float(data.get("magnitude", 0.0)),
            onset=int(data.get("onset", 0)),
        )


NOMINAL = FaultScenario()


def compute_stats(frame: pd.DataFrame) -> Stats:
    """逐信号的均值与总体标准差 (ddof=0)。"""
    stats = {}
    for name in frame.columns:
        if name == TIME_COLUMN:
            continue
        values = frame[name].to_numpy(dtype=np.float64)
        stats[name] = (float(values.mean()), float(values.std()))
    return stats


def dosing_off_start(length: int) -> int:
    """数据集后半段 (计量阀关闭, DC = 0) 的起始下标。"""
    return length // 2


@dataclass
class Dataset:
    frame: pd.DataFrame
    sample_time: float
    scenario: FaultScenario = NOMINAL
    stats: Stats = field(default_factory=dict)
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.frame) == 0:
            raise StructuralError("数据集不能为空。")
        if TIME_COLUMN not in self.frame.columns:
            raise StructuralError(f"数据集缺少时间列 '{TIME_COLUMN}'")
        if not (math.isfinite(self.sample_time) and self.sample_time > 0):
            raise ParameterError(f"采样时间必须为正数，收到 {self.sample_time}")
        t = self.frame[TIME_COLUMN].to_numpy(dtype=np.float64)
        uniform = np.allclose(np.diff(t), self.sample_time, rtol=0.0, atol=1e-6 * self.sample_time)
        if t.size > 1 and not uniform:
            raise StructuralError(f"时间戳不是步长 {self.sample_time} 的均匀网格")
        if "DC" in self.frame.columns:
            dc = self.frame["DC"].to_numpy()
            if np.any(dc < 0.0) or np.any(dc > 1.0):
                raise ParameterError("DC 列超出 [0, 1] 范围。")
        if not self.stats:
            self.stats = compute_stats(self.frame)

    @classmethod
    def from_arrays(
        cls,
        signals: Dict[str, Sequence[float]],
        sample_time: float,
        scenario: FaultScenario = NOMINAL,
        seed: Optional[int] = None,
    ) -> "Dataset":
        lengths = {len(v) for v in signals.values()}
        if len(lengths) != 1:
            raise StructuralError(f"各信号长度不一致: {sorted(lengths)}")
        n = lengths.pop()
        columns = {TIME_COLUMN: np.arange(n, dtype=np.float64) * sample_time}
        columns.update({name: np.asarray(v, dtype=np.float64) for name, v in signals.items()})
        return cls(pd.DataFrame(columns), sample_time, scenario, seed=seed)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def signal_names(self) -> Tuple[str, ...]:
        return tuple(c for c in self.frame.columns if c != TIME_COLUMN)

    def has(self, name: str) -> bool:
        return name in self.signal_names

    def signal(self, name: str) -> np.ndarray:
        if not self.has(name):
            suggestions = get_close_matches_with_ratio(name, list(self.signal_names))
            hint = f"，是否想用: {', '.join(suggestions)}" if suggestions else ""
            raise StructuralError(f"数据集中没有信号 '{name}'{hint}")
        return self.frame[name].to_numpy(dtype=np.float64)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        """按给定顺序取出若干信号，形状 (N, len(names))。"""
        if not names:
            return np.zeros((len(self), 0))
        return np.stack([self.signal(n) for n in names], axis=1)

    def slice(self, start: int, stop: Optional[int] = None) -> "Dataset":
        stop = len(self) if stop is None else stop
        if not 0 <= start < stop <= len(self):
            raise ParameterError(f"切片 [{start}, {stop}) 超出数据集长度 {len(self)}")
        frame = self.frame.iloc[start:stop].reset_index(drop=True)
        return Dataset(frame, self.sample_time, self.scenario, seed=self.seed)


def stats_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return f"{root}.stats.json"


def write_dataset(path: str, dataset: Dataset) -> str:
    """写入数据集 CSV (17 位有效数字，保证逐位往返) 和 stats 旁车文件。"""
    try:
        csv_text = dataset.frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
        atomic_write_text(path, csv_text)
        sidecar = {
            "sample_time": dataset.sample_time,
            "length": len(dataset),
            "scenario": dataset.scenario.to_dict(),
            "seed": dataset.seed,
            "stats": {name: {"mean": m, "std": s} for name, (m, s) in dataset.stats.items()},
        }
        atomic_write_text(stats_path(path), json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise ArtifactError(f"无法写入数据集 {path}: {e}", path=path) from e
    logging.info(f"🗂️ 已写入数据集 {path} ({len(dataset)} 行, 场景 {dataset.scenario.label})")
    return path


def read_dataset(path: str) -> Dataset:
    if not os.path.exists(path):
        raise ArtifactError(f"数据集文件不存在: {path} (先运行 generate)", path=path)
    try:
        frame = pd.read_csv(path, dtype=np.float64, float_precision="round_trip")
    except (OSError, ValueError) as e:
        raise ArtifactError(f"无法读取数据集 {path}: {e}", path=path) from e

    sidecar_file = stats_path(path)
    if os.path.exists(sidecar_file):
        with open(sidecar_file, "r", encoding="utf-8") as f:
            sidecar = json.load(f)
        sample_time = float(sidecar["sample_time"])
        scenario = FaultScenario.from_dict(sidecar.get("scenario", {}))
        seed = sidecar.get("seed")
    else:
        logging.warning(f"⚠️ 未找到 {sidecar_file}，采样时间由时间列推断。")
        t = frame[TIME_COLUMN].to_numpy()
        sample_time = float(t[1] - t[0]) if len(t) > 1 else 1.0
        scenario, seed = NOMINAL, None
    logging.debug(f"🔍 读取数据集 {path}: {len(frame)} 行")
    return Dataset(frame, sample_time, scenario, seed=seed)
