# config/config_experiment.py
# 实验配置 (ExperimentConfig): 从 JSON 文件加载，命令行参数覆盖文件中的值 (flags win)。
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

from config.config_env import DEFAULT_CONFIG_PATH, DEFAULT_SEED, WORKERS
from config.config_fields import RESIDUALS, SOLVERS
from config.config_plant import DATASET_LENGTHS, DEFAULT_FAULT_MAGNITUDE, SAMPLE_TIME
from core.dataset import FaultScenario
from core.errors import ArtifactError, ParameterError
from core.solvers import SolverKind
from core.training import TrainConfig
from utils.utils import derive_seed, get_close_matches_with_ratio, hash_config


def _reject_unknown(section: str, data: Dict[str, Any], allowed: Sequence[str]) -> None:
    for key in data:
        if key not in allowed:
            suggestions = get_close_matches_with_ratio(key, list(allowed))
            hint = f" 是否想用: {', '.join(suggestions)}?" if suggestions else ""
            raise ParameterError(f"配置 [{section}] 中有未知字段 '{key}'。{hint}")


def _field_names(cls) -> List[str]:
    return [f.name for f in fields(cls)]


@dataclass(frozen=True)
class Paths:
    root: str = "runs"
    data: str = "data"
    models: str = "models"
    reports: str = "reports"

    @property
    def data_dir(self) -> str:
        return os.path.join(self.root, self.data)

    @property
    def model_dir(self) -> str:
        return os.path.join(self.root, self.models)

    @property
    def report_dir(self) -> str:
        return os.path.join(self.root, self.reports)


@dataclass(frozen=True)
class TrainSettings:
    hidden: Tuple[int, ...] = (128, 128)
    seq_len: int = 400
    batch_size: int = 8
    epochs: int = 300
    learning_rate: float = 1e-3
    huber_delta: float = 1.0
    seeds: int = 3
    init_variance: float = 1e-3
    batches_per_epoch: Optional[int] = None
    clip_norm: Optional[float] = None
    val_every: int = 1

    @classmethod
    def from_dict(cls, data: Dict[str, Any], section: str = "train", base: Optional["TrainSettings"] = None):
        _reject_unknown(section, data, _field_names(cls))
        values = dict(data)
        if "hidden" in values:
            values["hidden"] = tuple(int(h) for h in values["hidden"])
        settings = replace(base or cls(), **values)
        if not settings.hidden:
            raise ParameterError(f"[{section}] hidden 不能为空")
        if settings.seeds < 1:
            raise ParameterError(f"[{section}] seeds 必须 >= 1")
        if settings.val_every < 1:
            raise ParameterError(f"[{section}] val_every 必须 >= 1")
        if settings.clip_norm is not None and not settings.clip_norm > 0:
            raise ParameterError(f"[{section}] clip_norm 必须为正数")
        return settings


@dataclass(frozen=True)
class AnalysisSettings:
    settle: int = 50
    step_factors: Tuple[float, ...] = (1.0, 0.5)
    boundary_points: int = 256
    verdict_steps: int = 2000
    pole_stride: int = 10

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AnalysisSettings":
        _reject_unknown("analysis", data, _field_names(cls))
        values = dict(data)
        if "step_factors" in values:
            values["step_factors"] = tuple(float(f) for f in values["step_factors"])
        return replace(cls(), **values)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = DEFAULT_SEED
    sample_time: float = SAMPLE_TIME
    lengths: Dict[str, int] = field(default_factory=lambda: dict(DATASET_LENGTHS))
    scenarios: Tuple[FaultScenario, ...] = tuple(
        FaultScenario(tag, DEFAULT_FAULT_MAGNITUDE[tag]) for tag in ("f_A_du", "f_A_ori", "f_A_p")
    )
    residuals: Tuple[str, ...] = RESIDUALS
    solvers: Tuple[str, ...] = SOLVERS
    paths: Paths = Paths()
    train: TrainSettings = TrainSettings()
    # "r1/ef" -> 对该组合的训练参数覆盖
    train_overrides: Dict[str, TrainSettings] = field(default_factory=dict)
    analysis: AnalysisSettings = AnalysisSettings()
    workers: int = WORKERS
    source: Optional[str] = None

    def __post_init__(self):
        if self.sample_time <= 0:
            raise ParameterError(f"sample_time 必须为正数，收到 {self.sample_time}")
        _reject_unknown("lengths", self.lengths, list(DATASET_LENGTHS))
        for name, n in self.lengths.items():
            if int(n) <= 0:
                raise ParameterError(f"数据集长度 {name} 必须为正，收到 {n}")
        for name in self.residuals:
            if name not in RESIDUALS and not os.path.exists(name):
                raise ParameterError(f"未知残差 '{name}' (可以是 {', '.join(RESIDUALS)} 或接线文件路径)")
        for method in self.solvers:
            SolverKind(method, self.sample_time)
        faults = [s.fault for s in self.scenarios]
        duplicated = sorted({f for f in faults if faults.count(f) > 1})
        if duplicated:
            # 数据集按故障类型命名 (fault_<类型>.csv)
            raise ParameterError(f"每种故障只能有一个场景，重复: {', '.join(duplicated)}")

    def settings_for(self, residual: str, solver: str) -> TrainSettings:
        return self.train_overrides.get(f"{residual}/{solver}", self.train)

    def train_config(self, residual: str, solver: str, seed: int = 0) -> TrainConfig:
        s = self.settings_for(residual, solver)
        return TrainConfig(
            solver=SolverKind(solver, self.sample_time),
            seq_len=s.seq_len,
            batch_size=s.batch_size,
            epochs=s.epochs,
            learning_rate=s.learning_rate,
            huber_delta=s.huber_delta,
            seed=seed,
            init_variance=s.init_variance,
            batches_per_epoch=s.batches_per_epoch,
            clip_norm=s.clip_norm,
            val_every=s.val_every,
        )

    def dataset_seed(self, name: str) -> int:
        """训练集单独一个种子；验证集和所有故障集共用 'evaluation' 种子 (相同激励，只差故障)。"""
        stream = "train" if name == "train" else "evaluation"
        return derive_seed(self.seed, "generate", stream)

    def training_seeds(self, residual: str, solver: str) -> List[int]:
        n = self.settings_for(residual, solver).seeds
        return [derive_seed(self.seed, "train", residual, solver, i) for i in range(n)]

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data.pop("source")
        data.pop("workers")
        data["scenarios"] = [s.to_dict() for s in self.scenarios]
        return data

    @property
    def config_hash(self) -> str:
        return hash_config(self.to_dict())


EXPERIMENT_KEYS = (
    "seed",
    "sample_time",
    "lengths",
    "scenarios",
    "residuals",
    "solvers",
    "paths",
    "train",
    "train_overrides",
    "analysis",
    "workers",
)


def experiment_from_dict(data: Dict[str, Any], source: Optional[str] = None) -> ExperimentConfig:
    _reject_unknown("experiment", data, EXPERIMENT_KEYS)
    base = ExperimentConfig()
    values: Dict[str, Any] = {"source": source}
    if "seed" in data:
        values["seed"] = int(data["seed"])
    if "sample_time" in data:
        values["sample_time"] = float(data["sample_time"])
    if "lengths" in data:
        values["lengths"] = {**base.lengths, **{k: int(v) for k, v in data["lengths"].items()}}
    if "scenarios" in data:
        values["scenarios"] = tuple(FaultScenario.from_dict(s) for s in data["scenarios"])
    if "residuals" in data:
        values["residuals"] = tuple(data["residuals"])
    if "solvers" in data:
        values["solvers"] = tuple(data["solvers"])
    if "paths" in data:
        _reject_unknown("paths", data["paths"], _field_names(Paths))
        values["paths"] = replace(base.paths, **data["paths"])
    train = TrainSettings.from_dict(data.get("train", {}))
    values["train"] = train
    if "train_overrides" in data:
        overrides = {}
        for key, section in data["train_overrides"].items():
            residual, _, solver = key.partition("/")
            if not residual or solver not in SOLVERS:
                raise ParameterError(f"train_overrides 的键必须形如 'r1/ef'，收到 '{key}'")
            overrides[key] = TrainSettings.from_dict(section, f"train_overrides.{key}", base=train)
        values["train_overrides"] = overrides
    if "analysis" in data:
        values["analysis"] = AnalysisSettings.from_dict(data["analysis"])
    if "workers" in data:
        values["workers"] = max(1, int(data["workers"]))
    return replace(base, **values)


def load_experiment_config(path: Optional[str] = None) -> ExperimentConfig:
    path = path or DEFAULT_CONFIG_PATH
    if not os.path.exists(path):
        raise ArtifactError(f"配置文件不存在: {path}", path=path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ParameterError(f"{path}: JSON 解析失败 (第 {e.lineno} 行): {e.msg}") from e
    cfg = experiment_from_dict(data, source=path)
    logging.debug(f"🔧 已加载实验配置 {path} (hash {cfg.config_hash[:12]})")
    return cfg


def apply_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    epochs: Optional[int] = None,
    length: Optional[int] = None,
    hidden: Optional[Sequence[int]] = None,
    seeds: Optional[int] = None,
    step_factors: Optional[Sequence[float]] = None,
) -> ExperimentConfig:
    """命令行参数覆盖配置文件 (flags win)。训练相关的覆盖同时作用于 train_overrides。"""
    values: Dict[str, Any] = {}
    if seed is not None:
        values["seed"] = int(seed)
    if out is not None:
        values["paths"] = replace(cfg.paths, root=out)
    if length is not None:
        values["lengths"] = {name: int(length) for name in cfg.lengths}
    if step_factors:
        values["analysis"] = replace(cfg.analysis, step_factors=tuple(step_factors))

    train_values: Dict[str, Any] = {}
    if epochs is not None:
        train_values["epochs"] = int(epochs)
    if hidden:
        train_values["hidden"] = tuple(int(h) for h in hidden)
    if seeds is not None:
        train_values["seeds"] = int(seeds)
    if train_values:
        values["train"] = replace(cfg.train, **train_values)
        values["train_overrides"] = {k: replace(s, **train_values) for k, s in cfg.train_overrides.items()}
    if length is not None:
        train = values.get("train", cfg.train)
        if train.seq_len > int(length):
            values["train"] = replace(train, seq_len=int(length))
            values["train_overrides"] = {
                k: replace(s, seq_len=min(s.seq_len, int(length)))
                for k, s in values.get("train_overrides", cfg.train_overrides).items()
            }
    return replace(cfg, **values) if values else cfg
