# core/training.py
# 用 Adam 最小化求解器展开序列上的 Huber 预测误差 (BPTT 穿过每个求解器阶段)。
import asyncio
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from core.autodiff import Grads, flat_norm, huber, huber_grad, scale_grads
from core.dataset import Dataset, dosing_off_start
from core.errors import ParameterError, StructuralError, TrainingFailure
from core.residual import ResidualModel, residual_sequence
from core.solvers import SolverKind, simulate, simulate_backward
from utils.utils import atomic_write_text, derive_seed

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "diverged_windows")
T = TypeVar("T")


@dataclass(frozen=True)
class TrainConfig:
    solver: SolverKind
    seq_len: int = 400
    batch_size: int = 8
    epochs: int = 300
    learning_rate: float = 1e-3
    huber_delta: float = 1.0
    seed: int = 0
    # 初值分布: init_stats 给出时为固定的 (均值, 方差)；否则均值取窗口起点的测量估计，方差为 init_variance
    init_variance: float = 1e-3
    init_stats: Optional[Tuple[Tuple[float, float], ...]] = None
    batches_per_epoch: Optional[int] = None
    loss_cap: float = 1e3
    divergence_limit: float = 0.5
    frozen: Tuple[str, ...] = ()
    # 梯度全局范数上限 (None 表示不裁剪)
    clip_norm: Optional[float] = None
    # 每隔 val_every 个 epoch 验证一次，最后一个 epoch 总会验证
    val_every: int = 1

    def __post_init__(self):
        if self.seq_len < 1:
            raise ParameterError(f"序列长度必须 >= 1，收到 {self.seq_len}")
        if self.batch_size < 1:
            raise ParameterError(f"batch size 必须 >= 1，收到 {self.batch_size}")
        if self.epochs < 0:
            raise ParameterError(f"epochs 不能为负，收到 {self.epochs}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0):
            raise ParameterError(f"学习率必须为正数，收到 {self.learning_rate}")
        if not self.huber_delta > 0:
            raise ParameterError(f"Huber delta 必须为正数，收到 {self.huber_delta}")
        if self.init_variance < 0:
            raise ParameterError(f"初值方差不能为负，收到 {self.init_variance}")
        if self.init_stats is not None and any(var < 0 for _, var in self.init_stats):
            raise ParameterError("init_stats 中的方差不能为负。")
        if self.batches_per_epoch is not None and self.batches_per_epoch < 1:
            raise ParameterError(f"batches_per_epoch 必须 >= 1，收到 {self.batches_per_epoch}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ParameterError(f"clip_norm 必须为正数，收到 {self.clip_norm}")
        if self.val_every < 1:
            raise ParameterError(f"val_every 必须 >= 1，收到 {self.val_every}")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["solver"] = {"method": self.solver.method, "step": self.solver.step}
        data["frozen"] = list(self.frozen)
        if self.init_stats is not None:
            data["init_stats"] = [list(s) for s in self.init_stats]
        return data


@dataclass
class AdamState:
    m: Grads
    v: Grads
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Grads, **hyper) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            **hyper,
        )


def adam_step(params: Grads, grads: Grads, state: AdamState, lr: float) -> Tuple[Grads, AdamState]:
    """带偏差修正的 Adam 单步。grads 中缺少的参数按零梯度处理。返回新的参数与状态 (不修改输入)。"""
    if not lr > 0:
        raise ParameterError(f"学习率必须为正数，收到 {lr}")
    extra = set(grads) - set(params)
    if extra:
        raise StructuralError(f"梯度中含有未知参数: {sorted(extra)}")
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif np.shape(g) != np.shape(p):
            raise StructuralError(f"参数 {name} 形状 {np.shape(p)} 与梯度形状 {np.shape(g)} 不一致")
        if name not in state.m or np.shape(state.m[name]) != np.shape(p):
            raise StructuralError(f"Adam 状态与参数 {name} 不对应")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_params, replace(state, m=new_m, v=new_v, t=t)


def make_batches(
    data: Union[Dataset, int],
    seq_len: int,
    batch_size: int,
    seed: int,
    n_batches: Optional[int] = None,
) -> Iterator[np.ndarray]:
    """产生窗口起点数组 (batch_size,)，起点在 [0, N - seq_len] 上均匀分布。"""
    length = data if isinstance(data, int) else len(data)
    if seq_len > length:
        raise ParameterError(f"序列长度 {seq_len} 超过数据集长度 {length}")
    if seq_len < 1 or batch_size < 1:
        raise ParameterError("seq_len 和 batch_size 必须 >= 1")
    rng = np.random.default_rng(seed)
    emitted = 0
    while n_batches is None or emitted < n_batches:
        yield rng.integers(0, length - seq_len + 1, size=batch_size)
        emitted += 1


@dataclass(frozen=True)
class InitialStateStats:
    mean: np.ndarray  # (n,) 或 (B, n)
    variance: np.ndarray  # (n,)

    def __post_init__(self):
        if np.any(np.asarray(self.variance) < 0):
            raise ParameterError(f"初值方差不能为负: {self.variance}")


def sample_initial_state(
    stats: InitialStateStats,
    seed: Optional[int] = None,
    inference: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """逐状态的高斯抽样；推断模式直接返回均值。"""
    mean = np.asarray(stats.mean, dtype=np.float64)
    variance = np.asarray(stats.variance, dtype=np.float64)
    if np.any(variance < 0):
        raise ParameterError(f"初值方差不能为负: {variance}")
    if inference:
        return mean.copy()
    if rng is None:
        rng = np.random.default_rng(seed)
    return mean + np.sqrt(variance) * rng.standard_normal(mean.shape)


@dataclass(frozen=True)
class TrainingArrays:
    """训练集的归一化数组，整个训练过程只计算一次。"""

    inputs: np.ndarray  # (N, m)
    reference: np.ndarray  # (N,)
    measured_states: np.ndarray  # (N, n)

    @classmethod
    def from_dataset(cls, model: ResidualModel, data: Dataset) -> "TrainingArrays":
        return cls(
            inputs=model.normalized_inputs(data),
            reference=model.normalized_reference(data),
            measured_states=model.measured_states(data),
        )

    def __len__(self) -> int:
        return self.reference.shape[0]


@dataclass
class WindowLoss:
    loss: float
    grads: Grads
    diverged: int
    windows: int


def window_loss_and_grad(
    model: ResidualModel,
    arrays: TrainingArrays,
    offsets: Sequence[int],
    x0: np.ndarray,
    cfg: TrainConfig,
) -> WindowLoss:
    """
    一个 batch 的损失: 每个窗口的 Huber 误差均值，再对窗口取平均；发散窗口记为 loss_cap，不贡献梯度。
    发散的行被剔除后整批重跑，保证梯度里不会出现 NaN。
    """
    offsets = np.asarray(offsets, dtype=np.intp)
    batch = offsets.shape[0]
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[0] != batch:
        raise StructuralError(f"x0 行数 {x0.shape[0]} 与窗口数 {batch} 不一致")
    idx = offsets[:, None] + np.arange(cfg.seq_len)
    inputs = np.transpose(arrays.inputs[idx], (1, 0, 2))  # (L, B, m)
    target = arrays.reference[idx].T  # (L, B)

    dynamics, output = model.dynamics, model.output
    keep = np.ones(batch, dtype=bool)
    sim = None
    while keep.any():
        sim = simulate(dynamics, output, cfg.solver, x0[keep], inputs[:, keep], record=True)
        if not sim.diverged:
            break
        rows = np.flatnonzero(keep)
        keep[rows[sim.diverged_rows]] = False
        logging.debug(f"🔍 {int(sim.diverged_rows.sum())} 个窗口发散，剔除后重跑")

    n_div = int(batch - keep.sum())
    if not keep.any():
        return WindowLoss(cfg.loss_cap, {}, n_div, batch)

    err = sim.outputs[:, :, 0] - target[:, keep]
    per_window = np.mean(huber(err, cfg.huber_delta), axis=0)
    loss = (float(per_window.sum()) + n_div * cfg.loss_cap) / batch
    out_grads = huber_grad(err, cfg.huber_delta) / (cfg.seq_len * batch)
    grads, _ = simulate_backward(dynamics, output, sim.tape, out_grads[:, :, None])
    return WindowLoss(loss, grads, n_div, batch)


def evaluation_slice(data: Dataset) -> Dataset:
    """计量阀关闭的后半段。"""
    return data.slice(dosing_off_start(len(data)))


def validation_loss(model: ResidualModel, data: Dataset, solver: SolverKind, delta: float = 1.0) -> float:
    """验证集后半段 (DC = 0) 上的 Huber 损失 (归一化单位)，初值取测量估计的均值；发散时为 inf。"""
    result = residual_sequence(model, solver, evaluation_slice(data))
    if result.diverged:
        return math.inf
    return float(np.mean(huber(result.r_norm, delta)))


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    diverged_windows: int


@dataclass
class TrainResult:
    model: ResidualModel
    history: List[HistoryRow] = field(default_factory=list)
    initial_val_loss: float = math.nan

    @property
    def final_train_loss(self) -> float:
        return self.history[-1].train_loss if self.history else math.nan

    @property
    def final_val_loss(self) -> float:
        return self.history[-1].val_loss if self.history else self.initial_val_loss


def _initial_stats(cfg: TrainConfig, arrays: TrainingArrays, offsets: np.ndarray) -> InitialStateStats:
    n = arrays.measured_states.shape[1]
    if cfg.init_stats is not None:
        if len(cfg.init_stats) != n:
            raise StructuralError(f"init_stats 需要 {n} 个状态，收到 {len(cfg.init_stats)}")
        means = np.array([m for m, _ in cfg.init_stats], dtype=np.float64)
        variance = np.array([v for _, v in cfg.init_stats], dtype=np.float64)
        return InitialStateStats(np.broadcast_to(means, (offsets.shape[0], n)), variance)
    return InitialStateStats(arrays.measured_states[offsets], np.full(n, cfg.init_variance))


def clip_grads(grads: Grads, clip_norm: Optional[float]) -> Grads:
    """全局范数超过 clip_norm 时整体等比缩放。"""
    if clip_norm is None or not grads:
        return grads
    norm = flat_norm(grads.values())
    if not math.isfinite(norm) or norm <= clip_norm:
        return grads
    return scale_grads(grads, clip_norm / norm)


def _is_frozen(name: str, frozen: Sequence[str]) -> bool:
    return any(name.startswith(prefix) for prefix in frozen)


def train(
    model: ResidualModel,
    data: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    progress: bool = True,
) -> TrainResult:
    if cfg.seq_len > len(data):
        raise ParameterError(f"序列长度 {cfg.seq_len} 超过训练集长度 {len(data)}")
    arrays = TrainingArrays.from_dataset(model, data)
    n_batches = cfg.batches_per_epoch or max(1, math.ceil(len(data) / (cfg.seq_len * cfg.batch_size)))
    batches = make_batches(len(data), cfg.seq_len, cfg.batch_size, derive_seed(cfg.seed, "batches"))
    init_rng = np.random.default_rng(derive_seed(cfg.seed, "initial-state"))

    params = model.parameters()
    adam = AdamState.zeros_like(params)
    initial_val = validation_loss(model, val, cfg.solver, cfg.huber_delta) if val is not None else math.nan
    logging.info(
        f"🚀 训练 {model.name} / {cfg.solver}: {cfg.epochs} epochs × {n_batches} batches, "
        f"seed={cfg.seed}, 初始验证损失 {initial_val:.3e}"
    )

    history: List[HistoryRow] = []
    current = model
    epochs = tqdm(range(1, cfg.epochs + 1), desc=f"{model.name}/{cfg.solver.method}", disable=not progress)
    for epoch in epochs:
        losses, diverged, windows = [], 0, 0
        for _ in range(n_batches):
            offsets = next(batches)
            x0 = sample_initial_state(_initial_stats(cfg, arrays, offsets), rng=init_rng)
            result = window_loss_and_grad(current, arrays, offsets, x0, cfg)
            losses.append(result.loss)
            diverged += result.diverged
            windows += result.windows
            grads = {k: g for k, g in result.grads.items() if not _is_frozen(k, cfg.frozen)}
            grads = clip_grads(grads, cfg.clip_norm)
            updated, adam = adam_step(params, grads, adam, cfg.learning_rate)
            params = {k: (params[k] if _is_frozen(k, cfg.frozen) else p) for k, p in updated.items()}
            current = current.with_parameters(params)
        if diverged > cfg.divergence_limit * windows:
            logging.error(f"❌ 第 {epoch} 个 epoch 中 {diverged}/{windows} 个窗口发散")
            raise TrainingFailure(
                f"{model.name}/{cfg.solver}: 第 {epoch} 个 epoch 中 {diverged}/{windows} 个训练窗口发散",
                epoch=epoch,
            )
        val_loss = math.nan
        if val is not None and (epoch % cfg.val_every == 0 or epoch == cfg.epochs):
            val_loss = validation_loss(current, val, cfg.solver, cfg.huber_delta)
        history.append(HistoryRow(epoch, float(np.mean(losses)), val_loss, diverged))
        epochs.set_postfix(train=f"{history[-1].train_loss:.2e}", val=f"{val_loss:.2e}")

    trained = current.with_provenance(
        solver=cfg.solver.method,
        step=cfg.solver.step,
        seed=cfg.seed,
        train_config=cfg.to_dict(),
        normalization="standardized with training-set mean/std",
        initial_val_loss=initial_val,
        train_loss=history[-1].train_loss if history else math.nan,
        val_loss=history[-1].val_loss if history else initial_val,
        epochs_run=len(history),
    )
    if history:
        logging.info(
            f"✅ {model.name}/{cfg.solver} 训练完成: train {history[-1].train_loss:.3e}, val {history[-1].val_loss:.3e}"
        )
    return TrainResult(trained, history, initial_val)


@dataclass
class BestOf:
    result: TrainResult
    runs: List[Tuple[int, float]]  # (seed, 验证损失)

    @property
    def model(self) -> ResidualModel:
        return self.result.model


def select_best(runs: Sequence[Tuple[int, Union[TrainResult, Exception]]]) -> BestOf:
    """按验证损失 (不是训练损失) 选出最好的种子。TrainingFailure 的种子被跳过，其他异常直接抛出。"""
    if not runs:
        raise ParameterError("至少需要一个种子。")
    best: Optional[TrainResult] = None
    scores: List[Tuple[int, float]] = []
    failures: List[TrainingFailure] = []
    for seed, outcome in runs:
        if isinstance(outcome, TrainingFailure):
            logging.warning(f"⚠️ 种子 {seed} 训练失败: {outcome}")
            failures.append(outcome)
            scores.append((seed, math.inf))
            continue
        if isinstance(outcome, Exception):
            raise outcome
        scores.append((seed, outcome.final_val_loss))
        if best is None or outcome.final_val_loss < best.final_val_loss:
            best = outcome
    if best is None:
        raise failures[-1]
    best.model.provenance["candidates"] = [{"seed": s, "val_loss": v} for s, v in scores]
    logging.info(f"✅ 最佳种子 {best.model.provenance['seed']} (val {best.final_val_loss:.3e})")
    return BestOf(best, scores)


async def train_many(
    jobs: Dict[str, Callable[[], T]], workers: int = 1, processes: bool = False
) -> Dict[str, Union[T, Exception]]:
    """
    并发执行多个独立任务，返回 任务名 -> 结果或异常。
    processes=True 时在进程池中执行，任务必须可 pickle (例如模块级函数的 functools.partial)。
    """
    workers = max(1, workers)
    semaphore = asyncio.Semaphore(workers)
    pool = ProcessPoolExecutor(max_workers=workers) if processes else None

    async def run(job: Callable[[], T]):
        async with semaphore:
            if pool is None:
                return await asyncio.to_thread(job)
            return await asyncio.get_running_loop().run_in_executor(pool, job)

    names = list(jobs)
    try:
        results = await asyncio.gather(*(run(jobs[n]) for n in names), return_exceptions=True)
    finally:
        if pool is not None:
            pool.shutdown()
    return dict(zip(names, results))


def history_frame(history: Sequence[HistoryRow]) -> pd.DataFrame:
    return pd.DataFrame([asdict(row) for row in history], columns=list(HISTORY_COLUMNS))


def write_history(path: str, history: Sequence[HistoryRow]) -> str:
    atomic_write_text(path, history_frame(history).to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    logging.info(f"🗂️ 损失历史已写入 {path}")
    return path
