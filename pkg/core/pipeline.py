# core/pipeline.py
# 各实验阶段的编排 (generate / train / eval / report / stability)，CLI 只负责参数和输出。
import asyncio
import json
import logging
import os
from functools import partial
from typing import Dict, Iterable, List, Optional, Tuple

import pandas as pd
from tqdm import tqdm

from config.config_experiment import ExperimentConfig
from config.config_fields import SOLVERS
from core.analysis import (
    cross_eval,
    evaluation_mse,
    fault_scatter,
    linear_verdict_grid,
    order_study,
    pattern_summary,
    real_axis_bound,
    solver_pattern,
    stability_region,
    step_size_study,
    step_study_frame,
    training_summary,
    trajectory_poles,
)
from core.dataset import NOMINAL, Dataset, FaultScenario, read_dataset, write_dataset
from core.errors import ArtifactError
from core.plant import generate, operating_point_summary
from core.residual import ResidualModel, build_model, load_model, resolve_spec, save_model
from core.solvers import SolverKind
from core.training import BestOf, TrainResult, select_best, train_many, write_history
from core.training import train as train_model
from utils.utils import atomic_write_text, hash_file

ModelKey = Tuple[str, str]


def dataset_name(scenario: FaultScenario) -> str:
    return f"fault_{scenario.fault}"


def dataset_path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.paths.data_dir, f"{name}.csv")


def model_path(cfg: ExperimentConfig, residual: str, solver: str) -> str:
    return os.path.join(cfg.paths.model_dir, f"{_residual_tag(residual)}_{solver}.npz")


def history_path(cfg: ExperimentConfig, residual: str, solver: str) -> str:
    return os.path.join(cfg.paths.model_dir, f"{_residual_tag(residual)}_{solver}.history.csv")


def report_path(cfg: ExperimentConfig, name: str) -> str:
    return os.path.join(cfg.paths.report_dir, name)


def _residual_tag(residual: str) -> str:
    return os.path.splitext(os.path.basename(residual))[0]


def write_frame(path: str, frame: pd.DataFrame) -> str:
    atomic_write_text(path, frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"))
    logging.debug(f"🗂️ 已写入 {path}")
    return path


# ---------------------------------------------------------------- generate


def dataset_plan(cfg: ExperimentConfig) -> Dict[str, Tuple[FaultScenario, int]]:
    plan = {"train": (NOMINAL, cfg.lengths["train"]), "val": (NOMINAL, cfg.lengths["val"])}
    for scenario in cfg.scenarios:
        plan[dataset_name(scenario)] = (scenario, cfg.lengths["fault"])
    return plan


async def _generate_all(cfg: ExperimentConfig) -> Dict[str, Dataset]:
    semaphore = asyncio.Semaphore(cfg.workers)

    async def one(name: str, scenario: FaultScenario, length: int):
        async with semaphore:
            return name, await asyncio.to_thread(
                generate, scenario, length, cfg.sample_time, cfg.dataset_seed(name)
            )

    plan = dataset_plan(cfg)
    results = await asyncio.gather(*(one(n, s, length) for n, (s, length) in plan.items()))
    return dict(results)


def run_generate(cfg: ExperimentConfig) -> Dict[str, str]:
    logging.info(f"🚀 生成 {len(dataset_plan(cfg))} 个数据集到 {cfg.paths.data_dir}")
    datasets = asyncio.run(_generate_all(cfg))
    paths = {name: write_dataset(dataset_path(cfg, name), data) for name, data in datasets.items()}
    logging.info(f"✅ 数据集生成完成: {', '.join(paths)}")
    return paths


def load_dataset(cfg: ExperimentConfig, name: str) -> Dataset:
    return read_dataset(dataset_path(cfg, name))


def load_fault_datasets(cfg: ExperimentConfig) -> Dict[str, Dataset]:
    """场景标签 -> 数据集；名义场景用验证集。"""
    datasets = {"none": load_dataset(cfg, "val")}
    for scenario in cfg.scenarios:
        if scenario.fault != "none":
            datasets[scenario.fault] = load_dataset(cfg, dataset_name(scenario))
    return datasets


# ---------------------------------------------------------------- train


def _train_seed(
    cfg: ExperimentConfig, residual: str, solver: str, seed: int, train: Dataset, val: Dataset, progress: bool
) -> TrainResult:
    """单个 (残差, 求解器, 种子) 的训练任务；模块级函数，可以送进进程池。"""
    settings = cfg.settings_for(residual, solver)
    model = build_model(resolve_spec(residual), settings.hidden, seed, stats=train.stats)
    return train_model(model, train, cfg.train_config(residual, solver, seed=seed), val, progress)


def run_train(
    cfg: ExperimentConfig,
    residuals: Iterable[str],
    solvers: Iterable[str],
    progress: bool = True,
) -> Dict[ModelKey, BestOf]:
    """
    每个 (残差, 求解器, 种子) 一个任务，workers > 1 时放进进程池并发执行；
    每个组合按验证损失选出最佳种子。成功的结果全部写盘后，如有失败再抛出。
    """
    train = load_dataset(cfg, "train")
    val = load_dataset(cfg, "val")
    combos = [(r, s) for r in residuals for s in solvers]
    seeds = {combo: cfg.training_seeds(*combo) for combo in combos}
    # 多进程时各进程的进度条会互相覆盖
    show = progress and cfg.workers == 1
    jobs = {
        f"{r}/{s}/{seed}": partial(_train_seed, cfg, r, s, seed, train, val, show)
        for r, s in combos
        for seed in seeds[(r, s)]
    }
    logging.info(f"🚀 开始训练 {len(combos)} 个组合 / {len(jobs)} 个任务 (workers={cfg.workers})")
    results = asyncio.run(train_many(jobs, cfg.workers, processes=cfg.workers > 1))

    trained: Dict[ModelKey, BestOf] = {}
    failures: List[Exception] = []
    for residual, solver in combos:
        key = f"{residual}/{solver}"
        runs = [(seed, results[f"{key}/{seed}"]) for seed in seeds[(residual, solver)]]
        try:
            outcome = select_best(runs)
        except Exception as e:
            logging.error(f"❌ {key} 训练失败: {e}")
            failures.append(e)
            continue
        model = outcome.model.with_provenance(
            config_hash=cfg.config_hash, global_seed=cfg.seed, residual=_residual_tag(residual)
        )
        save_model(model_path(cfg, residual, solver), model)
        write_history(history_path(cfg, residual, solver), outcome.result.history)
        outcome.result.model = model
        trained[(residual, solver)] = outcome
    if failures:
        raise failures[0]
    return trained


def load_models(
    cfg: ExperimentConfig, residuals: Iterable[str], solvers: Iterable[str]
) -> Dict[ModelKey, ResidualModel]:
    residuals, solvers = list(residuals), list(solvers)
    missing = [
        f"{_residual_tag(r)}/{s}"
        for r in residuals
        for s in solvers
        if not os.path.exists(model_path(cfg, r, s))
    ]
    if missing:
        raise ArtifactError(
            f"缺少训练好的模型: {', '.join(missing)} (先运行 train)", path=cfg.paths.model_dir
        )
    return {(r, s): load_model(model_path(cfg, r, s)) for r in residuals for s in solvers}


# ---------------------------------------------------------------- eval


def run_eval(cfg: ExperimentConfig, residual: str, solver: str) -> Dict[str, pd.DataFrame]:
    """单个模型在所有求解器和配置的步长因子下的评估。"""
    model = load_models(cfg, [residual], [solver])[(residual, solver)]
    val = load_dataset(cfg, "val")
    rows = []
    for method in SOLVERS:
        score = evaluation_mse(model, SolverKind(method, val.sample_time), val, cfg.analysis.settle)
        rows.append(
            {
                "residual": _residual_tag(residual),
                "train_solver": solver,
                "eval_solver": method,
                "mse": score.value,
                "diverged": score.diverged,
            }
        )
    solvers_frame = pd.DataFrame(rows)
    study = step_study_frame(
        step_size_study(model, val, cfg.analysis.step_factors, settle=cfg.analysis.settle),
        _residual_tag(residual),
    )
    tag = f"{_residual_tag(residual)}_{solver}"
    write_frame(report_path(cfg, f"eval_{tag}.csv"), solvers_frame)
    write_frame(report_path(cfg, f"eval_{tag}_step_size.csv"), study)
    return {"solvers": solvers_frame, "step_size": study}


# ---------------------------------------------------------------- stability


def run_stability(cfg: ExperimentConfig) -> Dict[str, str]:
    """稳定域边界、实轴截距、经验阶数、线性网格判定和名义工作点的最快极点 (不需要模型)。"""
    written = {}
    bounds, grids, boundaries = [], [], []
    for method in SOLVERS:
        region = stability_region(method, cfg.analysis.boundary_points)
        order = order_study(method)
        bounds.append(
            {
                "method": method,
                "real_axis_bound": real_axis_bound(method),
                "order_error_T": order.error,
                "order_error_T2": order.error_half,
                "order_slope": order.slope,
            }
        )
        boundaries.append(region.to_frame())
        grids.append(linear_verdict_grid(method, steps=cfg.analysis.verdict_steps))
    written["stability_bounds"] = write_frame(report_path(cfg, "stability_bounds.csv"), pd.DataFrame(bounds))
    written["stability_boundary"] = write_frame(
        report_path(cfg, "stability_boundary.csv"), pd.concat(boundaries, ignore_index=True)
    )
    grid = pd.concat(grids, ignore_index=True)
    written["stability_grid"] = write_frame(report_path(cfg, "stability_grid.csv"), grid)
    point = operating_point_summary(T=cfg.sample_time)
    written["operating_point"] = write_frame(report_path(cfg, "operating_point.csv"), pd.DataFrame([point]))
    logging.info(f"🔍 名义工作点 n_p={point['n_p']:.0f} rpm: 最快极点 λT = {point['lambda_T']:.3f}")
    mismatches = int((~grid["match"]).sum())
    if mismatches:
        logging.warning(f"⚠️ 线性网格上有 {mismatches} 个点的仿真结果与 |R(λT)| 判定不一致")
    else:
        logging.info("✅ 线性网格上仿真结果与稳定性判定完全一致")
    return written


# ---------------------------------------------------------------- report


def run_report(cfg: ExperimentConfig, progress: bool = True) -> Dict[str, str]:
    residuals, solvers = list(cfg.residuals), list(cfg.solvers)
    models = load_models(cfg, residuals, solvers)
    val = load_dataset(cfg, "val")
    settle = cfg.analysis.settle
    written: Dict[str, str] = {}

    stages = tqdm(total=5, desc="report", disable=not progress)

    summary = training_summary(models, val, settle)
    summary["residual"] = summary["residual"].map(_residual_tag)
    written["training_summary"] = write_frame(report_path(cfg, "training_summary.csv"), summary)
    stages.update()

    matrices, patterns = [], []
    for residual in residuals:
        per_solver = {s: models[(residual, s)] for s in solvers}
        matrix = cross_eval(per_solver, val, solvers, settle, cfg.workers)
        matrices.append(matrix.to_frame())
        patterns.append(solver_pattern(matrix))
    cross = pd.concat(matrices, ignore_index=True)
    pattern = pd.concat(patterns, ignore_index=True)
    written["cross_eval"] = write_frame(report_path(cfg, "cross_eval.csv"), cross)
    written["solver_pattern"] = write_frame(report_path(cfg, "solver_pattern.csv"), pattern)
    stages.update()

    studies, poles = [], []
    for residual in residuals:
        if "rk4" in solvers:
            rk4_model = models[(residual, "rk4")]
            studies.append(
                step_study_frame(
                    step_size_study(rk4_model, val, cfg.analysis.step_factors, settle=settle),
                    _residual_tag(residual),
                )
            )
        for solver in solvers:
            frame = trajectory_poles(
                models[(residual, solver)], SolverKind(solver, val.sample_time), val, cfg.analysis.pole_stride
            )
            frame.insert(0, "train_solver", solver)
            frame.insert(0, "residual", _residual_tag(residual))
            poles.append(frame)
    if studies:
        written["step_size"] = write_frame(report_path(cfg, "step_size.csv"), pd.concat(studies, ignore_index=True))
    written["model_poles"] = write_frame(report_path(cfg, "model_poles.csv"), pd.concat(poles, ignore_index=True))
    stages.update()

    written.update(run_stability(cfg))
    stages.update()

    fault_sets = load_fault_datasets(cfg)
    scatter_points, separations, reactions = [], [], []
    for solver in solvers:
        scatter_models = {_residual_tag(r): models[(r, solver)] for r in residuals}
        scatter = fault_scatter(scatter_models, fault_sets, solver, settle=settle)
        points = scatter.points.copy()
        points.insert(0, "train_solver", solver)
        scatter_points.append(points)
        for label, score in scatter.separation.items():
            separations.append({"train_solver": solver, "label": label, "separation": score, "usable": True})
        for label in scatter.unusable:
            separations.append({"train_solver": solver, "label": label, "separation": float("nan"), "usable": False})
        reaction = scatter.reaction.reset_index().melt(id_vars="label", var_name="residual", value_name="score")
        reaction.insert(0, "train_solver", solver)
        reactions.append(reaction)
    written["scatter"] = write_frame(report_path(cfg, "scatter.csv"), pd.concat(scatter_points, ignore_index=True))
    written["separation"] = write_frame(report_path(cfg, "separation.csv"), pd.DataFrame(separations))
    written["reaction"] = write_frame(report_path(cfg, "reaction.csv"), pd.concat(reactions, ignore_index=True))
    stages.update()
    stages.close()

    flags = pattern_summary(pattern)
    logging.info(f"🔍 求解器模式: {flags}")
    written["manifest"] = write_manifest(cfg, models, written, flags)
    return written


def write_manifest(
    cfg: ExperimentConfig,
    models: Dict[ModelKey, ResidualModel],
    reports: Dict[str, str],
    flags: Optional[Dict[str, bool]] = None,
) -> str:
    """种子、配置哈希和每个产物的 SHA-256；不含时间戳，保证重跑得到同样的文件。"""
    datasets = []
    for name in dataset_plan(cfg):
        path = dataset_path(cfg, name)
        if os.path.exists(path):
            datasets.append({"name": name, "path": path, "seed": cfg.dataset_seed(name), "sha256": hash_file(path)})
    model_entries = []
    for (residual, solver), model in sorted(models.items()):
        path = model_path(cfg, residual, solver)
        model_entries.append(
            {
                "residual": _residual_tag(residual),
                "solver": solver,
                "path": path,
                "seed": model.provenance.get("seed"),
                "candidate_seeds": cfg.training_seeds(residual, solver),
                "sha256": hash_file(path),
            }
        )
    manifest = {
        "global_seed": cfg.seed,
        "config_hash": cfg.config_hash,
        "config": cfg.to_dict(),
        "datasets": datasets,
        "models": model_entries,
        "reports": [
            {"name": name, "path": path, "sha256": hash_file(path)} for name, path in sorted(reports.items())
        ],
        "solver_pattern": flags or {},
    }
    path = report_path(cfg, "manifest.json")
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
    logging.info(f"🗂️ manifest 已写入 {path} ({len(model_entries)} 个模型)")
    return path
