# main.py
# 命令行入口: generate / train / eval / report / stability
import argparse
import logging
import math
import sys

from rich.console import Console
from rich.table import Table

from config.config_experiment import apply_overrides, load_experiment_config
from config.config_fields import RESIDUALS, SOLVERS
from core.errors import NodeResidualError, TrainingFailure
from core.pipeline import run_eval, run_generate, run_report, run_stability, run_train
from utils.logger import setup_logging_for_cli

console = Console()


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "✓" if value else "✗"
    if isinstance(value, float):
        if math.isnan(value):
            return "-"
        return f"{value:.3e}"
    return str(value)


def _print_frame(title: str, frame) -> None:
    table = Table(title=title)
    for column in frame.columns:
        table.add_column(str(column))
    for row in frame.itertuples(index=False):
        table.add_row(*(_fmt(v) for v in row))
    console.print(table)


def _expand(choice: str, allowed) -> list:
    return list(allowed) if choice == "all" else [choice]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="实验配置 JSON (默认 config/experiment.json)")
    common.add_argument("--seed", type=int, help="全局随机种子")
    common.add_argument("--out", help="输出根目录 (data/models/reports 都放在这里)")
    common.add_argument("--verbose", "-v", action="store_true", help="输出 DEBUG 日志")
    common.add_argument("--no-progress", action="store_true", help="关闭 tqdm 进度条")

    parser = argparse.ArgumentParser(
        prog="node-residuals",
        description="Grey-box NODE residual generators: data generation, training and solver analysis.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", parents=[common], help="生成名义/故障数据集")
    gen.add_argument("--length", type=int, help="覆盖所有数据集长度 (样本数)")

    residual_help = f"残差 ({'|'.join(RESIDUALS)}|all) 或接线文件路径"
    train = sub.add_parser("train", parents=[common], help="训练残差模型")
    train.add_argument("--residual", default="all", help=residual_help)
    train.add_argument("--solver", default="all", choices=[*SOLVERS, "all"])
    train.add_argument("--epochs", type=int)
    train.add_argument("--hidden", type=int, nargs="+", help="隐藏层宽度，例如 --hidden 16 16")
    train.add_argument("--seeds", type=int, help="每个组合训练的种子数 (取验证损失最好的)")

    ev = sub.add_parser("eval", parents=[common], help="单个模型在所有求解器/步长下的评估")
    ev.add_argument("--residual", required=True, help=residual_help)
    ev.add_argument("--solver", required=True, choices=SOLVERS, help="模型的训练求解器")
    ev.add_argument("--step-factor", type=float, nargs="+", help="步长因子，例如 --step-factor 1 0.5")

    rep = sub.add_parser("report", parents=[common], help="生成完整的报告包")
    rep.add_argument("--step-factor", type=float, nargs="+")

    sub.add_parser("stability", parents=[common], help="稳定域与线性网格分析 (不需要模型)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging_for_cli(logging.DEBUG if args.verbose else None)
    progress = not args.no_progress

    try:
        cfg = load_experiment_config(args.config)
        cfg = apply_overrides(
            cfg,
            seed=args.seed,
            out=args.out,
            epochs=getattr(args, "epochs", None),
            length=getattr(args, "length", None),
            hidden=getattr(args, "hidden", None),
            seeds=getattr(args, "seeds", None),
            step_factors=getattr(args, "step_factor", None),
        )
        logging.info(f"🔧 配置 {cfg.source} (hash {cfg.config_hash[:12]}), seed={cfg.seed}, 输出 {cfg.paths.root}")

        if args.command == "generate":
            paths = run_generate(cfg)
            for name, path in paths.items():
                console.print(f"  {name}: {path}")

        elif args.command == "train":
            residuals = _expand(args.residual, cfg.residuals)
            solvers = _expand(args.solver, cfg.solvers)
            trained = run_train(cfg, residuals, solvers, progress=progress)
            table = Table(title="Training results")
            for column in ("residual", "solver", "seed", "train loss", "val loss"):
                table.add_column(column)
            for (residual, solver), best in sorted(trained.items()):
                table.add_row(
                    residual,
                    solver.upper(),
                    str(best.model.provenance.get("seed")),
                    _fmt(best.result.final_train_loss),
                    _fmt(best.result.final_val_loss),
                )
            console.print(table)

        elif args.command == "eval":
            frames = run_eval(cfg, args.residual, args.solver)
            _print_frame(f"{args.residual} trained with {args.solver.upper()}", frames["solvers"])
            _print_frame("Step-size study (EF)", frames["step_size"])

        elif args.command == "report":
            written = run_report(cfg, progress=progress)
            for name, path in sorted(written.items()):
                console.print(f"  {name}: {path}")

        elif args.command == "stability":
            written = run_stability(cfg)
            for name, path in sorted(written.items()):
                console.print(f"  {name}: {path}")

    except TrainingFailure as e:
        logging.error(f"❌ 训练失败 (epoch {e.epoch}): {e}")
        return 1
    except NodeResidualError as e:
        logging.error(f"❌ {e}")
        return 1
    except KeyboardInterrupt:
        logging.info("\n👋 用户中断，程序退出。")
        return 130

    logging.info("✅ 完成。")
    return 0


if __name__ == "__main__":
    sys.exit(main())
