# config/config_env.py
# 该模块负责从 .env (可选) 和环境变量中加载运行参数

import os

from dotenv import load_dotenv

# 从项目根目录的 .env 文件中加载环境变量；文件不存在时直接使用默认值
project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
dotenv_path = os.path.join(project_root, ".env")

if os.path.exists(dotenv_path):
    load_dotenv(dotenv_path=dotenv_path)

LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO").upper()
DEFAULT_SEED = int(os.getenv("NODE_RESIDUALS_SEED", "2023"))
WORKERS = max(1, int(os.getenv("NODE_RESIDUALS_WORKERS", str(os.cpu_count() or 1))))

DEFAULT_CONFIG_PATH = os.path.join(project_root, "config", "experiment.json")
