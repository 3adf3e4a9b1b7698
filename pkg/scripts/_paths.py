# scripts/_paths.py
import os
from pathlib import Path

# 工程根目录：scripts/ 的上一级
PROJECT_ROOT = Path(__file__).resolve().parents[1]

CONFIG_DIR = PROJECT_ROOT / "config"
# 输出根目录，可以用环境变量 EPGFN_OUT 覆盖
OUT_DIR = Path(os.environ.get("EPGFN_OUT", PROJECT_ROOT / "out"))


def run_dir(name: str, root=None) -> Path:
    """某个实验的输出目录 out/<name>/，不存在就建一个"""
    d = Path(root or OUT_DIR) / name
    d.mkdir(parents=True, exist_ok=True)
    return d
