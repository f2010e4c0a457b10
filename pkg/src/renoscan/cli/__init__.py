"""
cli: コマンドラインインターフェース

argparse によるサブコマンド群（normalize, featmaps, features, cnn-extract,
train, predict, cv, compare, phantom-gen, run）
"""

from .main import build_parser, main

__all__ = ["build_parser", "main"]
