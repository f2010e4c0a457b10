"""
visualization: 結果の可視化機能

ROC 曲線と 3 チャンネル疑似カラー画像の描画を提供
"""

from .composite import save_composite
from .roc_plots import plot_roc_curves

__all__ = [
    "plot_roc_curves",
    "save_composite",
]
