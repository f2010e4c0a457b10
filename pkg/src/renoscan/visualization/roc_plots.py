"""
roc_plots.py - 特徴量セットごとの ROC 曲線の描画

描く曲線は CvReport.roc、つまり全反復のテスト決定値を統合した ROC です。
"""

import logging
from pathlib import Path
from typing import Mapping, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from ..core.evaluation import CvReport  # noqa: E402

logger = logging.getLogger(__name__)


def plot_roc_curves(reports: Mapping[str, CvReport], output_path: Union[str, Path],
                    title: str = "ROC curves", dpi: int = 100) -> Path:
    """
    プールした ROC 曲線を 1 枚の図に重ねて保存

    Args:
        reports: 凡例名 → CvReport
        output_path: 出力 PNG のパス（先頭レポートの meta を PNG テキストに埋め込む）
    """
    meta = dict(next(iter(reports.values())).meta) if reports else {}
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6.0, 6.0))
    try:
        for name, report in reports.items():
            ax.plot(report.roc.fpr, report.roc.tpr, linewidth=1.2,
                    label=f"{name} (AUC={report.auc_mean:.3f})")
        ax.plot([0, 1], [0, 1], linestyle="--", color="gray", linewidth=0.8)
        ax.set_xlim(0.0, 1.0)
        ax.set_ylim(0.0, 1.0)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.set_title(title)
        ax.legend(loc="lower right", fontsize=8)
        fig.savefig(output_path, dpi=dpi, metadata={"Software": None, **meta})
    finally:
        plt.close(fig)
    logger.info("ROC 図を保存しました: %s", output_path)
    return output_path
