"""
logging_config.py - ログ出力の初期化
"""

import logging

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def configure_logging(level: str = "INFO") -> None:
    """ルートロガーを設定（CLI 起動時に一度だけ呼ぶ）"""
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=LOG_FORMAT,
        force=True,
    )
    # matplotlib のフォント探索ログは不要
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
