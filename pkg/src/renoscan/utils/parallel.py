"""
parallel.py - スレッドプールによる並列実行

結果は常に入力順で返すため、並列実行と逐次実行の出力は一致します。
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, Optional, TypeVar

from ..exceptions import ValidationError
from .config import load_settings

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")

THREADS_ENV = "RENOSCAN_THREADS"


def thread_count(requested: Optional[int] = None) -> int:
    """
    使用スレッド数を決定

    優先順位: 引数 → 環境変数 RENOSCAN_THREADS → settings.json の max_threads
    """
    if requested is not None:
        count = requested
    elif os.environ.get(THREADS_ENV):
        try:
            count = int(os.environ[THREADS_ENV])
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} は整数が必要です: {os.environ[THREADS_ENV]}")
    else:
        count = load_settings().max_threads
    return max(1, count)


def ordered_map(func: Callable[[T], R], items: Iterable[T],
                threads: Optional[int] = None) -> List[R]:
    """func を items に適用し、入力順の結果リストを返す"""
    items = list(items)
    workers = min(thread_count(threads), max(1, len(items)))
    if workers == 1:
        return [func(item) for item in items]
    logger.debug("%d スレッドで %d 件を処理", workers, len(items))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))
