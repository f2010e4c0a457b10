"""
seeding.py - マスターシードからの派生乱数

全ての乱数は単一のマスターシードから (段階名, 反復, fold) ごとに展開します。
"""

import zlib
from typing import Union

import numpy as np

Key = Union[int, str]


def derive_seed(master: int, *keys: Key) -> int:
    """
    マスターシードとキー列から決定的な 32bit シードを生成

    文字列キーは CRC32 で整数化するため、プロセスや実行環境に依存しません。
    """
    entropy = [int(master) & 0xFFFFFFFF]
    for key in keys:
        if isinstance(key, str):
            entropy.append(zlib.crc32(key.encode("utf-8")))
        else:
            entropy.append(int(key) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(entropy).generate_state(1)[0])


def derive_rng(master: int, *keys: Key) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *keys))
