"""
cache.py - 内容ハッシュをキーとする段階キャッシュ

各段階の中間結果（正規化画像、3チャンネル画像、特徴量）を HDF5 で保存します。
キーは (入力バイト列, 段階設定) の SHA-256 です。書き込みは一時ファイルへ
書いてから rename するため、複数スレッドが同時に書いても破損しません。
"""

import hashlib
import json
import logging
import os
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import h5py
import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class CacheEntry:
    arrays: Dict[str, np.ndarray]
    meta: Dict[str, Any]


class StageCache:
    """段階キャッシュ"""

    def __init__(self, root: Union[str, Path], enabled: bool = True):
        self.root = Path(root)
        self.enabled = enabled
        self.hits: Counter = Counter()
        self.misses: Counter = Counter()
        self._lock = threading.Lock()

    @staticmethod
    def make_key(*parts: Union[bytes, str, Dict[str, Any]]) -> str:
        digest = hashlib.sha256()
        for part in parts:
            if isinstance(part, dict):
                part = json.dumps(part, sort_keys=True, separators=(",", ":"))
            if isinstance(part, str):
                part = part.encode("utf-8")
            digest.update(hashlib.sha256(part).digest())
        return digest.hexdigest()

    def _path(self, stage: str, key: str) -> Path:
        return self.root / stage / key[:2] / f"{key}.h5"

    def get(self, stage: str, key: str) -> Optional[CacheEntry]:
        path = self._path(stage, key)
        if not self.enabled or not path.exists():
            with self._lock:
                self.misses[stage] += 1
            return None
        with h5py.File(path, "r") as f:
            arrays = {name: np.array(f[name]) for name in f.keys()}
            meta = json.loads(f.attrs.get("meta", "{}"))
        with self._lock:
            self.hits[stage] += 1
        return CacheEntry(arrays=arrays, meta=meta)

    def put(self, stage: str, key: str, arrays: Dict[str, np.ndarray],
            meta: Optional[Dict[str, Any]] = None) -> None:
        if not self.enabled:
            return
        path = self._path(stage, key)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        os.close(fd)
        try:
            with h5py.File(tmp_name, "w") as f:
                for name, array in arrays.items():
                    f.create_dataset(name, data=array)
                f.attrs["meta"] = json.dumps(meta or {}, sort_keys=True)
            os.replace(tmp_name, path)
        except Exception:
            if os.path.exists(tmp_name):
                os.remove(tmp_name)
            raise

    def summary(self) -> Dict[str, Dict[str, int]]:
        stages = sorted(set(self.hits) | set(self.misses))
        return {s: {"hits": self.hits[s], "misses": self.misses[s]} for s in stages}

    def log_summary(self) -> None:
        for stage, counts in self.summary().items():
            logger.info("キャッシュ %s: ヒット %d / ミス %d", stage, counts["hits"], counts["misses"])
