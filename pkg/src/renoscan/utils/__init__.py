"""
utils: ユーティリティ機能

設定管理、段階キャッシュ、乱数シードの派生、ログ設定、
スレッド並列化などの汎用的な機能を提供
"""

from .cache import StageCache
from .config import PipelineConfig, load_config, load_settings
from .logging_config import configure_logging
from .seeding import derive_rng, derive_seed

__all__ = [
    "StageCache",
    "PipelineConfig",
    "load_config",
    "load_settings",
    "configure_logging",
    "derive_rng",
    "derive_seed",
]
