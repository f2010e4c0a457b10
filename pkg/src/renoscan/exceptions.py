"""
exceptions.py - renoscan の例外階層

ライブラリ関数は例外を送出するだけで、終了コードへの変換は CLI が行います。
"""

from typing import Optional


class RenoscanError(Exception):
    """全ての renoscan 例外の基底クラス"""

    exit_code = 1


class ValidationError(RenoscanError, ValueError):
    """入力・設定の検証失敗（呼び出し側のバグを含む）"""

    exit_code = 2


class DataError(RenoscanError):
    """個々のデータ行の処理失敗"""

    exit_code = 3


class NumericError(RenoscanError, ArithmeticError):
    """非有限値など数値計算上の失敗"""

    exit_code = 4


class DimensionMismatchError(ValidationError):
    """画像・マスク・ベクトルの次元不一致"""


class DegenerateRegionError(DataError):
    """楕円フィッティングできない領域（空、または画素が一直線上）"""

    def __init__(self, detail: str = ""):
        message = "degenerate region"
        if detail:
            message = f"{message}: {detail}"
        super().__init__(message)


class EmptySelectionError(ValidationError):
    """フィルタ結果が空になった場合"""


class ShapeMismatchError(ValidationError):
    """ネットワーク層の形状不整合。層名を保持する"""

    def __init__(self, layer: str, detail: str):
        self.layer = layer
        super().__init__(f"layer '{layer}': {detail}")


class WeightArchiveError(ValidationError):
    """重みアーカイブの破損・不整合"""

    def __init__(self, detail: str, layer: Optional[str] = None):
        self.layer = layer
        if layer is not None:
            detail = f"layer '{layer}': {detail}"
        super().__init__(detail)


class RowFailureError(DataError):
    """1 行以上のデータ処理に失敗した場合。failures に RowFailure のリストを持つ"""

    def __init__(self, failures):
        self.failures = list(failures)
        lines = [f"{f.sample_id} [{f.stage}]: {f.message}" for f in self.failures]
        super().__init__(f"{len(self.failures)} 行の処理に失敗しました:\n  " + "\n  ".join(lines))
