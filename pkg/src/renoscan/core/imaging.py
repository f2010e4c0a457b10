"""
imaging.py - 画像の基本型と強度変換

全段階で共有するグレースケール画像・二値マスクの型と、
[0, 255] への線形再スケーリング、背景ゼロ化を提供します。
強度はファイル入出力の時点を除き常に実数値で保持します。
"""

from dataclasses import dataclass

import numpy as np

from ..exceptions import DimensionMismatchError, NumericError, ValidationError


@dataclass(frozen=True, eq=False)
class GrayImage:
    """単一チャンネルの 2 次元画像（行優先、data[row, col]）"""

    data: np.ndarray

    def __post_init__(self):
        array = np.array(self.data, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
            raise ValidationError(f"GrayImage は 1x1 以上の 2 次元配列が必要です: {array.shape}")
        if not np.all(np.isfinite(array)):
            raise NumericError("GrayImage に非有限値 (NaN/Inf) が含まれています")
        array.setflags(write=False)
        object.__setattr__(self, "data", array)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """二値マスク。True が腎臓内部 (inside)"""

    bits: np.ndarray

    def __post_init__(self):
        array = np.array(self.bits, dtype=bool)
        if array.ndim != 2 or array.shape[0] < 1 or array.shape[1] < 1:
            raise ValidationError(f"BinaryMask は 2 次元配列が必要です: {array.shape}")
        array.setflags(write=False)
        object.__setattr__(self, "bits", array)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def shape(self):
        return self.bits.shape

    @property
    def area(self) -> int:
        return int(self.bits.sum())


def rescale_to_255(img: GrayImage) -> GrayImage:
    """
    強度を [0, 255] に線形変換

    定数画像は全てゼロを返します（コントラスト情報がないため）。
    """
    data = img.data
    lo = data.min()
    hi = data.max()
    if hi <= lo:
        return GrayImage(np.zeros_like(data))
    scaled = 255.0 * (data - lo) / (hi - lo)
    # 端点を丸め誤差なく固定
    scaled[data == lo] = 0.0
    scaled[data == hi] = 255.0
    return GrayImage(scaled)


def apply_mask(img: GrayImage, mask: BinaryMask) -> GrayImage:
    """マスク外 (outside) の画素をゼロにする"""
    check_same_shape(img, mask)
    return GrayImage(np.where(mask.bits, img.data, 0.0))


def check_same_shape(img: GrayImage, mask: BinaryMask) -> None:
    if img.shape != mask.shape:
        raise DimensionMismatchError(
            f"画像とマスクのサイズが一致しません: {img.width}x{img.height} vs {mask.width}x{mask.height}"
        )
