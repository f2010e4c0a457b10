"""
normalize.py - 楕円フィッティングによる腎臓画像の正規化

マスクの 2 次中心モーメントから等価楕円（中心、長軸 L1、短軸 L2、向き θ）を
推定し、長軸が水平になるよう回転、楕円中心を出力中心に合わせて
N0 x N0 に拡大縮小した後、腎臓外をゼロにします。

θ の符号: 行インデックスが下向きに増える画像座標で、+X 軸から
反時計回り（画面上で見て）を正とします。内部では y = -row として
モーメントを計算します。
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..exceptions import DegenerateRegionError, ValidationError
from .imaging import BinaryMask, GrayImage, apply_mask, check_same_shape

logger = logging.getLogger(__name__)

MIN_REGION_PIXELS = 8


@dataclass(frozen=True)
class EllipseFit:
    """モーメント等価楕円。cx, cy は (列, 行) のサブピクセル座標"""

    cx: float
    cy: float
    l1: float
    l2: float
    theta: float

    def __post_init__(self):
        if not (self.l1 >= self.l2 > 0):
            raise ValidationError(f"L1 >= L2 > 0 が必要です: L1={self.l1}, L2={self.l2}")
        if not (-math.pi / 2 < self.theta <= math.pi / 2):
            raise ValidationError(f"theta は (-pi/2, pi/2] の範囲が必要です: {self.theta}")

    def to_dict(self):
        return {"cx": self.cx, "cy": self.cy, "L1": self.l1, "L2": self.l2, "theta": self.theta}

    @classmethod
    def from_dict(cls, data):
        return cls(cx=float(data["cx"]), cy=float(data["cy"]), l1=float(data["L1"]),
                   l2=float(data["L2"]), theta=float(data["theta"]))


@dataclass(frozen=True)
class NormalizedImage:
    image: GrayImage
    mask: BinaryMask
    source_fit: EllipseFit

    def __post_init__(self):
        check_same_shape(self.image, self.mask)
        if self.image.width != self.image.height:
            raise ValidationError(f"正規化画像は正方形が必要です: {self.image.shape}")
        if np.any(self.image.data[~self.mask.bits] != 0):
            raise ValidationError("マスク外の画素がゼロではありません")

    @property
    def n0(self) -> int:
        return self.image.width


def fit_ellipse(mask: BinaryMask) -> EllipseFit:
    """
    マスクにモーメント等価楕円をフィット

    Returns:
        中心は inside 画素の重心、θ = ½·atan2(2μ11, μ20 − μ02)、
        L1 = 4√λmax, L2 = 4√λmin（λ は共分散行列の固有値）
    """
    rows, cols = np.nonzero(mask.bits)
    if rows.size < MIN_REGION_PIXELS:
        raise DegenerateRegionError(f"inside 画素が {rows.size} 個しかありません")

    cx = cols.mean()
    cy = rows.mean()
    dx = cols - cx
    dy = -(rows - cy)  # y 軸は上向き
    mu20 = np.mean(dx * dx)
    mu02 = np.mean(dy * dy)
    mu11 = np.mean(dx * dy)

    eig = np.linalg.eigvalsh(np.array([[mu20, mu11], [mu11, mu02]]))
    lam_min, lam_max = float(eig[0]), float(eig[1])
    if lam_min <= 1e-9 * max(1.0, lam_max):
        raise DegenerateRegionError("inside 画素が一直線上に並んでいます")

    theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    if theta <= -math.pi / 2:
        theta += math.pi
    return EllipseFit(cx=float(cx), cy=float(cy), l1=4.0 * math.sqrt(lam_max),
                      l2=4.0 * math.sqrt(lam_min), theta=theta)


def normalize_kidney(img: GrayImage, mask: BinaryMask, fit: EllipseFit, n0: int = 227,
                     margin: float = 0.9, scaling: str = "anisotropic") -> NormalizedImage:
    """
    腎臓画像を正規化

    Args:
        img: 元画像
        mask: 腎臓マスク（img と同サイズ）
        fit: mask から得た楕円
        n0: 出力サイズ（CNN の入力サイズ）
        margin: 楕円の軸が出力フレームに占める割合
        scaling: "anisotropic" は L1, L2 を独立に margin·n0 へ、
                 "isotropic" は両軸を margin·n0 / L1 で拡大縮小

    Returns:
        N0 x N0 の NormalizedImage（強度は双線形補間、マスクは最近傍補間）
    """
    check_same_shape(img, mask)
    if n0 < 32:
        raise ValidationError(f"n0 は 32 以上が必要です: {n0}")

    sx = margin * n0 / fit.l1
    if scaling == "anisotropic":
        sy = margin * n0 / fit.l2
    elif scaling == "isotropic":
        sy = sx
    else:
        raise ValidationError(f"未知のスケーリング方式: {scaling}")

    matrix, offset = _output_to_input(fit, n0, sx, sy)
    shape = (n0, n0)
    warped = ndimage.affine_transform(img.data, matrix, offset=offset, output_shape=shape,
                                      order=1, mode="constant", cval=0.0)
    warped_mask = ndimage.affine_transform(mask.bits.astype(np.float64), matrix, offset=offset,
                                           output_shape=shape, order=0, mode="constant", cval=0.0)
    out_mask = BinaryMask(warped_mask >= 0.5)
    out_image = apply_mask(GrayImage(warped), out_mask)
    logger.debug("正規化: theta=%.4f L1=%.2f L2=%.2f -> %dx%d", fit.theta, fit.l1, fit.l2, n0, n0)
    return NormalizedImage(image=out_image, mask=out_mask, source_fit=fit)


def _output_to_input(fit: EllipseFit, n0: int, sx: float, sy: float):
    """
    出力 (row, col) から入力 (row, col) への affine 写像

    出力の水平軸が長軸方向 e1 = (cosθ, −sinθ)、垂直軸が e2 = (sinθ, cosθ)
    （いずれも (col, row) 成分）に対応します。
    """
    c, s = math.cos(fit.theta), math.sin(fit.theta)
    matrix = np.array([
        [c / sy, -s / sx],
        [s / sy, c / sx],
    ])
    center = (n0 - 1) / 2.0
    offset = np.array([fit.cy, fit.cx]) - matrix @ np.array([center, center])
    return matrix, offset
