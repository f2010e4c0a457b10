"""
descriptors.py - 手作り特徴量（HOG と幾何特徴）

HOG は Dalal–Triggs 型（符号なし 9 方向、位置と方向の双線形投票、
2x2 セルブロックの L2-Hys 正規化）で、セル単位の記述子を返します。
各セルは自身を含む 4 つのブロックそれぞれで正規化した値を持つため、
セルあたりの次元は 4 × 方向数 です。

幾何特徴は楕円の軸長から作る 8 次元の形状特徴 V_shape と、
閾値 3, 6, ..., 30 未満の「黒い穴」の面積比 10 次元 V_block です。
"""

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from ..exceptions import DataError, ValidationError
from .imaging import BinaryMask, GrayImage, check_same_shape
from .normalize import EllipseFit

BLOCK_THRESHOLDS = tuple(range(3, 31, 3))
SHAPE_NAMES = ["L1", "L2", "L1/L2", "L1*L2", "L1+L2", "L1^2+L2^2", "L1-L2", "L1^2-L2^2"]


@dataclass(frozen=True, eq=False)
class HogDescriptor:
    cells_x: int
    cells_y: int
    bins: int
    values: np.ndarray

    @property
    def bins_per_cell(self) -> int:
        return 4 * self.bins

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class GeometricFeatures:
    v_shape: np.ndarray
    v_block: np.ndarray

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.v_shape, self.v_block])


def hog_length(n0: int, cell_size: int, orientations: int = 9) -> int:
    cells = n0 // cell_size
    return cells * cells * 4 * orientations


def hog(img: GrayImage, cell_size: int, orientations: int = 9, clip: float = 0.2) -> HogDescriptor:
    """
    HOG 記述子を計算

    Args:
        img: 入力画像（通常は N0 x N0 の正規化画像）
        cell_size: セルの一辺（floor(N0/10)）。余りの画素は右端・下端で切り捨て
        orientations: 符号なし方向ビン数
        clip: L2-Hys のクリップ値

    Returns:
        長さ cells_x × cells_y × 4·orientations の HogDescriptor（各値は [0, 1]）
    """
    if cell_size < 1:
        raise ValidationError(f"cell_size は 1 以上が必要です: {cell_size}")
    cells_y = img.height // cell_size
    cells_x = img.width // cell_size
    if cells_x < 1 or cells_y < 1:
        raise ValidationError(f"画像 {img.width}x{img.height} がセルサイズ {cell_size} より小さい")

    hist = _cell_histograms(img.data, cell_size, cells_x, cells_y, orientations)
    values = _block_normalize(hist, clip).ravel()

    expected = cells_x * cells_y * 4 * orientations
    assert values.size == expected, f"HOG 長 {values.size} != {expected}"
    return HogDescriptor(cells_x=cells_x, cells_y=cells_y, bins=orientations, values=values)


def _cell_histograms(data: np.ndarray, cell_size: int, cells_x: int, cells_y: int,
                     orientations: int) -> np.ndarray:
    padded = np.pad(data, 1, mode="edge")
    gx = padded[1:-1, 2:] - padded[1:-1, :-2]
    gy = padded[2:, 1:-1] - padded[:-2, 1:-1]

    h, w = cells_y * cell_size, cells_x * cell_size
    gx = gx[:h, :w]
    gy = gy[:h, :w]
    magnitude = np.hypot(gx, gy)
    angle = np.arctan2(gy, gx) % np.pi

    # 方向の双線形投票（ビン中心は k·π/orientations）
    t = angle / (np.pi / orientations)
    b0 = np.floor(t).astype(int)
    wb1 = t - b0
    b0 %= orientations
    b1 = (b0 + 1) % orientations

    # 位置の双線形投票（セル中心を整数座標とする）
    ys, xs = np.mgrid[0:h, 0:w]
    yc = (ys + 0.5) / cell_size - 0.5
    xc = (xs + 0.5) / cell_size - 0.5
    y0 = np.floor(yc).astype(int)
    x0 = np.floor(xc).astype(int)
    wy1 = yc - y0
    wx1 = xc - x0

    # 範囲外への投票はパディングした外周セルへ捨てる
    hist = np.zeros((cells_y + 2, cells_x + 2, orientations))
    for dy, wy in ((0, 1.0 - wy1), (1, wy1)):
        for dx, wx in ((0, 1.0 - wx1), (1, wx1)):
            rows = y0 + dy + 1
            cols = x0 + dx + 1
            for bins, wb in ((b0, 1.0 - wb1), (b1, wb1)):
                np.add.at(hist, (rows, cols, bins), magnitude * wy * wx * wb)
    hist[0, :] = 0.0
    hist[-1, :] = 0.0
    hist[:, 0] = 0.0
    hist[:, -1] = 0.0
    return hist


def _block_normalize(hist: np.ndarray, clip: float) -> np.ndarray:
    """外周ゼロ付きセルヒストグラムから (cells_y, cells_x, 4·bins) を作る"""
    cy, cx = hist.shape[0] - 2, hist.shape[1] - 2
    bins = hist.shape[2]
    blocks = np.stack([
        hist[:-1, :-1], hist[:-1, 1:],
        hist[1:, :-1], hist[1:, 1:],
    ], axis=2)  # (cy+1, cx+1, 4, bins)
    flat = blocks.reshape(cy + 1, cx + 1, 4 * bins)
    flat = _l2_hys(flat, clip).reshape(cy + 1, cx + 1, 4, bins)

    # セル (a, b) を含むブロックとその中での位置（0:左上 1:右上 2:左下 3:右下）
    parts = [
        flat[:-1, :-1, 3],
        flat[:-1, 1:, 2],
        flat[1:, :-1, 1],
        flat[1:, 1:, 0],
    ]
    return np.concatenate(parts, axis=-1)


def _l2_hys(vectors: np.ndarray, clip: float) -> np.ndarray:
    out = np.zeros_like(vectors)
    norms = np.linalg.norm(vectors, axis=-1)
    nonzero = norms > 0
    if not np.any(nonzero):
        return out
    v = vectors[nonzero] / norms[nonzero][:, None]
    v = np.minimum(v, clip)
    v /= np.linalg.norm(v, axis=-1)[:, None]
    out[nonzero] = v
    return out


def shape_features(l1: float, l2: float) -> np.ndarray:
    """V_shape = [L1, L2, L1/L2, L1·L2, L1+L2, L1²+L2², L1−L2, L1²−L2²]"""
    return np.array([
        l1, l2, l1 / l2, l1 * l2, l1 + l2,
        l1 * l1 + l2 * l2, l1 - l2, l1 * l1 - l2 * l2,
    ])


def block_features(img: GrayImage, mask: BinaryMask,
                   thresholds: Sequence[float] = BLOCK_THRESHOLDS) -> np.ndarray:
    """V_block: マスク内で強度が閾値未満の画素の割合"""
    check_same_shape(img, mask)
    inside = img.data[mask.bits]
    if inside.size == 0:
        raise DataError("マスクの面積がゼロです")
    return np.array([np.count_nonzero(inside < t) / inside.size for t in thresholds])


def geometric_features(img: GrayImage, mask: BinaryMask, fit: EllipseFit) -> GeometricFeatures:
    """
    幾何特徴を計算

    Args:
        img: 正規化済み・[0, 255] 再スケール済みの腎臓画像
        mask: img と同じフレームの腎臓マスク
        fit: 正規化前の元解像度マスクの楕円（腎臓の大きさを保持するため）
    """
    return GeometricFeatures(v_shape=shape_features(fit.l1, fit.l2),
                             v_block=block_features(img, mask))


def geometric_names() -> List[str]:
    return [f"geo_shape_{i}" for i in range(8)] + [f"geo_block_{i}" for i in range(10)]
