"""
featuremaps.py - 3チャンネル疑似カラー画像の生成

正規化済み腎臓画像から
  R: 元画像 f_I（[0, 255] に再スケール）
  G: 相対勾配 f_G = √(g_x² + g_y²) / f_I
  B: Canny エッジへの距離変換 f_D
を計算し、CNN に入力できる 3 チャンネル画像を組み立てます。

距離変換はサンプル関数の距離変換（下側包絡線による 2 パス 1 次元アルゴリズム）
で厳密に計算します。
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from ..exceptions import DimensionMismatchError, ValidationError
from ..utils.config import CannyConfig, FeatureMapConfig
from .imaging import BinaryMask, GrayImage, apply_mask, rescale_to_255
from .normalize import NormalizedImage

logger = logging.getLogger(__name__)

# 距離変換で +∞ の代わりに使う値。有限値同士の比較を壊さない大きさ
_FAR = 1e20


@dataclass(frozen=True, eq=False)
class EdgeMap:
    """エッジ画素の集合（edges[row, col] が True の画素）"""

    edges: np.ndarray

    def __post_init__(self):
        array = np.array(self.edges, dtype=bool)
        if array.ndim != 2:
            raise ValidationError(f"EdgeMap は 2 次元配列が必要です: {array.shape}")
        array.setflags(write=False)
        object.__setattr__(self, "edges", array)

    @classmethod
    def from_coordinates(cls, width: int, height: int, coords) -> "EdgeMap":
        """(x, y) 座標の集合から作成"""
        array = np.zeros((height, width), dtype=bool)
        for x, y in coords:
            if not (0 <= x < width and 0 <= y < height):
                raise ValidationError(f"エッジ座標が範囲外です: ({x}, {y})")
            array[y, x] = True
        return cls(array)

    @property
    def width(self) -> int:
        return self.edges.shape[1]

    @property
    def height(self) -> int:
        return self.edges.shape[0]

    def __len__(self) -> int:
        return int(self.edges.sum())


@dataclass(frozen=True, eq=False)
class ChannelStack:
    """R（強度）、G（勾配）、B（距離変換）の 3 平面"""

    r: GrayImage
    g: GrayImage
    b: GrayImage

    def __post_init__(self):
        if not (self.r.shape == self.g.shape == self.b.shape):
            raise DimensionMismatchError("3 平面のサイズが一致しません")
        for name in ("r", "g", "b"):
            data = getattr(self, name).data
            if data.min() < 0 or data.max() > 255:
                raise ValidationError(f"{name} 平面の値が [0, 255] の範囲外です")

    def plane(self, name: str) -> GrayImage:
        return {"r": self.r, "g": self.g, "b": self.b}[name]

    def as_array(self) -> np.ndarray:
        """(height, width, 3) の float32 配列"""
        return np.stack([self.r.data, self.g.data, self.b.data], axis=-1).astype(np.float32)

    @classmethod
    def from_array(cls, array: np.ndarray) -> "ChannelStack":
        return cls(GrayImage(array[..., 0]), GrayImage(array[..., 1]), GrayImage(array[..., 2]))


def central_gradient(img: GrayImage) -> np.ndarray:
    """
    中心差分による勾配強度 g = √(g_x² + g_y²)

    境界は端の画素を複製して差分を取ります。
    """
    padded = np.pad(img.data, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    return np.sqrt(gx * gx + gy * gy)


def relative_gradient(img: GrayImage, eps: float = 1e-6) -> np.ndarray:
    """再スケール前の勾配特徴 f_G。f_I <= eps の画素は 0"""
    g = central_gradient(img)
    f = img.data
    out = np.zeros_like(f)
    inside = f > eps
    out[inside] = g[inside] / f[inside]
    return out


def gradient_map(img: GrayImage, eps: float = 1e-6) -> GrayImage:
    """勾配特徴マップ f_G を [0, 255] に再スケールして返す"""
    return rescale_to_255(GrayImage(relative_gradient(img, eps)))


def canny_edges(img: GrayImage, sigma: float = 1.4, low_frac: float = 0.1,
                high_frac: float = 0.2) -> EdgeMap:
    """
    Canny エッジ検出

    ガウス平滑化 → Sobel 勾配 → 非最大値抑制 → ヒステリシス閾値処理。
    閾値は勾配強度の最大値に対する割合で与えるため、強度の正のアフィン変換に
    対して結果は不変です。
    """
    CannyConfig(sigma=sigma, low_frac=low_frac, high_frac=high_frac)
    data = img.data
    lo, hi = data.min(), data.max()
    if hi <= lo:
        return EdgeMap(np.zeros(data.shape, dtype=bool))

    unit = (data - lo) / (hi - lo)
    smoothed = ndimage.gaussian_filter(unit, sigma, mode="nearest") if sigma > 0 else unit
    gx = ndimage.sobel(smoothed, axis=1, mode="nearest")
    gy = ndimage.sobel(smoothed, axis=0, mode="nearest")
    magnitude = np.hypot(gx, gy)
    peak = magnitude.max()
    if peak <= 0:
        return EdgeMap(np.zeros(data.shape, dtype=bool))

    thin = _non_maximum_suppression(magnitude, gx, gy)
    strong = thin >= high_frac * peak
    weak = thin >= low_frac * peak
    labels, count = ndimage.label(weak, structure=np.ones((3, 3), dtype=bool))
    keep = np.zeros(count + 1, dtype=bool)
    keep[np.unique(labels[strong])] = True
    keep[0] = False
    return EdgeMap(keep[labels])


def _non_maximum_suppression(magnitude: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    angle = np.rad2deg(np.arctan2(gy, gx)) % 180.0
    padded = np.pad(magnitude, 1, mode="constant")
    h, w = magnitude.shape

    def shifted(dr: int, dc: int) -> np.ndarray:
        return padded[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]

    # 勾配方向の (行, 列) ステップ
    sectors = [
        ((angle < 22.5) | (angle >= 157.5), (0, 1)),
        ((angle >= 22.5) & (angle < 67.5), (1, 1)),
        ((angle >= 67.5) & (angle < 112.5), (1, 0)),
        ((angle >= 112.5) & (angle < 157.5), (1, -1)),
    ]
    keep = np.zeros(magnitude.shape, dtype=bool)
    for selector, (dr, dc) in sectors:
        ahead = shifted(dr, dc)
        behind = shifted(-dr, -dc)
        # 同値の尾根は片側だけ残す
        keep |= selector & (magnitude > ahead) & (magnitude >= behind)
    return np.where(keep, magnitude, 0.0)


def _dt_1d(f):
    """1 次元サンプル関数の距離変換 d(p) = min_q f(q) + (p − q)²"""
    n = len(f)
    v = [0] * n
    z = [0.0] * (n + 1)
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        fq = f[q] + q * q
        while True:
            p = v[k]
            s = (fq - (f[p] + p * p)) / (2 * q - 2 * p)
            if s > z[k]:
                break
            k -= 1
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    d = [0.0] * n
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        p = v[k]
        d[q] = (q - p) * (q - p) + f[p]
    return d


def distance_transform_sampled(f: np.ndarray) -> np.ndarray:
    """
    2 次元サンプル関数の一般化距離変換

    d(p) = min_q f(q) + ‖p − q‖² を列方向、行方向の 2 パスで厳密に計算します。
    f の +∞ は「サンプル点なし」を表します。
    """
    values = np.array(f, dtype=np.float64)
    if values.ndim != 2:
        raise ValidationError(f"2 次元配列が必要です: {values.shape}")
    values = np.where(np.isinf(values), _FAR, values)
    columns = np.array([_dt_1d(col) for col in values.T.tolist()]).T
    result = np.array([_dt_1d(row) for row in columns.tolist()])
    result[result >= _FAR / 2] = np.inf
    return result


def squared_edge_distance(edges: EdgeMap) -> np.ndarray:
    """各画素から最も近いエッジ画素までの二乗ユークリッド距離（空なら全ゼロ）"""
    if not edges.edges.any():
        return np.zeros(edges.edges.shape)
    f = np.where(edges.edges, 0.0, np.inf)
    return distance_transform_sampled(f)


def distance_transform(edges: EdgeMap, squared: bool = False) -> GrayImage:
    """距離変換特徴マップ f_D（既定はユークリッド距離）を [0, 255] で返す"""
    d2 = squared_edge_distance(edges)
    return rescale_to_255(GrayImage(d2 if squared else np.sqrt(d2)))


def build_stack(norm: NormalizedImage, cfg: Optional[FeatureMapConfig] = None) -> ChannelStack:
    """
    正規化画像から 3 チャンネル画像を構築

    各平面は腎臓領域でマスクしてから [0, 255] に再スケールします。
    """
    cfg = cfg or FeatureMapConfig()
    mask = norm.mask
    r = rescale_to_255(apply_mask(norm.image, mask))

    g_raw = relative_gradient(r, cfg.gradient_eps)
    g = _masked_rescale(g_raw, mask)

    if cfg.dt_source == "intensity":
        b_raw = distance_transform_sampled(r.data)
    else:
        edges = canny_edges(r, cfg.canny.sigma, cfg.canny.low_frac, cfg.canny.high_frac)
        b_raw = squared_edge_distance(edges)
        if not cfg.dt_squared:
            b_raw = np.sqrt(b_raw)
        logger.debug("Canny エッジ画素数: %d", len(edges))
    b = _masked_rescale(b_raw, mask)
    return ChannelStack(r=r, g=g, b=b)


def _masked_rescale(raw: np.ndarray, mask: BinaryMask) -> GrayImage:
    return rescale_to_255(apply_mask(GrayImage(raw), mask))
