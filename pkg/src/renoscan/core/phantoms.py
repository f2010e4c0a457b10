"""
phantoms.py - 合成腎臓ファントムの生成

楕円形の「腎臓」を持つ超音波風の 8bit 画像とマスクを生成します。
CAKUT (+1) の腎臓には暗い欠損（穴）を入れ、縦横比をより丸く、
サイズをやや小さくします。受け入れ試験用の合成コーパスの生成に使います。
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy import ndimage

from ..utils.seeding import derive_rng
from .data_loader import DataLoader, Manifest, ManifestRow
from .imaging import BinaryMask, GrayImage

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhantomParams:
    """ファントムの形状パラメータ（画素単位、θ は反時計回り）"""

    cx: float
    cy: float
    a: float
    b: float
    theta: float
    holes: int


def ellipse_region(shape: Tuple[int, int], cx: float, cy: float, a: float, b: float,
                   theta: float) -> np.ndarray:
    """
    楕円内部のブール配列

    Args:
        shape: (高さ, 幅)
        cx, cy: 中心（列, 行）
        a, b: 半長軸・半短軸
        theta: 長軸の向き（+X から反時計回り、y は上向き）
    """
    rows, cols = np.indices(shape, dtype=np.float64)
    dx = cols - cx
    dy = -(rows - cy)
    c, s = math.cos(theta), math.sin(theta)
    u = dx * c + dy * s
    v = -dx * s + dy * c
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def draw_params(rng: np.random.Generator, label: int, size: int) -> PhantomParams:
    center = size / 2.0
    if label == 1:
        a = rng.uniform(0.25, 0.33) * size
        ratio = rng.uniform(0.62, 0.8)
        holes = int(rng.integers(2, 5))
    else:
        a = rng.uniform(0.3, 0.38) * size
        ratio = rng.uniform(0.42, 0.55)
        holes = 0
    return PhantomParams(
        cx=center + rng.uniform(-0.05, 0.05) * size,
        cy=center + rng.uniform(-0.05, 0.05) * size,
        a=a,
        b=a * ratio,
        theta=rng.uniform(-math.pi / 2, math.pi / 2),
        holes=holes,
    )


def render_phantom(rng: np.random.Generator, params: PhantomParams,
                   size: int) -> Tuple[GrayImage, BinaryMask]:
    """パラメータからファントム画像とマスクを描画"""
    shape = (size, size)
    inside = ellipse_region(shape, params.cx, params.cy, params.a, params.b, params.theta)

    image = rng.normal(50.0, 4.0, shape).clip(40, 60)
    # 腎実質: 緩やかな濃淡 + スペックル風ノイズ
    texture = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=size / 16)
    texture /= max(np.abs(texture).max(), 1e-12)
    interior = (150.0 + 30.0 * texture + rng.normal(0.0, 8.0, shape)).clip(100, 200)
    image[inside] = interior[inside]

    c, s = math.cos(params.theta), math.sin(params.theta)
    for _ in range(params.holes):
        # 楕円内部（軸の半分以内）に穴を置く
        u = rng.uniform(-0.5, 0.5) * params.a
        v = rng.uniform(-0.4, 0.4) * params.b
        hx = params.cx + u * c - v * s
        hy = params.cy - (u * s + v * c)
        radius = rng.uniform(0.06, 0.1) * params.a * 2
        hole = ellipse_region(shape, hx, hy, radius, radius * rng.uniform(0.7, 1.0),
                              rng.uniform(-math.pi / 2, math.pi / 2)) & inside
        image[hole] = rng.uniform(5, 20, shape)[hole]

    return GrayImage(np.rint(image)), BinaryMask(inside)


def generate_phantom(rng: np.random.Generator, label: int,
                     size: int = 160) -> Tuple[GrayImage, BinaryMask, PhantomParams]:
    params = draw_params(rng, label, size)
    image, mask = render_phantom(rng, params, size)
    return image, mask, params


def generate_corpus(out_dir: Union[str, Path], n_normal: int = 25, n_cakut: int = 25,
                    seed: int = 7, size: int = 160) -> Manifest:
    """
    合成コーパスを生成して manifest.csv を書き出す

    被験者ごとに左右 1 枚ずつ、計 2·(n_normal + n_cakut) 枚の画像を生成します。

    Returns:
        生成したマニフェスト（out_dir/manifest.csv にも保存）
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    loader = DataLoader()
    labels = [-1] * n_normal + [1] * n_cakut
    rows = []
    for index, label in enumerate(labels):
        subject = f"P{index + 1:03d}"
        for side in ("left", "right"):
            rng = derive_rng(seed, "phantom", index, side)
            image, mask, _ = generate_phantom(rng, label, size)
            sample_id = f"{subject}_{side[0].upper()}"
            image_path = out_dir / "images" / f"{sample_id}.png"
            mask_path = out_dir / "masks" / f"{sample_id}.png"
            loader.save_image(image, image_path)
            loader.save_mask(mask, mask_path)
            rows.append(ManifestRow(sample_id=sample_id, subject_id=subject, side=side,
                                    label=label, image_path=image_path, mask_path=mask_path))
    manifest = Manifest(rows=rows, source=out_dir / "manifest.csv")
    loader.save_manifest(manifest, out_dir / "manifest.csv")
    logger.info("ファントム生成完了: %d 枚 -> %s", len(rows), out_dir)
    return manifest
