"""
共通フィクスチャ

パイプライン系の試験は N0=64 と小さな CNN 定義で高速に動かします。
"""

import math
from pathlib import Path

import numpy as np
import pytest

from renoscan.core.cnn import NetworkSpec, conv, fc, pool, relu
from renoscan.core.data_loader import DataLoader, Manifest, ManifestRow
from renoscan.core.imaging import BinaryMask, GrayImage
from renoscan.core.phantoms import ellipse_region, generate_phantom
from renoscan.utils.config import PipelineConfig
from renoscan.utils.seeding import derive_rng

SMALL_N0 = 64


def tiny_spec(n0: int = SMALL_N0) -> NetworkSpec:
    """conv(5x5, stride 2) → pool → fc(16) → relu7"""
    spatial = ((n0 - 5) // 2 + 1 - 3) // 2 + 1
    layers = (
        conv("conv1", 5, 3, 4, stride=2), relu("relu1"), pool("pool1"),
        fc("fc7", spatial * spatial * 4, 16), relu("relu7"),
    )
    return NetworkSpec(layers=layers, input_shape=(n0, n0, 3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def ellipse_mask():
    """200x200 フレーム、中心 (100, 100)、半軸 40 / 20、θ=0"""
    return BinaryMask(ellipse_region((200, 200), 100.0, 100.0, 40.0, 20.0, 0.0))


@pytest.fixture
def tiny_spec_path(tmp_path) -> Path:
    path = tmp_path / "tiny_spec.json"
    tiny_spec().save_json(path)
    return path


@pytest.fixture
def small_config(tiny_spec_path) -> PipelineConfig:
    return PipelineConfig().merged({
        "normalization": {"n0": SMALL_N0},
        "cnn": {"spec": str(tiny_spec_path)},
        "cross_validation": {"k": 2, "repeats": 2, "seed": 7},
    })


def write_manifest(out_dir: Path, n_per_class: int = 2, size: int = 96, seed: int = 3) -> Path:
    """左右 1 枚ずつのファントムからなる小さなマニフェストを作成"""
    loader = DataLoader()
    rows = []
    labels = [-1] * n_per_class + [1] * n_per_class
    for index, label in enumerate(labels):
        subject = f"S{index + 1:02d}"
        for side in ("left", "right"):
            image, mask, _ = generate_phantom(derive_rng(seed, index, side), label, size)
            sample_id = f"{subject}_{side[0].upper()}"
            image_path = out_dir / "images" / f"{sample_id}.png"
            mask_path = out_dir / "masks" / f"{sample_id}.png"
            loader.save_image(image, image_path)
            loader.save_mask(mask, mask_path)
            rows.append(ManifestRow(sample_id, subject, side, label, image_path, mask_path))
    path = out_dir / "manifest.csv"
    loader.save_manifest(Manifest(rows=rows), path)
    return path


@pytest.fixture
def small_manifest(tmp_path) -> Path:
    """8 枚（正常 2 名 + CAKUT 2 名、左右）のマニフェスト"""
    return write_manifest(tmp_path / "corpus")


def rotated_ellipse_image(shape, cx, cy, a, b, theta, inside_value=150.0):
    region = ellipse_region(shape, cx, cy, a, b, theta)
    return GrayImage(np.where(region, inside_value, 0.0)), BinaryMask(region)


def brute_force_moments(bits: np.ndarray):
    """(cx, cy, L1, L2, θ) を素朴なループで計算"""
    rows, cols = np.nonzero(bits)
    n = rows.size
    cx = sum(cols.tolist()) / n
    cy = sum(rows.tolist()) / n
    s20 = s02 = s11 = 0.0
    for r, c in zip(rows.tolist(), cols.tolist()):
        dx = c - cx
        dy = cy - r
        s20 += dx * dx
        s02 += dy * dy
        s11 += dx * dy
    mu20, mu02, mu11 = s20 / n, s02 / n, s11 / n
    common = math.sqrt(((mu20 - mu02) / 2.0) ** 2 + mu11 ** 2)
    lam_max = (mu20 + mu02) / 2.0 + common
    lam_min = (mu20 + mu02) / 2.0 - common
    theta = 0.5 * math.atan2(2.0 * mu11, mu20 - mu02)
    return cx, cy, 4.0 * math.sqrt(lam_max), 4.0 * math.sqrt(lam_min), theta
