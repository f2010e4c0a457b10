"""
data_loader.py - 画像・マニフェスト・特徴量ファイルの読み書き

8bit 単一チャンネルの PNG / バイナリ PGM (P5) の画像とマスク、
サンプル一覧を記述したマニフェスト CSV、特徴量 CSV を扱います。
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd
from PIL import Image
from PIL.PngImagePlugin import PngInfo

from ..exceptions import DataError, ValidationError
from .imaging import BinaryMask, GrayImage

logger = logging.getLogger(__name__)

LABEL_ALIASES = {"-1": -1, "+1": 1, "1": 1, "normal": -1, "cakut": 1}
SIDES = ("left", "right")
MANIFEST_COLUMNS = ["sample_id", "subject_id", "side", "label", "image_path", "mask_path"]
META_COLUMNS = ["sample_id", "subject_id", "side", "label"]


@dataclass(frozen=True)
class ManifestRow:
    sample_id: str
    subject_id: str
    side: str
    label: int
    image_path: Path
    mask_path: Path


@dataclass(frozen=True)
class Manifest:
    rows: List[ManifestRow]
    source: Optional[Path] = None

    def __len__(self) -> int:
        return len(self.rows)


class DataLoader:
    """画像とマニフェストの読み込みクラス"""

    def __init__(self):
        self.supported_formats = [".png", ".pgm"]

    def load_image(self, file_path: Union[str, Path]) -> GrayImage:
        """
        8bit グレースケール画像を読み込み

        Args:
            file_path: PNG または PGM (P5) ファイルのパス

        Returns:
            実数値の GrayImage
        """
        return GrayImage(self._load_raster(file_path).astype(np.float64))

    def load_mask(self, file_path: Union[str, Path]) -> BinaryMask:
        """マスク画像を読み込み（値 128 以上を inside とする）"""
        return BinaryMask(self._load_raster(file_path) >= 128)

    def _load_raster(self, file_path: Union[str, Path]) -> np.ndarray:
        file_path = Path(file_path)

        if not file_path.exists():
            raise DataError(f"ファイルが見つかりません: {file_path}")

        if file_path.suffix.lower() not in self.supported_formats:
            raise ValidationError(f"サポートされていないファイル形式: {file_path.suffix}")

        try:
            with Image.open(file_path) as im:
                if im.mode not in ("L", "1", "P"):
                    raise ValidationError(f"単一チャンネル 8bit 画像のみ対応しています ({im.mode}): {file_path}")
                return np.array(im.convert("L"), dtype=np.uint8)
        except OSError as e:
            raise DataError(f"画像ファイルの読み込みに失敗: {file_path}: {e}")

    def save_image(self, img: GrayImage, output_path: Union[str, Path],
                   metadata: Optional[Dict[str, str]] = None) -> None:
        """画像を 8bit PNG で保存（量子化はここでのみ行う）"""
        raster = np.clip(np.rint(img.data), 0, 255).astype(np.uint8)
        self._save_raster(raster, output_path, metadata)

    def save_mask(self, mask: BinaryMask, output_path: Union[str, Path],
                  metadata: Optional[Dict[str, str]] = None) -> None:
        self._save_raster(mask.bits.astype(np.uint8) * 255, output_path, metadata)

    def save_rgb(self, planes: List[GrayImage], output_path: Union[str, Path],
                 metadata: Optional[Dict[str, str]] = None) -> None:
        raster = np.stack([np.clip(np.rint(p.data), 0, 255) for p in planes], axis=-1).astype(np.uint8)
        self._save_raster(raster, output_path, metadata)

    def _save_raster(self, raster: np.ndarray, output_path: Union[str, Path],
                     metadata: Optional[Dict[str, str]]) -> None:
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        info = PngInfo()
        for key, value in (metadata or {}).items():
            info.add_text(key, str(value))
        Image.fromarray(raster).save(output_path, format="PNG", pnginfo=info)

    def load_manifest(self, file_path: Union[str, Path], check_paths: bool = True) -> Manifest:
        """
        マニフェスト CSV を読み込み検証

        相対パスはマニフェストのあるディレクトリ基準で解決します。
        """
        file_path = Path(file_path)
        if not file_path.exists():
            raise ValidationError(f"マニフェストが見つかりません: {file_path}")

        df = pd.read_csv(file_path, dtype=str, comment="#").fillna("")
        missing = [c for c in MANIFEST_COLUMNS if c not in df.columns]
        if missing:
            raise ValidationError(f"マニフェストに必要な列がありません: {', '.join(missing)}")

        base = file_path.parent
        rows = []
        problems = []
        for i, rec in enumerate(df.to_dict("records")):
            where = f"{file_path.name}:{i + 2}"
            try:
                label = parse_label(rec["label"])
                side = parse_side(rec["side"])
            except ValidationError as e:
                problems.append(f"{where}: {e}")
                continue
            image_path = _resolve(base, rec["image_path"])
            mask_path = _resolve(base, rec["mask_path"])
            if check_paths:
                for p in (image_path, mask_path):
                    if not p.exists():
                        problems.append(f"{where}: ファイルが見つかりません: {p}")
            rows.append(ManifestRow(
                sample_id=rec["sample_id"].strip(),
                subject_id=(rec["subject_id"].strip() or rec["sample_id"].strip()),
                side=side,
                label=label,
                image_path=image_path,
                mask_path=mask_path,
            ))

        ids = [r.sample_id for r in rows]
        duplicates = sorted({s for s in ids if ids.count(s) > 1})
        if duplicates:
            problems.append(f"sample_id が重複しています: {', '.join(duplicates)}")
        if problems:
            raise ValidationError("マニフェストの検証に失敗:\n  " + "\n  ".join(problems))

        logger.info("マニフェスト読み込み完了: %d 行 (%s)", len(rows), file_path)
        return Manifest(rows=rows, source=file_path)

    def save_manifest(self, manifest: Manifest, output_path: Union[str, Path]) -> None:
        output_path = Path(output_path)
        base = output_path.parent
        records = []
        for r in manifest.rows:
            records.append({
                "sample_id": r.sample_id,
                "subject_id": r.subject_id,
                "side": r.side,
                "label": "cakut" if r.label == 1 else "normal",
                "image_path": _relative(base, r.image_path),
                "mask_path": _relative(base, r.mask_path),
            })
        pd.DataFrame.from_records(records, columns=MANIFEST_COLUMNS).to_csv(output_path, index=False)

    def save_features(self, df: pd.DataFrame, output_path: Union[str, Path],
                      header: Optional[Dict[str, str]] = None) -> None:
        """特徴量 CSV を保存"""
        self.save_table(df, output_path, header)

    def save_table(self, df: pd.DataFrame, output_path: Union[str, Path],
                   header: Optional[Dict[str, str]] = None) -> None:
        """CSV を保存。header は先頭の # 行に埋め込む"""
        output_path = Path(output_path)
        output_path.parent.mkdir(parents=True, exist_ok=True)
        with open(output_path, "w", encoding="utf-8", newline="") as f:
            if header:
                f.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
            df.to_csv(f, index=False, float_format="%.10g", lineterminator="\n")

    def load_features(self, file_path: Union[str, Path]) -> pd.DataFrame:
        """特徴量 CSV を読み込み（# 行は無視）"""
        file_path = Path(file_path)
        if not file_path.exists():
            raise ValidationError(f"特徴量ファイルが見つかりません: {file_path}")
        df = pd.read_csv(file_path, comment="#", dtype={"sample_id": str, "subject_id": str})
        missing = [c for c in ("sample_id", "side", "label") if c not in df.columns]
        if missing:
            raise ValidationError(f"特徴量ファイルに必要な列がありません: {', '.join(missing)}")
        if "subject_id" not in df.columns:
            df.insert(1, "subject_id", df["sample_id"])
        return df


def parse_label(value: Any) -> int:
    key = str(value).strip().lower()
    if key not in LABEL_ALIASES:
        raise ValidationError(f"ラベルは -1/+1 または normal/cakut が必要です: {value!r}")
    return LABEL_ALIASES[key]


def parse_side(value: Any) -> str:
    side = str(value).strip().lower()
    if side not in SIDES:
        raise ValidationError(f"side は left/right のいずれか: {value!r}")
    return side


def _resolve(base: Path, value: str) -> Path:
    p = Path(value.strip())
    return p if p.is_absolute() else base / p


def _relative(base: Path, path: Path) -> str:
    try:
        return str(Path(path).resolve().relative_to(base.resolve()))
    except ValueError:
        return str(path)
