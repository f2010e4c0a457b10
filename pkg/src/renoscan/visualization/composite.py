"""
composite.py - 3 チャンネル画像の保存

R（強度）、G（勾配）、B（距離変換）の各平面と、それらを重ねた
疑似カラー画像を PNG で書き出します。
"""

from pathlib import Path
from typing import Dict, Optional, Union

from ..core.data_loader import DataLoader
from ..core.featuremaps import ChannelStack


def save_composite(stack: ChannelStack, prefix: Union[str, Path],
                   metadata: Optional[Dict[str, str]] = None) -> Dict[str, Path]:
    """
    prefix_r.png, prefix_g.png, prefix_b.png と prefix_rgb.png を保存

    Returns:
        平面名 → 保存先パス
    """
    loader = DataLoader()
    prefix = Path(prefix)
    paths = {}
    for name in ("r", "g", "b"):
        path = prefix.with_name(f"{prefix.name}_{name}.png")
        loader.save_image(stack.plane(name), path, metadata)
        paths[name] = path
    rgb = prefix.with_name(f"{prefix.name}_rgb.png")
    loader.save_rgb([stack.r, stack.g, stack.b], rgb, metadata)
    paths["rgb"] = rgb
    return paths


def load_stack(prefix: Union[str, Path]) -> ChannelStack:
    """save_composite で保存した 3 平面から ChannelStack を復元"""
    loader = DataLoader()
    prefix = Path(prefix)
    planes = [loader.load_image(prefix.with_name(f"{prefix.name}_{name}.png")) for name in ("r", "g", "b")]
    return ChannelStack(*planes)
