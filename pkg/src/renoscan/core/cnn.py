"""
cnn.py - 畳み込みニューラルネットワークの推論エンジン

AlexNet 型トポロジー（畳み込み、ReLU、局所応答正規化、最大プーリング、
全結合、softmax）の順伝播だけを numpy で実装し、3 チャンネル画像から
転移学習特徴量を取り出します。

テンソルは (height, width, channels) の行優先 float32 配列です。
畳み込みは im2col + 行列積で計算し、定義通りの素朴な実装と 1e-4 以内で
一致します。

重みアーカイブは manifest.json（層名 → テンソル形状とバイトオフセット）と
weights.bin（リトルエンディアン float32）の組で、ディレクトリまたは zip に格納します。
"""

import io
import json
import logging
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..exceptions import ShapeMismatchError, ValidationError, WeightArchiveError
from .feature_sets import FeatureSet, FeatureVector, family_names
from .featuremaps import ChannelStack

logger = logging.getLogger(__name__)

Tensor = np.ndarray
Shape = Tuple[int, int, int]

ARCHIVE_FORMAT = "renoscan-weights"
ARCHIVE_VERSION = 1


@dataclass(frozen=True)
class Layer:
    name: str
    kind: str
    kernel: Tuple[int, int] = (1, 1)
    in_channels: int = 0
    out_channels: int = 0
    stride: int = 1
    pad: int = 0
    groups: int = 1
    depth: int = 5
    k: float = 2.0
    alpha: float = 1e-4
    beta: float = 0.75
    window: int = 3
    in_features: int = 0
    out_features: int = 0

    @property
    def has_weights(self) -> bool:
        return self.kind in ("conv", "fc")

    def weight_shapes(self) -> Tuple[Tuple[int, ...], Tuple[int, ...]]:
        if self.kind == "conv":
            kh, kw = self.kernel
            return (kh, kw, self.in_channels // self.groups, self.out_channels), (self.out_channels,)
        if self.kind == "fc":
            return (self.in_features, self.out_features), (self.out_features,)
        raise ValidationError(f"層 '{self.name}' は重みを持ちません")

    def to_dict(self) -> dict:
        base = {"name": self.name, "type": self.kind}
        if self.kind == "conv":
            base.update(kernel=list(self.kernel), in_channels=self.in_channels,
                        out_channels=self.out_channels, stride=self.stride, pad=self.pad,
                        groups=self.groups)
        elif self.kind == "lrn":
            base.update(depth=self.depth, k=self.k, alpha=self.alpha, beta=self.beta)
        elif self.kind == "pool":
            base.update(window=self.window, stride=self.stride)
        elif self.kind == "fc":
            base.update(in_features=self.in_features, out_features=self.out_features)
        return base

    @classmethod
    def from_dict(cls, data: dict) -> "Layer":
        data = dict(data)
        kind = data.pop("type")
        if kind not in ("conv", "relu", "lrn", "pool", "fc", "softmax"):
            raise ValidationError(f"未知の層タイプ: {kind}")
        if "kernel" in data:
            data["kernel"] = tuple(data["kernel"])
        return cls(kind=kind, **data)


def conv(name, kernel, cin, cout, stride=1, pad=0, groups=1) -> Layer:
    return Layer(name=name, kind="conv", kernel=(kernel, kernel), in_channels=cin,
                 out_channels=cout, stride=stride, pad=pad, groups=groups)


def relu(name) -> Layer:
    return Layer(name=name, kind="relu")


def lrn(name, depth=5, k=2.0, alpha=1e-4, beta=0.75) -> Layer:
    return Layer(name=name, kind="lrn", depth=depth, k=k, alpha=alpha, beta=beta)


def pool(name, window=3, stride=2) -> Layer:
    return Layer(name=name, kind="pool", window=window, stride=stride)


def fc(name, fin, fout) -> Layer:
    return Layer(name=name, kind="fc", in_features=fin, out_features=fout)


def softmax_layer(name) -> Layer:
    return Layer(name=name, kind="softmax")


@dataclass(frozen=True)
class NetworkSpec:
    """順序付きの層リストと入力形状"""

    layers: Tuple[Layer, ...]
    input_shape: Shape = (227, 227, 3)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        names = [layer.name for layer in self.layers]
        if len(set(names)) != len(names):
            raise ValidationError("層名が重複しています")

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise ValidationError(f"層が見つかりません: {name}")

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise ValidationError(f"タップ層が見つかりません: {name}")

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, data: dict) -> "NetworkSpec":
        layers = tuple(Layer.from_dict(d) for d in data["layers"])
        return cls(layers=layers, input_shape=tuple(data.get("input_shape", (227, 227, 3))))

    @classmethod
    def from_json(cls, path: Union[str, Path]) -> "NetworkSpec":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"ネットワーク定義が見つかりません: {path}")
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def save_json(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2)


def alexnet_spec(n0: int = 227) -> NetworkSpec:
    """既定の AlexNet トポロジー（畳み込み 2, 4, 5 層は 2 グループ）"""
    layers = [
        conv("conv1", 11, 3, 96, stride=4), relu("relu1"), lrn("norm1"), pool("pool1"),
        conv("conv2", 5, 96, 256, pad=2, groups=2), relu("relu2"), lrn("norm2"), pool("pool2"),
        conv("conv3", 3, 256, 384, pad=1), relu("relu3"),
        conv("conv4", 3, 384, 384, pad=1, groups=2), relu("relu4"),
        conv("conv5", 3, 384, 256, pad=1, groups=2), relu("relu5"), pool("pool5"),
    ]
    spatial = _spatial_after(layers, n0)
    layers += [
        fc("fc6", spatial * spatial * 256, 4096), relu("relu6"),
        fc("fc7", 4096, 4096), relu("relu7"),
        fc("fc8", 4096, 1000), softmax_layer("prob"),
    ]
    return NetworkSpec(layers=tuple(layers), input_shape=(n0, n0, 3))


def _spatial_after(layers: Sequence[Layer], size: int) -> int:
    for layer in layers:
        if layer.kind == "conv":
            size = (size + 2 * layer.pad - layer.kernel[0]) // layer.stride + 1
        elif layer.kind == "pool":
            size = (size - layer.window) // layer.stride + 1
    return size


def infer_shapes(spec: NetworkSpec) -> List[Tuple[int, ...]]:
    """
    各層の出力形状を静的に推論

    Returns:
        層ごとの出力形状（畳み込み系は (H, W, C)、全結合以降は (N,)）

    Raises:
        ShapeMismatchError: 形状が合成できない層があった場合（層名付き）
    """
    shape: Tuple[int, ...] = tuple(spec.input_shape)
    shapes = []
    for layer in spec.layers:
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ShapeMismatchError(layer.name, "畳み込みには (H, W, C) 入力が必要です")
            h, w, c = shape
            if c != layer.in_channels:
                raise ShapeMismatchError(layer.name, f"入力チャンネル {c} != {layer.in_channels}")
            if layer.in_channels % layer.groups or layer.out_channels % layer.groups:
                raise ShapeMismatchError(layer.name, "groups がチャンネル数を割り切りません")
            kh, kw = layer.kernel
            ho = (h + 2 * layer.pad - kh) // layer.stride + 1
            wo = (w + 2 * layer.pad - kw) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeMismatchError(layer.name, "出力サイズが 0 以下です")
            shape = (ho, wo, layer.out_channels)
        elif layer.kind == "pool":
            if len(shape) != 3:
                raise ShapeMismatchError(layer.name, "プーリングには (H, W, C) 入力が必要です")
            h, w, c = shape
            ho = (h - layer.window) // layer.stride + 1
            wo = (w - layer.window) // layer.stride + 1
            if ho < 1 or wo < 1:
                raise ShapeMismatchError(layer.name, "出力サイズが 0 以下です")
            shape = (ho, wo, c)
        elif layer.kind == "fc":
            size = int(np.prod(shape))
            if size != layer.in_features:
                raise ShapeMismatchError(layer.name, f"入力次元 {size} != {layer.in_features}")
            shape = (layer.out_features,)
        elif layer.kind == "lrn" and len(shape) != 3:
            raise ShapeMismatchError(layer.name, "LRN には (H, W, C) 入力が必要です")
        shapes.append(shape)
    return shapes


# ---- 重みアーカイブ ----

@dataclass(frozen=True, eq=False)
class WeightArchive:
    """層名 → (kernel, bias) の不変な重み集合"""

    tensors: Dict[str, Tuple[np.ndarray, np.ndarray]]
    manifest: Dict = field(default_factory=dict)

    def __post_init__(self):
        for kernel, bias in self.tensors.values():
            kernel.setflags(write=False)
            bias.setflags(write=False)

    def kernel(self, name: str) -> np.ndarray:
        return self.tensors[name][0]

    def bias(self, name: str) -> np.ndarray:
        return self.tensors[name][1]


def random_weights(spec: NetworkSpec, seed: int = 0) -> WeightArchive:
    """シード付き He 正規分布の重み（バイアスはゼロ）"""
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in spec.layers:
        if not layer.has_weights:
            continue
        kshape, bshape = layer.weight_shapes()
        fan_in = int(np.prod(kshape[:-1]))
        std = np.float32(np.sqrt(2.0 / fan_in))
        kernel = rng.standard_normal(kshape, dtype=np.float32) * std
        tensors[layer.name] = (kernel, np.zeros(bshape, dtype=np.float32))
    return WeightArchive(tensors=tensors, manifest=_manifest_for(tensors))


def _manifest_for(tensors: Dict[str, Tuple[np.ndarray, np.ndarray]]) -> Dict:
    offset = 0
    layers = {}
    for name, (kernel, bias) in tensors.items():
        entry = {}
        for role, array in (("kernel", kernel), ("bias", bias)):
            entry[role] = {"shape": list(array.shape), "offset": offset}
            offset += array.size * 4
        layers[name] = entry
    return {"format": ARCHIVE_FORMAT, "version": ARCHIVE_VERSION, "dtype": "<f4",
            "payload_bytes": offset, "layers": layers}


def save_weights(archive: WeightArchive, path: Union[str, Path]) -> None:
    """アーカイブを保存（.zip ならzip、それ以外はディレクトリ）"""
    path = Path(path)
    manifest = _manifest_for(archive.tensors)
    payload = io.BytesIO()
    for kernel, bias in archive.tensors.values():
        payload.write(np.ascontiguousarray(kernel, dtype="<f4").tobytes())
        payload.write(np.ascontiguousarray(bias, dtype="<f4").tobytes())
    manifest_text = json.dumps(manifest, indent=2)
    if path.suffix == ".zip":
        path.parent.mkdir(parents=True, exist_ok=True)
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", manifest_text)
            zf.writestr("weights.bin", payload.getvalue())
    else:
        path.mkdir(parents=True, exist_ok=True)
        (path / "manifest.json").write_text(manifest_text, encoding="utf-8")
        (path / "weights.bin").write_bytes(payload.getvalue())


def load_weights(path: Union[str, Path]) -> WeightArchive:
    """
    重みアーカイブを読み込み

    Raises:
        WeightArchiveError: ペイロード不足 ("truncated payload")、非有限値、マニフェスト不正
    """
    path = Path(path)
    if not path.exists():
        raise WeightArchiveError(f"重みアーカイブが見つかりません: {path}")
    try:
        if path.is_dir():
            manifest_bytes = (path / "manifest.json").read_bytes()
            payload = (path / "weights.bin").read_bytes()
        else:
            with zipfile.ZipFile(path) as zf:
                manifest_bytes = zf.read("manifest.json")
                payload = zf.read("weights.bin")
    except (OSError, KeyError, zipfile.BadZipFile) as e:
        raise WeightArchiveError(f"重みアーカイブを読めません ({path}): {e}") from e
    try:
        manifest = json.loads(manifest_bytes)
        layers = manifest["layers"]
    except (json.JSONDecodeError, KeyError) as e:
        raise WeightArchiveError(f"マニフェストの解析に失敗: {e}")

    tensors = {}
    for name, entry in layers.items():
        arrays = []
        for role in ("kernel", "bias"):
            if role not in entry:
                raise WeightArchiveError(f"{role} テンソルがありません", layer=name)
            shape = tuple(int(s) for s in entry[role]["shape"])
            offset = int(entry[role]["offset"])
            count = int(np.prod(shape))
            end = offset + count * 4
            if offset < 0 or end > len(payload):
                raise WeightArchiveError("truncated payload", layer=name)
            array = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
            array = array.reshape(shape).astype(np.float32)
            if not np.all(np.isfinite(array)):
                raise WeightArchiveError("non-finite weights", layer=name)
            arrays.append(array)
        tensors[name] = (arrays[0], arrays[1])
    logger.info("重みアーカイブ読み込み完了: %d 層 (%s)", len(tensors), path)
    return WeightArchive(tensors=tensors, manifest=manifest)


def validate_weights(spec: NetworkSpec, archive: WeightArchive) -> None:
    """アーカイブが spec と整合するか検証（不一致は層名付きで報告）"""
    weighted = {layer.name: layer for layer in spec.layers if layer.has_weights}
    for name in archive.tensors:
        if name not in weighted:
            raise WeightArchiveError("ネットワーク定義に存在しない層です", layer=name)
    for name, layer in weighted.items():
        if name not in archive.tensors:
            raise WeightArchiveError("重みがありません", layer=name)
        kshape, bshape = layer.weight_shapes()
        kernel, bias = archive.tensors[name]
        if kernel.shape != kshape:
            raise WeightArchiveError(f"kernel 形状 {kernel.shape} != {kshape}", layer=name)
        if bias.shape != bshape:
            raise WeightArchiveError(f"bias 形状 {bias.shape} != {bshape}", layer=name)


# ---- 層の演算 ----

def conv2d(x: Tensor, kernel: np.ndarray, bias: np.ndarray, stride: int = 1, pad: int = 0,
           groups: int = 1, layer: str = "conv") -> Tensor:
    """
    2 次元畳み込み

    out(h, w, o) = bias(o) + Σ in(h·s − p + i, w·s − p + j, c) · k(i, j, c, o)
    （c は o のグループ内のチャンネル、範囲外の入力は 0）

    Args:
        x: (H, W, C) 入力
        kernel: (kh, kw, C/groups, O)
        bias: (O,)
    """
    if x.ndim != 3 or kernel.ndim != 4:
        raise ShapeMismatchError(layer, f"入力 {x.shape} / カーネル {kernel.shape} の次元が不正です")
    h, w, c = x.shape
    kh, kw, cg, out = kernel.shape
    if c % groups or out % groups or c // groups != cg:
        raise ShapeMismatchError(layer, f"入力チャンネル {c} とカーネル {kernel.shape} (groups={groups}) が不整合です")
    if bias.shape != (out,):
        raise ShapeMismatchError(layer, f"bias 形状 {bias.shape} != ({out},)")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeMismatchError(layer, "出力サイズが 0 以下です")

    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0))) if pad else x
    windows = sliding_window_view(xp, (kh, kw), axis=(0, 1))[::stride, ::stride][:ho, :wo]
    # (ho, wo, C, kh, kw) → (ho, wo, kh, kw, C)
    windows = windows.transpose(0, 1, 3, 4, 2)
    og = out // groups
    result = np.empty((ho * wo, out), dtype=np.float32)
    for g in range(groups):
        cols = windows[..., g * cg:(g + 1) * cg].reshape(ho * wo, kh * kw * cg)
        weights = kernel[..., g * og:(g + 1) * og].reshape(kh * kw * cg, og)
        result[:, g * og:(g + 1) * og] = np.matmul(cols.astype(np.float32), weights.astype(np.float32))
    result += bias.astype(np.float32)
    return result.reshape(ho, wo, out)


def relu_op(x: Tensor) -> Tensor:
    return np.maximum(x, 0, dtype=np.float32)


def lrn_op(x: Tensor, depth: int = 5, k: float = 2.0, alpha: float = 1e-4,
           beta: float = 0.75) -> Tensor:
    """チャンネル方向の局所応答正規化 b = a / (k + α Σ a²)^β"""
    half = depth // 2
    sq = np.pad(x.astype(np.float64) ** 2, ((0, 0), (0, 0), (half, half)))
    csum = np.concatenate([np.zeros(x.shape[:2] + (1,)), np.cumsum(sq, axis=2)], axis=2)
    c = x.shape[2]
    window = csum[:, :, depth:depth + c] - csum[:, :, 0:c]
    return (x / (k + alpha * window) ** beta).astype(np.float32)


def max_pool(x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
    ho = (x.shape[0] - window) // stride + 1
    wo = (x.shape[1] - window) // stride + 1
    views = sliding_window_view(x, (window, window), axis=(0, 1))[::stride, ::stride][:ho, :wo]
    return views.max(axis=(3, 4))


def fully_connected(x: Tensor, kernel: np.ndarray, bias: np.ndarray, layer: str = "fc") -> Tensor:
    flat = x.reshape(-1).astype(np.float32)
    if flat.size != kernel.shape[0]:
        raise ShapeMismatchError(layer, f"入力次元 {flat.size} != {kernel.shape[0]}")
    return np.matmul(flat, kernel.astype(np.float32)) + bias.astype(np.float32)


def softmax(x: Tensor) -> Tensor:
    flat = x.reshape(-1).astype(np.float64)
    e = np.exp(flat - flat.max())
    return (e / e.sum()).astype(np.float32)


class FeatureExtractor:
    """
    検証済みのネットワークと重みを保持し、3 チャンネル画像から特徴量を取り出す

    重みとネットワーク定義は読み取り専用なので、1 つのインスタンスを
    複数スレッドから同時に使えます。
    """

    def __init__(self, spec: NetworkSpec, weights: WeightArchive, tap: str = "relu7",
                 channel_means: Sequence[float] = (0.0, 0.0, 0.0),
                 mean_image: Optional[np.ndarray] = None):
        self.spec = spec
        self.weights = weights
        self.shapes = infer_shapes(spec)
        validate_weights(spec, weights)
        self.tap = tap
        self.tap_index = spec.index(tap)
        self.channel_means = np.asarray(channel_means, dtype=np.float32)
        self.mean_image = None
        if mean_image is not None:
            mean_image = np.asarray(mean_image, dtype=np.float32)
            if mean_image.shape != tuple(spec.input_shape):
                raise ValidationError(f"平均画像の形状 {mean_image.shape} != {spec.input_shape}")
            self.mean_image = mean_image

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.shapes[self.tap_index]))

    def preprocess(self, stack: ChannelStack) -> Tensor:
        x = stack.as_array()
        if x.shape != tuple(self.spec.input_shape):
            raise ShapeMismatchError("input", f"入力形状 {x.shape} != {self.spec.input_shape}")
        if self.mean_image is not None:
            x = x - self.mean_image
        return (x - self.channel_means).astype(np.float32)

    def run(self, x: Tensor, upto: Optional[int] = None) -> Tensor:
        """前処理済みテンソルを upto 番目の層（含む）まで伝播"""
        last = self.tap_index if upto is None else upto
        for layer in self.spec.layers[:last + 1]:
            x = self._apply(layer, x)
        return x

    def _apply(self, layer: Layer, x: Tensor) -> Tensor:
        if layer.kind == "conv":
            return conv2d(x, self.weights.kernel(layer.name), self.weights.bias(layer.name),
                          layer.stride, layer.pad, layer.groups, layer=layer.name)
        if layer.kind == "relu":
            return relu_op(x)
        if layer.kind == "lrn":
            return lrn_op(x, layer.depth, layer.k, layer.alpha, layer.beta)
        if layer.kind == "pool":
            return max_pool(x, layer.window, layer.stride)
        if layer.kind == "fc":
            return fully_connected(x, self.weights.kernel(layer.name), self.weights.bias(layer.name),
                                   layer=layer.name)
        return softmax(x)

    def extract(self, stack: ChannelStack) -> FeatureVector:
        activation = self.run(self.preprocess(stack)).reshape(-1)
        return FeatureVector(values=activation.astype(np.float64),
                             names=tuple(family_names("CNN", activation.size)),
                             provenance=FeatureSet.CNN)


def forward(spec: NetworkSpec, weights: WeightArchive, stack: ChannelStack, tap: str = "relu7",
            channel_means: Sequence[float] = (0.0, 0.0, 0.0),
            mean_image: Optional[np.ndarray] = None) -> FeatureVector:
    """stack を tap 層まで順伝播し、平坦化した活性を特徴量として返す"""
    return FeatureExtractor(spec, weights, tap, channel_means, mean_image).extract(stack)
