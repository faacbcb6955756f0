# hsi_paws/core/encoder.py
"""
畳み込みエンコーダー f(θ): R^{p×p×B} → R^d
3D 畳み込み → ReLU → チャネル折り畳み → 3 × (深さ方向分離可能畳み込み → ReLU) → 大域平均プーリング
"""

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple, Union

import numpy as np

from hsi_paws.core.autodiff import (
    ParamStore,
    conv3d, conv3d_backward,
    dsconv2d, dsconv2d_backward,
    relu, relu_backward,
    global_avg_pool, global_avg_pool_backward
)
from hsi_paws.core.models import Patch
from hsi_paws.core.exceptions import (
    ConfigurationError,
    ShapeError,
    ModelFormatError,
    ModelTruncatedError,
    StorageError
)
from utils.logger import get_logger

MODEL_MAGIC = b"PAWM"
MODEL_VERSION = 1
MODEL_HEADER = struct.Struct("<4sHI")

logger = get_logger()


@dataclass(frozen=True)
class EncoderConfig:
    """エンコーダーの構成"""
    patch_size: int
    bands: int
    spectral_kernel: int = 7
    spectral_stride: int = 2
    conv3d_channels: int = 8
    ds_widths: Tuple[int, ...] = (64, 64, 64)
    embedding_dim: int = 64

    def __post_init__(self):
        object.__setattr__(self, 'ds_widths', tuple(int(w) for w in self.ds_widths))
        self.validate()

    def validate(self) -> None:
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigurationError(f"パッチサイズは正の奇数: {self.patch_size}", "data.patch_size")
        if self.spectral_kernel < 1 or self.spectral_kernel > self.bands:
            raise ConfigurationError(
                f"スペクトルカーネル {self.spectral_kernel} はバンド数 {self.bands} 以下である必要があります",
                "encoder.spectral_kernel"
            )
        if self.spectral_stride < 1:
            raise ConfigurationError(f"スペクトルストライドは1以上: {self.spectral_stride}", "encoder.spectral_stride")
        if self.conv3d_channels < 1:
            raise ConfigurationError(f"3D畳み込みチャネル数は1以上: {self.conv3d_channels}", "encoder.conv3d_channels")
        if len(self.ds_widths) != 3:
            raise ConfigurationError(f"ds_widths はちょうど3要素: {list(self.ds_widths)}", "encoder.ds_widths")
        if any(w < 1 for w in self.ds_widths):
            raise ConfigurationError(f"ds_widths は正の整数: {list(self.ds_widths)}", "encoder.ds_widths")
        if self.ds_widths[-1] != self.embedding_dim:
            raise ConfigurationError(
                f"ds_widths の最後 {self.ds_widths[-1]} は埋め込み次元 {self.embedding_dim} と一致する必要があります",
                "encoder.ds_widths"
            )

    @property
    def reduced_bands(self) -> int:
        """3D 畳み込み後のバンド数 B'"""
        return (self.bands - self.spectral_kernel) // self.spectral_stride + 1

    @property
    def folded_channels(self) -> int:
        """折り畳み後のチャネル数 c·B'"""
        return self.conv3d_channels * self.reduced_bands

    def parameter_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes = {"conv3d.kernel": (self.conv3d_channels, 1, self.spectral_kernel, 3, 3)}
        width_in = self.folded_channels
        for i, width_out in enumerate(self.ds_widths):
            shapes[f"ds{i}.depthwise"] = (width_in, 3, 3)
            shapes[f"ds{i}.pointwise"] = (width_out, width_in)
            width_in = width_out
        return shapes

    @classmethod
    def from_config(cls, section, patch_size: int, bands: int) -> 'EncoderConfig':
        """設定の [encoder] セクションから作成"""
        return cls(
            patch_size=patch_size,
            bands=bands,
            spectral_kernel=section.spectral_kernel,
            spectral_stride=section.spectral_stride,
            conv3d_channels=section.conv3d_channels,
            ds_widths=tuple(section.ds_widths),
            embedding_dim=section.embedding_dim
        )


def _fan_in(shape: Tuple[int, ...]) -> int:
    if len(shape) == 5:
        return shape[1] * shape[2] * shape[3] * shape[4]
    if len(shape) == 3:
        return shape[1] * shape[2]
    return shape[1]


def build_encoder(cfg: EncoderConfig, seed: int) -> ParamStore:
    """He 一様分布で初期化したパラメータストア（float32 で表現可能な値）"""
    cfg.validate()
    rng = np.random.default_rng(seed)
    params = ParamStore()
    for name, shape in cfg.parameter_shapes().items():
        bound = np.sqrt(6.0 / _fan_in(shape))
        values = rng.uniform(-bound, bound, size=shape).astype(np.float32)
        params.add(name, values.astype(np.float64))
    logger.debug(f"エンコーダー初期化: {params.num_parameters()} パラメータ (seed={seed})")
    return params


def check_compatible(params: ParamStore, cfg: EncoderConfig) -> None:
    """パラメータストアが構成と一致するか確認"""
    expected = cfg.parameter_shapes()
    if sorted(params.names()) != sorted(expected):
        raise ShapeError("エンコーダーのパラメータ名が構成と一致しません", sorted(expected), sorted(params.names()))
    for name, shape in expected.items():
        if params.value(name).shape != shape:
            raise ShapeError(f"パラメータ {name} の形状が構成と一致しません", shape, params.value(name).shape)


class ConvEncoder:
    """パラメータストアに対するバッチ順伝播/逆伝播"""

    def __init__(self, cfg: EncoderConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    def _check_batch(self, batch: np.ndarray) -> None:
        expected = (self.cfg.patch_size, self.cfg.patch_size, self.cfg.bands)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ShapeError("エンコーダー入力の形状が一致しません", f"[batch,{expected}]", batch.shape)

    def forward(self, batch: np.ndarray) -> Tuple[np.ndarray, list]:
        """batch: [n,p,p,B] → 埋め込み [n,d]"""
        batch = np.asarray(batch, dtype=np.float64)
        self._check_batch(batch)
        n = batch.shape[0]
        p = self.cfg.patch_size
        caches = []

        x = batch.transpose(0, 3, 1, 2)[:, None]
        h, cache = conv3d(x, self.params.value("conv3d.kernel"), self.cfg.spectral_stride)
        caches.append(cache)
        h, mask = relu(h)
        caches.append(mask)
        folded_shape = h.shape
        h = h.reshape(n, self.cfg.folded_channels, p, p)

        for i in range(3):
            h, cache = dsconv2d(h, self.params.value(f"ds{i}.depthwise"), self.params.value(f"ds{i}.pointwise"))
            caches.append(cache)
            h, mask = relu(h)
            caches.append(mask)

        z, shape = global_avg_pool(h)
        caches.append(shape)
        return z, [folded_shape] + caches

    def backward(self, dz: np.ndarray, cache: list) -> np.ndarray:
        """勾配をパラメータストアに加算し、入力勾配 [n,p,p,B] を返す"""
        folded_shape, conv_cache, conv_mask = cache[0], cache[1], cache[2]
        ds_caches = cache[3:9]
        pool_shape = cache[9]

        dh = global_avg_pool_backward(dz, pool_shape)
        for i in reversed(range(3)):
            dh = relu_backward(dh, ds_caches[2 * i + 1])
            dh, d_depthwise, d_pointwise = dsconv2d_backward(dh, ds_caches[2 * i])
            self.params.accumulate(f"ds{i}.depthwise", d_depthwise)
            self.params.accumulate(f"ds{i}.pointwise", d_pointwise)

        dh = relu_backward(dh.reshape(folded_shape), conv_mask)
        dx, d_kernel = conv3d_backward(dh, conv_cache)
        self.params.accumulate("conv3d.kernel", d_kernel)
        return dx[:, 0].transpose(0, 2, 3, 1)


def encode(params: ParamStore, batch: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    """バッチを埋め込む（勾配なし）"""
    z, _ = ConvEncoder(cfg, params).forward(batch)
    return z


def stack_patches(patches: Sequence[Patch]) -> np.ndarray:
    """有限値を確認して (n, p, p, B) の float64 バッチに積む"""
    for patch in patches:
        patch.validate()
    return np.stack([np.asarray(patch.values, dtype=np.float64) for patch in patches])


def embed_patches(params: ParamStore, cfg: EncoderConfig, patches: Sequence[Patch],
                  batch_size: int = 256) -> np.ndarray:
    """パッチ列をバッチ単位で埋め込む"""
    if not patches:
        return np.zeros((0, cfg.embedding_dim))
    encoder = ConvEncoder(cfg, params)
    chunks = []
    for start in range(0, len(patches), batch_size):
        z, _ = encoder.forward(stack_patches(patches[start:start + batch_size]))
        chunks.append(z)
    return np.concatenate(chunks, axis=0)


# モデルファイル（PAWM）

def save_model(params: ParamStore, path: Union[str, Path]) -> None:
    """パラメータを float32 リトルエンディアンで書き出す"""
    path = Path(path)
    parts: List[bytes] = [MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, len(params))]
    for name, entry in params.items():
        encoded = name.encode('utf-8')
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", entry.value.ndim))
        parts.append(struct.pack(f"<{entry.value.ndim}I", *entry.value.shape))
        parts.append(np.ascontiguousarray(entry.value, dtype="<f4").tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as e:
        raise StorageError(f"モデルファイルに書き込めません: {path}", e)
    logger.info(f"モデル保存: {path} ({params.num_parameters()} パラメータ)")


def read_model(path: Union[str, Path]) -> ParamStore:
    """PAWM ファイルを読み込む（2次元以上のパラメータは LARS 適用）"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise StorageError(f"モデルファイルを開けません: {path}", e)

    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError("モデルファイルのマジックが不正です", str(path))
    if len(data) < MODEL_HEADER.size:
        raise ModelTruncatedError(MODEL_HEADER.size, len(data), str(path))
    _, version, count = MODEL_HEADER.unpack_from(data)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"未対応のモデルバージョンです: {version}", str(path))

    params = ParamStore()
    offset = MODEL_HEADER.size
    try:
        for _ in range(count):
            (name_length,) = struct.unpack_from("<H", data, offset)
            offset += 2
            name = data[offset:offset + name_length].decode('utf-8')
            offset += name_length
            (rank,) = struct.unpack_from("<B", data, offset)
            offset += 1
            shape = struct.unpack_from(f"<{rank}I", data, offset)
            offset += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            if offset + 4 * size > len(data):
                raise ModelTruncatedError(offset + 4 * size, len(data), str(path))
            values = np.frombuffer(data, dtype="<f4", count=size, offset=offset).reshape(shape)
            offset += 4 * size
            params.add(name, values.astype(np.float64), lars_adapt=rank > 1)
    except struct.error:
        raise ModelTruncatedError(offset, len(data), str(path))

    if offset != len(data):
        raise ModelFormatError(f"モデルファイル末尾に余分なデータがあります ({len(data) - offset} バイト)", str(path))
    return params
