# hsi_paws/core/autodiff.py
"""
自動微分コア
エンコーダーが使う層の順伝播/逆伝播（解析勾配）、パラメータストア、数値勾配チェック
テンソルは float64 の numpy 配列（行優先）
"""

import hashlib
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Tuple

import numpy as np

from hsi_paws.core.exceptions import ConfigurationError, ValidationError, ShapeError, NumericError

NORM_FLOOR = 1e-12


# パラメータストア

@dataclass
class ParamEntry:
    """パラメータ1つ分（値・勾配・LARS 適用フラグ）"""
    value: np.ndarray
    grad: np.ndarray
    lars_adapt: bool


class ParamStore:
    """名前付きパラメータ θ の集合"""

    def __init__(self):
        self._entries: "OrderedDict[str, ParamEntry]" = OrderedDict()

    def add(self, name: str, value: np.ndarray, lars_adapt: Optional[bool] = None) -> None:
        """パラメータを追加（lars_adapt 省略時は2次元以上なら True）"""
        if name in self._entries:
            raise ValidationError(f"パラメータ名が重複しています: {name}", "name", name)
        value = np.array(value, dtype=np.float64)
        if lars_adapt is None:
            lars_adapt = value.ndim > 1
        self._entries[name] = ParamEntry(value=value, grad=np.zeros_like(value), lars_adapt=bool(lars_adapt))

    def _entry(self, name: str) -> ParamEntry:
        try:
            return self._entries[name]
        except KeyError:
            raise ValidationError(f"パラメータが存在しません: {name}", "name", name)

    def value(self, name: str) -> np.ndarray:
        return self._entry(name).value

    def grad(self, name: str) -> np.ndarray:
        return self._entry(name).grad

    def lars_adapt(self, name: str) -> bool:
        return self._entry(name).lars_adapt

    def set_value(self, name: str, value: np.ndarray) -> None:
        entry = self._entry(name)
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise ShapeError(f"パラメータ {name} の形状が一致しません", entry.value.shape, value.shape)
        entry.value[...] = value

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        """勾配を加算"""
        entry = self._entry(name)
        if grad.shape != entry.grad.shape:
            raise ShapeError(f"勾配 {name} の形状が一致しません", entry.grad.shape, grad.shape)
        entry.grad += grad

    def zero_grad(self) -> None:
        for entry in self._entries.values():
            entry.grad[...] = 0.0

    def names(self) -> List[str]:
        return list(self._entries.keys())

    def items(self) -> Iterator[Tuple[str, ParamEntry]]:
        return iter(self._entries.items())

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def num_parameters(self) -> int:
        return int(sum(entry.value.size for entry in self._entries.values()))

    def copy(self) -> 'ParamStore':
        """値・勾配ごとの深いコピー"""
        clone = ParamStore()
        for name, entry in self._entries.items():
            clone._entries[name] = ParamEntry(entry.value.copy(), entry.grad.copy(), entry.lars_adapt)
        return clone

    def merge(self, other: 'ParamStore') -> 'ParamStore':
        """2つのストアのエントリを共有する結合ストア"""
        merged = ParamStore()
        for store in (self, other):
            for name, entry in store.items():
                if name in merged:
                    raise ValidationError(f"結合するパラメータ名が重複しています: {name}", "name", name)
                merged._entries[name] = entry
        return merged

    def digest(self) -> str:
        """名前・形状・値のバイト列から計算する SHA-256"""
        sha = hashlib.sha256()
        for name, entry in self._entries.items():
            sha.update(name.encode('utf-8'))
            sha.update(str(entry.value.shape).encode('ascii'))
            sha.update(np.ascontiguousarray(entry.value).tobytes())
        return sha.hexdigest()


# 3D 畳み込み（スペクトル方向 valid・stride 付き, 空間 3×3 same）

def conv3d(x: np.ndarray, kernels: np.ndarray, stride: int) -> Tuple[np.ndarray, tuple]:
    """x: [n,1,B,p,p], kernels: [c,1,kb,3,3] → [n,c,B',p,p]"""
    if x.ndim != 5 or x.shape[1] != 1:
        raise ShapeError("conv3d の入力は [n,1,B,p,p] である必要があります", "[n,1,B,p,p]", x.shape)
    if kernels.ndim != 5 or kernels.shape[1] != 1 or kernels.shape[3:] != (3, 3):
        raise ShapeError("conv3d のカーネルは [c,1,kb,3,3] である必要があります", "[c,1,kb,3,3]", kernels.shape)
    if stride < 1:
        raise ConfigurationError(f"スペクトルストライドは1以上: {stride}", "encoder.spectral_stride")
    n, _, bands, rows, cols = x.shape
    kb = kernels.shape[2]
    if kb > bands:
        raise ShapeError(f"スペクトルカーネル {kb} が入力バンド数 {bands} を超えています", f"kb <= {bands}", kb)

    reduced = (bands - kb) // stride + 1
    span = stride * (reduced - 1) + 1
    xp = np.pad(x, ((0, 0), (0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, kernels.shape[0], reduced, rows, cols))
    for s in range(kb):
        for u in range(3):
            for v in range(3):
                window = xp[:, 0, s:s + span:stride, u:u + rows, v:v + cols]
                out += np.einsum('nbij,c->ncbij', window, kernels[:, 0, s, u, v])
    return out, (xp, kernels, stride, reduced)


def conv3d_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray]:
    """(入力勾配, カーネル勾配)"""
    xp, kernels, stride, reduced = cache
    rows, cols = xp.shape[3] - 2, xp.shape[4] - 2
    kb = kernels.shape[2]
    span = stride * (reduced - 1) + 1
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for s in range(kb):
        for u in range(3):
            for v in range(3):
                window = xp[:, 0, s:s + span:stride, u:u + rows, v:v + cols]
                dk[:, 0, s, u, v] = np.einsum('ncbij,nbij->c', dy, window)
                dxp[:, 0, s:s + span:stride, u:u + rows, v:v + cols] += np.einsum(
                    'ncbij,c->nbij', dy, kernels[:, 0, s, u, v]
                )
    return dxp[:, :, :, 1:-1, 1:-1], dk


# 深さ方向分離可能畳み込み

def dsconv2d(x: np.ndarray, depthwise: np.ndarray, pointwise: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """x: [n,c,p,p], depthwise: [c,3,3], pointwise: [c_out,c] → [n,c_out,p,p]"""
    if x.ndim != 4:
        raise ShapeError("dsconv2d の入力は [n,c,p,p] である必要があります", "[n,c,p,p]", x.shape)
    channels = x.shape[1]
    if depthwise.shape != (channels, 3, 3):
        raise ShapeError("depthwise カーネルのチャネル数が一致しません", (channels, 3, 3), depthwise.shape)
    if pointwise.ndim != 2 or pointwise.shape[1] != channels:
        raise ShapeError("pointwise 行列のチャネル数が一致しません", f"[c_out,{channels}]", pointwise.shape)

    rows, cols = x.shape[2], x.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    hidden = np.zeros_like(x, dtype=np.float64)
    for u in range(3):
        for v in range(3):
            hidden += xp[:, :, u:u + rows, v:v + cols] * depthwise[None, :, u, v, None, None]
    out = np.einsum('oc,ncij->noij', pointwise, hidden)
    return out, (xp, depthwise, pointwise, hidden)


def dsconv2d_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(入力勾配, depthwise 勾配, pointwise 勾配)"""
    xp, depthwise, pointwise, hidden = cache
    rows, cols = hidden.shape[2], hidden.shape[3]
    d_pointwise = np.einsum('noij,ncij->oc', dy, hidden)
    d_hidden = np.einsum('oc,noij->ncij', pointwise, dy)
    dxp = np.zeros_like(xp)
    d_depthwise = np.zeros_like(depthwise)
    for u in range(3):
        for v in range(3):
            d_depthwise[:, u, v] = np.einsum('ncij,ncij->c', d_hidden, xp[:, :, u:u + rows, v:v + cols])
            dxp[:, :, u:u + rows, v:v + cols] += d_hidden * depthwise[None, :, u, v, None, None]
    return dxp[:, :, 1:-1, 1:-1], d_depthwise, d_pointwise


# 全結合

def dense(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray] = None) -> Tuple[np.ndarray, tuple]:
    """y = x W^T + b"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("dense の入力と重みの形状が一致しません", f"[batch,{weight.shape[-1]}]", x.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("dense のバイアス形状が一致しません", (weight.shape[0],), bias.shape)
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out, (x, weight, bias is not None)


def dense_backward(dy: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """(入力勾配, 重み勾配, バイアス勾配)"""
    x, weight, has_bias = cache
    d_bias = dy.sum(axis=0) if has_bias else None
    return dy @ weight, dy.T @ x, d_bias


# 要素ごとの層・集約

def relu(x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mask = x > 0
    return np.where(mask, x, 0.0), mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    # 0 での劣勾配は 0
    return dy * mask


def global_avg_pool(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """[n,c,p,p] → [n,c]"""
    return x.mean(axis=(2, 3)), x.shape


def global_avg_pool_backward(dy: np.ndarray, shape: tuple) -> np.ndarray:
    rows, cols = shape[2], shape[3]
    return np.broadcast_to(dy[:, :, None, None] / (rows * cols), shape).copy()


def softmax_rows(x: np.ndarray, tau: float = 1.0) -> Tuple[np.ndarray, tuple]:
    """行ごとに exp(x/τ) を正規化"""
    if tau <= 0:
        raise ConfigurationError(f"温度 τ は正である必要があります: {tau}", "paws.tau")
    logits = x / tau
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    s = e / e.sum(axis=1, keepdims=True)
    return s, (s, tau)


def softmax_rows_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    s, tau = cache
    return (dy - (dy * s).sum(axis=1, keepdims=True)) * s / tau


def l2_normalize_rows(x: np.ndarray) -> Tuple[np.ndarray, tuple]:
    """各行を単位ユークリッドノルムに正規化"""
    norms = np.sqrt((x * x).sum(axis=1, keepdims=True))
    if np.any(norms < NORM_FLOOR):
        bad = int(np.flatnonzero(norms[:, 0] < NORM_FLOOR)[0])
        raise NumericError(f"ノルムがほぼ 0 の行があります (行 {bad})")
    y = x / norms
    return y, (y, norms)


def l2_normalize_rows_backward(dy: np.ndarray, cache: tuple) -> np.ndarray:
    y, norms = cache
    return (dy - y * (dy * y).sum(axis=1, keepdims=True)) / norms


# 数値勾配チェック

def grad_check(f: Callable[[ParamStore, bool], float],
               params: ParamStore,
               h: float = 1e-5,
               max_coords: Optional[int] = None,
               seed: int = 0) -> float:
    """
    解析勾配と中心差分 (f(x+h) - f(x-h)) / 2h を比較し最大相対誤差を返す

    f(params, backward) はスカラーを返し、backward=True のとき params に勾配を加算する。
    相対誤差の分母は max(|解析|, |数値|, 1e-8)。max_coords を指定すると
    テンソルごとに座標をサンプリングする。
    """
    params.zero_grad()
    base = f(params, True)
    if not np.isfinite(base):
        raise NumericError(f"勾配チェック対象の関数値が非有限です: {base}")
    analytic: Dict[str, np.ndarray] = {name: params.grad(name).copy() for name in params.names()}

    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in params.names():
        value = params.value(name)
        coords = np.arange(value.size)
        if max_coords is not None and value.size > max_coords:
            coords = np.sort(rng.choice(value.size, size=max_coords, replace=False))
        flat = value.reshape(-1)
        for index in coords:
            original = flat[index]
            flat[index] = original + h
            plus = f(params, False)
            flat[index] = original - h
            minus = f(params, False)
            flat[index] = original
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError(f"勾配チェック中に非有限値が出ました: {name}[{index}]")
            numeric = (plus - minus) / (2 * h)
            exact = analytic[name].reshape(-1)[index]
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), 1e-8)
            worst = max(worst, error)
    params.zero_grad()
    return float(worst)
