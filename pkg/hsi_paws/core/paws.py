# hsi_paws/core/paws.py
"""
PAWS コア
SNN 擬似ラベル・シャープニング・対称クロスエントロピー + 平均エントロピー正則化損失、
ストップグラディエント規則と事前学習1ステップ
"""

from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from hsi_paws.core.autodiff import (
    ParamStore,
    softmax_rows, softmax_rows_backward,
    l2_normalize_rows, l2_normalize_rows_backward
)
from hsi_paws.core.augment import AugmentPolicy, augment_batch
from hsi_paws.core.encoder import ConvEncoder, EncoderConfig, stack_patches
from hsi_paws.core.models import Patch, SupportSet, ViewPair
from hsi_paws.core.optim import OptimizerState, optimizer_step
from hsi_paws.core.exceptions import ConfigurationError, ValidationError, ShapeError, NumericError

SIMPLEX_TOLERANCE = 1e-6


@dataclass(frozen=True)
class PawsHyper:
    """PAWS 損失のハイパーパラメータ"""
    tau: float = 0.25
    T: float = 0.10
    n: int = 64
    epsilon: float = 1e-12
    memax_gradient: bool = False
    augment_support: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"τ は正である必要があります: {self.tau}", "paws.tau")
        if not 0 < self.T <= 1:
            raise ConfigurationError(f"T は (0, 1] の範囲である必要があります: {self.T}", "paws.T")
        if self.n < 1:
            raise ConfigurationError(f"ペア数 n は1以上: {self.n}", "paws.pairs_per_batch")
        if self.epsilon <= 0:
            raise ConfigurationError(f"ε は正である必要があります: {self.epsilon}", "paws.epsilon")

    @classmethod
    def from_config(cls, section) -> 'PawsHyper':
        return cls(
            tau=section.tau,
            T=section.T,
            n=section.pairs_per_batch,
            epsilon=section.epsilon,
            memax_gradient=section.memax_gradient,
            augment_support=section.augment_support
        )


class PawsLossResult(NamedTuple):
    loss: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray


# SNN 分類器

def _check_one_hot(labels: np.ndarray) -> None:
    if labels.ndim != 2 or not np.all((labels == 0.0) | (labels == 1.0)) or not np.all(labels.sum(axis=1) == 1.0):
        raise ValidationError("Y_L の各行は one-hot である必要があります", "labels")


def snn_forward(z: np.ndarray, support_z: np.ndarray, labels: np.ndarray, tau: float) -> Tuple[np.ndarray, tuple]:
    """softmax_τ(ẑ ẑ_L^T) Y_L（埋め込みは内部で L2 正規化）"""
    if z.ndim != 2 or support_z.ndim != 2 or z.shape[1] != support_z.shape[1]:
        raise ShapeError("埋め込み次元が一致しません", f"[*,{support_z.shape[-1]}]", z.shape)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.shape[0] != support_z.shape[0]:
        raise ShapeError("Y_L の行数がサポート数と一致しません", support_z.shape[0], labels.shape[0])
    _check_one_hot(labels)

    zn, z_cache = l2_normalize_rows(z)
    sn, s_cache = l2_normalize_rows(support_z)
    weights, w_cache = softmax_rows(zn @ sn.T, tau)
    return weights @ labels, (zn, sn, labels, z_cache, s_cache, w_cache)


def snn_backward(d_probs: np.ndarray, cache: tuple) -> Tuple[np.ndarray, np.ndarray]:
    """(z の勾配, support_z の勾配)"""
    zn, sn, labels, z_cache, s_cache, w_cache = cache
    d_logits = softmax_rows_backward(d_probs @ labels.T, w_cache)
    dz = l2_normalize_rows_backward(d_logits @ sn, z_cache)
    d_support = l2_normalize_rows_backward(d_logits.T @ zn, s_cache)
    return dz, d_support


def snn_predict(z: np.ndarray, support_z: np.ndarray, labels: np.ndarray, tau: float) -> np.ndarray:
    """SNN 予測確率 [m,K]"""
    probs, _ = snn_forward(z, support_z, labels, tau)
    return probs


# シャープニング

def sharpen(p: np.ndarray, T: float) -> np.ndarray:
    """p_k^{1/T} / Σ_t p_t^{1/T}（行ごと）"""
    if T <= 0:
        raise ConfigurationError(f"シャープニング温度 T は正である必要があります: {T}", "paws.T")
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    scaled = (p / p.max(axis=1, keepdims=True)) ** (1.0 / T)
    return scaled / scaled.sum(axis=1, keepdims=True)


def sharpen_backward(g: np.ndarray, p: np.ndarray, T: float) -> np.ndarray:
    """sharpen の入力 p に関する勾配"""
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    a = 1.0 / T
    peak = p.max(axis=1, keepdims=True)
    scaled = p / peak
    total = (scaled ** a).sum(axis=1, keepdims=True)
    s = scaled ** a / total
    ratio = scaled ** (a - 1.0) / (peak * total)
    return a * ratio * (g - (g * s).sum(axis=1, keepdims=True))


def mean_prediction(sharp_anchor: Sequence, sharp_positive: Sequence) -> np.ndarray:
    """2n 個のシャープ化予測の平均 p̄"""
    anchor = np.asarray(sharp_anchor, dtype=np.float64)
    positive = np.asarray(sharp_positive, dtype=np.float64)
    if anchor.size == 0 or positive.size == 0:
        raise ConfigurationError("平均予測の入力が空です", "paws.pairs_per_batch")
    anchor, positive = np.atleast_2d(anchor), np.atleast_2d(positive)
    if anchor.shape != positive.shape:
        raise ShapeError("アンカーとポジティブの予測数が一致しません", anchor.shape, positive.shape)
    return np.concatenate([anchor, positive], axis=0).mean(axis=0)


def entropy(q: np.ndarray, epsilon: float = 1e-12) -> float:
    return float(-(q * np.log(q + epsilon)).sum())


# 損失

def check_simplex(probs: np.ndarray, name: str) -> None:
    """各行が確率単体上にあるか確認"""
    if probs.ndim != 2:
        raise ShapeError(f"{name} は [n,K] である必要があります", "[n,K]", probs.shape)
    if np.any(probs < -SIMPLEX_TOLERANCE) or np.any(np.abs(probs.sum(axis=1) - 1.0) > SIMPLEX_TOLERANCE):
        raise ValidationError(f"{name} に確率単体から外れた行があります", name)


def paws_objective(p_anchor: np.ndarray,
                   p_positive: np.ndarray,
                   target_anchor: np.ndarray,
                   target_positive: np.ndarray,
                   hyper: PawsHyper) -> PawsLossResult:
    """
    固定ターゲットに対する損失と勾配

    loss = (1/2n) Σ [H(t_A, p_P) + H(t_P, p_A)] − H(p̄)
    memax_gradient が False なら p̄ もターゲットから作り、勾配は流れない
    """
    n = p_anchor.shape[0]
    eps = hyper.epsilon
    cross = -(target_anchor * np.log(p_positive + eps)).sum() - (target_positive * np.log(p_anchor + eps)).sum()
    cross /= 2 * n
    grad_positive = -target_anchor / (p_positive + eps) / (2 * n)
    grad_anchor = -target_positive / (p_anchor + eps) / (2 * n)

    if hyper.memax_gradient:
        live_anchor = sharpen(p_anchor, hyper.T)
        live_positive = sharpen(p_positive, hyper.T)
        p_bar = mean_prediction(live_anchor, live_positive)
        # d(−H(p̄))/dp̄ を各行の sharpen に配る
        d_bar = (np.log(p_bar + eps) + p_bar / (p_bar + eps)) / (2 * n)
        d_rows = np.broadcast_to(d_bar, p_anchor.shape)
        grad_anchor = grad_anchor + sharpen_backward(d_rows, p_anchor, hyper.T)
        grad_positive = grad_positive + sharpen_backward(d_rows, p_positive, hyper.T)
    else:
        p_bar = mean_prediction(target_anchor, target_positive)

    loss = float(cross - entropy(p_bar, eps))
    return PawsLossResult(loss, grad_anchor, grad_positive)


def paws_loss(p_anchor: np.ndarray, p_positive: np.ndarray, hyper: PawsHyper) -> PawsLossResult:
    """シャープ化ターゲットを定数として扱う PAWS 損失"""
    p_anchor = np.atleast_2d(np.asarray(p_anchor, dtype=np.float64))
    p_positive = np.atleast_2d(np.asarray(p_positive, dtype=np.float64))
    if p_anchor.shape != p_positive.shape:
        raise ShapeError("アンカーとポジティブの予測形状が一致しません", p_anchor.shape, p_positive.shape)
    check_simplex(p_anchor, "p_anchor")
    check_simplex(p_positive, "p_positive")
    return paws_objective(
        p_anchor, p_positive,
        sharpen(p_anchor, hyper.T), sharpen(p_positive, hyper.T),
        hyper
    )


# 事前学習ステップ

class PawsStepObjective:
    """
    エンコーダー + SNN + PAWS 損失の1ステップ分のスカラー目的関数

    freeze_targets=True のとき、最初の評価で計算したシャープ化ターゲットを以後も使う。
    False のときは毎回ターゲットを再計算する（ストップグラディエントなしの比較用）。
    """

    def __init__(self,
                 cfg: EncoderConfig,
                 anchors: np.ndarray,
                 positives: np.ndarray,
                 support: np.ndarray,
                 labels: np.ndarray,
                 hyper: PawsHyper,
                 freeze_targets: bool = True):
        if len(anchors) == 0 or len(anchors) != len(positives):
            raise ConfigurationError("アンカー/ポジティブのペアが空か数が一致しません", "paws.pairs_per_batch")
        if len(support) == 0:
            raise ConfigurationError("サポートパッチが空です", "paws.support_batch_per_class")
        self.cfg = cfg
        self.inputs = np.concatenate([anchors, positives, support], axis=0).astype(np.float64)
        self.pairs = len(anchors)
        self.labels = np.asarray(labels, dtype=np.float64)
        self.hyper = hyper
        self.freeze_targets = freeze_targets
        self.targets: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def __call__(self, params: ParamStore, backward: bool = False) -> float:
        n = self.pairs
        encoder = ConvEncoder(self.cfg, params)
        z, enc_cache = encoder.forward(self.inputs)
        probs, snn_cache = snn_forward(z[:2 * n], z[2 * n:], self.labels, self.hyper.tau)
        p_anchor, p_positive = probs[:n], probs[n:]

        if self.targets is None or not self.freeze_targets:
            targets = (sharpen(p_anchor, self.hyper.T), sharpen(p_positive, self.hyper.T))
            if self.freeze_targets:
                self.targets = targets
        else:
            targets = self.targets

        result = paws_objective(p_anchor, p_positive, targets[0], targets[1], self.hyper)
        if backward:
            d_probs = np.concatenate([result.grad_anchor, result.grad_positive], axis=0)
            dz_views, dz_support = snn_backward(d_probs, snn_cache)
            encoder.backward(np.concatenate([dz_views, dz_support], axis=0), enc_cache)
        return result.loss


def pretrain_step(params: ParamStore,
                  pairs: Sequence[ViewPair],
                  support: SupportSet,
                  policy: AugmentPolicy,
                  hyper: PawsHyper,
                  optimizer_state: OptimizerState,
                  seed: int,
                  cfg: EncoderConfig) -> float:
    """ビューを拡張し、エンコード → SNN → 損失 → 逆伝播 → 1回更新。損失を返す

    ペア数は 1..hyper.n（エポック末尾のバッチは n 未満になりうる）
    """
    if not pairs:
        raise ConfigurationError("ペアが空です", "paws.pairs_per_batch")
    if len(pairs) > hyper.n:
        raise ShapeError("ペア数が pairs_per_batch を超えています", f"<= {hyper.n}", len(pairs))
    n = len(pairs)
    views: List[Patch] = [pair.anchor for pair in pairs] + [pair.positive for pair in pairs]
    if hyper.augment_support:
        augmented = augment_batch(views + list(support.patches), policy, seed)
        support_values = stack_patches(augmented[2 * n:])
    else:
        augmented = augment_batch(views, policy, seed)
        support_values = stack_patches(support.patches)
    view_values = stack_patches(augmented[:2 * n])

    objective = PawsStepObjective(cfg, view_values[:n], view_values[n:], support_values, support.labels, hyper)
    params.zero_grad()
    loss = objective(params, backward=True)
    if not np.isfinite(loss):
        raise NumericError(f"事前学習ステップの損失が非有限です: {loss}")
    optimizer_step(params, optimizer_state)
    return loss
