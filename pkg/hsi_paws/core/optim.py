# hsi_paws/core/optim.py
"""
オプティマイザ
事前学習用 LARS と下流学習用モーメンタム SGD の更新規則
"""

from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from hsi_paws.core.autodiff import ParamStore
from hsi_paws.core.exceptions import ConfigurationError, OptimizerStateError

OPTIMIZER_KINDS = ("lars", "sgd")
LARS_EPSILON = 1e-9


@dataclass
class OptimizerState:
    """オプティマイザ状態（速度はパラメータと同じ形状, 0 初期化）"""
    kind: str
    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    trust_coefficient: float = 0.001
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ConfigurationError(f"未知のオプティマイザです: {self.kind}", "optimizer.kind")
        if self.lr < 0:
            raise ConfigurationError(f"学習率は0以上: {self.lr}", "optimizer.lr")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"モーメンタムは [0, 1) の範囲: {self.momentum}", "optimizer.momentum")
        if self.weight_decay < 0:
            raise ConfigurationError(f"重み減衰は0以上: {self.weight_decay}", "optimizer.weight_decay")
        if self.kind == "lars" and self.trust_coefficient <= 0:
            raise ConfigurationError(f"信頼係数は正: {self.trust_coefficient}", "optimizer.trust_coefficient")


def create_optimizer_state(kind: str,
                           params: ParamStore,
                           lr: float,
                           momentum: float = 0.9,
                           weight_decay: float = 0.0,
                           trust_coefficient: float = 0.001) -> OptimizerState:
    """パラメータに合わせて速度を 0 初期化した状態を作成"""
    velocity = {name: np.zeros_like(entry.value) for name, entry in params.items()}
    return OptimizerState(kind, lr, momentum, weight_decay, trust_coefficient, velocity)


def _velocity(state: OptimizerState, name: str, value: np.ndarray) -> np.ndarray:
    if name not in state.velocity:
        state.velocity[name] = np.zeros_like(value)
    velocity = state.velocity[name]
    if velocity.shape != value.shape:
        raise OptimizerStateError(
            f"速度 {name} の形状 {velocity.shape} がパラメータ {value.shape} と一致しません", name
        )
    return velocity


def _sgd_update(value: np.ndarray, grad: np.ndarray, velocity: np.ndarray, state: OptimizerState) -> None:
    velocity *= state.momentum
    velocity += grad + state.weight_decay * value
    value -= state.lr * velocity


def lars_trust_ratio(value: np.ndarray, grad: np.ndarray, weight_decay: float, eta: float) -> float:
    """λ = η‖w‖ / (‖g‖ + wd‖w‖ + 1e-9)"""
    w_norm = float(np.linalg.norm(value))
    g_norm = float(np.linalg.norm(grad))
    return eta * w_norm / (g_norm + weight_decay * w_norm + LARS_EPSILON)


def sgd_step(params: ParamStore, state: OptimizerState) -> None:
    """v ← μv + (g + wd·w); w ← w − lr·v。更新後に勾配を 0 にする"""
    for name, entry in params.items():
        velocity = _velocity(state, name, entry.value)
        _sgd_update(entry.value, entry.grad, velocity, state)
    params.zero_grad()


def lars_step(params: ParamStore, state: OptimizerState) -> None:
    """
    LARS 更新。lars_adapt のパラメータは層ごとの信頼比で学習率を調整し、
    それ以外（バイアス・1次元）は SGD 規則で更新する
    """
    for name, entry in params.items():
        velocity = _velocity(state, name, entry.value)
        if not entry.lars_adapt:
            _sgd_update(entry.value, entry.grad, velocity, state)
            continue
        ratio = lars_trust_ratio(entry.value, entry.grad, state.weight_decay, state.trust_coefficient)
        velocity *= state.momentum
        velocity += ratio * state.lr * (entry.grad + state.weight_decay * entry.value)
        entry.value -= velocity
    params.zero_grad()


def optimizer_step(params: ParamStore, state: OptimizerState) -> None:
    """状態の種類に応じて更新"""
    if state.kind == "lars":
        lars_step(params, state)
    else:
        sgd_step(params, state)
