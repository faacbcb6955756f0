# tests/test_paws.py
"""
PAWS コアのテスト
SNN 分類器・シャープニング・平均予測・損失とストップグラディエント・事前学習ステップ
"""

import math
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose, assert_array_equal

# プロジェクトルートを取得
PROJECT_ROOT = Path(__file__).parent.parent
sys.path.insert(0, str(PROJECT_ROOT))

from hsi_paws.core.augment import AugmentPolicy
from hsi_paws.core.autodiff import ParamStore, grad_check
from hsi_paws.core.encoder import EncoderConfig, build_encoder
from hsi_paws.core.hsi_data import build_splits, sample_view_pairs
from hsi_paws.core.optim import create_optimizer_state
from hsi_paws.core.paws import (
    PawsHyper,
    mean_prediction,
    paws_loss,
    paws_objective,
    pretrain_step,
    sharpen,
    sharpen_backward,
    snn_backward,
    snn_forward,
    snn_predict
)
from hsi_paws.core.pipeline import gradcheck_objective, run_gradcheck
from hsi_paws.core.exceptions import ConfigurationError, NumericError, ShapeError, ValidationError


def _scalar_paws_loss(pa, pp, T, eps=1e-12):
    """単一ペアの損失を素の Python で評価する参照実装"""
    def sharp(p):
        powered = [v ** (1.0 / T) for v in p]
        total = sum(powered)
        return [v / total for v in powered]

    ta, tp = sharp(pa), sharp(pp)
    cross = -sum(t * math.log(q + eps) for t, q in zip(ta, pp)) - sum(t * math.log(q + eps) for t, q in zip(tp, pa))
    mean = [(a + b) / 2 for a, b in zip(ta, tp)]
    ent = -sum(m * math.log(m + eps) for m in mean)
    return cross / 2 - ent


def _numeric_gradient(f, x, h=1e-6):
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = f()
        flat[i] = original - h
        minus = f()
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2 * h)
    return grad


class TestHyper:
    """ハイパーパラメータ"""

    def test_defaults(self):
        hyper = PawsHyper()
        assert (hyper.tau, hyper.T, hyper.n) == (0.25, 0.10, 64)

    @pytest.mark.parametrize("kwargs", [{"tau": -1.0}, {"tau": 0.0}, {"T": 0.0}, {"T": 1.5}, {"n": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            PawsHyper(**kwargs)


class TestSNN:
    """ソフト最近傍分類器"""

    def test_identity_support_example(self):
        probs = snn_predict(np.array([[1.0, 0.0]]), np.eye(2), np.eye(2), 0.25)
        assert_allclose(probs, [[0.98201, 0.01799]], atol=1e-5)

    def test_equidistant_query_is_uniform(self):
        probs = snn_predict(np.array([[1.0, 1.0]]), np.eye(2), np.eye(2), 0.25)
        assert_allclose(probs, [[0.5, 0.5]])

    def test_low_temperature_picks_nearest(self):
        support = np.eye(3)
        labels = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        probs = snn_predict(np.array([[0.1, 1.0, 0.05]]), support, labels, 0.01)
        assert probs[0, 1] > 0.99

    def test_rows_on_simplex(self, rng):
        labels = np.eye(4)[rng.integers(0, 4, size=10)]
        probs = snn_predict(rng.normal(size=(6, 5)), rng.normal(size=(10, 5)), labels, 0.25)
        assert np.all(probs >= 0.0)
        assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_cosine_invariance(self, rng):
        """埋め込み行の正の定数倍で出力は変わらない"""
        z, support = rng.normal(size=(4, 6)), rng.normal(size=(8, 6))
        labels = np.eye(2)[[0, 1] * 4]
        scale_z = rng.uniform(0.1, 10.0, size=(4, 1))
        scale_s = rng.uniform(0.1, 10.0, size=(8, 1))
        assert_allclose(snn_predict(z * scale_z, support * scale_s, labels, 0.25),
                        snn_predict(z, support, labels, 0.25), atol=1e-9)

    def test_zero_embedding(self):
        with pytest.raises(NumericError):
            snn_predict(np.zeros((1, 2)), np.eye(2), np.eye(2), 0.25)

    def test_nonpositive_tau(self):
        with pytest.raises(ConfigurationError):
            snn_predict(np.ones((1, 2)), np.eye(2), np.eye(2), 0.0)

    def test_labels_must_be_one_hot(self):
        with pytest.raises(ValidationError):
            snn_predict(np.ones((1, 2)), np.eye(2), np.full((2, 2), 0.5), 0.25)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            snn_predict(np.ones((1, 3)), np.eye(2), np.eye(2), 0.25)

    @pytest.mark.parametrize("seed", range(3))
    def test_backward(self, seed):
        rng = np.random.default_rng(seed)
        params = ParamStore()
        params.add("z", rng.normal(size=(3, 4)))
        params.add("support", rng.normal(size=(5, 4)))
        labels = np.eye(2)[[0, 1, 0, 1, 1]]
        upstream = rng.normal(size=(3, 2))

        def f(store, with_backward):
            probs, cache = snn_forward(store.value("z"), store.value("support"), labels, 0.5)
            if with_backward:
                dz, d_support = snn_backward(upstream, cache)
                store.accumulate("z", dz)
                store.accumulate("support", d_support)
            return float((probs * upstream).sum())

        assert grad_check(f, params) < 1e-4


class TestSharpen:
    """シャープニング"""

    def test_examples(self):
        assert_allclose(sharpen([0.6, 0.4], 0.5), [[0.69231, 0.30769]], atol=1e-5)
        assert_allclose(sharpen([0.6, 0.4], 0.10), [[0.98295, 0.01705]], atol=1e-5)

    def test_uniform_is_fixed_point(self):
        assert_allclose(sharpen(np.full(4, 0.25), 0.1), [[0.25] * 4])

    def test_invalid_temperature(self):
        with pytest.raises(ConfigurationError):
            sharpen([0.5, 0.5], 0.0)

    def test_random_simplex_vectors(self):
        """1000 個の単体ベクトルで単体・順位保存・T=1 恒等"""
        p = np.random.default_rng(0).dirichlet(np.ones(5), size=1000)
        out = sharpen(p, 0.1)
        assert np.all(out >= 0.0)
        assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert_array_equal(out.argmax(axis=1), p.argmax(axis=1))
        order = np.argsort(p, axis=1)
        assert np.all(np.diff(np.take_along_axis(out, order, axis=1), axis=1) >= 0.0)
        assert_allclose(sharpen(p, 1.0), p, atol=1e-12, rtol=0)

    def test_backward(self):
        rng = np.random.default_rng(1)
        params = ParamStore()
        params.add("p", rng.dirichlet(np.ones(3), size=4))
        upstream = rng.normal(size=(4, 3))

        def f(store, with_backward):
            p = store.value("p")
            if with_backward:
                store.accumulate("p", sharpen_backward(upstream, p, 0.5))
            return float((sharpen(p, 0.5) * upstream).sum())

        assert grad_check(f, params) < 1e-4


class TestMeanPrediction:
    """平均予測 p̄"""

    def test_example(self):
        out = mean_prediction([[0.94118, 0.05882]], [[0.69231, 0.30769]])
        assert_allclose(out, [0.81674, 0.18326], atol=1e-5)

    def test_one_hot_pair(self):
        assert_array_equal(mean_prediction([[1.0, 0.0]], [[1.0, 0.0]]), [1.0, 0.0])

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            mean_prediction([], [])

    def test_unequal_lengths(self):
        with pytest.raises(ShapeError):
            mean_prediction([[1.0, 0.0]], [[1.0, 0.0], [0.0, 1.0]])


class TestPawsLoss:
    """PAWS 損失"""

    def test_identical_one_hot_is_zero(self):
        result = paws_loss([[1.0, 0.0]], [[1.0, 0.0]], PawsHyper())
        assert result.loss == 0.0

    def test_uniform_is_zero(self):
        result = paws_loss([[0.5, 0.5]], [[0.5, 0.5]], PawsHyper())
        assert abs(result.loss) < 1e-9

    def test_scalar_oracle(self):
        hyper = PawsHyper(T=0.5)
        result = paws_loss([[0.8, 0.2]], [[0.6, 0.4]], hyper)
        expected = _scalar_paws_loss([0.8, 0.2], [0.6, 0.4], 0.5)
        assert abs(result.loss - expected) < 1e-6
        assert result.loss == pytest.approx(0.1159, abs=1e-4)

    def test_off_simplex_rejected(self):
        with pytest.raises(ValidationError):
            paws_loss([[0.8, 0.3]], [[0.6, 0.4]], PawsHyper())

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            paws_loss([[0.8, 0.2]], [[0.6, 0.2, 0.2]], PawsHyper())

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2 ** 32 - 1), n=st.integers(1, 4), k=st.integers(2, 5))
    def test_symmetry_and_lower_bound(self, seed, n, k):
        rng = np.random.default_rng(seed)
        p, q = rng.dirichlet(np.ones(k), size=n), rng.dirichlet(np.ones(k), size=n)
        hyper = PawsHyper(T=0.25)
        forward = paws_loss(p, q, hyper).loss
        assert forward == pytest.approx(paws_loss(q, p, hyper).loss, abs=1e-9)
        assert forward >= -math.log(k) - 1e-9

    @pytest.mark.parametrize("memax_gradient", [False, True])
    def test_gradient_with_frozen_targets(self, memax_gradient):
        """解析勾配 = シャープ化ターゲットを定数とした損失の中心差分"""
        rng = np.random.default_rng(7)
        hyper = PawsHyper(T=0.5, memax_gradient=memax_gradient)
        pa, pp = rng.dirichlet(np.ones(3), size=2), rng.dirichlet(np.ones(3), size=2)
        ta, tp = sharpen(pa, hyper.T), sharpen(pp, hyper.T)
        result = paws_loss(pa, pp, hyper)

        def loss():
            return paws_objective(pa, pp, ta, tp, hyper).loss

        assert_allclose(result.grad_anchor, _numeric_gradient(loss, pa), rtol=1e-5, atol=1e-7)
        assert_allclose(result.grad_positive, _numeric_gradient(loss, pp), rtol=1e-5, atol=1e-7)


class TestStepObjective:
    """エンコーダー + SNN + 損失の合成勾配"""

    @pytest.mark.parametrize("seed", [0, 1])
    def test_full_gradient_check(self, seed):
        assert run_gradcheck(seed) < 1e-4

    def test_full_gradient_check_with_memax_gradient(self):
        objective, params = gradcheck_objective(0, memax_gradient=True)
        assert grad_check(objective, params) < 1e-4

    def test_targets_frozen_after_first_call(self):
        objective, params = gradcheck_objective(0)
        objective(params)
        frozen = objective.targets
        params.set_value("ds2.pointwise", params.value("ds2.pointwise") * 1.5)
        objective(params)
        assert objective.targets is frozen

    def test_stop_gradient_differs_from_unfrozen(self):
        """凍結ターゲットの解析勾配は、ターゲットも動く損失の差分とは一致しない"""
        frozen, params = gradcheck_objective(3)
        params.zero_grad()
        frozen(params, True)
        analytic = {name: params.grad(name).copy() for name in params.names()}
        params.zero_grad()

        unfrozen, _ = gradcheck_objective(3, freeze_targets=False)
        worst = 0.0
        for name in params.names():
            numeric = _numeric_gradient(lambda: unfrozen(params), params.value(name), h=1e-5)
            diff = np.abs(analytic[name] - numeric) / np.maximum(np.maximum(np.abs(analytic[name]), np.abs(numeric)), 1e-8)
            worst = max(worst, float(diff.max()))
        assert worst > 1e-3


class TestPretrainStep:
    """事前学習1ステップ"""

    def _setup(self, cube, lr):
        cfg = EncoderConfig(patch_size=5, bands=16, spectral_kernel=3, spectral_stride=2,
                            conv3d_channels=2, ds_widths=(8, 8, 8), embedding_dim=8)
        params = build_encoder(cfg, 0)
        pairs = sample_view_pairs(cube, 5, 4, seed=0)
        support, _ = build_splits(cube, 2, seed=0, p=5)
        state = create_optimizer_state("lars", params, lr=lr)
        return cfg, params, pairs, support, state

    def test_zero_learning_rate_keeps_parameters(self, small_cube):
        cfg, params, pairs, support, state = self._setup(small_cube, 0.0)
        before = params.digest()
        loss = pretrain_step(params, pairs, support, AugmentPolicy(), PawsHyper(n=4), state, 11, cfg)
        assert np.isfinite(loss)
        assert params.digest() == before

    def test_deterministic_loss(self, small_cube):
        losses = []
        for _ in range(2):
            cfg, params, pairs, support, state = self._setup(small_cube, 0.1)
            losses.append(pretrain_step(params, pairs, support, AugmentPolicy(), PawsHyper(n=4), state, 5, cfg))
        assert losses[0] == losses[1]

    def test_update_changes_parameters(self, small_cube):
        cfg, params, pairs, support, state = self._setup(small_cube, 1.0)
        before = params.digest()
        pretrain_step(params, pairs, support, AugmentPolicy(), PawsHyper(n=4), state, 5, cfg)
        assert params.digest() != before
        assert all(np.all(params.grad(name) == 0.0) for name in params.names())

    def test_support_augmentation_flag(self, small_cube):
        cfg, params, pairs, support, state = self._setup(small_cube, 0.0)
        loss = pretrain_step(params, pairs, support, AugmentPolicy(),
                             PawsHyper(n=4, augment_support=True), state, 5, cfg)
        assert np.isfinite(loss)

    def test_empty_pairs(self, small_cube):
        cfg, params, _, support, state = self._setup(small_cube, 0.1)
        with pytest.raises(ConfigurationError):
            pretrain_step(params, [], support, AugmentPolicy(), PawsHyper(n=4), state, 5, cfg)

    def test_pairs_bounded_by_batch_size(self, small_cube):
        """ペア数は hyper.n 以下（末尾の小さいバッチは許可）"""
        cfg, params, pairs, support, state = self._setup(small_cube, 0.0)
        with pytest.raises(ShapeError):
            pretrain_step(params, pairs, support, AugmentPolicy(), PawsHyper(n=3), state, 5, cfg)
        loss = pretrain_step(params, pairs[:3], support, AugmentPolicy(), PawsHyper(n=4), state, 5, cfg)
        assert np.isfinite(loss)
