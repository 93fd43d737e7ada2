import math

import numpy as np
import pytest

from protopop import autodiff as ad
from protopop import fusion as fu
from protopop.autodiff import Tensor
from helpers import check_gradients

rng = np.random.default_rng(17)


def _params(d_enc=6, d=8, heads=2, seed=0, **kw):
    return fu.init_fusion_params(d_enc, d=d, heads=heads, seed=seed, **kw)


def _inputs(d_enc=6, k=3, seed=1):
    r = np.random.default_rng(seed)
    return r.normal(size=d_enc), r.normal(size=(k, d_enc)), r.normal(size=(k, d_enc))


class TestFuse:
    def test_duplicate_inputs_give_duplicate_outputs(self):
        params = _params()
        # same projection for both modalities and identical rows everywhere
        params.text_proj_w.data = params.image_proj_w.data.copy()
        params.text_proj_b.data = params.image_proj_b.data.copy()
        v = rng.normal(size=6)
        t = fu.fuse(v, v[None, :], v[None, :], params)
        assert np.max(np.abs(t.image.data - t.visual_protos.data[0])) < 1e-12
        assert np.max(np.abs(t.image.data - t.textual_protos.data[0])) < 1e-12

    def test_class_permutation_equivariance(self):
        params = _params()
        x, v, t = _inputs()
        perm = np.array([2, 0, 1])
        a = fu.fuse(x, v, t, params)
        b = fu.fuse(x, v[perm], t[perm], params)
        assert np.max(np.abs(a.image.data - b.image.data)) < 1e-10
        assert np.max(np.abs(a.visual_protos.data[perm] - b.visual_protos.data)) < 1e-10
        assert np.max(np.abs(a.textual_protos.data[perm] - b.textual_protos.data)) < 1e-10

    def test_zero_value_path_is_pure_residual(self):
        params = _params()
        params.attn.wv.data[:] = 0.0
        params.attn.bv.data[:] = 0.0
        params.attn.bo.data[:] = 0.0
        x, v, t = _inputs()
        triple = fu.fuse(x, v, t, params)
        pv, pt = fu.project_prototypes(v, t, params)
        xi = x[None, :] @ params.image_proj_w.data + params.image_proj_b.data
        assert np.max(np.abs(triple.image.data - xi[0])) < 1e-12
        assert np.max(np.abs(triple.visual_protos.data - pv.data)) < 1e-12
        assert np.max(np.abs(triple.textual_protos.data - pt.data)) < 1e-12

    def test_shape_mismatch(self):
        params = _params()
        with pytest.raises(ValueError):
            fu.fuse(np.ones(5), np.ones((3, 6)), np.ones((3, 6)), params)


class TestModalityProbs:
    def _triple(self, image, visual, textual):
        return fu.FusedTriple(Tensor(image), Tensor(visual), Tensor(textual))

    def test_sharp_limit_is_one_hot(self):
        params = _params(tau_v=0.01, tau_t=0.01)
        protos = np.eye(4)[:3] * 2.0
        t = self._triple(protos[2] * 0.5, protos, protos)
        pv, _ = fu.modality_probs(t, params)
        assert pv.data[2] > 0.999
        assert abs(pv.data.sum() - 1.0) < 1e-12

    def test_equal_cosines_uniform(self):
        params = _params()
        row = rng.normal(size=8)
        protos = np.stack([row * c for c in (1.0, 2.0, 3.0)])  # identical directions
        t = self._triple(row, protos, protos)
        pv, pt = fu.modality_probs(t, params)
        assert np.max(np.abs(pv.data - 1 / 3)) < 1e-12
        assert np.max(np.abs(pt.data - 1 / 3)) < 1e-12

    def test_sums_to_one_random(self):
        params = _params()
        for seed in range(20):
            x, v, t = _inputs(seed=seed)
            triple = fu.fuse(x, v, t, params)
            pv, pt = fu.modality_probs(triple, params)
            assert abs(pv.data.sum() - 1.0) < 1e-9
            assert abs(pt.data.sum() - 1.0) < 1e-9


class TestCrossLoss:
    def test_uniform_logits_log_k(self):
        params = _params()
        row = rng.normal(size=8)
        protos = np.stack([row, row, row, row])
        t = fu.FusedTriple(Tensor(row), Tensor(protos), Tensor(protos.copy()))
        loss = fu.cross_loss(t, label=1, params=params)
        assert abs(loss.item() - math.log(4)) < 1e-12

    def test_dominant_label_logit(self):
        params = _params(tau_v=0.01, tau_t=0.01)
        protos = np.eye(4)[:3]
        t = fu.FusedTriple(Tensor(protos[0]), Tensor(protos), Tensor(protos.copy()))
        assert fu.cross_loss(t, label=0, params=params).item() < 1e-12

    def test_invalid_label(self):
        params = _params()
        x, v, t = _inputs()
        triple = fu.fuse(x, v, t, params)
        with pytest.raises(ValueError):
            fu.cross_loss(triple, label=3, params=params)

    def test_gradients_all_params(self):
        params = _params(d_enc=4, d=4, heads=2)
        x, v, t = _inputs(d_enc=4, k=2)

        def loss():
            return fu.cross_loss(fu.fuse(x, v, t, params), label=1, params=params)

        check_gradients(loss, params.parameters())

    def test_gradients_learnable_temps(self):
        params = _params(d_enc=4, d=4, heads=2, learnable_temps=True)
        x, v, t = _inputs(d_enc=4, k=2)
        assert params.log_tau_v in params.parameters()

        def loss():
            return fu.cross_loss(fu.fuse(x, v, t, params), label=0, params=params)

        check_gradients(loss, [params.log_tau_v, params.log_tau_t])

    def test_loss_invariant_under_class_permutation(self):
        params = _params()
        x, v, t = _inputs()
        perm = np.array([1, 2, 0])
        label = 2
        a = fu.cross_loss(fu.fuse(x, v, t, params), label, params).item()
        b = fu.cross_loss(fu.fuse(x, v[perm], t[perm], params),
                          int(np.argwhere(perm == label)[0, 0]), params).item()
        assert abs(a - b) < 1e-10


class TestCombinedPrediction:
    def test_equal_modalities(self):
        params = _params()
        row = rng.normal(size=8)
        protos = rng.normal(size=(3, 8))
        t = fu.FusedTriple(Tensor(row), Tensor(protos), Tensor(protos.copy()))
        pv, _ = fu.modality_probs(t, params)
        comb = fu.combined_prediction(t, params)
        assert np.max(np.abs(comb.data - pv.data)) < 1e-12

    def test_average_still_sums_to_one(self):
        params = _params(tau_v=0.005, tau_t=10.0)  # near one-hot vs near uniform
        x, v, t = _inputs()
        triple = fu.fuse(x, v, t, params)
        comb = fu.combined_prediction(triple, params)
        assert abs(comb.data.sum() - 1.0) < 1e-9

    def test_argmax_matches_recomputation(self):
        params = _params()
        for seed in range(10):
            x, v, t = _inputs(seed=100 + seed)
            triple = fu.fuse(x, v, t, params)
            pv, pt = fu.modality_probs(triple, params)
            comb = fu.combined_prediction(triple, params)
            assert np.argmax(comb.data) == np.argmax((pv.data + pt.data) / 2)
