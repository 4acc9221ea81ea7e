import dataclasses

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from skinsplat.loss import (
    LossWeights,
    knn_indices,
    knn_std_reg,
    l1,
    l1_grad,
    norm_reg,
    psnr,
    ssim,
    ssim_with_grad,
    total_loss,
)
from skinsplat.model import ModelConfig, SkinningEval, eval_skinning, init_from_template
from skinsplat.template import InvalidStateError

ZERO = LossWeights(**{f.name: 0.0 for f in dataclasses.fields(LossWeights) if f.name != "knn_k"})


def only(**kw):
    return dataclasses.replace(ZERO, **kw)


def direct_ssim(a, b):
    """Brute-force 2D Gaussian-window SSIM over every valid 11x11 window."""
    x = np.arange(11) - 5.0
    g1 = np.exp(-x * x / (2 * 1.5**2))
    win = np.outer(g1, g1)
    win /= win.sum()
    h, w, ch = a.shape
    vals = []
    for c in range(ch):
        for i in range(h - 10):
            for j in range(w - 10):
                pa, pb = a[i : i + 11, j : j + 11, c], b[i : i + 11, j : j + 11, c]
                ma, mb = np.sum(win * pa), np.sum(win * pb)
                va = np.sum(win * (pa - ma) ** 2)
                vb = np.sum(win * (pb - mb) ** 2)
                cov = np.sum(win * (pa - ma) * (pb - mb))
                c1, c2 = 0.01**2, 0.03**2
                vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestImageLosses:
    def test_l1_identical(self):
        a = np.random.default_rng(0).uniform(size=(8, 8, 3))
        assert l1(a, a) == 0

    def test_l1_constant_offset(self):
        a = np.random.default_rng(1).uniform(size=(8, 8, 3)) * 0.5
        assert l1(a + 0.1, a) == pytest.approx(0.1, abs=1e-12)

    def test_l1_brute_force(self):
        rng = np.random.default_rng(2)
        a, b = rng.uniform(size=(5, 7, 3)), rng.uniform(size=(5, 7, 3))
        total = sum(abs(a[i] - b[i]) for i in np.ndindex(a.shape))
        assert l1(a, b) == pytest.approx(total / a.size, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            l1(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_psnr_values(self):
        a = np.zeros((10, 10, 3))
        assert psnr(a, a) == 100.0
        assert psnr(a + 0.1, a) == pytest.approx(20.0, abs=1e-9)
        assert psnr(a + 1.0, a) == pytest.approx(0.0, abs=1e-12)

    def test_ssim_identical(self):
        a = np.random.default_rng(3).uniform(size=(16, 16, 3))
        assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
        c = np.full((16, 16, 3), 0.5)
        assert ssim(c, c) == pytest.approx(1.0, abs=1e-12)

    def test_ssim_direct_reference(self):
        rng = np.random.default_rng(4)
        a, b = rng.uniform(size=(32, 32, 3)), rng.uniform(size=(32, 32, 3))
        assert ssim(a, b) == pytest.approx(direct_ssim(a, b), abs=1e-6)

    def test_ssim_matches_scikit_image(self):
        rng = np.random.default_rng(5)
        a = rng.uniform(size=(40, 36, 3))
        b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0, 1)
        ref = structural_similarity(
            a, b, channel_axis=2, gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0
        )
        assert ssim(a, b) == pytest.approx(ref, abs=1e-6)

    def test_ssim_too_small(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((10, 20, 3)), np.zeros((10, 20, 3)))

    def test_ssim_gradient(self):
        rng = np.random.default_rng(6)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        _, g = ssim_with_grad(a, b)
        h = 1e-6
        for idx in [(0, 0, 0), (5, 7, 1), (15, 15, 2), (8, 3, 0), (11, 12, 1)]:
            e = np.zeros_like(a)
            e[idx] = h
            fd = (ssim(a + e, b) - ssim(a - e, b)) / (2 * h)
            assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_total_image_gradient(self):
        rng = np.random.default_rng(7)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        w = only(ssim=0.2)
        res = total_loss(a, b, None, w)
        expected = l1_grad(a, b) - 0.2 * ssim_with_grad(a, b)[1]
        np.testing.assert_allclose(res.grad_image, expected, atol=1e-15)
        h = 1e-6
        for idx in [(1, 2, 0), (9, 9, 2), (14, 0, 1)]:
            e = np.zeros_like(a)
            e[idx] = h
            fd = (total_loss(a + e, b, None, w).total - total_loss(a - e, b, None, w).total) / (2 * h)
            assert res.grad_image[idx] == pytest.approx(fd, rel=1e-4)


@pytest.fixture
def model(biped):
    m = init_from_template(biped, ModelConfig(n_gaussians=10, n_latent=2, frames=2, grid_resolution=6, seed=3))
    rng = np.random.default_rng(8)
    g = m.gaussians
    g.rotations[:] = rng.normal(size=g.rotations.shape)
    g.log_scales[:] += rng.normal(scale=0.3, size=g.log_scales.shape)
    g.opacity_logits[:] = rng.normal(size=g.opacity_logits.shape)
    g.sh[:] += rng.normal(scale=0.2, size=g.sh.shape)
    m.skinning.delta[:] = rng.normal(scale=0.1, size=m.skinning.delta.shape)
    m.skinning.latent[:] = rng.normal(scale=0.1, size=m.skinning.latent.shape)
    return m


class TestKnnStd:
    def test_identical_components(self, biped):
        m = init_from_template(biped, ModelConfig(n_gaussians=20, n_latent=0))
        m.gaussians.log_scales[:] = -3.0
        m.gaussians.means[:] = m.gaussians.means[0]
        w = LossWeights(w_hat_std=0.0)
        assert knn_std_reg(m, w)[0] == pytest.approx(0.0, abs=1e-15)

    def test_two_components_opacity(self, model):
        m = model
        keep = [0, 1]
        g = m.gaussians
        for f in ("means", "rotations", "log_scales", "opacity_logits", "sh"):
            setattr(g, f, getattr(g, f)[keep].copy())
        g.opacity_logits[:] = [-60.0, 60.0]
        val, _ = knn_std_reg(m, only(opacity_std=1.0, knn_k=2))
        assert val == pytest.approx(0.5, abs=1e-12)
        val2, _ = knn_std_reg(m, only(opacity_std=2.0, knn_k=2))
        assert val2 == 2 * val

    def test_neighbour_table_includes_self(self, model):
        nb = knn_indices(model.gaussians.means, 4)
        assert nb.shape == (10, 4)
        np.testing.assert_array_equal(nb[:, 0], np.arange(10))

    def test_too_few_components(self, model):
        with pytest.raises(InvalidStateError):
            knn_std_reg(model, LossWeights(knn_k=11))

    def test_reorder_invariant(self, model):
        w = LossWeights(knn_k=4)
        a = knn_std_reg(model, w)[0]
        perm = np.random.default_rng(9).permutation(10)
        g = model.gaussians
        for f in ("means", "rotations", "log_scales", "opacity_logits", "sh"):
            setattr(g, f, getattr(g, f)[perm].copy())
        assert knn_std_reg(model, w)[0] == pytest.approx(a, abs=1e-12)

    def test_quaternion_sign_invariance(self, model):
        w = only(rotation_std=1.0, knn_k=4)
        a = knn_std_reg(model, w)[0]
        model.gaussians.rotations[[1, 4, 7]] *= -1
        assert knn_std_reg(model, w)[0] == pytest.approx(a, abs=1e-12)

    def test_parameter_gradients(self, model):
        w = LossWeights(knn_k=4, w_hat_std=0.0, w_lat_std=0.0)
        nb = knn_indices(model.gaussians.means, 4)
        _, grads = knn_std_reg(model, w, nb)
        _check_param_fd(model, lambda: knn_std_reg(model, w, nb)[0], grads.params)

    def test_weight_gradients(self, model):
        w = only(w_hat_std=0.7, w_lat_std=0.3, knn_k=4)
        nb = knn_indices(model.gaussians.means, 4)
        skin = eval_skinning(model, model.gaussians.means)
        _, grads = knn_std_reg(model, w, nb, skin)
        for name, g in (("w_hat", grads.w_hat), ("w_lat", grads.w_lat)):
            arr = getattr(skin, name)
            for idx in [(0, 0), (3, 1), (9, 1)]:
                fd = _fd(arr, idx, lambda: knn_std_reg(model, w, nb, skin)[0])
                assert g[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9), name


def _fd(arr, idx, f, h=1e-6):
    old = arr[idx]
    arr[idx] = old + h
    fp = f()
    arr[idx] = old - h
    fm = f()
    arr[idx] = old
    return (fp - fm) / (2 * h)


def _check_param_fd(model, f, grads):
    params = model.params()
    for key, g in grads.items():
        arr = params[key]
        for idx in list(np.ndindex(arr.shape))[:: max(1, arr.size // 12)]:
            assert g[idx] == pytest.approx(_fd(arr, idx, f), rel=1e-4, abs=1e-9), (key, idx)


class TestNormReg:
    def test_zero_grids_no_scale_term(self, biped):
        m = init_from_template(biped, ModelConfig(n_gaussians=20))
        assert norm_reg(m, LossWeights(scale_norm=0.0))[0] == 0.0

    def test_correction_norm(self, biped):
        m = init_from_template(biped, ModelConfig(n_gaussians=1, grid_resolution=4))
        m.skinning.delta[..., 0] = 3.0
        m.skinning.delta[..., 1] = 4.0
        assert norm_reg(m, only(w_hat_norm=1.0))[0] == pytest.approx(5.0, abs=1e-12)

    def test_max_scale(self, biped):
        m = init_from_template(biped, ModelConfig(n_gaussians=1))
        m.gaussians.log_scales[0] = np.log([0.1, 0.2, 0.3])
        assert norm_reg(m, only(scale_norm=1.0))[0] == pytest.approx(0.3, abs=1e-12)

    def test_gradients(self, model):
        w = LossWeights()
        _, grads = norm_reg(model, w)
        _check_param_fd(model, lambda: norm_reg(model, w)[0], grads.params)
        skin = eval_skinning(model, model.gaussians.means)
        _, grads = norm_reg(model, w, skin)

        def with_delta(delta):
            s = SkinningEval(skin.prior, skin.prior_jac, skin.stencil, skin.prior + delta, skin.w_lat)
            return norm_reg(model, w, s)[0]

        delta = skin.w_hat - skin.prior
        for idx in [(0, 0), (4, 5), (9, 10)]:
            assert grads.delta[idx] == pytest.approx(_fd(delta, idx, lambda: with_delta(delta)), rel=1e-4, abs=1e-9)
        for idx in [(1, 0), (6, 1)]:
            fd = _fd(skin.w_lat, idx, lambda: norm_reg(model, w, skin)[0])
            assert grads.w_lat[idx] == pytest.approx(fd, rel=1e-4, abs=1e-9)

    def test_nonnegative(self, model):
        assert norm_reg(model, LossWeights())[0] >= 0
        assert knn_std_reg(model, LossWeights(knn_k=4))[0] >= 0


class TestTotalLoss:
    def test_perfect_render(self, biped):
        m = init_from_template(biped, ModelConfig(n_gaussians=20))
        img = np.random.default_rng(10).uniform(size=(16, 16, 3))
        # neighbourhood terms excluded: prior weights and scales vary between neighbours
        w = LossWeights(scale_norm=0.0).without_knn()
        assert total_loss(img, img, m, w).total == pytest.approx(0.0, abs=1e-12)

    def test_zero_weights_is_l1(self, model):
        rng = np.random.default_rng(11)
        a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
        res = total_loss(a, b, model, ZERO)
        assert res.total == l1(a, b)
        np.testing.assert_array_equal(res.grad_image, l1_grad(a, b))
