import numpy as np
import pytest
from scipy.stats import spearmanr

from protosal import autodiff as ad
from protosal import saliency as S
from protosal.nn import Conv2d, Dense, Flatten, GlobalAvgPool, Graph, ReLU, Sigmoid
from protosal.saliency import MethodConfig, linear_graph


def _tiny_cnn(seed=0, relu=True, dtype=np.float64):
    rng = np.random.default_rng(seed)
    g = Graph((8, 8, 3))
    g.add("c1", Conv2d(3, 4, 3, 1, 1, rng=rng))
    g.add("a1", ReLU() if relu else Sigmoid())
    g.add("c2", Conv2d(4, 4, 3, 2, 1, rng=rng))
    if relu:
        g.add("a2", ReLU())
    g.add("gap", GlobalAvgPool())
    g.add("d", Dense(4, 2, rng=rng))
    return g.astype(dtype), rng.random((8, 8, 3))


def _linear(seed=0, shape=(6, 6, 1)):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(shape)
    return linear_graph(w), w, rng.random(shape)


# ---------------------------------------------------------------------------
# gradient family

def test_gradient_of_linear_scorer_is_weights():
    g, w, x = _linear()
    for img in (x, 2 * x + 1):
        np.testing.assert_array_equal(S.saliency_gradient(g, img, 0).values, np.abs(w[..., 0]))


def test_constant_model_gives_zero_map():
    g = linear_graph(np.zeros((4, 4, 3)), bias=[1.5])
    x = np.random.default_rng(0).random((4, 4, 3))
    for method in S.METHODS:
        out = S.explain(g, x, 0, method, MethodConfig(occlusion_window=(2, 2), occlusion_stride=2,
                                                      lime_superpixels=4, lime_samples=16)).values
        # the ridge solve leaves round-off of order 1e-31 for LIME
        np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_saliency_matches_finite_differences():
    g, x = _tiny_cnn()
    m = S.GraphModel(g)
    grad = m.gradient(x[None], 1)[0]
    eps = 1e-6
    fd = np.zeros_like(x)
    for idx in np.ndindex(*x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        fd[idx] = (m.logits(xp[None])[0, 1] - m.logits(xm[None])[0, 1]) / (2 * eps)
    rel = np.abs(grad - fd) / np.maximum(np.abs(fd), 1e-3)
    assert rel.max() <= 1e-6
    np.testing.assert_array_equal(S.saliency_gradient(g, x, 1).values, np.abs(grad).max(axis=-1))


def test_relu_free_equivalences_bitwise():
    g, x = _tiny_cnn(relu=False)
    ref = S.saliency_gradient(g, x, 0).values
    assert S.deconvolution(g, x, 0).values.tobytes() == ref.tobytes()
    assert S.guided_backprop(g, x, 0).values.tobytes() == ref.tobytes()


def test_smoothgrad_zero_sigma_bitwise():
    g, x = _tiny_cnn()
    ref = S.saliency_gradient(g, x, 1).values
    for n in (1, 7):
        sg = S.smoothgrad(g, x, 1, MethodConfig(smoothgrad_sigma=0.0, smoothgrad_samples=n)).values
        assert sg.tobytes() == ref.tobytes()


def test_smoothgrad_linear_any_sigma():
    g, w, x = _linear()
    out = S.smoothgrad(g, x, 0, MethodConfig(smoothgrad_sigma=0.4, smoothgrad_samples=5)).values
    np.testing.assert_allclose(out, np.abs(w[..., 0]), rtol=1e-12)


def test_smoothgrad_single_sample_is_one_noisy_gradient():
    g, x = _tiny_cnn()
    cfg = MethodConfig(smoothgrad_samples=1, smoothgrad_sigma=0.2)
    rng = S.method_rng(cfg.seed, "im", "smoothgrad")
    noisy = x + rng.normal(0.0, 0.2 * (x.max() - x.min()), (1, *x.shape))
    ref = np.abs(S.GraphModel(g).gradient(noisy, 0)[0]).max(axis=-1)
    np.testing.assert_array_equal(S.smoothgrad(g, x, 0, cfg, "im").values, ref)


def test_deconv_nonzero_where_standard_masks():
    # one hidden unit with negative pre-activation
    g = Graph((1, 1, 1))
    g.add("f", Flatten())
    g.add("d1", Dense(1, 1, bias=False))
    g.add("r", ReLU())
    g.add("d2", Dense(1, 1, bias=False))
    g = g.astype(np.float64)
    g.nodes["d1"].params["weight"].data[:] = -1.0
    g.nodes["d2"].params["weight"].data[:] = 2.0
    x = np.ones((1, 1, 1))
    assert S.saliency_gradient(g, x, 0).values[0, 0] == 0
    assert S.deconvolution(g, x, 0).values[0, 0] == 2.0
    assert S.guided_backprop(g, x, 0).values[0, 0] == 0


def test_guided_matches_explicit_mask_oracle():
    rng = np.random.default_rng(1)
    g = Graph((4, 4, 2))
    g.add("f", Flatten())
    g.add("d1", Dense(32, 12, rng=rng))
    g.add("r1", ReLU())
    g.add("d2", Dense(12, 8, rng=rng))
    g.add("r2", ReLU())
    g.add("d3", Dense(8, 2, rng=rng))
    g = g.astype(np.float64)
    x = rng.random((4, 4, 2))
    W = [g.nodes[k].params["weight"].data for k in ("d1", "d2", "d3")]
    b = [g.nodes[k].params["bias"].data for k in ("d1", "d2")]
    h0 = x.ravel()
    z1 = h0 @ W[0] + b[0]
    z2 = np.maximum(z1, 0) @ W[1] + b[1]
    grads = {}
    for mode in ("standard", "deconv", "guided"):
        up = W[2][:, 0].copy()
        for z, w in ((z2, W[1]), (z1, W[0])):
            fwd, bwd = z > 0, up > 0
            mask = {"standard": fwd, "deconv": bwd, "guided": fwd & bwd}[mode]
            up = (up * mask) @ w.T
        grads[mode] = np.abs(up.reshape(4, 4, 2)).max(axis=-1)
    np.testing.assert_allclose(S.saliency_gradient(g, x, 0).values, grads["standard"], rtol=1e-12)
    np.testing.assert_allclose(S.deconvolution(g, x, 0).values, grads["deconv"], rtol=1e-12)
    np.testing.assert_allclose(S.guided_backprop(g, x, 0).values, grads["guided"], rtol=1e-12)
    assert (S.guided_backprop(g, x, 0).values[grads["standard"] == 0] == 0).all()


def test_gradient_methods_deterministic():
    g, x = _tiny_cnn(dtype=np.float32)
    for method in ("saliency", "deconvolution", "guided_backprop", "smoothgrad"):
        a = S.explain(g, x, 1, method, image_id="i").values
        b = S.explain(g, x, 1, method, image_id="i").values
        assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------------------
# integrated gradients and SHAP

def test_ig_linear_exact():
    g, w, x = _linear(shape=(5, 5, 3))
    for steps in (1, 3, 64):
        attr = S.integrated_gradients(g, x, 0, MethodConfig(ig_steps=steps), return_channels=True)
        np.testing.assert_allclose(attr, w * x, rtol=1e-12, atol=1e-15)
    out = S.integrated_gradients(g, x, 0)
    np.testing.assert_allclose(out.values, (w * x).sum(-1), rtol=1e-12)
    assert not out.is_absolute


def test_ig_at_baseline_is_zero():
    g, x = _tiny_cnn()
    assert not S.integrated_gradients(g, np.zeros_like(x), 0).values.any()


def test_ig_completeness_small_cnn():
    g, x = _tiny_cnn()
    m = S.GraphModel(g)
    attr = S.integrated_gradients(g, x, 1, MethodConfig(ig_steps=256)).values
    gap = m.logits(x[None])[0, 1] - m.logits(np.zeros_like(x)[None])[0, 1]
    assert abs(attr.sum() - gap) <= 1e-3 * abs(gap)


def test_shap_linear_monte_carlo():
    g, w, x = _linear(shape=(4, 4, 1))
    cfg = MethodConfig(shap_samples=64, shap_sigma=0.1)
    est = S.gradient_shap(g, x, 0, cfg, "img").values
    # per-pixel estimator: w * (x + e), e ~ N(0, s^2); its standard error is |w| s / sqrt(n)
    s = 0.1 * (x.max() - x.min())
    se = np.abs(w[..., 0]) * s / np.sqrt(64)
    assert (np.abs(est - w[..., 0] * x[..., 0]) <= 3 * se + 1e-12).mean() >= 0.95


def test_shap_single_sample_alpha_one():
    g, x = _tiny_cnn()
    cfg = MethodConfig(shap_samples=1, shap_sigma=0.0)
    out = S.gradient_shap(g, x, 0, cfg, alphas=1.0).values
    ref = (S.GraphModel(g).gradient(x[None], 0)[0] * x).sum(-1)
    np.testing.assert_allclose(out, ref, rtol=1e-12)


def test_shap_deterministic():
    g, x = _tiny_cnn()
    a = S.gradient_shap(g, x, 0, image_id="a").values
    assert a.tobytes() == S.gradient_shap(g, x, 0, image_id="a").values.tobytes()
    assert a.tobytes() != S.gradient_shap(g, x, 0, image_id="b").values.tobytes()


# ---------------------------------------------------------------------------
# perturbation family

def test_occlusion_linear_1x1():
    g, w, x = _linear(shape=(4, 4, 1))
    cfg = MethodConfig(occlusion_window=(1, 1), occlusion_stride=1, occlusion_target="logit")
    np.testing.assert_allclose(S.occlusion(g, x, 0, cfg).values, w[..., 0] * x[..., 0], rtol=1e-12)


def test_occlusion_own_value_is_zero():
    g, _, _ = _linear(shape=(4, 4, 1))
    x = np.full((4, 4, 1), 0.3)
    cfg = MethodConfig(occlusion_window=(2, 2), occlusion_stride=2, occlusion_fill=0.3)
    assert not S.occlusion(g, x, 0, cfg).values.any()


def test_mean_fill():
    g, w, x = _linear(shape=(4, 4, 2))
    mu = x.mean(axis=(0, 1))
    cfg = MethodConfig(occlusion_window=(1, 1), occlusion_stride=1, occlusion_target="logit", occlusion_fill="mean")
    np.testing.assert_allclose(S.occlusion(g, x, 0, cfg).values, (w * (x - mu)).sum(-1), atol=1e-12)
    flat = np.full((4, 4, 2), 0.5)
    assert not S.occlusion(g, flat, 0, cfg).values.any()
    lime_map = S.lime(g, flat, 0, MethodConfig(lime_superpixels=4, lime_samples=20, lime_fill="mean")).values
    np.testing.assert_allclose(lime_map, 0, atol=1e-12)
    with pytest.raises(ValueError):
        MethodConfig(occlusion_fill="median").validate()


def test_occlusion_brute_force():
    g, w, x = _linear(shape=(3, 3, 1))
    cfg = MethodConfig(occlusion_window=(2, 2), occlusion_stride=1, occlusion_target="logit")
    f = lambda img: float((w * img).sum())
    total, count = np.zeros((3, 3)), np.zeros((3, 3))
    for r in range(2):
        for c in range(2):
            y = x.copy()
            y[r:r + 2, c:c + 2] = 0
            total[r:r + 2, c:c + 2] += f(x) - f(y)
            count[r:r + 2, c:c + 2] += 1
    np.testing.assert_allclose(S.occlusion(g, x, 0, cfg).values, total / count, rtol=1e-12)


def test_occlusion_rejects_uncovered_stride():
    g, _, x = _linear(shape=(6, 6, 1))
    with pytest.raises(ValueError):
        S.occlusion(g, x, 0, MethodConfig(occlusion_window=(2, 2), occlusion_stride=3))
    with pytest.raises(ValueError):
        S.occlusion(g, x, 0, MethodConfig(occlusion_window=(8, 8)))


def test_grid_segments():
    seg = S.grid_segments((96, 96), 32)
    assert len(np.unique(seg)) == 32
    assert seg.max() == 31
    assert np.unique(seg[:, 0]).size == 4 and np.unique(seg[0]).size == 8


def test_lime_recovers_planted_weights():
    h = 8
    seg = S.grid_segments((h, h), 16)
    rng = np.random.default_rng(0)
    planted = rng.standard_normal(16)
    # F(x) = sum_s planted_s * mean(x over superpixel s)
    w = np.zeros((h, h, 1))
    for s in range(16):
        mask = seg == s
        w[mask, 0] = planted[s] / mask.sum()
    g = linear_graph(w)
    x = np.ones((h, h, 1))
    cfg = MethodConfig(lime_superpixels=16, lime_samples=256, lime_kernel_width=1e6, lime_ridge=1e-9)
    coef = S.lime(g, x, 0, cfg, return_coefficients=True)
    np.testing.assert_allclose(coef, planted, atol=1e-3)


def test_lime_deterministic_and_singular():
    g, x = _tiny_cnn()
    cfg = MethodConfig(lime_superpixels=4, lime_samples=32)
    a = S.lime(g, x, 0, cfg, "q").values
    assert a.tobytes() == S.lime(g, x, 0, cfg, "q").values.tobytes()
    with pytest.raises(np.linalg.LinAlgError):
        S.lime(g, x, 0, MethodConfig(lime_superpixels=1, lime_samples=1))


def test_black_box_methods_never_call_backward():
    g, x = _tiny_cnn(dtype=np.float32)
    cfg = MethodConfig(lime_superpixels=4, lime_samples=16)
    before = ad.backward_calls
    S.occlusion(g, x, 0, cfg)
    S.lime(g, x, 0, cfg)
    assert ad.backward_calls == before
    S.saliency_gradient(g, x, 0)
    assert ad.backward_calls == before + 1


def test_maps_shape_and_flags():
    g, x = _tiny_cnn(dtype=np.float32)
    for method in S.METHODS:
        m = S.explain(g, x, 1, method, image_id="z")
        assert m.values.shape == (8, 8) and np.isfinite(m.values).all()
        assert m.is_absolute == S.ABSOLUTE[method] and m.method_id == method and m.target_class == 1
    with pytest.raises(ValueError):
        S.explain(g, x, 0, "gradcam")


def test_config_validation():
    with pytest.raises(ValueError):
        MethodConfig(ig_steps=0).validate()
    with pytest.raises(ValueError):
        MethodConfig(smoothgrad_sigma=-1).validate()
    with pytest.raises(ValueError):
        MethodConfig(lime_samples=4, lime_superpixels=8).validate()
    with pytest.raises(ValueError):
        MethodConfig(occlusion_window=(9, 9)).validate((8, 8, 3))


def planted_linear_model(h=96, blocks=4):
    """Block-constant positive weights; every block has its own weight."""
    side = h // blocks
    rng = np.random.default_rng(7)
    levels = rng.permutation(blocks * blocks) + 1.0
    w = np.kron(levels.reshape(blocks, blocks), np.ones((side, side)))[..., None] * 1e-4
    # class 0 scores zero, so class 1's probability is a monotone function of its logit
    both = np.stack([np.zeros((h, h, 3)), np.repeat(w, 3, axis=-1)], axis=-1)
    return linear_graph(both), w[..., 0]


@pytest.mark.parametrize("method", S.METHODS)
def test_planted_linear_ranking(method):
    g, w = planted_linear_model()
    x = np.full((96, 96, 3), 0.5)
    values = S.explain(g, x, 1, method, MethodConfig(), image_id="lin").values
    rho = spearmanr(values.ravel(), w.ravel()).statistic
    assert rho >= 0.95
