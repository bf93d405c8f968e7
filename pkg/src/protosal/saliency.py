"""Post-hoc saliency extractors over a differentiable graph.

Every method takes ``(model, image, target_class)`` with ``image`` shaped
(H, W, C) and returns a :class:`SaliencyMap` of shape (H, W). Randomised
methods draw from an RNG keyed on (seed, image id, method), so results do not
depend on call order or on how work is split across processes.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.linear_model import Ridge

from . import autodiff as ad
from .autodiff import GradMode
from .nn import Dense, Flatten, Graph

METHODS = ("saliency", "deconvolution", "guided_backprop", "smoothgrad", "integrated_gradients",
           "occlusion", "gradient_shap", "lime")

# gradient-family maps are magnitude maps; the rest keep their sign
ABSOLUTE = {"saliency": True, "deconvolution": True, "guided_backprop": True, "smoothgrad": True,
            "integrated_gradients": False, "occlusion": False, "gradient_shap": False, "lime": False}


@dataclass
class SaliencyMap:
    image_id: str
    method_id: str
    target_class: int
    values: np.ndarray
    is_absolute: bool


@dataclass
class MethodConfig:
    smoothgrad_sigma: float = 0.15          # fraction of the image's value range
    smoothgrad_samples: int = 25
    ig_steps: int = 64
    occlusion_window: tuple = (8, 8)
    occlusion_stride: int = 4
    occlusion_fill: float = 0.0             # a value, or "mean" for the image's per-channel mean
    occlusion_target: str = "probability"   # or "logit"
    shap_samples: int = 32
    shap_sigma: float = 0.05                # fraction of the image's value range
    shap_baseline: str = "zero"             # "zero" or "uniform"
    lime_superpixels: int = 32
    lime_samples: int = 256
    lime_kernel_width: float = 0.25
    lime_ridge: float = 1e-3
    lime_fill: float = 0.0                  # same options as occlusion_fill
    lime_target: str = "logit"
    batch_size: int = 64
    seed: int = 0

    def validate(self, image_shape=None) -> None:
        for name in ("smoothgrad_samples", "ig_steps", "shap_samples", "lime_superpixels",
                     "occlusion_stride", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.smoothgrad_sigma < 0 or self.shap_sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.lime_samples < self.lime_superpixels:
            raise ValueError("lime_samples must be >= lime_superpixels")
        if self.shap_baseline not in ("zero", "uniform"):
            raise ValueError(f"unknown baseline distribution {self.shap_baseline!r}")
        for fill in (self.occlusion_fill, self.lime_fill):
            if fill != "mean" and not isinstance(fill, (int, float)):
                raise ValueError(f"fill must be a number or 'mean', got {fill!r}")
        for t in (self.occlusion_target, self.lime_target):
            if t not in ("logit", "probability"):
                raise ValueError(f"unknown target {t!r}")
        if image_shape is not None:
            h, w = image_shape[:2]
            wh, ww = self.occlusion_window
            if wh > h or ww > w:
                raise ValueError(f"occlusion window {wh}x{ww} larger than image {h}x{w}")


def method_rng(seed: int, image_id: str, method_id: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(str(image_id).encode()), METHODS.index(method_id)])


# ---------------------------------------------------------------------------
# model access

class GraphModel:
    """Batched logits and input gradients of a graph, returned as float64."""

    def __init__(self, graph: Graph, batch_size: int = 64):
        self.graph, self.batch_size = graph, batch_size

    def logits(self, X: np.ndarray) -> np.ndarray:
        out = []
        with ad.no_grad():
            for i in range(0, len(X), self.batch_size):
                out.append(self.graph.forward(X[i:i + self.batch_size]).data.astype(np.float64))
        return np.concatenate(out)

    def gradient(self, X: np.ndarray, target: int, mode: GradMode = GradMode.STANDARD) -> np.ndarray:
        """d logit_target / d input for each row of X."""
        out = []
        for i in range(0, len(X), self.batch_size):
            xb = X[i:i + self.batch_size]
            logits = self.graph.forward(xb, input_grad=True)
            seed = np.zeros(logits.shape, dtype=logits.dtype)
            seed[:, target] = 1
            out.append(self.graph.backward(seed, mode=mode).input.astype(np.float64))
        return np.concatenate(out)

    def target(self, X: np.ndarray, cls: int, kind: str) -> np.ndarray:
        z = self.logits(X)
        if kind == "logit":
            return z[:, cls]
        z = z - z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p[:, cls] / p.sum(axis=1)


def as_model(model, batch_size: int = 64) -> GraphModel:
    return model if isinstance(model, GraphModel) else GraphModel(model, batch_size)


def linear_graph(weights: np.ndarray, bias=None, dtype=np.float64) -> Graph:
    """F(x)_k = sum(w[..., k] * x) + b_k as a graph. ``weights`` is (H,W,C)
    for a single score or (H,W,C,K)."""
    w = np.asarray(weights, dtype=dtype)
    if w.ndim == 3:
        w = w[..., None]
    h, wd, c, k = w.shape
    g = Graph((h, wd, c))
    g.add("flatten", Flatten())
    g.add("logits", Dense(h * wd * c, k, bias=True))
    g.nodes["logits"].params["weight"].data = w.reshape(-1, k).copy()
    g.nodes["logits"].params["bias"].data = (np.zeros(k) if bias is None else np.asarray(bias)).astype(dtype)
    return g.astype(dtype)


def aggregate_channels(grad: np.ndarray, absolute: bool) -> np.ndarray:
    return np.abs(grad).max(axis=-1) if absolute else grad.sum(axis=-1)


def _prepare(image, model):
    x = np.asarray(image)
    if x.ndim != 3:
        raise ValueError(f"expected an (H, W, C) image, got shape {x.shape}")
    m = as_model(model)
    return x.astype(m.graph.dtype, copy=False), m


def _fill_value(x, fill):
    # black reads as dark tissue on stained patches; "mean" keeps the fill neutral
    if fill == "mean":
        return x.mean(axis=(0, 1)).astype(x.dtype)
    return np.asarray(fill, x.dtype)


def _map(values, image_id, method, cls) -> SaliencyMap:
    values = np.asarray(values, dtype=np.float64)
    if not np.isfinite(values).all():
        raise FloatingPointError(f"{method} produced non-finite values for image {image_id}")
    return SaliencyMap(str(image_id), method, int(cls), values, ABSOLUTE[method])


# ---------------------------------------------------------------------------
# gradient family

def _gradient_method(method, mode, model, image, cls, image_id):
    x, m = _prepare(image, model)
    g = m.gradient(x[None], cls, mode)[0]
    return _map(aggregate_channels(g, ABSOLUTE[method]), image_id, method, cls)


def saliency_gradient(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="") -> SaliencyMap:
    return _gradient_method("saliency", GradMode.STANDARD, model, image, target_class, image_id)


def deconvolution(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="") -> SaliencyMap:
    return _gradient_method("deconvolution", GradMode.DECONV, model, image, target_class, image_id)


def guided_backprop(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="") -> SaliencyMap:
    return _gradient_method("guided_backprop", GradMode.GUIDED, model, image, target_class, image_id)


def smoothgrad(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="") -> SaliencyMap:
    cfg = cfg or MethodConfig()
    x, m = _prepare(image, model)
    sigma = cfg.smoothgrad_sigma * float(x.max() - x.min())
    if sigma == 0:
        # every noisy copy equals x, so the mean is the plain gradient
        g = m.gradient(x[None], target_class)[0]
    else:
        rng = method_rng(cfg.seed, image_id, "smoothgrad")
        noise = rng.normal(0.0, sigma, (cfg.smoothgrad_samples, *x.shape))
        g = m.gradient((x + noise).astype(x.dtype), target_class).mean(axis=0)
    return _map(aggregate_channels(g, True), image_id, "smoothgrad", target_class)


def integrated_gradients(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="",
                         baseline=None, return_channels: bool = False):
    """Midpoint Riemann sum of the straight-line path integral from the
    baseline (black image by default)."""
    cfg = cfg or MethodConfig()
    x, m = _prepare(image, model)
    b = np.zeros_like(x) if baseline is None else np.asarray(baseline, dtype=x.dtype)
    alphas = (np.arange(cfg.ig_steps) + 0.5) / cfg.ig_steps
    path = (b + alphas[:, None, None, None] * (x - b)).astype(x.dtype)
    attr = (x - b).astype(np.float64) * m.gradient(path, target_class).mean(axis=0)
    if return_channels:
        return attr
    return _map(attr.sum(axis=-1), image_id, "integrated_gradients", target_class)


def gradient_shap(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="",
                  alphas=None) -> SaliencyMap:
    """Monte-Carlo expectation of grad(b + a(x~ - b)) * (x~ - b) over random
    baselines b, path points a ~ U(0,1) and noisy inputs x~ = x + e."""
    cfg = cfg or MethodConfig()
    x, m = _prepare(image, model)
    rng = method_rng(cfg.seed, image_id, "gradient_shap")
    n = cfg.shap_samples
    if cfg.shap_baseline == "zero":
        base = np.zeros((n, *x.shape))
    else:
        base = rng.uniform(float(x.min()), float(x.max()), (n, *x.shape))
    a = rng.uniform(0.0, 1.0, n) if alphas is None else np.broadcast_to(np.asarray(alphas, float), (n,))
    sigma = cfg.shap_sigma * float(x.max() - x.min())
    noisy = x + (rng.normal(0.0, sigma, (n, *x.shape)) if sigma > 0 else 0.0)
    path = (base + a[:, None, None, None] * (noisy - base)).astype(x.dtype)
    attr = (m.gradient(path, target_class) * (noisy - base)).mean(axis=0)
    return _map(attr.sum(axis=-1), image_id, "gradient_shap", target_class)


# ---------------------------------------------------------------------------
# perturbation family (forward passes only)

def occlusion_placements(shape, window, stride) -> tuple[list[int], list[int]]:
    h, w = shape[:2]
    wh, ww = window
    if wh > h or ww > w:
        raise ValueError(f"occlusion window {wh}x{ww} larger than image {h}x{w}")
    if stride > min(wh, ww) or (h - wh) % stride or (w - ww) % stride:
        raise ValueError(f"window {wh}x{ww} with stride {stride} leaves pixels of a {h}x{w} image uncovered")
    return list(range(0, h - wh + 1, stride)), list(range(0, w - ww + 1, stride))


def occlusion(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="") -> SaliencyMap:
    cfg = cfg or MethodConfig()
    x, m = _prepare(image, model)
    rows, cols = occlusion_placements(x.shape, cfg.occlusion_window, cfg.occlusion_stride)
    wh, ww = cfg.occlusion_window
    total = np.zeros(x.shape[:2])
    count = np.zeros(x.shape[:2])
    fill = _fill_value(x, cfg.occlusion_fill)
    ref = m.target(x[None], target_class, cfg.occlusion_target)[0]
    places = [(r, c) for r in rows for c in cols]
    for i in range(0, len(places), cfg.batch_size):
        chunk = places[i:i + cfg.batch_size]
        batch = np.repeat(x[None], len(chunk), axis=0)
        for k, (r, c) in enumerate(chunk):
            batch[k, r:r + wh, c:c + ww, :] = fill
        drop = ref - m.target(batch, target_class, cfg.occlusion_target)
        for k, (r, c) in enumerate(chunk):
            total[r:r + wh, c:c + ww] += drop[k]
            count[r:r + wh, c:c + ww] += 1
    return _map(total / count, image_id, "occlusion", target_class)


def grid_segments(shape, n_segments: int) -> np.ndarray:
    """Label image of a regular grid with exactly ``n_segments`` cells; the
    grid factorisation closest to square is used (rows <= cols)."""
    h, w = shape[:2]
    rows = max(r for r in range(1, int(np.sqrt(n_segments)) + 1) if n_segments % r == 0)
    cols = n_segments // rows
    if rows > h or cols > w:
        raise ValueError(f"cannot cut a {h}x{w} image into {rows}x{cols} superpixels")
    r_idx = np.searchsorted(np.linspace(0, h, rows + 1)[1:-1], np.arange(h), side="right")
    c_idx = np.searchsorted(np.linspace(0, w, cols + 1)[1:-1], np.arange(w), side="right")
    return r_idx[:, None] * cols + c_idx[None, :]


def lime(model, image, target_class: int, cfg: MethodConfig | None = None, image_id="",
         return_coefficients: bool = False):
    cfg = cfg or MethodConfig()
    x, m = _prepare(image, model)
    seg = grid_segments(x.shape, cfg.lime_superpixels)
    s = cfg.lime_superpixels
    rng = method_rng(cfg.seed, image_id, "lime")
    Z = rng.integers(0, 2, (cfg.lime_samples, s))
    Z[0] = 1                                    # the unperturbed image
    if (Z == Z[0]).all():
        raise np.linalg.LinAlgError("LIME perturbations are all identical; the regression is singular")
    fill = _fill_value(x, cfg.lime_fill)
    y = np.empty(len(Z))
    for i in range(0, len(Z), cfg.batch_size):
        zb = Z[i:i + cfg.batch_size]
        keep = zb[:, seg].astype(bool)[..., None]
        batch = np.where(keep, x[None], fill).astype(x.dtype)
        y[i:i + len(zb)] = m.target(batch, target_class, cfg.lime_target)
    # cosine distance to the all-on vector
    on = Z.sum(axis=1)
    dist = 1.0 - np.sqrt(on / s)
    weights = np.exp(-dist ** 2 / cfg.lime_kernel_width ** 2)
    reg = Ridge(alpha=cfg.lime_ridge).fit(Z.astype(np.float64), y, sample_weight=weights)
    coef = reg.coef_
    if return_coefficients:
        return coef
    return _map(coef[seg], image_id, "lime", target_class)


METHOD_FUNCS = {
    "saliency": saliency_gradient,
    "deconvolution": deconvolution,
    "guided_backprop": guided_backprop,
    "smoothgrad": smoothgrad,
    "integrated_gradients": integrated_gradients,
    "occlusion": occlusion,
    "gradient_shap": gradient_shap,
    "lime": lime,
}


def explain(model, image, target_class: int, method: str, cfg: MethodConfig | None = None,
            image_id="") -> SaliencyMap:
    try:
        fn = METHOD_FUNCS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {list(METHODS)}") from None
    return fn(model, image, target_class, cfg, image_id=image_id)
