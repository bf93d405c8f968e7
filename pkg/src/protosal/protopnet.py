"""Prototypical-part network: prototype layer, losses, three-phase training
and prototype attribution maps."""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .classifier import ModelConfig, add_backbone, check_patches, softmax_np
from .data import AugmentConfig, augment
from .nn import Conv2d, Dense, Graph, Identity, Layer, ReLU, Sigmoid, register_layer
from .optim import Adam


# ---------------------------------------------------------------------------
# configuration

@dataclass
class PrototypeLayerConfig:
    m: int = 8
    per_class: tuple | None = None          # defaults to an even split
    prototype_shape: tuple = (1, 1)         # (h_p, w_p); depth is the latent depth
    topk_fraction: float = 0.05
    epsilon: float = 1e-4
    add_on: bool = True

    def allocation(self) -> tuple[int, int]:
        if self.per_class is not None:
            alloc = tuple(int(c) for c in self.per_class)
        else:
            alloc = (self.m - self.m // 2, self.m // 2)
        return alloc

    def validate(self) -> None:
        alloc = self.allocation()
        if self.m < 2 or len(alloc) != 2 or min(alloc) < 1 or sum(alloc) != self.m:
            raise ValueError(f"need m >= 2 prototypes with at least one per class, got {alloc}")
        if not 0 < self.topk_fraction <= 1:
            raise ValueError("topk_fraction must lie in (0, 1]")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")


@dataclass
class LossWeights:
    crs_ent: float = 1.0
    clst: float = 0.8
    sep: float = 0.08

    def validate(self) -> None:
        if self.crs_ent <= 0 or self.clst < 0 or self.sep < 0:
            raise ValueError("need crs_ent > 0, clst >= 0 and sep >= 0")


@dataclass
class PhaseSchedule:
    joint_epochs: int = 10
    cycles: int = 2
    batch_size: int = 64
    learning_rate: float = 1e-3
    sparsity_weight: float = 1e-4
    l2_weight: float = 1e-4
    last_layer_iters: int = 50000
    last_layer_tol: float = 1e-9
    augment: bool = True
    seed: int = 0


@dataclass
class Prototype:
    id: int
    class_id: int
    latent: np.ndarray
    source_image: str | None = None
    source_location: tuple[int, int] | None = None


# ---------------------------------------------------------------------------
# graph nodes

@register_layer
class PrototypeDistances(Layer):
    def __init__(self, classes, depth: int, shape=(1, 1), seed: int = 0):
        super().__init__()
        self.classes = [int(c) for c in classes]
        self.depth, self.shape = depth, tuple(shape)
        rng = np.random.default_rng(seed)
        protos = rng.random((len(self.classes), *self.shape, depth)).astype(ad.DEFAULT_DTYPE)
        self.params["prototypes"] = Tensor(protos, requires_grad=True)

    def config(self):
        return dict(classes=self.classes, depth=self.depth, shape=list(self.shape))

    def __call__(self, z, training=False):
        return ad.squared_l2_map(z, self.params["prototypes"])


@register_layer
class Similarity(Layer):
    def __init__(self, epsilon: float = 1e-4):
        super().__init__()
        self.epsilon = epsilon

    def config(self):
        return dict(epsilon=self.epsilon)

    def __call__(self, d, training=False):
        return ad.log_similarity(d, self.epsilon)


@register_layer
class TopKPool(Layer):
    def __init__(self, fraction: float = 0.05):
        super().__init__()
        self.fraction = fraction

    def config(self):
        return dict(fraction=self.fraction)

    def __call__(self, s, training=False):
        n, h, w, m = s.shape
        return ad.topk_mean(s.reshape(n, h * w, m), topk_count(h * w, self.fraction), axis=1)


def topk_count(cells: int, fraction: float) -> int:
    return max(1, int(round(fraction * cells)))


def build_protopnet(backbone: ModelConfig, layer: PrototypeLayerConfig, seed: int = 0) -> Graph:
    backbone.validate()
    layer.validate()
    rng = np.random.default_rng(seed)
    g = Graph(tuple(backbone.input_size))
    add_backbone(g, backbone, rng)
    depth = backbone.channels[-1]
    if layer.add_on:
        g.add("addon.conv1", Conv2d(depth, depth, 1, 1, 0, rng=rng))
        g.add("addon.relu", ReLU())
        g.add("addon.conv2", Conv2d(depth, depth, 1, 1, 0, rng=rng))
        g.add("addon.sigmoid", Sigmoid())
    g.add("latent", Identity())
    n0, n1 = layer.allocation()
    classes = [0] * n0 + [1] * n1
    g.add("distances", PrototypeDistances(classes, depth, layer.prototype_shape, seed=seed + 1))
    g.add("similarity", Similarity(layer.epsilon))
    g.add("pool", TopKPool(layer.topk_fraction))
    g.add("logits", Dense(layer.m, 2, bias=False))
    set_last_layer(g, initial_last_layer(classes))
    return g


def prototype_classes(g: Graph) -> np.ndarray:
    return np.asarray(g.nodes["distances"].classes)


def initial_last_layer(classes, own: float = 1.0, other: float = -0.5) -> np.ndarray:
    classes = np.asarray(classes)
    w = np.full((len(classes), 2), other)
    w[np.arange(len(classes)), classes] = own
    return w


def set_last_layer(g: Graph, w: np.ndarray) -> None:
    p = g.nodes["logits"].params["weight"]
    p.data = np.asarray(w, dtype=p.dtype).copy()


# ---------------------------------------------------------------------------
# prototype-layer operations

def distance_map(latent, prototypes) -> Tensor:
    """Squared L2 distance of every latent window to every prototype:
    (N,H,W,D) x (m,hp,wp,D) -> (N,H-hp+1,W-wp+1,m)."""
    return ad.squared_l2_map(latent, prototypes)


def similarity(distances, epsilon: float = 1e-4) -> Tensor:
    return ad.log_similarity(distances, epsilon)


def topk_avg_pool(grid, fraction: float) -> Tensor:
    """Mean of the top ``max(1, round(fraction * cells))`` cells of each
    (N,H,W,m) similarity grid -> (N,m)."""
    g = grid if isinstance(grid, Tensor) else Tensor(np.asarray(grid))
    n, h, w, m = g.shape
    return ad.topk_mean(g.reshape(n, h * w, m), topk_count(h * w, fraction), axis=1)


def attribution_map(grid: np.ndarray, input_size=(96, 96)) -> np.ndarray:
    """Bilinear upsampling of one latent-resolution similarity grid."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.shape[0] > input_size[0] or grid.shape[1] > input_size[1]:
        raise ValueError(f"grid {grid.shape} larger than input size {input_size}")
    ah = ad.interp_matrix(grid.shape[0], input_size[0])
    aw = ad.interp_matrix(grid.shape[1], input_size[1])
    return ah @ grid @ aw.T


def _class_masks(classes, labels):
    classes, labels = np.asarray(classes), np.asarray(labels)
    own = (classes[None, :] == labels[:, None])
    if not own.any(axis=1).all():
        raise ValueError("a class present in the batch has no prototypes")
    if not (~own).any(axis=1).all():
        raise ValueError("a class present in the batch has no other-class prototypes")
    return own


def _masked_min(min_dist: Tensor, mask: np.ndarray) -> Tensor:
    big = float(np.abs(min_dist.data).max()) * 2 + 1.0
    return (min_dist + Tensor((~mask) * big, dtype=min_dist.dtype)).min(axis=1)


def min_distances(distances: Tensor) -> Tensor:
    """(N,H,W,m) -> (N,m): closest latent window per prototype."""
    n, h, w, m = distances.shape
    return distances.reshape(n, h * w, m).min(axis=1)


def cluster_cost_from_distances(distances: Tensor, classes, labels) -> Tensor:
    own = _class_masks(classes, labels)
    return _masked_min(min_distances(distances), own).mean()


def separation_cost_from_distances(distances: Tensor, classes, labels) -> Tensor:
    own = _class_masks(classes, labels)
    return -_masked_min(min_distances(distances), ~own).mean()


def cluster_cost(latents, prototypes, classes, labels) -> Tensor:
    """Mean over images of the distance from the nearest latent patch to the
    nearest own-class prototype."""
    return cluster_cost_from_distances(distance_map(latents, prototypes), classes, labels)


def separation_cost(latents, prototypes, classes, labels) -> Tensor:
    """Negated mean over images of the distance to the nearest other-class
    prototype (always <= 0)."""
    return separation_cost_from_distances(distance_map(latents, prototypes), classes, labels)


def joint_loss(logits: Tensor, distances: Tensor, classes, labels, weights: LossWeights) -> dict:
    ce = ad.cross_entropy(logits, labels)
    clst = cluster_cost_from_distances(distances, classes, labels)
    sep = separation_cost_from_distances(distances, classes, labels)
    total = ce * weights.crs_ent + clst * weights.clst + sep * weights.sep
    return {"total": total, "crs_ent": ce, "clst": clst, "sep": sep}


def compute_latents(g: Graph, X: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            g.forward(X[i:i + batch_size])
            out.append(g.activations["latent"].data)
    return np.concatenate(out)


def project_prototypes(prototypes: np.ndarray, classes, latents: np.ndarray, labels,
                       image_ids=None) -> tuple[np.ndarray, list[Prototype]]:
    """Replace each prototype by its nearest same-class latent window.

    Returns the new prototype array and one record per prototype with the
    source image and (row, col) window location. Ties go to the first image,
    then the first window in row-major order.
    """
    prototypes = np.asarray(prototypes)
    classes, labels = np.asarray(classes), np.asarray(labels)
    m, hp, wp, d = prototypes.shape
    n, h, w, _ = latents.shape
    ho, wo = h - hp + 1, w - wp + 1
    ids = image_ids if image_ids is not None else [str(i) for i in range(n)]
    new = prototypes.copy()
    records = []
    for j in range(m):
        pool = np.flatnonzero(labels == classes[j])
        if pool.size == 0:
            raise ValueError(f"no training images of class {classes[j]} to project prototype {j} onto")
        best = (np.inf, -1, -1)
        for start in range(0, pool.size, 256):
            chunk = pool[start:start + 256]
            dist = ad.squared_l2_map(latents[chunk], prototypes[j:j + 1]).data[..., 0]
            flat = dist.reshape(len(chunk), -1)
            k = int(np.argmin(flat))            # first minimum in (image, row, col) order
            if flat.reshape(-1)[k] < best[0]:
                best = (flat.reshape(-1)[k], chunk[k // flat.shape[1]], k % flat.shape[1])
        _, img, cell = best
        r, c = divmod(int(cell), wo)
        new[j] = latents[img, r:r + hp, c:c + wp, :]
        records.append(Prototype(j, int(classes[j]), new[j].copy(), ids[img], (r, c)))
    return new, records


# ---------------------------------------------------------------------------
# last layer (phase 3)

class LastLayerNotConverged(RuntimeError):
    def __init__(self, grad_norm: float, iters: int):
        super().__init__(f"last layer did not converge in {iters} iterations "
                         f"(gradient-mapping norm {grad_norm:.3g})")
        self.grad_norm = grad_norm


def last_layer_objective(w, scores, labels, off_mask, sparsity_weight, l2_weight=0.0) -> float:
    logits = scores @ w
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(len(labels)), labels].mean()
    return float(ce + sparsity_weight * np.abs(w[off_mask]).sum() + l2_weight * (w * w).sum())


def optimize_last_layer(scores, labels, classes, sparsity_weight: float = 1e-4, l2_weight: float = 1e-4,
                        w0=None, max_iter: int = 50000, tol: float = 1e-9, strict: bool = False):
    """Minimise mean cross-entropy + sparsity_weight * sum |off-class weights|
    (+ l2_weight * ||W||^2, which makes the minimiser unique on separable
    data) with accelerated proximal gradient and adaptive restart.

    Returns ``(W, info)``; ``W`` has shape (m, 2).
    """
    S = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    classes = np.asarray(classes)
    n, m = S.shape
    off = np.ones((m, 2), dtype=bool)
    off[np.arange(m), classes] = False
    Y = np.eye(2)[y]
    w = initial_last_layer(classes) if w0 is None else np.asarray(w0, dtype=np.float64).copy()

    def smooth(wv):
        logits = S @ wv
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        f = -np.log(p[np.arange(n), y]).mean() + l2_weight * (wv * wv).sum()
        grad = S.T @ (p - Y) / n + 2 * l2_weight * wv
        return f, grad

    def prox(v, step):
        out = v.copy()
        t = step * sparsity_weight
        out[off] = np.sign(v[off]) * np.maximum(np.abs(v[off]) - t, 0.0)
        return out

    # 2-class softmax curvature <= 1/2 along any direction
    L = 0.5 * np.linalg.norm(S, 2) ** 2 / n + 2 * l2_weight
    step = 1.0 / L
    v, t, w_prev = w.copy(), 1.0, w.copy()
    gnorm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        _, g = smooth(v)
        w_new = prox(v - step * g, step)
        gnorm = np.linalg.norm(w_new - v) / step
        if gnorm < tol:
            w = w_new
            break
        t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
        # restart momentum when it points uphill
        if np.sum((v - w_new) * (w_new - w)) > 0:
            t_new, v = 1.0, w_new.copy()
        else:
            v = w_new + ((t - 1) / t_new) * (w_new - w)
        w_prev, w, t = w, w_new, t_new
    else:
        if strict:
            raise LastLayerNotConverged(gnorm, max_iter)
    info = {"iterations": it, "grad_norm": float(gnorm), "converged": gnorm < tol,
            "objective": last_layer_objective(w, S, y, off, sparsity_weight, l2_weight)}
    return w, info


# ---------------------------------------------------------------------------
# training

def pooled_scores(g: Graph, X: np.ndarray, batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """(similarity scores (N,m), probabilities (N,2)) in eval mode."""
    scores, logits = [], []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            out = g.forward(X[i:i + batch_size])
            scores.append(g.activations["pool"].data)
            logits.append(out.data)
    return np.concatenate(scores), softmax_np(np.concatenate(logits).astype(np.float64))


def _trainable(g: Graph) -> list[Tensor]:
    return [t for name, t in g.parameters().items() if not name.startswith("logits.")]


def train_protopnet(backbone: ModelConfig, layer: PrototypeLayerConfig, weights: LossWeights,
                    X_train, y_train, X_val, y_val, schedule: PhaseSchedule | None = None,
                    train_ids=None, graph: Graph | None = None):
    """Three-phase training repeated ``schedule.cycles`` times: joint descent
    with the last layer frozen, projection onto training patches, convex
    last-layer optimisation. Returns ``(graph, prototypes, log)``."""
    schedule = schedule or PhaseSchedule()
    weights.validate()
    g = graph or build_protopnet(backbone, layer, schedule.seed)
    classes = prototype_classes(g)
    params = _trainable(g)
    g.nodes["logits"].params["weight"].requires_grad = False
    opt = Adam(params, schedule.learning_rate)
    aug = AugmentConfig(seed=schedule.seed)
    log, records = [], []
    n = len(y_train)
    epoch = 0
    for cycle in range(schedule.cycles):
        for _ in range(schedule.joint_epochs):
            rng = np.random.default_rng([schedule.seed, epoch])
            order = rng.permutation(n)
            sums = {"total": 0.0, "crs_ent": 0.0, "clst": 0.0, "sep": 0.0}
            for i in range(0, n, schedule.batch_size):
                idx = order[i:i + schedule.batch_size]
                xb = X_train[idx]
                if schedule.augment:
                    xb = augment(xb, rng, aug)
                opt.zero_grad()
                logits = g.forward(xb, training=True)
                parts = joint_loss(logits, g.activations["distances"], classes, y_train[idx], weights)
                if not np.isfinite(parts["total"].data):
                    from .classifier import TrainingDiverged
                    raise TrainingDiverged(epoch)
                parts["total"].backward()
                opt.step()
                for k in sums:
                    sums[k] += float(parts[k].data) * len(idx)
            _, proba = pooled_scores(g, X_val)
            log.append({"cycle": cycle, "phase": "joint", "epoch": epoch,
                        **{k: v / n for k, v in sums.items()},
                        "val_accuracy": float((proba.argmax(1) == y_val).mean())})
            epoch += 1
        # phase 2: projection
        latents = compute_latents(g, X_train)
        protos = g.nodes["distances"].params["prototypes"]
        new, records = project_prototypes(protos.data, classes, latents, y_train, train_ids)
        protos.data = new.astype(protos.dtype)
        # phase 3: convex last layer
        scores, _ = pooled_scores(g, X_train)
        w, info = optimize_last_layer(scores, y_train, classes, schedule.sparsity_weight, schedule.l2_weight,
                                      w0=g.nodes["logits"].params["weight"].data,
                                      max_iter=schedule.last_layer_iters, tol=schedule.last_layer_tol)
        set_last_layer(g, w)
        _, proba = pooled_scores(g, X_val)
        log.append({"cycle": cycle, "phase": "last_layer", "epoch": epoch, "total": info["objective"],
                    "crs_ent": float("nan"), "clst": float("nan"), "sep": float("nan"),
                    "val_accuracy": float((proba.argmax(1) == y_val).mean())})
    g.nodes["logits"].params["weight"].requires_grad = True
    return g, records, log


def predict_protopnet(g: Graph, X, batch_size: int = 256):
    """Returns (probabilities (N,2), similarity scores (N,m))."""
    scores, proba = pooled_scores(g, np.asarray(X, dtype=np.float32), batch_size)
    return proba, scores


def similarity_grids(g: Graph, X, batch_size: int = 256) -> np.ndarray:
    """Latent-resolution similarity grids, (N, Ho, Wo, m)."""
    out = []
    with ad.no_grad():
        for i in range(0, len(X), batch_size):
            g.forward(X[i:i + batch_size])
            out.append(g.activations["similarity"].data)
    return np.concatenate(out)


def select_prototypes(g: Graph, predicted_class: int, count: int = 4) -> np.ndarray:
    """Indices of the ``count`` prototypes with the largest |last-layer
    weight| into the predicted class (stable order on ties)."""
    w = np.abs(g.nodes["logits"].params["weight"].data[:, predicted_class])
    return np.argsort(-w, kind="stable")[:count]


# ---------------------------------------------------------------------------
# prototype bank file
#
#   magic "PSPB" | u32 version | u32 count | per prototype:
#   u32 id | u8 class | u32 hp, wp, D | float32 LE latent | u16 len + source id
#   | i32 row, col (-1 when not projected)

def save_prototype_bank(path, prototypes: list[Prototype]) -> None:
    buf = io.BytesIO()
    buf.write(b"PSPB" + struct.pack("<II", 1, len(prototypes)))
    for p in prototypes:
        lat = np.ascontiguousarray(p.latent, dtype="<f4")
        buf.write(struct.pack("<IBIII", p.id, p.class_id, *lat.shape))
        buf.write(lat.tobytes())
        src = (p.source_image or "").encode()
        buf.write(struct.pack("<H", len(src)) + src)
        r, c = p.source_location if p.source_location is not None else (-1, -1)
        buf.write(struct.pack("<ii", r, c))
    Path(path).write_bytes(buf.getvalue())


def load_prototype_bank(path) -> list[Prototype]:
    data = Path(path).read_bytes()
    if data[:4] != b"PSPB":
        raise ValueError(f"{path}: not a prototype bank")
    _, count = struct.unpack_from("<II", data, 4)
    pos, out = 12, []
    for _ in range(count):
        pid, cls, hp, wp, d = struct.unpack_from("<IBIII", data, pos)
        pos += 17
        n = hp * wp * d
        lat = np.frombuffer(data, "<f4", n, pos).reshape(hp, wp, d).astype(np.float32)
        pos += 4 * n
        (ln,) = struct.unpack_from("<H", data, pos)
        src = data[pos + 2:pos + 2 + ln].decode() or None
        pos += 2 + ln
        r, c = struct.unpack_from("<ii", data, pos)
        pos += 8
        out.append(Prototype(pid, cls, lat, src, None if r < 0 else (r, c)))
    return out


def write_ppnet_log(path, log: list[dict]) -> None:
    cols = ["cycle", "phase", "epoch", "total", "crs_ent", "clst", "sep", "val_accuracy"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in log:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in cols])


# ---------------------------------------------------------------------------
# estimator

class ProtoPNetClassifier(TransformerMixin, ClassifierMixin, BaseEstimator):
    """Scikit-learn style ProtoPNet. ``transform`` returns the pooled
    prototype similarity scores, so the fitted network can feed other
    estimators."""

    def __init__(self, conv_blocks=4, channels=(16, 32, 64, 128), use_skip_connections=False,
                 n_prototypes=8, prototype_shape=(1, 1), topk_fraction=0.05, epsilon=1e-4,
                 add_on=True, loss_weights=(1.0, 0.8, 0.08), joint_epochs=10, cycles=2,
                 batch_size=64, learning_rate=1e-3, sparsity_weight=1e-4, augment=True,
                 validation_fraction=0.2, random_state=0):
        self.conv_blocks = conv_blocks
        self.channels = channels
        self.use_skip_connections = use_skip_connections
        self.n_prototypes = n_prototypes
        self.prototype_shape = prototype_shape
        self.topk_fraction = topk_fraction
        self.epsilon = epsilon
        self.add_on = add_on
        self.loss_weights = loss_weights
        self.joint_epochs = joint_epochs
        self.cycles = cycles
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.sparsity_weight = sparsity_weight
        self.augment = augment
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None, ids=None):
        X, y = check_patches(X), np.asarray(y, dtype=np.int64)
        if X_val is None:
            order = np.random.default_rng(self.random_state).permutation(len(y))
            n_val = max(1, int(round(self.validation_fraction * len(y))))
            X_val, y_val = X[order[:n_val]], y[order[:n_val]]
            X, y = X[order[n_val:]], y[order[n_val:]]
            ids = None if ids is None else [ids[i] for i in order[n_val:]]
        backbone = ModelConfig(self.conv_blocks, tuple(self.channels), self.use_skip_connections,
                               tuple(X.shape[1:]), 2)
        layer = PrototypeLayerConfig(self.n_prototypes, None, tuple(self.prototype_shape),
                                     self.topk_fraction, self.epsilon, self.add_on)
        sched = PhaseSchedule(self.joint_epochs, self.cycles, self.batch_size, self.learning_rate,
                              self.sparsity_weight, augment=self.augment, seed=self.random_state)
        self.graph_, self.prototypes_, self.history_ = train_protopnet(
            backbone, layer, LossWeights(*self.loss_weights), X, y, check_patches(X_val),
            np.asarray(y_val, dtype=np.int64), sched, train_ids=ids)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "graph_")
        return predict_protopnet(self.graph_, check_patches(X, self.graph_.input_shape))[0]

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def transform(self, X):
        check_is_fitted(self, "graph_")
        return predict_protopnet(self.graph_, check_patches(X, self.graph_.input_shape))[1]

    def attribution_maps(self, X) -> np.ndarray:
        """(N, m, H, W) upsampled similarity maps, one per prototype."""
        check_is_fitted(self, "graph_")
        grids = similarity_grids(self.graph_, check_patches(X, self.graph_.input_shape))
        size = self.graph_.input_shape[:2]
        return np.stack([[attribution_map(gr[..., j], size) for j in range(gr.shape[-1])] for gr in grids])
