import numpy as np
import pytest

from protosal import CNNClassifier
from protosal.classifier import (ModelConfig, PlateauSchedule, TrainConfig, TrainingDiverged, build_cnn,
                                 grid_search, predict_proba, train_classifier, write_log)
from protosal.nn import Graph


def toy(n=64, seed=0, size=8):
    """Two features (left-half and right-half brightness), separable by
    their sum."""
    rng = np.random.default_rng(seed)
    f = rng.random((n, 2))
    y = (f.sum(axis=1) > 1).astype(np.int64)
    f[y == 1] += 0.15
    f[y == 0] -= 0.15
    f = np.clip(f, 0, 1)
    X = np.empty((n, size, size, 3), dtype=np.float32)
    X[:, :, : size // 2] = f[:, 0, None, None, None]
    X[:, :, size // 2:] = f[:, 1, None, None, None]
    return X, y


SMALL = ModelConfig(1, (4,), input_size=(8, 8, 3))


def test_plateau_rule():
    s = PlateauSchedule(1.0, 0.2, 3, 10)
    s.update(0, 0.5)
    for e in range(1, 4):
        s.update(e, 0.5)
    assert s.lr == pytest.approx(0.2)
    for e in range(4, 7):
        s.update(e, 0.5)
    assert s.lr == pytest.approx(0.04)
    s.update(7, 0.50005)                  # within min_delta: not an improvement
    assert s.best_epoch == 0
    for e in range(8, 11):
        s.update(e, 0.5)
    assert s.should_stop


def test_separable_toy_reaches_full_accuracy():
    X, y = toy()
    Xv, yv = toy(32, seed=1)
    g, log = train_classifier(SMALL, X, y, Xv, yv, TrainConfig(batch_size=16, max_epochs=60, learning_rate=3e-2,
                                                               augment=False, early_stop_patience=60))
    assert max(r["val_accuracy"] for r in log) == 1.0
    assert len(log) < 60 or log[-1]["val_accuracy"] == 1.0


def test_early_stop_and_best_restore():
    X, y = toy()
    Xv, yv = toy(32, seed=1)
    cfg = TrainConfig(batch_size=16, max_epochs=40, learning_rate=1e-2, augment=False, early_stop_patience=3,
                      lr_plateau_patience=2)
    g, log = train_classifier(SMALL, X, y, Xv, yv, cfg)
    accs = [r["val_accuracy"] for r in log]
    replay = PlateauSchedule(1.0, 0.2, 2, 3)
    for e, a in enumerate(accs):
        replay.update(e, a)
    if len(log) < 40:
        assert len(log) - 1 == replay.best_epoch + 3
    assert float((predict_proba(g, Xv).argmax(1) == yv).mean()) == accs[replay.best_epoch]
    # plateau lr reductions show up in the log
    lrs = [r["lr"] for r in log]
    assert all(b in (a, a * 0.2) or b == pytest.approx(a * 0.2) for a, b in zip(lrs, lrs[1:]))


def test_training_deterministic():
    X, y = toy()
    cfg = TrainConfig(batch_size=16, max_epochs=3, learning_rate=1e-2)
    _, a = train_classifier(SMALL, X, y, X[:16], y[:16], cfg)
    _, b = train_classifier(SMALL, X, y, X[:16], y[:16], cfg)
    assert a == b


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reported():
    X, y = toy()
    # batch-norm keeps moderate blow-ups finite; this step size overflows the weights
    with pytest.raises(TrainingDiverged, match="epoch 0"):
        train_classifier(SMALL, X, y, X[:8], y[:8], TrainConfig(batch_size=16, max_epochs=2, optimizer="sgd",
                                                                learning_rate=1e30))


def test_rejects_empty_and_bad_labels():
    X, y = toy(8)
    with pytest.raises(ValueError):
        train_classifier(SMALL, X[:0], y[:0], X, y, TrainConfig(max_epochs=1))
    with pytest.raises(ValueError):
        train_classifier(SMALL, X, y + 2, X, y, TrainConfig(max_epochs=1))


def test_probabilities_on_simplex():
    g = build_cnn(ModelConfig(2, (4, 8), input_size=(16, 16, 3)))
    p = predict_proba(g, np.random.default_rng(0).random((7, 16, 16, 3)).astype(np.float32))
    assert (p >= 0).all() and np.abs(p.sum(1) - 1).max() <= 1e-6


def test_symmetric_init_gives_half():
    g = build_cnn(SMALL)
    g.nodes["logits"].params["weight"].data[:] = 0
    g.nodes["logits"].params["bias"].data[:] = 0
    p = predict_proba(g, toy(4)[0])
    np.testing.assert_allclose(p, 0.5)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(4, (8, 8, 8, 8), input_size=(32, 32, 3)).validate()
    with pytest.raises(ValueError):
        ModelConfig(2, (8,)).validate()
    with pytest.raises(ValueError):
        TrainConfig(lr_plateau_factor=1.5).validate()
    assert ModelConfig().feature_shape == (6, 6, 128)


def test_skip_connections_build_and_run():
    g = build_cnn(ModelConfig(2, (4, 8), True, (16, 16, 3)))
    assert "block1.add" in g.nodes and "block2.shortcut" in g.nodes
    assert predict_proba(g, np.zeros((2, 16, 16, 3), np.float32)).shape == (2, 2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grid_search_rules(monkeypatch):
    X, y = toy()
    Xv, yv = toy(32, seed=1)
    base = TrainConfig(batch_size=16, max_epochs=2, augment=False)
    best, _ = grid_search(SMALL, [("adam", 1e-2)], X, y, Xv, yv, base)
    assert (best.optimizer, best.learning_rate) == ("adam", 1e-2)
    best, res = grid_search(SMALL, [("sgd", 1e30), ("adam", 1e-2)], X, y, Xv, yv, base)
    assert res[0]["val_accuracy"] == -np.inf
    assert best.learning_rate == 1e-2
    # force a three-way tie: lower lr wins, then the smaller optimizer id
    import protosal.classifier as C
    monkeypatch.setattr(C, "train_classifier", lambda *a, **k: (None, [{"val_accuracy": 0.9}]))
    best, _ = grid_search(SMALL, [("sgd", 1e-2), ("sgd", 1e-3), ("adam", 1e-3)], X, y, Xv, yv, base)
    assert (best.optimizer, best.learning_rate) == ("adam", 1e-3)
    with pytest.raises(ValueError):
        grid_search(SMALL, [], X, y, Xv, yv)


def test_log_csv(tmp_path):
    write_log(tmp_path / "l.csv", [{"epoch": 0, "train_loss": 0.5, "val_accuracy": 1.0, "lr": 1e-3}])
    assert (tmp_path / "l.csv").read_text().splitlines() == ["epoch,train_loss,val_accuracy,lr", "0,0.5,1.0,0.001"]


def test_estimator_api():
    X, y = toy()
    est = CNNClassifier(conv_blocks=1, channels=(4,), max_epochs=2, batch_size=16, augment=False)
    est.fit(X, y)
    assert est.predict(X).shape == (64,)
    assert est.predict_proba(X).shape == (64, 2)
    assert 0 <= est.score(X, y) <= 1
    assert est.get_params()["channels"] == (4,)
    with pytest.raises(ValueError):
        est.predict(np.zeros((2, 9, 9, 3)))
