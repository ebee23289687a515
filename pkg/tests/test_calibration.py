import numpy as np
import pytest

from compliantkit import calibration as cal
from compliantkit.calibration import (AXES, AXIS_HIGH, AXIS_LOW, HIDDEN, MLPModel,
                                      SensorForwardModel, TrainingConfig,
                                      TrainingDiverged, evaluate,
                                      generate_synthetic_dataset, load_dataset,
                                      load_model, loss_and_grads, predict,
                                      predict_batch, save_dataset, save_model,
                                      train_calibration)
from compliantkit.stream_sync import SessionLog, write_log


def finite_difference_grads(model, xn, yn, eps=1e-6):
    """Central differences of the mean squared error, parameter by parameter."""
    def loss():
        h = xn
        for i, (w, b) in enumerate(zip(model.weights, model.biases)):
            h = h @ w + b
            if i < len(model.weights) - 1:
                h = np.maximum(h, 0.0)
        return np.mean((h - yn) ** 2)

    out = []
    for p in model.params():
        g = np.zeros_like(p)
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            up = loss()
            flat[i] = keep - eps
            down = loss()
            flat[i] = keep
            gflat[i] = (up - down) / (2 * eps)
        out.append(g)
    return out


def gradient_relative_errors(seed=0, batch=16):
    rng = np.random.default_rng(seed)
    model = MLPModel.initialize((8,) + HIDDEN + (6,), rng)
    xn = rng.standard_normal((batch, 8))
    yn = rng.uniform(-0.5, 0.5, (batch, 6))
    _, grads = loss_and_grads(model, xn, yn)
    fd = finite_difference_grads(model, xn, yn)
    return [np.linalg.norm(g - f) / max(np.linalg.norm(f), np.linalg.norm(g), 1e-300)
            for g, f in zip(grads, fd)]


def test_gradient_check():
    assert max(gradient_relative_errors()) < 1e-4


def test_forward_model_is_deterministic_and_injective_enough():
    s1, s2 = SensorForwardModel(), SensorForwardModel()
    w = np.random.default_rng(0).uniform(AXIS_LOW, AXIS_HIGH, (500, 6))
    np.testing.assert_array_equal(s1(w), s2(w))
    # locally invertible: the Jacobian has full column rank across the box
    for row in w[:50]:
        jac = np.stack([(s1(row + h)[0] - s1(row - h)[0]) / 2e-6
                        for h in np.eye(6) * 1e-6], axis=1)
        assert np.linalg.matrix_rank(jac, tol=1e-6) == 6
    with pytest.raises(ValueError):
        SensorForwardModel(channels=5)


def test_dataset_generation():
    ds = generate_synthetic_dataset(3, 1000, 0.1)
    assert ds.capacitance.shape == (1000, 8) and ds.wrench.shape == (1000, 6)
    assert np.all(ds.wrench >= AXIS_LOW) and np.all(ds.wrench <= AXIS_HIGH)
    assert sorted(np.bincount(ds.split).tolist()) == [150, 150, 700]
    again = generate_synthetic_dataset(3, 1000, 0.1)
    np.testing.assert_array_equal(ds.capacitance, again.capacitance)
    clean = generate_synthetic_dataset(3, 1000, 0.0)
    np.testing.assert_array_equal(clean.wrench, ds.wrench)
    assert not np.array_equal(clean.capacitance, ds.capacitance)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(0, 10)
    with pytest.raises(ValueError):
        generate_synthetic_dataset(0, 1000, -1.0)


def test_dataset_log_roundtrip(tmp_path):
    ds = generate_synthetic_dataset(1, 500)
    save_dataset(ds, tmp_path / "d.log")
    back = load_dataset(tmp_path / "d.log")
    np.testing.assert_array_equal(back.capacitance, ds.capacitance)
    np.testing.assert_array_equal(back.wrench, ds.wrench)
    np.testing.assert_array_equal(back.split, ds.split)


def test_dataset_without_split_stream(tmp_path):
    log = SessionLog("ext")
    log.add_stream("capacitance", 360, 8)
    log.add_stream("wrench_gt", 360, 6)
    t = np.arange(1, 11)
    log.extend("capacitance", t, np.ones((10, 8)))
    log.extend("wrench_gt", t, np.zeros((10, 6)))
    write_log(log, tmp_path / "e.log")
    assert (load_dataset(tmp_path / "e.log").split == 0).all()
    log2 = SessionLog("bad")
    log2.add_stream("capacitance", 360, 8)
    write_log(log2, tmp_path / "b.log")
    with pytest.raises(ValueError):
        load_dataset(tmp_path / "b.log")


def test_model_file_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    model = MLPModel.initialize((8,) + HIDDEN + (6,), rng, rng.normal(size=8),
                                rng.uniform(1, 2, 8), rng.normal(size=6), rng.uniform(1, 2, 6))
    save_model(model, tmp_path / "m.bin")
    back = load_model(tmp_path / "m.bin")
    x = rng.normal(size=(20, 8))
    np.testing.assert_array_equal(predict_batch(back, x), predict_batch(model, x))
    data = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "t.bin").write_bytes(data[:-8])
    with pytest.raises(ValueError):
        load_model(tmp_path / "t.bin")
    (tmp_path / "x.bin").write_bytes(b"nonsense" + data[8:])
    with pytest.raises(ValueError):
        load_model(tmp_path / "x.bin")


def test_short_training_improves_and_checkpoints():
    ds = generate_synthetic_dataset(0, 2000)
    res = train_calibration(ds, TrainingConfig(epochs=15, batch_size=64))
    losses = [h[2] for h in res.history]
    assert min(losses) < 0.2 * losses[0]
    cps = res.checkpoints
    assert all(b[2] < a[2] for a, b in zip(cps, cps[1:]))
    assert res.best_epoch == cps[-1][0]
    rep = evaluate(res.model, ds)
    assert set(rep.mse) == set(AXES) and rep.n == 300
    w = predict(res.model, cal.CapacitanceSample(ds.capacitance[0]))
    assert w.frame == "sensor"
    assert "hardware ref" in rep.format()


def test_training_divergence_detected():
    ds = generate_synthetic_dataset(0, 500)
    with np.errstate(all="ignore"), pytest.raises(TrainingDiverged):
        train_calibration(ds, TrainingConfig(epochs=5, learning_rate=1e300,
                                             final_learning_rate=1e300))


def test_channel_mismatch():
    model = MLPModel.initialize((8,) + HIDDEN + (6,), np.random.default_rng(0))
    with pytest.raises(ValueError):
        predict_batch(model, np.zeros((3, 7)))
