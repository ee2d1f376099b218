import math

import numpy as np
import pytest

import ien


def small_config(use_affordance=True):
    c = ien.reference_config(use_affordance=use_affordance)
    c.update(convlstm_hidden=3, affordance_features=3, encoder_widths=[4, 6, 8], depth=2)
    return c


@pytest.fixture(scope="module")
def dataset():
    return ien.build_dataset(2, mode="depth", seed=5)


def test_gaussian_heatmap_is_a_distribution():
    h = ien.gaussian_heatmap(20.0, 31.5, sigma=4.0)
    assert h.shape == (1, 64, 64)
    assert h.dtype == np.float32
    assert math.isclose(float(h.sum(dtype=np.float64)), 1.0, abs_tol=1e-6)
    assert np.unravel_index(h.argmax(), h.shape)[1:] in {(31, 20), (32, 20)}
    with pytest.raises(ien.CenterOutOfGrid):
        ien.gaussian_heatmap(70.0, 3.0)


def test_window_arithmetic():
    assert ien.window_count(60) == 50
    assert ien.window_count(12) == 3
    assert 156 * ien.window_count(60) == 7800


def test_scene_and_affordance_channels():
    scene = ien.generate_scene(3, seed=9)
    assert scene == ien.generate_scene(3, seed=9)
    assert len(scene["objects"]) == 3
    ch = ien.render_affordance_channels(scene)
    assert ch.shape == (5, 64, 64)
    assert ch.min() >= 0.0 and ch.max() <= 1.0
    with pytest.raises(ien.IenError):
        ien.generate_scene(4, seed=9)


def test_dataset_round_trip(dataset, tmp_path):
    assert dataset.trial_count == 2
    assert dataset.total_windows == 100
    assert dataset.hand_stack(0).shape == (60, 1, 64, 64)
    data = dataset.to_bytes()
    assert ien.Dataset.from_bytes(data).to_bytes() == data
    assert ien.build_dataset(2, mode="depth", seed=5).to_bytes() == data
    path = tmp_path / "d.ien"
    dataset.save(path)
    assert ien.Dataset.load(path).to_bytes() == data
    with pytest.raises(ien.CorruptArchive):
        ien.Dataset.from_bytes(data[:-5])


def test_model_predicts_a_distribution(dataset):
    model = ien.init_model(small_config(), seed=1)
    assert ien.parameter_count(small_config()) == sum(model.parameter(n).size for n in model.parameter_names)
    out = model.predict(dataset.scene_channels(0), dataset.hand_stack(0)[:10])
    assert out.shape == (1, 64, 64)
    assert (out > 0).all()
    assert math.isclose(float(out.sum(dtype=np.float64)), 1.0, abs_tol=1e-6)
    prefixes = model.predict_prefixes(dataset.scene_channels(0), dataset.hand_stack(0)[:10], [3, 10])
    np.testing.assert_allclose(prefixes[1], out, rtol=1e-5)
    with pytest.raises(ien.SequenceTooLong):
        model.predict(dataset.scene_channels(0), dataset.hand_stack(0)[:16])


def test_checkpoint_round_trip_and_mismatch():
    model = ien.init_model(small_config(), seed=2)
    data = model.to_bytes()
    back = ien.Model.from_bytes(data)
    assert back.config == model.config
    for name in model.parameter_names:
        np.testing.assert_array_equal(back.parameter(name), model.parameter(name))
    with pytest.raises(ien.CorruptArchive):
        ien.Model.from_bytes(b"XXXX" + data[4:])


def test_training_is_deterministic_and_lowers_the_loss(dataset):
    cfg = small_config()
    tc = {"batch_size": 2, "epochs": 20, "learning_rate": 3e-3, "seed": 4}
    a, log_a = ien.train(dataset, cfg, tc, overfit=2)
    b, log_b = ien.train(dataset, cfg, tc, overfit=2)
    assert a.to_bytes() == b.to_bytes()
    assert log_a["step_losses"] == log_b["step_losses"]
    assert len(log_a["step_losses"]) == 20
    assert log_a["epoch_losses"][-1] < log_a["epoch_losses"][0]
    with pytest.raises(ien.ConfigMismatch):
        ien.train(dataset, cfg, {"batch_size": 0})


def test_probability_trace(dataset):
    model = ien.init_model(small_config(), seed=3)
    trace = ien.probability_trace(model, dataset, 0, max_frames=12)
    assert len(trace["frames"]) == 12
    n_objects = len(dataset.detected_scene(0)["objects"])
    for frame in trace["frames"]:
        probs = [p["probability"] for p in frame["probabilities"]]
        assert len(probs) == n_objects
        assert math.isclose(sum(probs), 1.0, abs_tol=1e-9)


def test_decision_rule_and_metric():
    heat = np.full((1, 64, 64), 1.0 / 4096, dtype=np.float32)
    conf = ien.object_confidences(heat, [(3, 5, 16, 16), (0, 0, 64, 64)])
    assert conf[0] == pytest.approx(0.0625, rel=1e-6)
    assert conf[1] == pytest.approx(1.0, rel=1e-6)
    with pytest.raises(ien.BboxOutOfGrid):
        ien.object_confidences(heat, [(60, 0, 8, 8)])

    probs, degenerate = ien.normalize_confidences([0.3, 0.1])
    assert probs == pytest.approx([0.75, 0.25])
    assert not degenerate
    assert ien.normalize_confidences([0.0, 0.0])[1]
    with pytest.raises(ien.NotNormalized):
        ien.normalize_confidences([0.2, -0.1])

    assert ien.decide([0.75, 0.25], 0.6) == 0
    assert ien.decide([0.55, 0.45], 0.6) is None
    assert ien.decide([0.6, 0.4], 0.6) is None
    assert ien.decide([0.9, 0.1], 0.6, degenerate=True) is None

    s = ien.f_value([1] * 30 + [0] * 10 + [None] * 10, [1] * 50)
    assert (s["tp"], s["fp"], s["fn"]) == (30, 10, 10)
    assert s["f"] == pytest.approx(2 * 0.75 * 0.6 / 1.35)
    with pytest.raises(ien.LengthMismatch):
        ien.f_value([1], [1, 0])


def test_kl_divergence():
    t = ien.gaussian_heatmap(30.0, 30.0)
    assert ien.kl_divergence(t, t) == pytest.approx(0.0, abs=1e-6)
    u = np.full_like(t, 1.0 / t.size)
    assert ien.kl_divergence(t, u) > 0.0
