from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpdnet import autodiff as ad
from gpdnet import training
from gpdnet.autodiff import Tensor
from gpdnet.errors import ConfigError, ContractError, NumericError
from gpdnet.geometry import PointCloud, add_gaussian_noise, normalize_diameter, sample_primitive
from gpdnet.gradcheck import check_op
from gpdnet.training import (DESK_TRAIN, PAPER_TRAIN, PatchSampler, TrainingConfig, build_dataset,
                             init_state, loss_mse, loss_mse_sp, make_batch, make_rng,
                             nearest_clean, smoothed, train)

from tiny import TINY


def _tiny_dataset(n=300, seed=0):
    clean = [normalize_diameter(sample_primitive("sphere", n, seed))]
    return build_dataset(clean, 0.02, seed + 1)


TINY_TRAIN = TrainingConfig(batch_size=2, patch_size=64, iterations=20, lr=1e-3, seed=3)


# ---------------------------------------------------------------- losses

def test_mse_examples():
    c = np.zeros((1, 3))
    assert float(loss_mse(Tensor(c), c).data) == 0.0
    assert float(loss_mse(Tensor([[0.1, 0, 0]]), c).data) == pytest.approx(0.01, abs=1e-12)
    two = loss_mse(Tensor([[0.1, 0, 0], [0, 0.2, 0]]), np.zeros((2, 3)))
    assert float(two.data) == pytest.approx(0.025, abs=1e-12)


def test_mse_shape_mismatch():
    with pytest.raises(ContractError):
        loss_mse(Tensor(np.zeros((2, 3))), np.zeros((3, 3)))


def test_mse_sp_hand_case():
    with ad.precision(np.float64):
        out = loss_mse_sp(Tensor([[0.6, 0, 0], [1.0, 0, 0]]), np.array([[0.0, 0, 0], [1, 0, 0]]), 1.0)
    assert float(out.data) == pytest.approx(0.26, abs=1e-12)


def test_mse_sp_degenerate_cases():
    rng = np.random.default_rng(0)
    clean = rng.standard_normal((20, 3))
    den = Tensor(clean + 0.1 * rng.standard_normal((20, 3)))
    assert float(loss_mse_sp(den, clean, 0.0).data) == float(loss_mse(den, clean).data)
    for lam in (0.0, 0.5, 3.0):
        assert float(loss_mse_sp(Tensor(clean), clean, lam).data) == 0.0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0, 5))
def test_losses_are_non_negative(seed, lam):
    rng = np.random.default_rng(seed)
    clean = rng.standard_normal((15, 3))
    den = Tensor(rng.standard_normal((15, 3)))
    assert float(loss_mse(den, clean).data) >= 0
    assert float(loss_mse_sp(den, clean, lam).data) >= float(loss_mse(den, clean).data) - 1e-7


def test_loss_gradients_with_fixed_assignment():
    rng = np.random.default_rng(1)
    for _ in range(50):
        clean = rng.standard_normal((12, 3))
        den = clean + 0.3 * rng.standard_normal((12, 3))
        assign = nearest_clean(den, clean)
        assert check_op(lambda d: loss_mse(d, clean), [den])[0] < 1e-4
        assert check_op(lambda d: loss_mse_sp(d, clean, 0.7, assignment=assign), [den])[0] < 1e-4


def test_nearest_clean_respects_segments():
    pts = np.array([[0, 0, 0], [5, 0, 0], [0, 0, 0.1], [5, 0, 0.1]], dtype=float)
    clean = np.array([[5, 0, 0], [0, 0, 0], [5, 0, 0], [0, 0, 0]], dtype=float)
    np.testing.assert_array_equal(nearest_clean(pts, clean, [2, 2]), [1, 0, 3, 2])


# ---------------------------------------------------------------- batching

def test_config_presets_and_validation():
    assert (PAPER_TRAIN.batch_size, PAPER_TRAIN.patch_size, PAPER_TRAIN.lr) == (16, 1024, 1e-4)
    assert (DESK_TRAIN.batch_size, DESK_TRAIN.patch_size) == (4, 256)
    for bad in (dict(sigma=0), dict(lam=-1), dict(batch_size=0), dict(loss="l1"),
                dict(graph_mode="static")):
        with pytest.raises(ConfigError):
            TrainingConfig(**bad)


def test_whole_cloud_patches():
    data = _tiny_dataset(64)
    batch = make_batch(data, replace(TINY_TRAIN, patch_size=64), make_rng(0))
    for p in batch:
        assert sorted(p.indices) == list(range(64))


def test_batches_are_reproducible_and_aligned():
    data = _tiny_dataset(300)
    a = make_batch(data, TINY_TRAIN, make_rng(5))
    b = make_batch(data, TINY_TRAIN, make_rng(5))
    for p, q in zip(a, b):
        np.testing.assert_array_equal(p.indices, q.indices)
        np.testing.assert_array_equal(p.clean_reference, data[0].clean_reference[p.indices])
        assert len(p) == 64


def test_undersized_cloud_rejected():
    with pytest.raises(ContractError):
        PatchSampler(_tiny_dataset(30), 64)
    with pytest.raises(ContractError):
        PatchSampler([PointCloud(np.random.rand(100, 3))], 64)


def test_fresh_noise_changes_points_but_not_reference():
    data = _tiny_dataset(300)
    p = PatchSampler(data, 64).sample(1, make_rng(1), fresh_noise_sigma=0.02)[0]
    np.testing.assert_array_equal(p.clean_reference, data[0].clean_reference[p.indices])
    assert not np.array_equal(p.points, data[0].points[p.indices])


# ---------------------------------------------------------------- loop

def test_zero_iterations_leave_parameters_untouched():
    data = _tiny_dataset()
    cfg = replace(TINY_TRAIN, iterations=0)
    state, trace = train(data, TINY, cfg)
    fresh = init_state(TINY, cfg)
    assert trace == []
    for (n1, t1), (n2, t2) in zip(state.params.items(), fresh.params.items()):
        assert n1 == n2 and t1.data.tobytes() == t2.data.tobytes()


def test_tiny_training_reduces_loss():
    data = _tiny_dataset(600)
    cfg = replace(TINY_TRAIN, iterations=200)
    _, trace = train(data, TINY, cfg)
    sm = smoothed([r.loss for r in trace], 20)
    assert sm[-1] < sm[0]


def test_training_is_bitwise_reproducible():
    data = _tiny_dataset()
    _, a = train(data, TINY, TINY_TRAIN)
    _, b = train(data, TINY, TINY_TRAIN)
    assert [r.loss for r in a] == [r.loss for r in b]


def test_mse_sp_training_runs():
    data = _tiny_dataset()
    _, trace = train(data, TINY, replace(TINY_TRAIN, loss="mse-sp", iterations=5))
    assert len(trace) == 5 and all(np.isfinite(r.loss) for r in trace)


def test_fixed_graph_training_runs():
    data = _tiny_dataset()
    _, trace = train(data, TINY, replace(TINY_TRAIN, graph_mode="fixed", iterations=5))
    assert len(trace) == 5


def test_non_finite_loss_aborts_with_iteration(monkeypatch):
    data = _tiny_dataset()
    calls = {"n": 0}
    real = training.compute_loss

    def flaky(*args, **kwargs):
        calls["n"] += 1
        out = real(*args, **kwargs)
        return ad.scale(out, np.nan) if calls["n"] == 3 else out

    monkeypatch.setattr(training, "compute_loss", flaky)
    with pytest.raises(NumericError, match="iteration 3"):
        train(data, TINY, TINY_TRAIN)


def test_checkpoint_callback_interval():
    data = _tiny_dataset()
    seen = []
    train(data, TINY, replace(TINY_TRAIN, checkpoint_interval=7),
          on_checkpoint=lambda st: seen.append(st.iteration))
    assert seen == [7, 14]


def test_smoothed():
    np.testing.assert_allclose(smoothed(np.arange(25.0), 20), np.arange(9.5, 15.0))
    np.testing.assert_array_equal(smoothed([1.0, 2.0], 20), [1.0, 2.0])


def test_build_dataset_keeps_references():
    clean = [sample_primitive("cube", 50, 0), sample_primitive("torus", 50, 1)]
    data = build_dataset(clean, 0.01, 2)
    for c, d in zip(clean, data):
        np.testing.assert_array_equal(d.clean_reference, c.points)
    again = build_dataset(clean, 0.01, 2)
    assert data[1].points.tobytes() == again[1].points.tobytes()
    assert add_gaussian_noise(clean[0], 0.01, 3).points.shape == (50, 3)


def test_learning_rate_drop():
    cfg = TrainingConfig(lr=1e-3, lr_drop_at=5, lr_drop=0.1)
    assert [cfg.learning_rate(i) for i in (0, 4, 5, 9)] == [1e-3, 1e-3, 1e-3 * 0.1, 1e-3 * 0.1]
    assert TrainingConfig(lr=1e-3).learning_rate(10**6) == 1e-3
    with pytest.raises(ConfigError):
        TrainingConfig(lr_drop=0)


def test_learning_rate_drop_survives_resume():
    data = _tiny_dataset()
    cfg = replace(TINY_TRAIN, iterations=12, lr_drop_at=6)
    full, trace = train(data, TINY, cfg)
    half, _ = train(data, TINY, replace(cfg, iterations=6))
    resumed, rest = train(data, TINY, cfg, state=half)
    assert [r.loss for r in rest] == [r.loss for r in trace[6:]]
    assert resumed.optimizer.lr == full.optimizer.lr == pytest.approx(1e-4)
