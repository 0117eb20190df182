import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from octdenoise.augment import AugmentationSpec, expand_dataset
from octdenoise.image_core import DatasetManifest
from octdenoise.network import NetworkConfig, build_network, get_weights, load_weights
from octdenoise.phantom import NoiseSpec, PhantomConfig, generate_phantom
from octdenoise.training import (
    TOY_CONFIG, NumericalAbort, OptimizerState, TrainConfig, adam_step, check_gradients,
    epoch_batches, gradient_check, mae_loss, read_checkpoint_sidecar, restore_rng, train,
)


def test_mae_cases():
    x = torch.rand(2, 1, 8, 8)
    assert mae_loss(x, x) == 0
    assert float(mae_loss(torch.full((3, 4), 0.5), torch.full((3, 4), 0.25))) == 0.25
    with pytest.raises(ValueError):
        mae_loss(torch.zeros(2, 2), torch.zeros(2, 3))


@pytest.mark.parametrize("seed", range(10))
def test_mae_matches_elementwise_sum(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((3, 7, 5)), rng.standard_normal((3, 7, 5))
    want = math.fsum(abs(p - q) for p, q in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
    assert abs(float(mae_loss(torch.from_numpy(a), torch.from_numpy(b))) - want) <= 1e-12
    assert abs(mae_loss(a, b) - want) <= 1e-12


def _adam(params, lr=0.1, **kw):
    cfg = TrainConfig(learning_rate=lr, **kw)
    return cfg, OptimizerState.zeros_like(params)


def test_adam_zero_gradient_is_a_no_op():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    cfg, state = _adam(p)
    adam_step(p, {"w": torch.zeros(2, dtype=torch.float64)}, state, cfg)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_first_step_moves_by_lr():
    p = {"w": torch.tensor([0.0], dtype=torch.float64)}
    cfg, state = _adam(p)
    adam_step(p, {"w": torch.tensor([1.0], dtype=torch.float64)}, state, cfg)
    assert float(p["w"]) == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)


def _scalar_adam(w, grad, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    path = []
    for t in range(1, steps + 1):
        g = grad(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        path.append(w)
    return path


def test_adam_descends_absolute_value():
    w = torch.tensor([0.0], dtype=torch.float64)
    cfg, state = _adam({"w": w}, lr=0.5)
    path = []
    for _ in range(10):
        adam_step({"w": w}, {"w": torch.sign(w - 3)}, state, cfg)
        path.append(float(w))
    want = _scalar_adam(0.0, lambda x: math.copysign(1.0, x - 3) if x != 3 else 0.0, 10, 0.5)
    assert path == pytest.approx(want, abs=1e-12)
    dist = [abs(x - 3) for x in path]
    # strictly closer until the iterate first reaches the minimum, then momentum overshoots
    first = next(i for i, x in enumerate(path) if x >= 3 - 1e-6)
    assert all(a > b for a, b in zip([3.0] + dist[:first], dist[:first + 1]))
    assert max(dist) < 3.0


def test_adam_matches_reference_optimizer():
    torch.manual_seed(0)
    mine = torch.randn(5, 3, dtype=torch.float64)
    ref = mine.clone().requires_grad_(True)
    opt = torch.optim.Adam([ref], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    cfg, state = _adam({"w": mine}, lr=1e-2)
    for step in range(25):
        g = torch.randn(5, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(step))
        adam_step({"w": mine}, {"w": g}, state, cfg)
        ref.grad = g.clone()
        opt.step()
    assert torch.allclose(mine, ref.detach(), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(1e-4, 1.0), st.floats(1e-3, 1e3))
def test_adam_step_bounded_by_lr(seed, lr, magnitude):
    rng = np.random.default_rng(seed)
    w = torch.zeros(16, dtype=torch.float64)
    cfg, state = _adam({"w": w}, lr=lr)
    for _ in range(20):
        before = w.clone()
        g = torch.from_numpy(magnitude * rng.choice([-1.0, 1.0], size=16))
        adam_step({"w": w}, {"w": g}, state, cfg)
        assert torch.all((w - before).abs() <= lr * 1.01)


def test_adam_aborts_on_nan():
    p = {"w": torch.zeros(2)}
    cfg, state = _adam(p)
    with pytest.raises(NumericalAbort):
        adam_step(p, {"w": torch.tensor([0.0, math.nan])}, state, cfg)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 200), st.integers(1, 32), st.integers(0, 1000))
def test_shuffle_visits_every_pair_once(n, bs, seed):
    batches = epoch_batches(n, bs, np.random.default_rng(seed))
    assert sorted(np.concatenate(batches).tolist()) == list(range(n))
    assert all(len(b) <= bs for b in batches)


@pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(adam_beta1=1.0), dict(adam_epsilon=0),
                                dict(batch_size=0), dict(epochs=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


# -- training loop ----------------------------------------------------------

def _pairs(tmp_path, n_scans, factor, size):
    scans = []
    for i in range(n_scans):
        scan, _ = generate_phantom(PhantomConfig(height=size, width=size, seed=i))
        scans.append(scan.derive(scan.pixels, subject_id=f"S{i:02d}", kind="clean"))
    return expand_dataset(scans, AugmentationSpec(), NoiseSpec(sigma=0.25), tmp_path, factor=factor)


TINY_NET = NetworkConfig(width_scale=1 / 8, levels=2)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    return _pairs(tmp_path_factory.mktemp("tiny"), 4, 2, 64)


def test_zero_epochs_returns_initial_weights():
    result = train(DatasetManifest(), TINY_NET, TrainConfig(epochs=0, seed=3))
    assert result.log == []
    init = get_weights(build_network(TINY_NET, seed=3))
    assert all(np.array_equal(init[k], v) for k, v in result.weights.items())


def test_training_is_deterministic(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=3, seed=4, checkpoint_every=2, patch_height=32, patch_width=32,
                      learning_rate=1e-3)
    a = train(tiny_data, TINY_NET, cfg, tmp_path / "a")
    b = train(tiny_data, TINY_NET, cfg, tmp_path / "b")
    assert [r.loss for r in a.log] == [r.loss for r in b.log]
    assert all(math.isfinite(r.loss) for r in a.log)
    for name in ("final.octw", "ckpt_000002.octw"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_sidecar_records_state(tiny_data, tmp_path):
    cfg = TrainConfig(epochs=1, batch_size=4, seed=1, checkpoint_every=1)
    train(tiny_data, TINY_NET, cfg, tmp_path)
    side = read_checkpoint_sidecar(tmp_path / "ckpt_000001.octw")
    assert side["step"] == "1"
    assert side["learning_rate"] == "0.0001"
    restore_rng(side["rng_state"]).random()
    load_weights(tmp_path / "final.octw")
    log = (tmp_path / "train_log.csv").read_text().splitlines()
    assert log[0] == "# workers=1"
    assert log[1] == "step,epoch,loss,wall_ms"
    assert len(log) == 2 + 2


@pytest.mark.slow
def test_toy_run_halves_loss(tmp_path):
    data = _pairs(tmp_path, 20, 10, 64)
    assert len(data.entries) == 200
    cfg = TrainConfig(epochs=30, batch_size=8, learning_rate=5e-4, seed=0)
    result = train(data, NetworkConfig(width_scale=1 / 4), cfg)
    losses = result.epoch_losses()
    assert len(losses) == 30
    assert losses[-1] < 0.5 * losses[0]


# -- gradient checking ------------------------------------------------------

def test_linear_layer_gradients_are_exact():
    torch.manual_seed(0)
    layer = nn.Conv2d(1, 2, 3, padding=1)
    x = torch.randn(2, 1, 6, 6)
    y = torch.randn(2, 2, 6, 6)
    report = check_gradients(layer, x, y, tolerance=1e-9)
    assert report.n_checked == report.n_total == 20
    assert report.max_rel_error < 1e-9
    assert report.passed


def test_corrupted_gradient_is_caught():
    torch.manual_seed(0)
    layer = nn.Conv2d(1, 2, 3, padding=1)
    report = check_gradients(layer, torch.randn(2, 1, 6, 6), torch.randn(2, 2, 6, 6), corrupt=True)
    assert not report.passed
    assert report.max_rel_error > 0.3


def test_toy_network_gradient_sample():
    report = gradient_check(TOY_CONFIG, sample=300, seed=1)
    assert report.passed, "\n".join(report.lines())


def test_toy_network_corruption_detected():
    assert not gradient_check(TOY_CONFIG, sample=50, corrupt=True).passed
