import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from e2srs import SPEED_OF_LIGHT
from e2srs.charting import (
    EmptyBatch,
    NoValidPairs,
    PairBatch,
    TrainConfig,
    backward,
    displacement_pair_loss,
    sample_pairs,
    tdoa_pair_loss,
    total_loss,
    train,
    valid_pairs,
)
from e2srs.dataset import load_dataset
from e2srs.geometry import Geometry, Trp, default_geometry, oracle_tdoa
from e2srs.model import build_network
from e2srs.preprocess import PreprocessConfig, prepare_training_set

from charting_helpers import relative_errors, small_geometry, small_net, toy_set

C = SPEED_OF_LIGHT


# -- loss terms ----------------------------------------------------------------


def test_all_masks_zero_gives_zero_tdoa_loss(geometry):
    z = np.array([5.0, 5.0])
    t = np.full(8, 1e-8)
    assert tdoa_pair_loss(z, z, t, t, np.zeros(8), np.zeros(8), geometry) == 0.0


def test_loss_vanishes_at_true_position(geometry):
    p, q = np.array([12.0, 7.0]), np.array([13.0, 7.5])
    ones = np.ones(8)
    loss = tdoa_pair_loss(p, q, oracle_tdoa(p, geometry), oracle_tdoa(q, geometry), ones, ones, geometry)
    assert loss <= 1e-18


def test_hand_computed_residual():
    g = Geometry([Trp(1, 1, (0.0, 5.0, 0.0)), Trp(1, 2, (3.0, 4.0, 0.0))], {1: 1})
    z = np.zeros(2)
    tdoa = np.array([0.0, 1.0 / C])
    loss = tdoa_pair_loss(z, z, tdoa, tdoa, [1, 1], [0, 0], g, c=C)
    assert loss == pytest.approx(1.0, rel=1e-12)


@pytest.mark.parametrize("zi,zj,d,expected", [
    ((0, 0), (0, 0), 0.0, 0.0),
    ((0, 0), (3, 4), 5.0, 0.0),
    ((0, 0), (0, 0), 2.0, 4.0),
])
def test_displacement_examples(zi, zj, d, expected):
    assert displacement_pair_loss(zi, zj, d) == expected


@given(st.tuples(st.floats(-50, 50), st.floats(-50, 50)), st.tuples(st.floats(-50, 50), st.floats(-50, 50)),
       st.floats(0, 20))
def test_displacement_symmetric(zi, zj, d):
    assert displacement_pair_loss(zi, zj, d) == displacement_pair_loss(zj, zi, d)


def one_pair_batch(geometry, beta=1.0):
    data = toy_set(4, geometry=geometry)
    return PairBatch.from_indices(data, [0], [1], [0.7]), data


def test_one_pair_total_matches_hand_sum():
    g = small_geometry()
    batch, _ = one_pair_batch(g)
    net = small_net(0)
    cfg = TrainConfig(beta=0.5)
    z = net.forward(np.concatenate([batch.x_i, batch.x_j]))
    tdoa = tdoa_pair_loss(z[0], z[1], batch.tdoa_i[0], batch.tdoa_j[0], batch.mask_i[0], batch.mask_j[0], g)
    disp = displacement_pair_loss(z[0], z[1], 0.7)
    out = total_loss(batch, net, cfg, g)
    assert out.tdoa_sum == pytest.approx(tdoa / g.num_tdoa_terms, rel=1e-12)
    assert out.disp_sum == pytest.approx(disp, rel=1e-12)
    assert out.total == pytest.approx(tdoa / g.num_tdoa_terms + 0.5 * disp, rel=1e-12)
    assert out.pairs == 1


@settings(max_examples=25)
@given(st.integers(0, 1000), st.floats(0, 5))
def test_breakdown_invariant_and_beta_linearity(seed, beta):
    g = small_geometry()
    data = toy_set(12, seed=seed)
    batch = sample_pairs(data, TrainConfig(batch_pairs=6), np.random.default_rng(seed))
    net = small_net(seed)
    out = total_loss(batch, net, TrainConfig(beta=beta), g)
    assert out.total == pytest.approx(out.tdoa_sum + beta * out.disp_sum, rel=1e-12, abs=1e-300)
    zero = total_loss(batch, net, TrainConfig(beta=0.0), g)
    assert zero.total == zero.tdoa_sum == out.tdoa_sum


def test_duplicated_batch_same_loss_and_gradient():
    g = small_geometry()
    data = toy_set(10)
    batch = sample_pairs(data, TrainConfig(batch_pairs=4), np.random.default_rng(1))
    net = small_net(1)
    cfg = TrainConfig()
    a, ga = backward(net, batch, cfg, g)
    b, gb = backward(net, batch.concat(batch), cfg, g)
    assert b.total == pytest.approx(a.total, rel=1e-12)
    for x, y in zip(ga, gb):
        assert np.allclose(x, y, rtol=1e-10, atol=1e-14)


def test_empty_batch():
    g = small_geometry()
    batch = PairBatch.from_indices(toy_set(3), [], [], [])
    with pytest.raises(EmptyBatch):
        total_loss(batch, small_net(0), TrainConfig(), g)
    with pytest.raises(EmptyBatch):
        backward(small_net(0), batch, TrainConfig(), g)


def test_zero_beta_and_masks_give_zero_gradients():
    g = small_geometry()
    data = toy_set(6)
    data.mask[:] = 0
    batch = sample_pairs(data, TrainConfig(batch_pairs=4), np.random.default_rng(0))
    loss, grads = backward(small_net(2), batch, TrainConfig(beta=0.0), g)
    assert loss.total == 0.0
    assert all(np.all(gr == 0.0) for gr in grads)


@settings(max_examples=20)
@given(st.integers(0, 10_000), st.floats(-1e-6, 1e-6))
def test_masked_tdoa_perturbation_changes_nothing(seed, delta):
    g = default_geometry()
    rng = np.random.default_rng(seed)
    data = toy_set(8, m=8, c=64, seed=seed, geometry=g)
    data.mask[:] = rng.random(data.mask.shape) < 0.6
    batch = sample_pairs(data, TrainConfig(batch_pairs=5), np.random.default_rng(seed))
    net = build_network(8, 64)
    net.init(np.random.default_rng(seed))
    base_loss, base_grads = backward(net, batch, TrainConfig(), g)
    batch.tdoa_i = np.where(batch.mask_i == 0, batch.tdoa_i + delta, batch.tdoa_i)
    batch.tdoa_j = np.where(batch.mask_j == 0, batch.tdoa_j - delta, batch.tdoa_j)
    loss, grads = backward(net, batch, TrainConfig(), g)
    assert loss.total == base_loss.total
    assert all(np.array_equal(a, b) for a, b in zip(grads, base_grads))


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.tuples(st.floats(-5, 5), st.floats(-5, 5)).filter(lambda o: np.hypot(*o) > 1e-3))
def test_tdoa_loss_anchored_to_trp_coordinates(seed, offset):
    g = default_geometry()
    rng = np.random.default_rng(seed)
    p, q = rng.uniform((3, 3), (47, 11)), rng.uniform((3, 3), (47, 11))
    ones = np.ones(8)
    tp, tq = oracle_tdoa(p, g), oracle_tdoa(q, g)
    base = tdoa_pair_loss(p, q, tp, tq, ones, ones, g)
    moved = tdoa_pair_loss(p + offset, q + offset, tp, tq, ones, ones, g)
    assert moved > base


# -- gradient check ------------------------------------------------------------


@pytest.mark.parametrize("seed", range(3))
def test_gradient_matches_finite_differences(seed):
    g = small_geometry()
    data = toy_set(8, seed=seed)
    batch = sample_pairs(data, TrainConfig(batch_pairs=4), np.random.default_rng(seed))
    assert relative_errors(small_net(seed), batch, TrainConfig(), g) <= 1e-4


# -- pair sampling ----------------------------------------------------------------


def test_only_close_pair_returned():
    data = toy_set(3)
    data.timestamps_s = np.array([0.0, 1.0, 10.0])
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = sample_pairs(data, TrainConfig(epsilon_s=2.0, batch_pairs=5), rng)
        assert list(zip(batch.i, batch.j)) == [(0, 1)]


def test_no_valid_pairs():
    data = toy_set(3, dt=5.0)
    with pytest.raises(NoValidPairs):
        sample_pairs(data, TrainConfig(epsilon_s=1.0), np.random.default_rng(0))


@given(st.lists(st.floats(0, 100), min_size=2, max_size=30, unique=True), st.floats(0.1, 20))
def test_valid_pairs_brute_force(times, eps):
    t = np.array(times)
    got = {tuple(p) for p in valid_pairs(t, eps)}
    want = {(i, j) for i in range(len(t)) for j in range(i + 1, len(t)) if abs(t[j] - t[i]) <= eps}
    assert got == want


def test_pairs_respect_window_and_are_distinct():
    data = toy_set(50, dt=0.3)
    batch = sample_pairs(data, TrainConfig(epsilon_s=1.0, batch_pairs=64), np.random.default_rng(3))
    assert np.all(np.abs(data.timestamps_s[batch.j] - data.timestamps_s[batch.i]) <= 1.0)
    assert len({(a, b) for a, b in zip(batch.i, batch.j)}) == len(batch)


def test_sampling_deterministic_under_seed():
    data = toy_set(40)
    a = sample_pairs(data, TrainConfig(), np.random.default_rng(5))
    b = sample_pairs(data, TrainConfig(), np.random.default_rng(5))
    assert np.array_equal(a.i, b.i) and np.array_equal(a.j, b.j)


def test_pair_histogram_is_uniform():
    data = toy_set(20, dt=1.0)
    cfg = TrainConfig(epsilon_s=2.0, batch_pairs=1)
    pairs = [tuple(p) for p in valid_pairs(data.timestamps_s, cfg.epsilon_s)]
    index = {p: k for k, p in enumerate(pairs)}
    rng = np.random.default_rng(17)
    counts = np.zeros(len(pairs))
    for _ in range(10_000):
        b = sample_pairs(data, cfg, rng)
        counts[index[(b.i[0], b.j[0])]] += 1
    assert stats.chisquare(counts).pvalue > 0.05


# -- training ----------------------------------------------------------------


def test_one_epoch_reduces_loss(mixed_dataset, geometry):
    data = prepare_training_set(load_dataset(mixed_dataset), geometry, PreprocessConfig())
    _, history = train(data, geometry, TrainConfig(epochs=1, seed=3))
    assert len(history) == 2
    assert history[1].total <= history[0].total


def test_zero_learning_rate_keeps_parameters(mixed_dataset, geometry):
    data = prepare_training_set(load_dataset(mixed_dataset), geometry, PreprocessConfig())
    net = build_network(8, 64)
    net.init(np.random.default_rng(0), output_bias=(25.0, 7.0))
    before = [p.copy() for p in net.params()]
    train(data, geometry, TrainConfig(epochs=1, learning_rate=0.0), network=net)
    assert all(a.tobytes() == b.tobytes() for a, b in zip(before, net.params()))


def test_same_seed_same_history():
    g = small_geometry()
    data = toy_set(30)
    cfg = TrainConfig(epochs=3, arch="small", batch_pairs=8, seed=4)
    _, h1 = train(data, g, cfg)
    _, h2 = train(data, g, cfg)
    assert h1 == h2


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(beta=-1)
    with pytest.raises(ValueError):
        TrainConfig(epsilon_s=0)
