import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from e2srs import SPEED_OF_LIGHT
from e2srs.dataset import load_dataset
from e2srs.geometry import Geometry, Trp, labeled_points, oracle_tdoa
from e2srs.preprocess import estimate_tdoa, idft_rows, ifft_shift_rows
from e2srs.synth import ChannelConfig, Trajectory, gen_cfr, gen_dataset, label_for, path_cfr


def test_single_path_has_flat_magnitude():
    cfg = ChannelConfig(snr_db=None)
    w = path_cfr([[37e-9]], [[0.7 * np.exp(0.3j)]], cfg)[0]
    lo, hi = cfg.band
    assert np.allclose(np.abs(w[lo:hi]), 0.7, rtol=0, atol=1e-12)
    assert np.all(w[hi:] == 0)


def test_los_delay_from_phase_slope():
    g = Geometry([Trp(1, 1, (0.0, 0.0, 0.0)), Trp(1, 2, (40.0, 0.0, 0.0))], {1: 1})
    cfg = ChannelConfig(nlos_prob=0.0, snr_db=None)
    snap = gen_cfr((3.0, 4.0, 0.0), g, cfg, np.random.default_rng(0))
    w = snap.cfr[0].astype(complex)
    step = np.angle(np.mean(w[1:600] * np.conj(w[:599])))
    delay = -step / (2 * np.pi * cfg.subcarrier_spacing_hz)
    assert delay == pytest.approx(5 / SPEED_OF_LIGHT, rel=1e-9)
    assert 5 / SPEED_OF_LIGHT == pytest.approx(1.6678e-8, rel=1e-4)


def test_noiseless_los_tdoa_matches_oracle(geometry):
    cfg = ChannelConfig(nlos_prob=0.0, snr_db=None)
    rng = np.random.default_rng(4)
    ts = cfg.sample_period
    for p in list(labeled_points().values())[:6]:
        snap = gen_cfr(p, geometry, cfg, rng)
        est = estimate_tdoa(ifft_shift_rows(idft_rows(snap.cfr)), geometry, ts)
        assert np.all(est.valid)
        assert np.all(np.abs(est.tdoa - oracle_tdoa(p, geometry)) <= ts / 2)


def test_snapshot_labels(geometry):
    cfg = ChannelConfig(nlos_prob=0.5, seed=3)
    snap = gen_cfr((10.0, 6.0), geometry, cfg, np.random.default_rng(3))
    assert snap.cfr.shape == (8, 1024) and snap.cfr.dtype == np.dtype(">c8")
    assert set(np.unique(snap.los)) <= {0, 1}
    assert np.array_equal(snap.tdoa, oracle_tdoa((10.0, 6.0), geometry))
    assert np.array_equal(snap.ground_truth, [10.0, 6.0, 0.0])


def test_parseval_energy(geometry):
    snap = gen_cfr((20.0, 8.0), geometry, ChannelConfig(seed=2), np.random.default_rng(2))
    w = snap.cfr.astype(complex)
    h = idft_rows(w)
    assert np.allclose(np.sum(np.abs(h) ** 2, axis=1), np.sum(np.abs(w) ** 2, axis=1) / 1024, rtol=1e-6)


def test_gen_cfr_deterministic(geometry):
    cfg = ChannelConfig(seed=9)
    a = gen_cfr((5.0, 5.0), geometry, cfg, np.random.default_rng(1))
    b = gen_cfr((5.0, 5.0), geometry, cfg, np.random.default_rng(1))
    assert a.cfr.tobytes() == b.cfr.tobytes() and np.array_equal(a.los, b.los)


def test_full_testpoint_dataset(tmp_path, geometry):
    path = tmp_path / "tp.srsd"
    out = gen_dataset(geometry, ChannelConfig(seed=0), Trajectory.testpoints(100, 0.1), path)
    assert out.num_snapshots == 1600
    ds = load_dataset(path)
    assert len(ds) == 1600
    assert label_for(ds[1599].ground_truth) == "P"


def test_same_seed_same_bytes(tmp_path, geometry):
    traj = Trajectory.testpoints(3, 0.1)
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    gen_dataset(geometry, ChannelConfig(seed=21), traj, a)
    gen_dataset(geometry, ChannelConfig(seed=21), traj, b)
    gen_dataset(geometry, ChannelConfig(seed=22), traj, c)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_bytes() != c.read_bytes()


def test_nlos_fraction_binomial(tmp_path, geometry):
    cfg = ChannelConfig(n_fft=64, band=(0, 40), nlos_prob=0.3, seed=8)
    traj = Trajectory.dwell("X", (20.0, 7.0), 1250, 0.01)
    out = gen_dataset(geometry, cfg, traj, tmp_path / "n.srsd")
    # 10,000 links; 0.02 is more than four standard deviations
    assert abs(out.nlos_fraction - 0.3) <= 0.02
    ds = load_dataset(tmp_path / "n.srsd")
    los = np.array([s.los for s in ds])
    assert 1 - los.mean() == pytest.approx(out.nlos_fraction)


def test_glitches_are_recorded(tmp_path, geometry):
    cfg = ChannelConfig(glitch_prob=0.05, seed=2)
    out = gen_dataset(geometry, cfg, Trajectory.testpoints(10, 0.1), tmp_path / "g.srsd")
    assert out.glitches
    for per_ru in out.glitches.values():
        for offset in per_ru.values():
            taps = abs(offset) / cfg.sample_period
            assert 8 <= taps <= 40


@settings(max_examples=50)
@given(
    st.lists(st.tuples(st.floats(0, 50), st.floats(2, 12)), min_size=2, max_size=6),
    st.floats(0.2, 3.0),
    st.floats(0.05, 0.5),
)
def test_walk_steps_are_exact(waypoints, speed, interval):
    traj = Trajectory.walk(waypoints, speed, interval)
    if len(traj) > 1:
        steps = np.linalg.norm(np.diff(traj.positions, axis=0), axis=1)
        assert np.all(np.abs(steps - speed * interval) <= 1e-9)
        assert np.all(np.diff(traj.timestamps_ns) == int(round(interval * 1e9)))


def test_concatenation_keeps_time_increasing():
    a = Trajectory.walk([(0, 5), (10, 5)], 1.0, 0.5)
    b = Trajectory.testpoints(2, 0.5, labels="CD")
    c = a + b
    assert len(c) == len(a) + len(b)
    assert np.all(np.diff(c.timestamps_ns) > 0)
    assert c.labels[-1] == "D"


def test_trajectory_text():
    traj = Trajectory.from_text(
        "# example\ninterval 0.5\ndwell Q 1 2 3\nwalk 1.0 0,5 2,5\ntestpoints 1\n"
    )
    assert len(traj) == 3 + 5 + 16
    assert traj.labels[:3] == ["Q"] * 3
    assert np.allclose(traj.positions[3:8, 0], [0, 0.5, 1.0, 1.5, 2.0])


def test_trajectory_text_errors():
    with pytest.raises(ValueError, match="line 1"):
        Trajectory.from_text("jump 1 2")
    with pytest.raises(ValueError):
        Trajectory.from_text("# nothing\n")


def test_trajectory_shorthands():
    assert len(Trajectory.load("testpoints:3")) == 48
    survey = Trajectory.load("survey")
    labels = {label_for(p) for p in survey.positions[-160:]}
    assert labels == set("ABCDEFGHIJKLMNOP")


def test_channel_config_validation():
    with pytest.raises(ValueError):
        ChannelConfig(n_fft=1000)
    with pytest.raises(ValueError):
        ChannelConfig(band=(0, 2000))
    with pytest.raises(ValueError):
        ChannelConfig(nlos_excess_delay_s=(0.0, 1e-9))
