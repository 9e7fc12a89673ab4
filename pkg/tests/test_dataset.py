import numpy as np
import pytest

from e2srs.dataset import (
    FLAG_GROUND_TRUTH,
    BadDatasetMagic,
    BadDimensions,
    DatasetWriter,
    NonMonotonicTimestamps,
    Snapshot,
    load_dataset,
)
from e2srs.synth import ChannelConfig, Trajectory, gen_dataset


def write(path, timestamps, trps=(1, 2), n_fft=4, flags=0):
    with DatasetWriter(path, trps, n_fft, 30e3, flags) as w:
        for i, t in enumerate(timestamps):
            cfr = np.full((sum(trps), n_fft), i + 1j, dtype=">c8")
            w.append(Snapshot(t, cfr, np.array([i, 2.0 * i, 0.0])))
    return path


def test_synth_file_reports_layout(tmp_path, geometry):
    path = tmp_path / "d.srsd"
    traj = Trajectory.walk([(3, 5), (47, 5), (47, 10), (3, 10)], 1.0, 0.1)
    traj = Trajectory(traj.positions[:100], traj.timestamps_ns[:100], traj.labels[:100])
    gen_dataset(geometry, ChannelConfig(seed=1), traj, path)
    ds = load_dataset(path)
    assert (len(ds), ds.num_rus, ds.num_trps) == (100, 2, 8)
    assert ds.trps_per_ru == [4, 4] and ds.n_fft == 1024
    assert ds.has_ground_truth and ds.has_los and ds.has_tdoa
    assert np.allclose(ds[7].ground_truth[:2], traj.positions[7])


def test_random_access_reads(tmp_path):
    ds = load_dataset(write(tmp_path / "a.srsd", [10, 20, 30]))
    snap = ds[2]
    assert snap.timestamp_ns == 30
    assert snap.cfr.shape == (3, 4) and snap.cfr.dtype == np.dtype(">c8")
    assert np.all(snap.cfr == 2 + 1j)
    assert snap.ground_truth is None and snap.los is None
    assert [s.timestamp_ns for s in ds] == [10, 20, 30]
    with pytest.raises(IndexError):
        ds[3]


def test_ground_truth_column(tmp_path):
    ds = load_dataset(write(tmp_path / "a.srsd", [1, 2], flags=FLAG_GROUND_TRUTH))
    assert np.array_equal(ds.ground_truth()[1], [1.0, 2.0, 0.0])


def test_non_monotonic_timestamps_rejected_on_load(tmp_path):
    path = write(tmp_path / "a.srsd", [5, 6])
    raw = bytearray(path.read_bytes())
    header = 4 + 1 + 1 + 2 + 4 + 8 + 4 + 1
    rec = (len(raw) - header) // 2
    raw[header + rec:header + rec + 8] = (5).to_bytes(8, "big")
    path.write_bytes(bytes(raw))
    with pytest.raises(NonMonotonicTimestamps):
        load_dataset(path)


def test_writer_refuses_repeated_timestamp(tmp_path):
    with pytest.raises(NonMonotonicTimestamps):
        write(tmp_path / "a.srsd", [5, 5])


def test_truncated_file(tmp_path):
    path = write(tmp_path / "a.srsd", [1, 2, 3])
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(BadDimensions):
        load_dataset(path)


def test_header_only_truncation(tmp_path):
    path = tmp_path / "a.srsd"
    path.write_bytes(b"SRSD\x01")
    with pytest.raises(BadDimensions):
        load_dataset(path)


def test_bad_magic(tmp_path):
    path = write(tmp_path / "a.srsd", [1])
    raw = bytearray(path.read_bytes())
    raw[0] = 0
    path.write_bytes(bytes(raw))
    with pytest.raises(BadDatasetMagic):
        load_dataset(path)


@pytest.mark.parametrize("trps,n_fft", [((1,), 6), ((), 8), ((0,), 8), ((200, 100), 8)])
def test_invalid_layouts(tmp_path, trps, n_fft):
    with pytest.raises(BadDimensions):
        DatasetWriter(tmp_path / "a.srsd", trps, n_fft, 30e3, 0)


def test_raw_bytes_match_file(tmp_path):
    path = write(tmp_path / "a.srsd", [1, 2])
    ds = load_dataset(path)
    assert ds.raw_cfr_bytes(1) in path.read_bytes()
    assert ds.raw_cfr_bytes(1) == ds[1].cfr.tobytes()


def test_check_layout(tmp_path):
    ds = load_dataset(write(tmp_path / "a.srsd", [1]))
    ds.check_layout([1, 2], 4)
    with pytest.raises(BadDimensions):
        ds.check_layout([4, 4])
