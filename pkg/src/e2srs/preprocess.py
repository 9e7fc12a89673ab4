"""
CFR -> normalized CIR pipeline plus TDoA estimation and LoS masking.

Stages, per snapshot::

    cfr (M, N) --idft_rows--> raw CIR --ifft_shift_rows--> shifted
    shifted --tdoa_align--> aligned (reference peak of each RU at tap C/2)
    aligned --normalize_truncate--> |.| / alpha over taps [0, C)  -> (M, C)

Outlier removal looks at the reference-TRP peak tap of every RU over a
window of snapshots. All math is float64.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from .geometry import Geometry

log = logging.getLogger(__name__)


class PreprocessError(ValueError):
    code = "PREPROCESS_ERROR"


class DimensionMismatch(PreprocessError):
    code = "DIMENSION_MISMATCH"


class NoPeak(PreprocessError):
    code = "NO_PEAK"


class DegenerateAlpha(PreprocessError):
    code = "DEGENERATE_ALPHA"


class EmptySet(PreprocessError):
    code = "EMPTY_SET"


class AllZero(PreprocessError):
    code = "ALL_ZERO"


@dataclass
class PreprocessConfig:
    taps: int = 64  # C
    outlier_jump: int = 3  # J
    outlier_window: int = 11
    los_papr: float = 27.0  # rho
    los_max_lateness: float = 1 / 6  # fraction of C past the anchor
    peak_ratio: float = 10.0
    subcarrier_spacing_hz: float = 30e3

    def sample_period(self, n_fft: int) -> float:
        return 1.0 / (n_fft * self.subcarrier_spacing_hz)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _check_pow2_rows(a: np.ndarray):
    if a.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {a.shape}")
    n = a.shape[1]
    if n < 1 or n & (n - 1):
        raise DimensionMismatch(f"N_fft={n} is not a power of two")


def idft_rows(cfr) -> np.ndarray:
    """Row-wise inverse DFT with 1/N scaling; a delay of k samples peaks at tap k."""
    cfr = np.asarray(cfr)
    _check_pow2_rows(cfr)
    return np.fft.ifft(cfr.astype(np.complex128), axis=1)


def dft_rows(cir) -> np.ndarray:
    return np.fft.fft(np.asarray(cir, dtype=np.complex128), axis=1)


def ifft_shift_rows(cir) -> np.ndarray:
    """Rotate every row by N/2 so tap 0 lands in the middle."""
    cir = np.asarray(cir)
    return np.roll(cir, cir.shape[-1] // 2, axis=-1)


def detectable(row, ratio: float = 10.0) -> bool:
    mag = np.abs(row)
    peak = mag.max()
    return bool(peak > 0 and peak > ratio * np.median(mag))


def reference_peaks(shifted, geometry: Geometry) -> np.ndarray:
    """Integer peak tap of each RU's reference row -> (K,)."""
    return np.argmax(np.abs(np.asarray(shifted)[geometry.ref_rows]), axis=1)


def _outlier_flags(peaks, jump: int, window: int) -> np.ndarray:
    peaks = np.asarray(peaks, dtype=float)
    if peaks.ndim == 1:
        peaks = peaks[:, None]
    t = len(peaks)
    half = window // 2
    bad = np.zeros(t, dtype=bool)
    for i in range(t):
        med = np.median(peaks[max(0, i - half):min(t, i + half + 1)], axis=0)
        bad[i] = np.any(np.abs(peaks[i] - med) > jump)
    return bad


def remove_outliers(window, geometry: Geometry, jump: int = 3, median_window: int = 11):
    """Split a sequence of shifted CIR matrices into (kept, dropped) index arrays.

    A snapshot is dropped when any RU's reference peak tap is more than ``jump``
    taps away from the centered sliding median of that RU's reference peaks.
    """
    peaks = np.array([reference_peaks(cir, geometry) for cir in window])
    return split_outliers(peaks, jump, median_window)


def split_outliers(peaks, jump: int = 3, median_window: int = 11):
    """Same rule as :func:`remove_outliers` on precomputed (T, K) reference peaks."""
    if len(peaks) < 5:
        raise ValueError("outlier removal needs at least 5 snapshots")
    bad = _outlier_flags(peaks, jump, median_window)
    return np.flatnonzero(~bad), np.flatnonzero(bad)


class StreamingOutlierFilter:
    """Causal variant for live streams: the median runs over the trailing window
    (current snapshot included) since future snapshots are not yet known."""

    def __init__(self, jump: int = 3, median_window: int = 11):
        self.jump = jump
        self.window = median_window
        self._history: list[np.ndarray] = []

    def accept(self, peaks) -> bool:
        peaks = np.asarray(peaks, dtype=float)
        self._history.append(peaks)
        if len(self._history) > self.window:
            del self._history[0]
        med = np.median(np.array(self._history), axis=0)
        return not np.any(np.abs(peaks - med) > self.jump)


def tdoa_align(shifted, geometry: Geometry, taps: int, peak_ratio: float = 10.0) -> np.ndarray:
    """Rotate each RU block so its reference peak sits at tap ``taps // 2``.

    The whole block moves by one offset, so intra-RU peak spacing is untouched.
    """
    shifted = np.asarray(shifted)
    n = shifted.shape[1]
    out = np.empty_like(shifted)
    for k, sl in enumerate(geometry.ru_slices):
        ref = shifted[geometry.ref_rows[k]]
        if not detectable(ref, peak_ratio):
            raise NoPeak(f"RU {geometry.ru_ids[k]}: reference row has no detectable peak")
        peak = int(np.argmax(np.abs(ref)))
        out[sl] = np.roll(shifted[sl], (taps // 2 - peak) % n, axis=1)
    return out


def normalize_truncate(aligned, alpha: float, taps: int) -> np.ndarray:
    if not alpha > 0 or not np.isfinite(alpha):
        raise DegenerateAlpha(f"alpha={alpha} must be positive")
    aligned = np.asarray(aligned)
    if taps > aligned.shape[1]:
        raise DimensionMismatch(f"C={taps} exceeds N_fft={aligned.shape[1]}")
    return np.abs(aligned[:, :taps]) / alpha


def compute_norm_factor(training_set, taps: int) -> float:
    """Global max magnitude over all snapshots, rows and taps [0, C)."""
    alpha = None
    for aligned in training_set:
        m = float(np.max(np.abs(np.asarray(aligned)[:, :taps])))
        alpha = m if alpha is None else max(alpha, m)
    if alpha is None:
        raise EmptySet("empty training set")
    if alpha == 0:
        raise AllZero("training set is all zeros")
    return alpha


def refine_peak(mag: np.ndarray) -> float:
    """Sub-tap peak location by a three-point parabola through the maximum."""
    n = len(mag)
    k = int(np.argmax(mag))
    a, b, c = mag[(k - 1) % n], mag[k], mag[(k + 1) % n]
    denom = a - 2 * b + c
    if denom >= 0:
        return float(k)
    return k + 0.5 * (a - c) / denom


@dataclass
class TdoaEstimate:
    tdoa: np.ndarray  # (M,) seconds, reference entries 0
    valid: np.ndarray  # (M,) bool


def estimate_tdoa(shifted, geometry: Geometry, sample_period: float, peak_ratio: float = 10.0) -> TdoaEstimate:
    """Peak-difference TDoA of each row against its RU reference."""
    shifted = np.asarray(shifted)
    n = shifted.shape[1]
    mags = np.abs(shifted)
    peaks = np.array([refine_peak(row) for row in mags])
    med = np.median(mags, axis=1)
    ok = (mags.max(axis=1) > peak_ratio * med) & (mags.max(axis=1) > 0)
    ref = geometry.ref_of_row
    diff = peaks - peaks[ref]
    diff = (diff + n / 2) % n - n / 2
    valid = ok & ok[ref]
    tdoa = np.where(valid & ~geometry.is_ref, diff * sample_period, 0.0)
    return TdoaEstimate(tdoa, valid)


def classify_los(row, config: PreprocessConfig) -> tuple[int, bool]:
    """Heuristic LoS test on one aligned row over taps [0, C).

    LoS when peak power over mean power reaches ``los_papr`` and the peak is
    no later than C/2 + los_max_lateness * C. Returns (flag, valid).
    """
    c = config.taps
    power = np.abs(np.asarray(row)[:c]) ** 2
    mean = power.mean()
    if mean == 0:
        return 0, False
    k = int(np.argmax(power))
    papr = power[k] / mean
    late = k > c // 2 + config.los_max_lateness * c
    return int(papr >= config.los_papr and not late), True


def los_mask(aligned, geometry: Geometry, config: PreprocessConfig) -> np.ndarray:
    """Effective per-row mask: a row counts only if it and its RU reference are LoS."""
    flags = np.array([classify_los(row, config)[0] for row in aligned], dtype=np.uint8)
    return flags & flags[geometry.ref_of_row]


@dataclass
class Processed:
    """Per-snapshot preprocessing result before normalization."""

    ref_peaks: np.ndarray  # (K,) integer taps in the shifted CIR
    window: np.ndarray | None  # (M, C) complex aligned taps, None when NO_PEAK
    tdoa: TdoaEstimate | None
    mask: np.ndarray | None


def process_cfr(cfr, geometry: Geometry, config: PreprocessConfig, with_labels: bool = True) -> Processed:
    cfr = np.asarray(cfr)
    if cfr.shape[0] != geometry.num_trps:
        raise DimensionMismatch(f"{cfr.shape[0]} CFR rows for {geometry.num_trps} TRPs")
    shifted = ifft_shift_rows(idft_rows(cfr))
    peaks = reference_peaks(shifted, geometry)
    try:
        aligned = tdoa_align(shifted, geometry, config.taps, config.peak_ratio)
    except NoPeak:
        return Processed(peaks, None, None, None)
    window = aligned[:, :config.taps]
    if not with_labels:
        return Processed(peaks, window, None, None)
    est = estimate_tdoa(shifted, geometry, config.sample_period(cfr.shape[1]), config.peak_ratio)
    mask = los_mask(window, geometry, config) & est.valid & est.valid[geometry.ref_of_row]
    return Processed(peaks, window, est, mask.astype(np.uint8))


@dataclass
class TrainingSet:
    inputs: np.ndarray  # (T, M, C) normalized magnitudes
    tdoa: np.ndarray  # (T, M) seconds
    mask: np.ndarray  # (T, M) uint8
    timestamps_s: np.ndarray  # (T,)
    ground_truth: np.ndarray  # (T, 3), NaN when absent
    alpha: float
    indices: np.ndarray  # dataset indices kept
    dropped: np.ndarray  # dataset indices dropped

    def __len__(self):
        return len(self.inputs)


def prepare_training_set(dataset, geometry: Geometry, config: PreprocessConfig, alpha: float | None = None) -> TrainingSet:
    """Run the full pipeline over a dataset; alpha is computed here unless given."""
    dataset.check_layout(geometry.trps_per_ru)
    results = [process_cfr(snap.cfr, geometry, config) for snap in dataset]
    peaks = np.array([r.ref_peaks for r in results])
    if len(results) >= 5:
        _, outliers = split_outliers(peaks, config.outlier_jump, config.outlier_window)
    else:
        outliers = np.array([], dtype=int)
    bad = np.zeros(len(results), dtype=bool)
    bad[outliers] = True
    bad |= np.array([r.window is None for r in results])
    keep = np.flatnonzero(~bad)
    if len(keep) == 0:
        raise EmptySet("every snapshot was rejected")
    windows = [results[i].window for i in keep]
    if alpha is None:
        alpha = compute_norm_factor(windows, config.taps)
    log.info("prepared %d snapshots (%d dropped), alpha=%.6g", len(keep), int(bad.sum()), alpha)
    return TrainingSet(
        inputs=np.stack([normalize_truncate(w, alpha, config.taps) for w in windows]),
        tdoa=np.stack([results[i].tdoa.tdoa for i in keep]),
        mask=np.stack([results[i].mask for i in keep]),
        timestamps_s=dataset.timestamps_ns[keep].astype(float) * 1e-9,
        ground_truth=dataset.ground_truth()[keep],
        alpha=alpha,
        indices=keep,
        dropped=np.flatnonzero(bad),
    )
