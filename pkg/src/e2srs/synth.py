"""
Synthetic multipath CFR generator with geometric ground truth.

Each TRP link carries a LoS path with delay ||p - x|| / c plus the RU's
timing offset. With probability ``nlos_prob`` the link is NLoS: ``paths - 1``
extra paths are added at positive excess delays with uniform phase and
Rayleigh magnitudes scaled by U(nlos_gain), and the LoS gain is multiplied by
``nlos_los_gain``. Delays are continuous, so CIR peaks land between taps.
"""

from __future__ import annotations

import dataclasses
import string
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import SPEED_OF_LIGHT
from .dataset import (
    FLAG_GROUND_TRUTH,
    FLAG_LOS,
    FLAG_TDOA,
    DatasetWriter,
    Snapshot,
)
from .geometry import AREA, Geometry, labeled_points, oracle_tdoa, ranges


@dataclass
class ChannelConfig:
    n_fft: int = 1024
    subcarrier_spacing_hz: float = 30e3
    band: tuple[int, int] = (0, 600)
    paths: int = 4
    nlos_prob: float = 0.15
    nlos_excess_delay_s: tuple[float, float] = (5e-9, 150e-9)
    nlos_gain: tuple[float, float] = (0.3, 0.8)
    nlos_los_gain: float = 1.0
    snr_db: float | None = 20.0
    timing_offset_max_s: float = 0.0
    glitch_prob: float = 0.0
    glitch_taps: tuple[float, float] = (8.0, 40.0)
    seed: int = 0

    def __post_init__(self):
        self.band = tuple(int(b) for b in self.band)
        self.nlos_excess_delay_s = tuple(float(v) for v in self.nlos_excess_delay_s)
        self.nlos_gain = tuple(float(v) for v in self.nlos_gain)
        self.glitch_taps = tuple(float(v) for v in self.glitch_taps)
        self.validate()

    def validate(self):
        n = self.n_fft
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_fft={n} must be a power of two")
        lo, hi = self.band
        if not 0 <= lo < hi <= n:
            raise ValueError(f"occupied band {self.band} not within [0, {n})")
        if self.paths < 1:
            raise ValueError("paths must be >= 1")
        if not 0.0 <= self.nlos_prob <= 1.0:
            raise ValueError("nlos_prob must be in [0, 1]")
        a, b = self.nlos_excess_delay_s
        if not 0.0 < a <= b:
            raise ValueError("NLoS excess delays must be positive and ordered")
        if not 0.0 <= self.glitch_prob <= 1.0:
            raise ValueError("glitch_prob must be in [0, 1]")

    @property
    def sample_period(self) -> float:
        """Tap spacing T_s = 1 / (N_fft * subcarrier spacing)."""
        return 1.0 / (self.n_fft * self.subcarrier_spacing_hz)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# --------------------------------------------------------------------------
# Trajectories
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    positions: np.ndarray  # (T, 2) meters
    timestamps_ns: np.ndarray  # (T,) int64
    labels: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.positions)

    def __add__(self, other: Trajectory) -> Trajectory:
        """Append ``other`` after this one; its times continue from our last sample."""
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        gap = self.interval_ns() or other.interval_ns() or 1
        shift = self.timestamps_ns[-1] + gap - other.timestamps_ns[0]
        return Trajectory(
            np.concatenate([self.positions, other.positions]),
            np.concatenate([self.timestamps_ns, other.timestamps_ns + shift]),
            self.labels + other.labels,
        )

    def interval_ns(self) -> int:
        if len(self) < 2:
            return 0
        return int(self.timestamps_ns[1] - self.timestamps_ns[0])

    @classmethod
    def dwell(cls, label: str, xy, count: int, interval_s: float, t0_s: float = 0.0):
        ts = _times(count, interval_s, t0_s)
        return cls(np.tile(np.asarray(xy, float), (count, 1)), ts, [label] * count)

    @classmethod
    def testpoints(cls, count: int, interval_s: float, labels=None, t0_s: float = 0.0):
        pts = labeled_points()
        traj = cls(np.zeros((0, 2)), np.zeros(0, np.int64), [])
        for label in labels or pts:
            traj = traj + cls.dwell(label, pts[label], count, interval_s)
        traj.timestamps_ns = traj.timestamps_ns + int(round(t0_s * 1e9))
        return traj

    @classmethod
    def walk(cls, waypoints, speed: float, interval_s: float, t0_s: float = 0.0):
        """Sample a polyline so that consecutive samples are exactly speed*interval apart."""
        pts = _walk(np.asarray(waypoints, float), speed * interval_s)
        return cls(pts, _times(len(pts), interval_s, t0_s), [""] * len(pts))

    @classmethod
    def survey(cls, interval_s: float = 0.25, speed: float = 1.0, dwell: int = 10,
               rows: int = 7) -> Trajectory:
        """Boustrophedon sweep of the service area, a loop through the test
        points, then ``dwell`` samples at each test point."""
        (x0, x1), (y0, y1) = AREA
        wps = []
        for r, y in enumerate(np.linspace(y0 + 0.5, y1 - 0.5, rows)):
            a, b = (x0 + 1, x1 - 1) if r % 2 == 0 else (x1 - 1, x0 + 1)
            wps += [(a, y), (b, y)]
        pts = labeled_points()
        loop = [pts[c] for c in "BCDELMNOPAB"]
        traj = cls.walk(wps, speed, interval_s) + cls.walk(loop, speed, interval_s)
        return traj + cls.testpoints(dwell, interval_s) if dwell > 0 else traj

    @classmethod
    def from_text(cls, text: str) -> Trajectory:
        """Parse a trajectory description.

        Directives, one per line::

            interval <seconds>
            dwell <label> <x> <y> <count>
            testpoints <count>
            walk <speed> <x>,<y> <x>,<y> ...
            survey <speed> <dwell count>
        """
        interval = 0.1
        traj = cls(np.zeros((0, 2)), np.zeros(0, np.int64), [])
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            word, *args = line.split()
            try:
                if word == "interval":
                    interval = float(args[0])
                elif word == "dwell":
                    traj = traj + cls.dwell(args[0], (float(args[1]), float(args[2])), int(args[3]), interval)
                elif word == "testpoints":
                    traj = traj + cls.testpoints(int(args[0]), interval)
                elif word == "survey":
                    traj = traj + cls.survey(interval, float(args[0]), int(args[1]))
                elif word == "walk":
                    wps = [tuple(float(v) for v in a.split(",")) for a in args[1:]]
                    traj = traj + cls.walk(wps, float(args[0]), interval)
                else:
                    raise ValueError(f"unknown directive {word!r}")
            except (IndexError, ValueError) as exc:
                raise ValueError(f"trajectory line {lineno}: {exc}") from None
        if len(traj) == 0:
            raise ValueError("trajectory is empty")
        return traj

    @classmethod
    def load(cls, source: str) -> Trajectory:
        """Load from a file, or the shorthands ``testpoints[:N]`` (default 100
        per point, 0.1 s apart) and ``survey`` (0.25 s sampling)."""
        if source == "survey":
            return cls.survey()
        if source.startswith("testpoints"):
            _, _, n = source.partition(":")
            return cls.testpoints(int(n or 100), 0.1)
        return cls.from_text(Path(source).read_text())


def _times(count: int, interval_s: float, t0_s: float) -> np.ndarray:
    step = int(round(interval_s * 1e9))
    if step <= 0:
        raise ValueError("interval must be positive")
    return int(round(t0_s * 1e9)) + step * np.arange(count, dtype=np.int64)


def _walk(wps: np.ndarray, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("speed * interval must be positive")
    out = [wps[0]]
    q = wps[0]
    seg, t_from = 0, 0.0
    while seg < len(wps) - 1:
        found = False
        for i in range(seg, len(wps) - 1):
            a, b = wps[i], wps[i + 1]
            d = b - a
            f = a - q
            A = d @ d
            if A == 0:
                continue
            B = 2 * f @ d
            Cc = f @ f - step * step
            disc = B * B - 4 * A * Cc
            if disc < 0:
                continue
            lo = t_from if i == seg else 0.0
            roots = sorted(((-B - np.sqrt(disc)) / (2 * A), (-B + np.sqrt(disc)) / (2 * A)))
            cand = [t for t in roots if lo < t <= 1.0 or (i != seg and t == 0.0)]
            if cand:
                t = cand[0]
                q = a + t * d
                out.append(q)
                seg, t_from = i, t
                found = True
                break
        if not found:
            break
    return np.array(out)


# --------------------------------------------------------------------------
# CFR generation
# --------------------------------------------------------------------------


def subcarrier_frequencies(config: ChannelConfig) -> np.ndarray:
    lo, hi = config.band
    return np.arange(lo, hi) * config.subcarrier_spacing_hz


def path_cfr(delays, gains, config: ChannelConfig) -> np.ndarray:
    """Noise-free CFR rows from per-link path delays/gains of shape (M, P)."""
    f = subcarrier_frequencies(config)
    delays = np.atleast_2d(delays)
    gains = np.atleast_2d(gains)
    phase = np.exp(-2j * np.pi * delays[..., None] * f)
    w = np.zeros((delays.shape[0], config.n_fft), dtype=complex)
    lo, hi = config.band
    w[:, lo:hi] = np.einsum("mp,mpn->mn", gains, phase)
    return w


def gen_cfr(p, geometry: Geometry, config: ChannelConfig, rng: np.random.Generator,
            timing_offsets=None) -> Snapshot:
    """One snapshot of per-TRP CFRs for a UE at position p.

    ``timing_offsets`` is a per-RU delay (seconds) added to every path of that RU.
    The returned snapshot has timestamp 0; the caller stamps it.
    """
    m = geometry.num_trps
    npaths = config.paths
    los_delay = ranges(p, geometry) / SPEED_OF_LIGHT
    if timing_offsets is not None:
        los_delay = los_delay + np.asarray(timing_offsets, float)[geometry.ru_of_row]

    # fixed draw order keeps the RNG stream independent of the LoS outcomes
    nlos = rng.random(m) < config.nlos_prob
    excess = rng.uniform(*config.nlos_excess_delay_s, size=(m, npaths - 1))
    scale = rng.uniform(*config.nlos_gain, size=(m, npaths - 1))
    mag = scale * np.abs(rng.normal(size=(m, npaths - 1)) + 1j * rng.normal(size=(m, npaths - 1))) / np.sqrt(2)
    path_phase = rng.uniform(0, 2 * np.pi, size=(m, npaths - 1))
    link_phase = rng.uniform(0, 2 * np.pi, size=m)

    delays = np.concatenate([los_delay[:, None], los_delay[:, None] + excess], axis=1)
    gains = np.zeros((m, npaths), dtype=complex)
    gains[:, 0] = np.where(nlos, config.nlos_los_gain, 1.0)
    gains[:, 1:] = np.where(nlos[:, None], mag * np.exp(1j * path_phase), 0.0)
    gains *= np.exp(1j * link_phase)[:, None]

    w = path_cfr(delays, gains, config)
    lo, hi = config.band
    noise = rng.normal(size=(m, hi - lo, 2))
    if config.snr_db is not None:
        sigma = np.sqrt(10 ** (-config.snr_db / 10) / 2)
        w[:, lo:hi] += sigma * (noise[..., 0] + 1j * noise[..., 1])

    p3 = np.append(np.asarray(p, float)[:2], geometry.ue_height if len(p) == 2 else p[2])
    return Snapshot(
        timestamp_ns=0,
        cfr=w.astype(">c8"),
        ground_truth=p3,
        los=(~nlos).astype(np.uint8),
        tdoa=oracle_tdoa(p3, geometry),
    )


@dataclass
class GeneratedDataset:
    path: Path
    num_snapshots: int
    nlos_fraction: float
    glitches: dict[int, dict[int, float]]  # snapshot -> {ru index: offset seconds}


def gen_dataset(geometry: Geometry, config: ChannelConfig, trajectory: Trajectory, out) -> GeneratedDataset:
    """Write one snapshot per trajectory sample to an SRSD file."""
    link_ss, timing_ss, glitch_ss = np.random.SeedSequence(config.seed).spawn(3)
    rng = np.random.Generator(np.random.PCG64(link_ss))
    timing_rng = np.random.Generator(np.random.PCG64(timing_ss))
    glitch_rng = np.random.Generator(np.random.PCG64(glitch_ss))

    k = geometry.num_rus
    base_offsets = timing_rng.uniform(-1, 1, size=k) * config.timing_offset_max_s
    ts_per_tap = config.sample_period
    glitches = {}
    nlos_links = 0
    flags = FLAG_GROUND_TRUTH | FLAG_LOS | FLAG_TDOA
    with DatasetWriter(out, geometry.trps_per_ru, config.n_fft, config.subcarrier_spacing_hz, flags) as w:
        for i, (p, ts) in enumerate(zip(trajectory.positions, trajectory.timestamps_ns)):
            hit = glitch_rng.random(k) < config.glitch_prob
            mag = glitch_rng.uniform(*config.glitch_taps, size=k)
            sign = np.where(glitch_rng.random(k) < 0.5, -1.0, 1.0)
            offsets = base_offsets + np.where(hit, sign * mag * ts_per_tap, 0.0)
            if hit.any():
                glitches[i] = {int(r): float(offsets[r] - base_offsets[r]) for r in np.flatnonzero(hit)}
            snap = gen_cfr(p, geometry, config, rng, timing_offsets=offsets)
            snap.timestamp_ns = int(ts)
            nlos_links += int(np.sum(snap.los == 0))
            w.append(snap)
    return GeneratedDataset(
        Path(out), len(trajectory), nlos_links / (len(trajectory) * geometry.num_trps), glitches
    )


def label_for(xy, tol: float = 1e-6) -> str:
    """Test point label at xy, or '' when it is not one of A..P."""
    for label, pt in labeled_points().items():
        if abs(pt[0] - xy[0]) <= tol and abs(pt[1] - xy[1]) <= tol:
            return label
    return ""


TESTPOINT_LABELS = string.ascii_uppercase[:16]
