"""TRP layout, reference selection and geometric TDoA."""

from __future__ import annotations

import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import SPEED_OF_LIGHT


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class Trp:
    ru_id: int
    trp_id: int
    position: tuple[float, float, float]


class Geometry:
    """K RUs, each with M_k TRPs at known positions and one reference TRP.

    Rows are ordered RU by RU (in order of first appearance), TRPs within an
    RU in file order. This is also the row order of every CIR matrix.
    """

    def __init__(self, trps, refs: dict[int, int], ue_height: float = 0.0):
        self.trps = list(trps)
        self.refs = dict(refs)
        self.ue_height = float(ue_height)
        self._validate()

        self.ru_ids = []
        for t in self.trps:
            if t.ru_id not in self.ru_ids:
                self.ru_ids.append(t.ru_id)
        # regroup rows so each RU is contiguous
        self.trps = [t for ru in self.ru_ids for t in self.trps if t.ru_id == ru]
        self.trps_per_ru = [sum(t.ru_id == ru for t in self.trps) for ru in self.ru_ids]
        self.positions = np.array([t.position for t in self.trps], dtype=float)

        starts = np.concatenate([[0], np.cumsum(self.trps_per_ru)])
        self.ru_slices = [slice(int(a), int(b)) for a, b in zip(starts[:-1], starts[1:])]
        self.ru_of_row = np.concatenate(
            [np.full(m, k) for k, m in enumerate(self.trps_per_ru)]
        )
        ref_rows = []
        for k, ru in enumerate(self.ru_ids):
            sl = self.ru_slices[k]
            ids = [t.trp_id for t in self.trps[sl]]
            ref_rows.append(sl.start + ids.index(self.refs[ru]))
        self.ref_rows = np.array(ref_rows, dtype=int)
        self.ref_of_row = self.ref_rows[self.ru_of_row]
        self.is_ref = np.zeros(self.num_trps, dtype=bool)
        self.is_ref[self.ref_rows] = True

    def _validate(self):
        if not self.trps:
            raise GeometryError("geometry has no TRPs")
        keys = [(t.ru_id, t.trp_id) for t in self.trps]
        if len(set(keys)) != len(keys):
            raise GeometryError("duplicate (ru_id, trp_id)")
        pos = [tuple(t.position) for t in self.trps]
        if len(set(pos)) != len(pos):
            raise GeometryError("TRP positions must be distinct")
        ru_ids = {t.ru_id for t in self.trps}
        if set(self.refs) != ru_ids:
            raise GeometryError("every RU needs exactly one reference TRP")
        for ru, ref in self.refs.items():
            if (ru, ref) not in keys:
                raise GeometryError(f"reference TRP {ref} not found on RU {ru}")

    @property
    def num_rus(self) -> int:
        return len(self.ru_ids)

    @property
    def num_trps(self) -> int:
        return len(self.trps)

    @property
    def num_tdoa_terms(self) -> int:
        """Sum over RUs of (M_k - 1)."""
        return self.num_trps - self.num_rus

    def trp_ids(self, k: int) -> tuple[int, ...]:
        return tuple(t.trp_id for t in self.trps[self.ru_slices[k]])

    def to_text(self) -> str:
        lines = ["# ru_id trp_id x y z [ref]"]
        for t in self.trps:
            x, y, z = t.position
            ref = " ref" if self.refs[t.ru_id] == t.trp_id else ""
            lines.append(f"{t.ru_id} {t.trp_id} {x!r} {y!r} {z!r}{ref}")
        return "\n".join(lines) + "\n"

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> Geometry:
        trps, refs = [], {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            f = line.split()
            if len(f) not in (5, 6) or (len(f) == 6 and f[5] != "ref"):
                raise GeometryError(f"line {lineno}: expected 'ru_id trp_id x y z [ref]'")
            try:
                ru, trp = int(f[0]), int(f[1])
                pos = (float(f[2]), float(f[3]), float(f[4]))
            except ValueError as exc:
                raise GeometryError(f"line {lineno}: {exc}") from None
            trps.append(Trp(ru, trp, pos))
            if len(f) == 6:
                if ru in refs:
                    raise GeometryError(f"line {lineno}: RU {ru} has two references")
                refs[ru] = trp
        return cls(trps, refs)

    @classmethod
    def load(cls, path) -> Geometry:
        return cls.from_text(Path(path).read_text())

    def __eq__(self, other):
        return (
            isinstance(other, Geometry)
            and self.trps == other.trps
            and self.refs == other.refs
            and self.ue_height == other.ue_height
        )


def default_geometry() -> Geometry:
    """Two RUs with four TRPs each framing a 50 x 10 m area (x in [0, 50], y in [2, 12]).

    TRP 1 on RU 1 sits at the origin of the local frame.
    """
    south = [(0.0, 0.0), (16.0, -2.0), (34.0, -2.0), (50.0, 0.0)]
    north = [(0.0, 15.0), (16.0, 16.0), (34.0, 16.0), (50.0, 15.0)]
    trps = [Trp(1, i + 1, (x, y, 0.0)) for i, (x, y) in enumerate(south)]
    trps += [Trp(2, i + 1, (x, y, 0.0)) for i, (x, y) in enumerate(north)]
    return Geometry(trps, {1: 1, 2: 1})


AREA = ((0.0, 50.0), (2.0, 12.0))


def labeled_points() -> dict[str, tuple[float, float]]:
    """Sixteen static points A..P in two rows; A..H west to east, I..P back east to west."""
    xs = np.linspace(3.0, 47.0, 8)
    pts = {}
    for i, label in enumerate(string.ascii_uppercase[:8]):
        pts[label] = (float(xs[i]), 5.0)
    for i, label in enumerate(string.ascii_uppercase[8:16]):
        pts[label] = (float(xs[7 - i]), 10.0)
    return pts


def _as_3d(p, ue_height: float) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.shape[-1] == 2:
        p = np.concatenate([p, np.full(p.shape[:-1] + (1,), ue_height)], axis=-1)
    return p


def ranges(p, geometry: Geometry) -> np.ndarray:
    """Distance from position(s) p (..., 2|3) to every TRP -> (..., M)."""
    p3 = _as_3d(p, geometry.ue_height)
    return np.linalg.norm(p3[..., None, :] - geometry.positions, axis=-1)


def range_differences(p, geometry: Geometry) -> np.ndarray:
    d = ranges(p, geometry)
    return d - d[..., geometry.ref_of_row]


def oracle_tdoa(p, geometry: Geometry, c: float = SPEED_OF_LIGHT) -> np.ndarray:
    """Geometric TDoA of every TRP against its RU reference, in seconds.

    Reference entries are exactly zero.
    """
    return range_differences(p, geometry) / c
