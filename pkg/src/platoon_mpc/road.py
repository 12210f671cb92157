"""Road-grade profiles and the cubic Legendre grade preview."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.integrate import trapezoid

MAX_GRADE = 0.15
ROUTE_HEADER = ("s_m", "grade_rad")


class RouteParseError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class GradeProfile:
    """Piecewise-linear grade over position; constant beyond either end."""

    positions: np.ndarray
    grades: np.ndarray
    s_f: float

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=float)
        gr = np.ascontiguousarray(self.grades, dtype=float)
        if pos.ndim != 1 or pos.shape != gr.shape or pos.size < 1:
            raise ValueError("positions and grades must be equal-length 1-D arrays")
        if np.any(np.diff(pos) <= 0):
            raise ValueError("breakpoint positions must be strictly increasing")
        if np.any(np.abs(gr) > MAX_GRADE):
            raise ValueError(f"|grade| must not exceed {MAX_GRADE} rad")
        pos.flags.writeable = False
        gr.flags.writeable = False
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "grades", gr)

    @classmethod
    def from_breakpoints(cls, breakpoints: Sequence[tuple[float, float]], s_f: float | None = None):
        arr = np.asarray(breakpoints, dtype=float).reshape(-1, 2)
        return cls(arr[:, 0], arr[:, 1], float(arr[-1, 0] if s_f is None else s_f))

    @property
    def breakpoints(self) -> list[tuple[float, float]]:
        return list(zip(self.positions.tolist(), self.grades.tolist()))

    def grade(self, s):
        return np.interp(s, self.positions, self.grades)

    def elevation(self, s_from: float, s_to: float, n: int = 20001) -> float:
        """Elevation change between two positions (trapezoidal in sin(grade))."""
        xs = np.linspace(s_from, s_to, n)
        return float(trapezoid(np.sin(self.grade(xs)), xs))


@dataclass(frozen=True)
class LegendrePreview:
    c: tuple[float, float, float, float]
    s_start: float
    s_plus: float

    def __post_init__(self):
        if len(self.c) != 4:
            raise ValueError("cubic preview needs exactly 4 coefficients")
        if self.s_plus <= 0:
            raise ValueError("preview length must be positive")

    def ell(self, s):
        return np.clip(2.0 * (np.asarray(s, dtype=float) - self.s_start) / self.s_plus - 1.0, -1.0, 1.0)

    def as_vector(self) -> np.ndarray:
        return np.array([*self.c, self.s_start, self.s_plus])


def legendre_basis(ell) -> np.ndarray:
    """Columns P0..P3 evaluated at ``ell``."""
    ell = np.asarray(ell, dtype=float)
    return np.stack([np.ones_like(ell), ell, 0.5 * (3 * ell ** 2 - 1), 0.5 * (5 * ell ** 3 - 3 * ell)], axis=-1)


def fit_preview(profile: GradeProfile, s_start: float, s_plus: float, n_samples: int = 20) -> LegendrePreview:
    if n_samples < 4:
        raise ValueError("need at least 4 grade samples for a cubic fit")
    if s_plus <= 0:
        raise ValueError("preview length must be positive")
    s = np.linspace(s_start, s_start + s_plus, n_samples)
    ell = np.linspace(-1.0, 1.0, n_samples)
    coef, *_ = np.linalg.lstsq(legendre_basis(ell), profile.grade(s), rcond=None)
    return LegendrePreview(tuple(float(c) for c in coef), float(s_start), float(s_plus))


def eval_preview(fit: LegendrePreview, s) -> float:
    return legendre_basis(fit.ell(s)) @ np.asarray(fit.c)


# ---------------------------------------------------------------- profiles

def cosine_ramp(x, x0, x1, g0, g1):
    t = np.clip((x - x0) / (x1 - x0), 0.0, 1.0)
    return g0 + (g1 - g0) * 0.5 * (1.0 - np.cos(np.pi * t))


def make_s_road(downhill_grade: float = -0.04, uphill_grade: float = 0.04,
                segment_lengths: Sequence[float] = (5000.0, 10000.0, 5000.0, 10000.0, 5000.0),
                ramp: float = 500.0, ramp_step: float = 25.0) -> GradeProfile:
    """Flat lead-in, downhill, flat valley, uphill, flat run-out.

    Each grade change is a raised-cosine ramp of length ``ramp`` centred on the
    segment boundary, so a segment's elevation change equals its length times
    the plateau grade.  ``ramp=0`` yields a piecewise-constant profile.
    """
    if downhill_grade * uphill_grade >= 0:
        raise ValueError("downhill and uphill grades must be nonzero with opposite signs")
    if len(segment_lengths) != 5:
        raise ValueError("S-road needs 5 segment lengths")
    levels = [0.0, downhill_grade, 0.0, uphill_grade, 0.0]
    bounds = np.concatenate([[0.0], np.cumsum(segment_lengths)])
    s_f = float(bounds[-1])
    pts: list[tuple[float, float]] = [(0.0, 0.0)]
    for k in range(1, 5):
        b, g0, g1 = bounds[k], levels[k - 1], levels[k]
        if ramp > 0:
            n = max(int(np.ceil(ramp / ramp_step)), 2)
            xs = np.linspace(b - ramp / 2, b + ramp / 2, n + 1)
            pts.extend(zip(xs, cosine_ramp(xs, xs[0], xs[-1], g0, g1)))
        else:
            pts.extend([(b - 1e-6, g0), (b, g1)])
    pts.append((s_f, 0.0))
    return GradeProfile.from_breakpoints(pts, s_f)


def make_rolling_route(length: float = 70000.0, step: float = 50.0) -> GradeProfile:
    """Synthetic hilly interstate: three sinusoids plus two steep hill events.

    Rolling part: 1.5 %, 1.0 % and 0.8 % amplitude at 12 km, 5 km and 2.1 km
    wavelength. Each hill event climbs at +4.5 % for 2.5 km, crests over 1 km and
    descends at -4.5 % for 2.5 km, replacing the rolling grade locally.  The
    first and last km fade to flat.
    """
    s = np.arange(0.0, length + step / 2, step)
    rolling = (0.015 * np.sin(2 * np.pi * s / 12000.0 + 0.3)
               + 0.010 * np.sin(2 * np.pi * s / 5000.0 + 1.1)
               + 0.008 * np.sin(2 * np.pi * s / 2100.0 + 2.0))
    fade = np.clip(s / 1000.0, 0, 1) * np.clip((length - s) / 1000.0, 0, 1)
    grade = rolling * fade
    for start in (18000.0, 46000.0):
        shape = (cosine_ramp(s, start - 300, start + 300, 0.0, 0.045)
                 + cosine_ramp(s, start + 2500 - 300, start + 3500 + 300, 0.0, -0.09)
                 + cosine_ramp(s, start + 6000 - 300, start + 6000 + 300, 0.0, 0.045))
        window = cosine_ramp(s, start - 1000, start - 300, 0.0, 1.0) * \
            (1.0 - cosine_ramp(s, start + 6300, start + 7000, 0.0, 1.0))
        grade = grade * (1 - window) + shape * window
    return GradeProfile(s, np.round(grade, 12), float(length))


# ---------------------------------------------------------------- files

def save_route(profile: GradeProfile, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(ROUTE_HEADER) + "\n")
        for s, a in zip(profile.positions.tolist(), profile.grades.tolist()):
            fh.write(f"{s!r},{a!r}\n")


def load_route(path) -> GradeProfile:
    path = Path(path)
    rows: list[tuple[float, float]] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != ROUTE_HEADER:
            raise RouteParseError(f"{path}:1: expected header {','.join(ROUTE_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                s, a = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                raise RouteParseError(f"{path}:{lineno}: non-numeric row {row!r}") from None
            if rows and s <= rows[-1][0]:
                raise RouteParseError(f"{path}:{lineno}: position {s} not increasing")
            rows.append((s, a))
    if not rows:
        raise RouteParseError(f"{path}: no data rows")
    return GradeProfile.from_breakpoints(rows)


def data_path(name: str) -> Path:
    return Path(__file__).with_name("data") / name
