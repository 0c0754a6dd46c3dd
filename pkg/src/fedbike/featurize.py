"""Supervised feature matrices from hourly demand series.

Feature groups, in the fixed column order used everywhere:

1. RBF encoding of hour-of-day and day-of-week
2. calendar flags (holiday, work hour, school day, weekend)
3. lags of both the arrivals and the departures series
4. rolling mean/min/max of the target series
5. exponentially weighted means of the target series
6. Fourier seasonal reconstructions of the target series (one per period)

Every feature of a row at origin hour ``t`` depends only on demand at hours
``<= t`` or on deterministic calendar/seasonal terms.
"""

from __future__ import annotations

import datetime as dt
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import lfilter

from .ingest import DemandSeries, TemporalSplit

LOOKBACK_HOURS = 168
TARGET_KINDS = ("arrivals", "departures")
HORIZONS = (1, 2, 3, 4, 5, 6)


class FeatureConfigError(ValueError):
    pass


@dataclass
class CalendarSpec:
    holidays: frozenset = frozenset()
    workhours: tuple[int, int] = (9, 17)
    school_days: frozenset | None = None

    def __post_init__(self):
        self.holidays = frozenset(_as_date(d) for d in self.holidays)
        if self.school_days is not None:
            self.school_days = frozenset(_as_date(d) for d in self.school_days)
        self.workhours = tuple(int(h) for h in self.workhours)


@dataclass
class FeatureSpec:
    rbf_hour_k: int = 12
    rbf_hour_sigma: float = 2.0
    rbf_dow_k: int = 7
    rbf_dow_sigma: float = 1.0
    lags: tuple[int, ...] = (1, 2, 3, 6, 12, 24, 168)
    rolling_windows: tuple[int, ...] = (3, 6, 12, 24, 168)
    ewm_halflives: tuple[float, ...] = (3, 12, 24)
    fourier_periods: tuple[float, ...] = (24, 168)
    fourier_harmonics: int = 3
    burnin_len: int = 672
    calendar: CalendarSpec = field(default_factory=CalendarSpec)

    def __post_init__(self):
        self.lags = tuple(int(v) for v in self.lags)
        self.rolling_windows = tuple(int(v) for v in self.rolling_windows)
        self.ewm_halflives = tuple(float(v) for v in self.ewm_halflives)
        self.fourier_periods = tuple(float(v) for v in self.fourier_periods)
        if isinstance(self.calendar, dict):
            self.calendar = CalendarSpec(**self.calendar)
        self.validate()

    def validate(self) -> None:
        if not self.lags or min(self.lags) < 1 or max(self.lags) > LOOKBACK_HOURS:
            raise FeatureConfigError(f"lags must lie in [1, {LOOKBACK_HOURS}]: {self.lags}")
        if self.rolling_windows and (
            min(self.rolling_windows) < 1 or max(self.rolling_windows) > LOOKBACK_HOURS
        ):
            raise FeatureConfigError(f"rolling windows must lie in [1, {LOOKBACK_HOURS}]")
        if self.rbf_hour_k < 1 or self.rbf_dow_k < 1:
            raise FeatureConfigError("RBF center counts must be >= 1")
        if self.rbf_hour_sigma <= 0 or self.rbf_dow_sigma <= 0:
            raise FeatureConfigError("RBF bandwidths must be > 0")
        if any(h <= 0 for h in self.ewm_halflives):
            raise FeatureConfigError("EWM half-lives must be > 0")
        if self.fourier_harmonics < 1:
            raise FeatureConfigError("need at least one Fourier harmonic")
        if self.fourier_periods and self.burnin_len < 2 * (2 * self.fourier_harmonics + 1):
            raise FeatureConfigError("Fourier burn-in shorter than the parameter count")

    @property
    def first_origin(self) -> int:
        """Earliest origin hour with complete lag and rolling history."""
        return max(max(self.lags), max(self.rolling_windows, default=1) - 1)

    def feature_names(self) -> list[str]:
        names = [f"rbf_hour_{j}" for j in range(self.rbf_hour_k)]
        names += [f"rbf_dow_{j}" for j in range(self.rbf_dow_k)]
        names += ["is_holiday", "is_workhour", "is_school", "is_weekend"]
        names += [f"lag_arrivals_{h}" for h in self.lags]
        names += [f"lag_departures_{h}" for h in self.lags]
        for w in self.rolling_windows:
            names += [f"roll_mean_{w}", f"roll_min_{w}", f"roll_max_{w}"]
        names += [f"ewm_{_num(h)}" for h in self.ewm_halflives]
        names += [f"fourier_{_num(p)}" for p in self.fourier_periods]
        return names

    def to_dict(self) -> dict:
        d = asdict(self)
        cal = d.pop("calendar")
        d["calendar"] = {
            "holidays": sorted(x.isoformat() for x in cal["holidays"]),
            "workhours": list(cal["workhours"]),
            "school_days": None
            if cal["school_days"] is None
            else sorted(x.isoformat() for x in cal["school_days"]),
        }
        return d

    @classmethod
    def from_dict(cls, d: dict) -> FeatureSpec:
        d = dict(d)
        cal = d.pop("calendar", None) or {}
        return cls(**d, calendar=CalendarSpec(**cal))


@dataclass
class FourierCoeffs:
    period: float
    mean: float
    a: np.ndarray
    b: np.ndarray


@dataclass
class FeatureMatrix:
    station: str
    target_kind: str
    horizon: int
    feature_names: list[str]
    rows: np.ndarray
    targets: np.ndarray
    origin_index: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def to_csv(self, path) -> None:
        header = ",".join(self.feature_names + ["target"])
        data = np.column_stack([self.rows, self.targets])
        np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def _as_date(d) -> dt.date:
    if isinstance(d, dt.datetime):
        return d.date()
    if isinstance(d, dt.date):
        return d
    if isinstance(d, np.datetime64):
        return d.astype("datetime64[D]").item()
    return dt.date.fromisoformat(str(d).strip())


def load_date_file(path) -> frozenset:
    """One ISO date per line; blank lines and ``#`` comments ignored."""
    out = set()
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.add(dt.date.fromisoformat(line))
    return frozenset(out)


# -- encoders ------------------------------------------------------------------


def rbf_encode(value, period: float, K: int, sigma: float) -> np.ndarray:
    """Gaussian bumps at ``K`` evenly spaced centers on a circle of length ``period``.

    Scalar input gives a length-``K`` vector, array input an ``(n, K)`` matrix.
    """
    if sigma <= 0:
        raise FeatureConfigError("sigma must be > 0")
    if period <= 0 or K < 1:
        raise FeatureConfigError("period must be > 0 and K >= 1")
    value = np.asarray(value, dtype=float)
    centers = np.arange(K) * (period / K)
    diff = np.abs(np.mod(value[..., None], period) - centers)
    d = np.minimum(diff, period - diff)
    return np.exp(-(d**2) / (2.0 * sigma**2))


def _fourier_design(t: np.ndarray, period: float, harmonics: int) -> np.ndarray:
    t = np.asarray(t, dtype=float)
    k = np.arange(1, harmonics + 1)
    angle = 2.0 * np.pi * np.outer(t, k) / period
    return np.column_stack([np.ones_like(t), np.cos(angle), np.sin(angle)])


def fourier_fit(series, period: float, harmonics: int, t=None) -> FourierCoeffs:
    """Least-squares fit of a mean plus ``harmonics`` sine/cosine pairs.

    ``t`` are absolute hour indices (default ``0..len-1``).
    """
    y = np.asarray(series, dtype=float)
    t = np.arange(len(y)) if t is None else np.asarray(t)
    n_par = 2 * harmonics + 1
    if len(y) < 2 * n_par:
        raise FeatureConfigError(
            f"burn-in of {len(y)} points too short for {n_par} Fourier parameters"
        )
    A = _fourier_design(t, period, harmonics)
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    return FourierCoeffs(
        float(period), float(coef[0]), coef[1 : harmonics + 1].copy(), coef[harmonics + 1 :].copy()
    )


def fourier_eval(coeffs: FourierCoeffs, t) -> np.ndarray | float:
    t_arr = np.asarray(t, dtype=float)
    k = np.arange(1, len(coeffs.a) + 1)
    angle = 2.0 * np.pi * np.multiply.outer(t_arr, k) / coeffs.period
    out = coeffs.mean + np.cos(angle) @ coeffs.a + np.sin(angle) @ coeffs.b
    return float(out) if np.ndim(t) == 0 else out


def build_lags(series, t, lags) -> np.ndarray:
    """``series[t - lag]`` for each lag; ``t`` may be an array of origins."""
    series = np.asarray(series)
    t = np.asarray(t)
    return series[np.subtract.outer(t, np.asarray(lags))]


def rolling_stats(series, t: int, window: int) -> tuple[float, float, float]:
    if window < 1:
        raise FeatureConfigError("window must be >= 1")
    if t - window + 1 < 0:
        raise IndexError("window reaches before the series start")
    w = np.asarray(series[t - window + 1 : t + 1], dtype=float)
    return float(w.mean()), float(w.min()), float(w.max())


def _rolling_all(series: np.ndarray, window: int) -> tuple[np.ndarray, ...]:
    """Trailing-window mean/min/max for every end index ``>= window - 1``."""
    v = sliding_window_view(np.asarray(series, dtype=float), window)
    return v.mean(axis=1), v.min(axis=1), v.max(axis=1)


def ewm_series(series, halflife: float) -> np.ndarray:
    """Recursive EWM ``m_i = a*x_i + (1-a)*m_{i-1}``, ``m_0 = x_0``, ``a = 1 - 2**(-1/halflife)``."""
    if halflife <= 0:
        raise FeatureConfigError("halflife must be > 0")
    x = np.asarray(series, dtype=float)
    if len(x) == 0:
        return x
    alpha = -np.expm1(-np.log(2.0) / halflife)
    out, _ = lfilter([alpha], [1.0, alpha - 1.0], x, zi=[(1.0 - alpha) * x[0]])
    return out


def ewm_stats(series, t: int, halflife: float) -> float:
    return float(ewm_series(np.asarray(series)[: t + 1], halflife)[-1])


def _hours_since_epoch(stamps: np.ndarray) -> np.ndarray:
    return stamps.astype("datetime64[h]").astype(np.int64)


def calendar_matrix(stamps, cal: CalendarSpec) -> np.ndarray:
    """Columns (is_holiday, is_workhour, is_school, is_weekend) for hourly stamps."""
    stamps = np.asarray(stamps, dtype="datetime64[h]")
    hours = _hours_since_epoch(stamps)
    hod = np.mod(hours, 24)
    days = stamps.astype("datetime64[D]")
    dow = np.mod(days.astype(np.int64) + 3, 7)  # 1970-01-01 was a Thursday; Monday = 0
    weekend = dow >= 5
    start, end = cal.workhours
    work = ~weekend & (hod >= start) & (hod < end)
    hol = np.isin(days, np.array(sorted(cal.holidays), dtype="datetime64[D]"))
    if cal.school_days:
        school = np.isin(days, np.array(sorted(cal.school_days), dtype="datetime64[D]"))
    else:
        school = np.zeros(len(stamps), bool)
    return np.column_stack([hol, work, school, weekend]).astype(float)


def calendar_flags(t, cal: CalendarSpec) -> tuple[int, int, int, int]:
    row = calendar_matrix(np.array([np.datetime64(t, "h")]), cal)[0]
    return tuple(int(v) for v in row)


def _temporal_block(stamps: np.ndarray, spec: FeatureSpec) -> np.ndarray:
    hours = _hours_since_epoch(stamps)
    hod = np.mod(hours, 24)
    dow = np.mod(np.floor_divide(hours, 24) + 3, 7)
    return np.hstack(
        [
            rbf_encode(hod, 24.0, spec.rbf_hour_k, spec.rbf_hour_sigma),
            rbf_encode(dow, 7.0, spec.rbf_dow_k, spec.rbf_dow_sigma),
            calendar_matrix(stamps, spec.calendar),
        ]
    )


def assemble_matrix(
    series: DemandSeries,
    target_kind: str,
    horizon: int,
    spec: FeatureSpec,
    split: TemporalSplit,
) -> dict[str, FeatureMatrix]:
    """Feature matrices for the train/valid/test parts of one station.

    A row with origin ``t`` predicts the target series at ``t + horizon``.  Rows
    are kept in the part that contains both the origin and the target hour.
    """
    if not 1 <= horizon <= max(HORIZONS):
        raise FeatureConfigError(f"horizon must be in [1, {max(HORIZONS)}]")
    if target_kind not in TARGET_KINDS:
        raise FeatureConfigError(f"unknown target kind {target_kind!r}")
    L = len(series)
    if split.length != L:
        raise FeatureConfigError(f"split is for {split.length} hours, series has {L}")
    if spec.fourier_periods and spec.burnin_len > split.train_end:
        raise FeatureConfigError(
            f"burn-in of {spec.burnin_len} h exceeds the {split.train_end} h training span"
        )
    first = spec.first_origin
    if first + horizon >= L:
        raise FeatureConfigError("series too short for the requested history and horizon")

    y = series.target(target_kind).astype(float)
    arr = series.arrivals.astype(float)
    dep = series.departures.astype(float)
    origins = np.arange(first, L - horizon)

    blocks = [_temporal_block(series.timestamps[origins], spec)]
    blocks.append(build_lags(arr, origins, spec.lags))
    blocks.append(build_lags(dep, origins, spec.lags))
    for w in spec.rolling_windows:
        mean, lo, hi = _rolling_all(y, w)
        idx = origins - (w - 1)
        blocks.append(np.column_stack([mean[idx], lo[idx], hi[idx]]))
    for hl in spec.ewm_halflives:
        blocks.append(ewm_series(y, hl)[origins][:, None])
    burn = np.arange(spec.burnin_len)
    for p in spec.fourier_periods:
        coeffs = fourier_fit(y[burn], p, spec.fourier_harmonics, t=burn)
        blocks.append(np.asarray(fourier_eval(coeffs, origins))[:, None])
    X = np.hstack(blocks)
    targets = y[origins + horizon]

    names = spec.feature_names()
    assert X.shape[1] == len(names)
    out = {}
    for part in ("train", "valid", "test"):
        lo, hi = split.part(part)
        keep = (origins >= lo) & (origins + horizon < hi)
        out[part] = FeatureMatrix(
            series.station,
            target_kind,
            horizon,
            names,
            X[keep],
            targets[keep],
            origins[keep],
        )
    return out


def stack_matrices(parts: list[FeatureMatrix]) -> tuple[np.ndarray, np.ndarray]:
    """Row-concatenate several stations' matrices (client or pooled training set)."""
    if not parts:
        raise ValueError("nothing to stack")
    names = parts[0].feature_names
    for p in parts[1:]:
        if p.feature_names != names:
            raise ValueError("feature names differ between matrices")
    return np.vstack([p.rows for p in parts]), np.concatenate([p.targets for p in parts])


def spec_from_json(text: str) -> FeatureSpec:
    return FeatureSpec.from_dict(json.loads(text))
