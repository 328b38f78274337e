"""Weekly county panels: ingestion, aggregation, covariates and adjacency.

Raw inputs follow four CSV schemas::

    cases/deaths   date,fips,cases,deaths           (cumulative, NYT style)
    hotspots       date,fips,hotspot                (daily 0/1 flags)
    mobility       date,fips,retail_recreation,grocery_pharmacy,parks,
                   transit,workplaces,residential   (percent change)
    adjacency      fips_a,fips_b
    centroids      fips,lon,lat

Weeks run Sunday to Saturday. Week 1 is the first full week that contains
data; incomplete trailing weeks are dropped.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
import os
import tempfile
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = [
    "MOBILITY_COLUMNS",
    "CountyId",
    "IngestReport",
    "PanelDataset",
    "CovariateTensor",
    "CaseTransform",
    "default_week_origin",
    "aggregate_weekly",
    "weekly_sum",
    "weekly_hotspots",
    "build_covariates",
    "load_adjacency",
    "read_centroids",
    "ingest",
    "read_panel",
    "write_panel",
    "write_adjacency",
    "atomic_write_text",
]

log = logging.getLogger(__name__)

MOBILITY_COLUMNS = (
    "retail_recreation",
    "grocery_pharmacy",
    "parks",
    "transit",
    "workplaces",
    "residential",
)
BASE_FEATURES = ("cases", "deaths", *(f"mob_{k}" for k in range(1, 7)))
PANEL_COLUMNS = ("fips", "week", "lon", "lat", "cases", "deaths", "hotspot",
                 *(f"mob_{k}" for k in range(1, 7)))


@dataclass(frozen=True)
class CountyId:
    fips: str
    lon: float
    lat: float

    def __post_init__(self):
        if not -180.0 <= self.lon <= 180.0 or not -90.0 <= self.lat <= 90.0:
            raise DataError(f"centroid of {self.fips} out of range: ({self.lon}, {self.lat})")


@dataclass
class IngestReport:
    """Counters for everything ingestion skipped, clamped or imputed."""

    skipped_unknown_fips: int = 0
    skipped_before_origin: int = 0
    clamped_negative: int = 0
    non_monotone_counties: int = 0
    imputed_mobility: int = 0
    skipped_edges: int = 0
    warnings: list = field(default_factory=list)

    def warn(self, msg):
        log.warning(msg)
        self.warnings.append(msg)

    @property
    def warning_count(self):
        return len(self.warnings)

    def to_dict(self):
        return {
            "skipped_unknown_fips": self.skipped_unknown_fips,
            "skipped_before_origin": self.skipped_before_origin,
            "clamped_negative": self.clamped_negative,
            "non_monotone_counties": self.non_monotone_counties,
            "imputed_mobility": self.imputed_mobility,
            "skipped_edges": self.skipped_edges,
            "warnings": list(self.warnings),
        }


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable weekly panel over ``I`` counties and ``T`` weeks.

    ``adjacency`` holds ordered index pairs ``(i, j)`` in both directions and
    never ``(i, i)``.
    """

    counties: tuple
    cases: np.ndarray
    deaths: np.ndarray
    hotspots: np.ndarray
    mobility: np.ndarray
    adjacency: frozenset = frozenset()
    week_origin: dt.date | None = None

    def __post_init__(self):
        I = len(self.counties)
        fips = [c.fips for c in self.counties]
        if len(set(fips)) != I:
            raise DataError("duplicate fips in panel")
        cases = _frozen(self.cases, np.int64)
        deaths = _frozen(self.deaths, np.int64)
        hot = _frozen(self.hotspots, np.int8)
        mob = _frozen(self.mobility, float)
        if cases.ndim != 2 or cases.shape[0] != I:
            raise DataError("cases must be an I x T array")
        T = cases.shape[1]
        for name, arr in (("deaths", deaths), ("hotspots", hot)):
            if arr.shape != (I, T):
                raise DataError(f"{name} has shape {arr.shape}, expected {(I, T)}")
        if mob.shape != (I, T, 6):
            raise DataError(f"mobility has shape {mob.shape}, expected {(I, T, 6)}")
        if (cases < 0).any() or (deaths < 0).any():
            raise DataError("negative counts in panel")
        if not np.isin(hot, (0, 1)).all():
            raise DataError("hotspot flags must be 0/1")
        adj = frozenset((int(i), int(j)) for i, j in self.adjacency)
        for i, j in adj:
            if i == j or not (0 <= i < I and 0 <= j < I) or (j, i) not in adj:
                raise DataError(f"invalid adjacency edge {(i, j)}")
        object.__setattr__(self, "counties", tuple(self.counties))
        object.__setattr__(self, "cases", cases)
        object.__setattr__(self, "deaths", deaths)
        object.__setattr__(self, "hotspots", hot)
        object.__setattr__(self, "mobility", mob)
        object.__setattr__(self, "adjacency", adj)

    @property
    def I(self):
        return len(self.counties)

    @property
    def T(self):
        return self.cases.shape[1]

    @property
    def fips(self):
        return [c.fips for c in self.counties]

    @property
    def lonlat(self):
        return np.array([[c.lon, c.lat] for c in self.counties])

    def neighbors(self):
        """Neighbourhood of each county, including the county itself."""
        nb = [[i] for i in range(self.I)]
        for i, j in sorted(self.adjacency):
            nb[i].append(j)
        return [np.array(sorted(n)) for n in nb]

    def coords(self, weeks=None):
        """Raw ``(week, lon, lat)`` rows for every county and the given weeks
        (1-based), ordered week-major. Returns ``(coords, county_idx, week)``."""
        weeks = np.arange(1, self.T + 1) if weeks is None else np.asarray(weeks)
        ll = self.lonlat
        ii = np.tile(np.arange(self.I), len(weeks))
        ww = np.repeat(weeks, self.I)
        X = np.column_stack([ww.astype(float), ll[ii]])
        return X, ii, ww

    def head(self, n_weeks):
        """Panel restricted to the first ``n_weeks`` weeks."""
        return PanelDataset(self.counties, self.cases[:, :n_weeks], self.deaths[:, :n_weeks],
                            self.hotspots[:, :n_weeks], self.mobility[:, :n_weeks],
                            self.adjacency, self.week_origin)


@dataclass
class CaseTransform:
    """``log(1 + y)`` standardized with global constants."""

    mean: float
    sd: float

    @classmethod
    def fit(cls, cases):
        z = np.log1p(np.asarray(cases, float))
        sd = float(z.std())
        return cls(float(z.mean()), sd if sd > 0 else 1.0)

    def forward(self, y):
        return (np.log1p(np.asarray(y, float)) - self.mean) / self.sd

    def inverse(self, z):
        return np.maximum(np.expm1(np.asarray(z, float) * self.sd + self.mean), 0.0)

    def to_dict(self):
        return {"mean": self.mean, "sd": self.sd}


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------


def _parse_date(text, line=None):
    try:
        return dt.date.fromisoformat(text.strip())
    except ValueError as exc:
        where = f" on line {line}" if line is not None else ""
        raise DataError(f"unparseable date {text!r}{where}") from exc


def default_week_origin(dates):
    """First Sunday on or after the earliest date."""
    first = min(dates)
    # date.weekday(): Monday=0 ... Sunday=6
    return first + dt.timedelta(days=(6 - first.weekday()) % 7)


def _n_full_weeks(origin, last):
    return max(0, ((last - origin).days + 1) // 7)


def weekly_sum(daily):
    """Sum a ``(..., 7 * T)`` array of daily values into ``(..., T)`` weeks."""
    daily = np.asarray(daily)
    T = daily.shape[-1] // 7
    return daily[..., : 7 * T].reshape(*daily.shape[:-1], T, 7).sum(axis=-1)


def weekly_hotspots(daily_flags):
    """A week is a hotspot iff any of its 7 days is flagged."""
    daily = np.asarray(daily_flags)
    if not np.isin(daily, (0, 1)).all():
        raise DataError("hotspot flags must be 0/1")
    T = daily.shape[-1] // 7
    return daily[..., : 7 * T].reshape(*daily.shape[:-1], T, 7).max(axis=-1).astype(np.int8)


def aggregate_weekly(records, week_origin, n_weeks=None, cumulative=True,
                     known_fips=None, report=None):
    """Aggregate ``(fips, date, value)`` records into weekly totals per county.

    Cumulative series are differenced first; each county's first record is
    its baseline (zero increment) and negative increments are clamped to 0.
    Records dated before ``week_origin`` only serve as baselines.
    """
    report = IngestReport() if report is None else report
    series = defaultdict(list)
    for fips, date, value in records:
        if known_fips is not None and fips not in known_fips:
            report.skipped_unknown_fips += 1
            continue
        if value < 0:
            raise DataError(f"negative count for {fips} on {date}")
        series[fips].append((date, float(value)))
    if n_weeks is None:
        last = max((d for s in series.values() for d, _ in s), default=week_origin)
        n_weeks = _n_full_weeks(week_origin, last)
    out = {}
    for fips, rows in series.items():
        rows.sort()
        dates = [d for d, _ in rows]
        vals = np.array([v for _, v in rows])
        if cumulative:
            inc = np.diff(vals, prepend=vals[0])
            neg = inc < 0
            if neg.any():
                report.clamped_negative += int(neg.sum())
                report.non_monotone_counties += 1
                report.warn(f"county {fips}: cumulative series decreases on {int(neg.sum())} day(s); clamped")
                inc[neg] = 0.0
        else:
            inc = vals
        weekly = np.zeros(n_weeks)
        for d, v in zip(dates, inc):
            w = (d - week_origin).days // 7
            if w < 0:
                report.skipped_before_origin += 1
            elif w < n_weeks:
                weekly[w] += v
        out[fips] = weekly
    return out


# ---------------------------------------------------------------------------
# Covariates
# ---------------------------------------------------------------------------


@dataclass
class CovariateTensor:
    """Lag-stacked standardized covariates ``eta`` of shape ``(I, T, 8 * d)``.

    Channels are ordered lag-major: the 8 base features at lag 1, then at
    lag 2, and so on. ``mask[i, t]`` is true where the full history exists.
    """

    eta: np.ndarray
    mask: np.ndarray
    depth: int
    feature_mean: np.ndarray
    feature_sd: np.ndarray

    @property
    def L(self):
        return self.eta.shape[2]

    @property
    def names(self):
        return [f"{f}_lag{k}" for k in range(1, self.depth + 1) for f in BASE_FEATURES]


def _standardize(x, mean, sd):
    out = np.zeros_like(x)
    ok = sd > 0
    out[..., ok] = (x[..., ok] - mean[ok]) / sd[ok]
    return out


def base_features(panel):
    """``(I, T, 8)`` raw weekly features: log1p cases, log1p deaths, mobility."""
    return np.concatenate([
        np.log1p(panel.cases.astype(float))[..., None],
        np.log1p(panel.deaths.astype(float))[..., None],
        panel.mobility,
    ], axis=2)


def build_covariates(panel, d=2, fit_weeks=None, stats=None):
    """Stack the previous ``d`` weeks of standardized features for each cell.

    Standardization constants come from the first ``fit_weeks`` weeks (all
    weeks by default) unless ``stats = (mean, sd)`` is given; zero-variance
    channels become all zeros.
    """
    if panel.T <= d:
        raise DataError(f"need more than d={d} weeks, panel has {panel.T}")
    base = base_features(panel)
    if stats is None:
        ref = base[:, : (fit_weeks or panel.T)].reshape(-1, base.shape[2])
        mean, sd = ref.mean(axis=0), ref.std(axis=0)
        sd = np.where(sd < 1e-12, 0.0, sd)
    else:
        mean, sd = (np.asarray(a, float) for a in stats)
    z = _standardize(base, mean, sd)
    I, T, F = z.shape
    eta = np.full((I, T, F * d), np.nan)
    for t in range(d, T):
        eta[:, t] = np.concatenate([z[:, t - k] for k in range(1, d + 1)], axis=1)
    mask = np.zeros((I, T), dtype=bool)
    mask[:, d:] = True
    return CovariateTensor(eta, mask, d, mean, sd)


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------


def _read_csv(path, required):
    """Yield ``(line_number, row_dict)``; validates the header first."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: line 1: header {header} lacks columns {missing}")
        for row in reader:
            yield reader.line_num, row


def _num(text, path, line, col):
    try:
        return float(text)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: line {line}: bad value {text!r} in column {col}") from exc


def read_centroids(path):
    """``fips,lon,lat`` file -> ordered list of :class:`CountyId`."""
    out = {}
    for line, row in _read_csv(path, ("fips", "lon", "lat")):
        fips = row["fips"].strip()
        out[fips] = CountyId(fips, _num(row["lon"], path, line, "lon"),
                             _num(row["lat"], path, line, "lat"))
    return [out[k] for k in sorted(out)]


def load_adjacency(path, known_fips=None, report=None):
    """Symmetric edge set of fips pairs from a ``fips_a,fips_b`` file."""
    report = IngestReport() if report is None else report
    edges = set()
    if os.path.getsize(path) == 0:
        return edges
    for line, row in _read_csv(path, ("fips_a", "fips_b")):
        a, b = row["fips_a"].strip(), row["fips_b"].strip()
        if known_fips is not None and (a not in known_fips or b not in known_fips):
            report.skipped_edges += 1
            report.warn(f"{path}: line {line}: edge ({a}, {b}) references unknown fips; skipped")
            continue
        if a == b:
            continue
        edges.add((a, b))
        edges.add((b, a))
    return edges


def _index_edges(edges, fips):
    index = {f: i for i, f in enumerate(fips)}
    return frozenset((index[a], index[b]) for a, b in edges if a in index and b in index)


def ingest(cases_path, hotspot_path, centroid_path, adjacency_path=None,
           mobility_path=None, week_origin=None):
    """Build a weekly :class:`PanelDataset` from raw CSV files.

    Returns ``(panel, report)``.
    """
    report = IngestReport()
    counties = read_centroids(centroid_path)
    fips = [c.fips for c in counties]
    known = set(fips)

    case_rows, death_rows = [], []
    for line, row in _read_csv(cases_path, ("date", "fips", "cases", "deaths")):
        d = _parse_date(row["date"], line)
        f = row["fips"].strip()
        case_rows.append((f, d, _num(row["cases"], cases_path, line, "cases")))
        death_rows.append((f, d, _num(row["deaths"] or 0, cases_path, line, "deaths")))
    if not case_rows:
        raise DataError(f"{cases_path}: no records")
    if isinstance(week_origin, str):
        week_origin = _parse_date(week_origin)
    if week_origin is None:
        week_origin = default_week_origin(d for f, d, _ in case_rows if f in known)
    last = max(d for _, d, _ in case_rows)
    T = _n_full_weeks(week_origin, last)
    if T < 1:
        raise DataError("no complete week of case data")

    weekly_cases = aggregate_weekly(case_rows, week_origin, T, known_fips=known, report=report)
    weekly_deaths = aggregate_weekly(death_rows, week_origin, T, known_fips=known,
                                     report=IngestReport())
    I = len(counties)
    cases = np.zeros((I, T))
    deaths = np.zeros((I, T))
    for i, f in enumerate(fips):
        if f in weekly_cases:
            cases[i] = weekly_cases[f]
            deaths[i] = weekly_deaths[f]

    n_days = 7 * T
    daily_hot = np.zeros((I, n_days), dtype=np.int8)
    index = {f: i for i, f in enumerate(fips)}
    for line, row in _read_csv(hotspot_path, ("date", "fips", "hotspot")):
        f = row["fips"].strip()
        if f not in index:
            report.skipped_unknown_fips += 1
            continue
        v = _num(row["hotspot"], hotspot_path, line, "hotspot")
        if v not in (0.0, 1.0):
            raise DataError(f"{hotspot_path}: line {line}: hotspot must be 0 or 1")
        day = (_parse_date(row["date"], line) - week_origin).days
        if 0 <= day < n_days:
            daily_hot[index[f], day] = max(daily_hot[index[f], day], int(v))
    hotspots = weekly_hotspots(daily_hot)

    mob_sum = np.zeros((I, T, 6))
    mob_cnt = np.zeros((I, T, 6))
    if mobility_path is not None:
        for line, row in _read_csv(mobility_path, ("date", "fips", *MOBILITY_COLUMNS)):
            f = row["fips"].strip()
            if f not in index:
                report.skipped_unknown_fips += 1
                continue
            w = (_parse_date(row["date"], line) - week_origin).days // 7
            if not 0 <= w < T:
                continue
            for k, col in enumerate(MOBILITY_COLUMNS):
                text = (row[col] or "").strip()
                if text:
                    mob_sum[index[f], w, k] += _num(text, mobility_path, line, col)
                    mob_cnt[index[f], w, k] += 1
    else:
        report.warn("no mobility file given; all mobility imputed as 0 (baseline)")
    missing = mob_cnt == 0
    report.imputed_mobility += int(missing.sum())
    if missing.any() and mobility_path is not None:
        report.warn(f"{int(missing.sum())} county-week mobility values missing; imputed as 0")
    mobility = np.where(missing, 0.0, mob_sum / np.maximum(mob_cnt, 1))

    edges = set()
    if adjacency_path is not None:
        edges = load_adjacency(adjacency_path, known, report)
    panel = PanelDataset(tuple(counties), np.rint(cases), np.rint(deaths), hotspots,
                         mobility, _index_edges(edges, fips), week_origin)
    return panel, report


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", dir=d)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def panel_csv(panel):
    """Columnar panel text (one row per county-week)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PANEL_COLUMNS)
    for i, c in enumerate(panel.counties):
        for t in range(panel.T):
            w.writerow([c.fips, t + 1, repr(c.lon), repr(c.lat), int(panel.cases[i, t]),
                        int(panel.deaths[i, t]), int(panel.hotspots[i, t]),
                        *(repr(float(v)) for v in panel.mobility[i, t])])
    return buf.getvalue()


def adjacency_csv(panel):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("fips_a", "fips_b"))
    fips = panel.fips
    for i, j in sorted(panel.adjacency):
        if i < j:
            w.writerow((fips[i], fips[j]))
    return buf.getvalue()


def write_panel(panel, path):
    atomic_write_text(path, panel_csv(panel))


def write_adjacency(panel, path):
    atomic_write_text(path, adjacency_csv(panel))


def read_panel(path, adjacency_path=None):
    """Inverse of :func:`write_panel` (plus an optional adjacency file)."""
    rows = {}
    coords = {}
    for line, row in _read_csv(path, PANEL_COLUMNS):
        f = row["fips"].strip()
        week = int(_num(row["week"], path, line, "week"))
        lon, lat = _num(row["lon"], path, line, "lon"), _num(row["lat"], path, line, "lat")
        coords.setdefault(f, (lon, lat))
        vals = [_num(row[c], path, line, c) for c in PANEL_COLUMNS[4:]]
        rows[(f, week)] = vals
    if not rows:
        raise DataError(f"{path}: empty panel")
    fips = sorted(coords)
    weeks = sorted({w for _, w in rows})
    T = len(weeks)
    if weeks != list(range(1, T + 1)):
        raise DataError(f"{path}: weeks must be contiguous from 1")
    I = len(fips)
    data = np.zeros((I, T, 9))
    for i, f in enumerate(fips):
        for t in range(T):
            if (f, t + 1) not in rows:
                raise DataError(f"{path}: missing row for fips {f}, week {t + 1}")
            data[i, t] = rows[(f, t + 1)]
    counties = tuple(CountyId(f, *coords[f]) for f in fips)
    edges = set() if adjacency_path is None else load_adjacency(adjacency_path, set(fips))
    return PanelDataset(counties, data[..., 0], data[..., 1], data[..., 2].astype(int),
                        data[..., 3:], _index_edges(edges, fips))
