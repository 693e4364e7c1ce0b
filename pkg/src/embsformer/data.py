"""Readings ingestion, chronological splits, windowing, and synthetic data.

File formats:
  readings CSV  -- header ``#meta,n_nodes=<N>,n_features=<F>,step_minutes=<s>,start=<ISO-8601>``
                   then one row per time step with N*F comma-separated values, node-major.
  adjacency CSV -- header row ``from,to,cost`` then 0-based edge lines.
  holidays file -- one YYYY-MM-DD per line.

PEMS-style array dumps flatten to the readings CSV by writing each time
step as a node-major row under the meta header (see README).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from datetime import date, datetime, timedelta

import numpy as np

from embsformer.graph import TrafficGraph

__all__ = [
    "RawSeries",
    "NormalizationStats",
    "CalendarFeatures",
    "WindowSample",
    "load_readings",
    "save_readings",
    "load_adjacency",
    "save_adjacency",
    "load_holidays",
    "chronological_split",
    "fit_normalizer",
    "calendar_features",
    "make_windows",
    "synth_generate",
]

MINUTES_PER_DAY = 1440


@dataclass
class RawSeries:
    """Readings for all nodes: values[t, node, feature], feature 0 = flow."""

    values: np.ndarray
    start: datetime
    step_minutes: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError(f"values must be T x N x F, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            t, n, f = [int(i[0]) for i in np.nonzero(~np.isfinite(v))]
            raise ValueError(f"non-finite reading at t={t}, node={n}, feature={f}")
        if self.step_minutes <= 0:
            raise ValueError("step_minutes must be positive")
        self.values = v

    @property
    def n_steps(self):
        return self.values.shape[0]

    @property
    def n_nodes(self):
        return self.values.shape[1]

    @property
    def n_features(self):
        return self.values.shape[2]

    def timestamp(self, index):
        return self.start + timedelta(minutes=self.step_minutes * int(index))

    def with_values(self, values):
        return RawSeries(values=values, start=self.start, step_minutes=self.step_minutes)


@dataclass
class NormalizationStats:
    """Per-feature mean/std, fitted on the training partition only."""

    mean: np.ndarray
    std: np.ndarray

    def apply(self, values):
        """(x - mean) / std over the trailing feature axis."""
        return (np.asarray(values) - self.mean) / self.std

    def invert(self, values):
        return np.asarray(values) * self.std + self.mean

    def apply_feature(self, values, feature=0):
        return (np.asarray(values) - self.mean[feature]) / self.std[feature]

    def invert_feature(self, values, feature=0):
        return np.asarray(values) * self.std[feature] + self.mean[feature]


@dataclass
class CalendarFeatures:
    """Per-index minute of day [0,1439], day of week [0,6], holiday flag {0,1}."""

    minute_of_day: np.ndarray
    day_of_week: np.ndarray
    is_holiday: np.ndarray

    def slice(self, start, stop):
        return (
            self.minute_of_day[start:stop],
            self.day_of_week[start:stop],
            self.is_holiday[start:stop],
        )


@dataclass
class WindowSample:
    """One training example anchored at time index t.

    recent covers [t-m+1, t]; target covers [t+1, t+n]; period branch i is
    the (m+n)-step window whose end sits exactly P_i steps before the
    target's end, so its last n steps (the pseudo-future) align with the
    target's clock time one period earlier.
    """

    anchor: int
    recent: np.ndarray        # [m, N, F]
    periods: np.ndarray       # [K, m+n, N, F]
    target: np.ndarray        # [n, N]  (feature 0)
    recent_minute: np.ndarray
    recent_dow: np.ndarray
    recent_holiday: np.ndarray
    period_minute: np.ndarray   # [K, m+n]
    period_dow: np.ndarray
    period_holiday: np.ndarray

    @property
    def n_branches(self):
        return self.periods.shape[0]


# --------------------------------------------------------------------------
# file I/O
# --------------------------------------------------------------------------


def load_readings(path) -> RawSeries:
    """Parse the self-describing readings CSV; rejects NaN/Inf with location."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("#meta,"):
            raise ValueError(f"{path}: missing '#meta' header line")
        meta = {}
        for part in header[len("#meta,"):].split(","):
            if "=" not in part:
                raise ValueError(f"{path}: malformed meta entry {part!r}")
            key, val = part.split("=", 1)
            meta[key.strip()] = val.strip()
        try:
            n_nodes = int(meta["n_nodes"])
            n_features = int(meta["n_features"])
            step_minutes = int(meta["step_minutes"])
            start = datetime.fromisoformat(meta["start"])
        except KeyError as exc:
            raise ValueError(f"{path}: header missing {exc.args[0]}") from None

        width = n_nodes * n_features
        rows = []
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line:
                continue
            cells = line.split(",")
            if len(cells) != width:
                raise ValueError(
                    f"{path}: row {lineno} has {len(cells)} values, expected {width}"
                )
            try:
                rows.append([float(c) for c in cells])
            except ValueError:
                raise ValueError(f"{path}: non-numeric value in row {lineno}") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    values = np.asarray(rows, dtype=np.float64)
    bad = ~np.isfinite(values)
    if np.any(bad):
        t, col = [int(i[0]) for i in np.nonzero(bad)]
        raise ValueError(
            f"{path}: non-finite value at t={t}, node={col // n_features}, "
            f"feature={col % n_features}"
        )
    return RawSeries(
        values=values.reshape(len(rows), n_nodes, n_features),
        start=start,
        step_minutes=step_minutes,
    )


def save_readings(series: RawSeries, path):
    header = (
        f"#meta,n_nodes={series.n_nodes},n_features={series.n_features},"
        f"step_minutes={series.step_minutes},start={series.start.isoformat()}"
    )
    flat = series.values.reshape(series.n_steps, -1)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_adjacency(path, n_nodes, binarize=True) -> TrafficGraph:
    """Edge-list CSV ``from,to,cost`` -> symmetric adjacency; self-loops dropped.

    Costs are ignored under the default binarization; ``binarize=False``
    keeps them as symmetric weights (max of the two directions).
    """
    a = np.zeros((n_nodes, n_nodes), dtype=np.float64)
    n_edges = 0
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh):
            line = line.strip()
            if not line or (lineno == 0 and line.lower().replace(" ", "").startswith("from,to")):
                continue
            cells = line.split(",")
            if len(cells) < 2:
                raise ValueError(f"{path}: line {lineno}: expected 'from,to,cost'")
            try:
                u, v = int(cells[0]), int(cells[1])
                cost = float(cells[2]) if len(cells) > 2 else 1.0
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric edge entry") from None
            if u >= n_nodes or v >= n_nodes or u < 0 or v < 0:
                raise ValueError(
                    f"{path}: line {lineno}: node id out of range for n_nodes={n_nodes}"
                )
            if u == v:
                continue
            weight = 1.0 if binarize else cost
            a[u, v] = max(a[u, v], weight)
            a[v, u] = max(a[v, u], weight)
            n_edges += 1
    if n_edges == 0:
        warnings.warn(f"{path}: no edges loaded; adjacency is all zeros")
    return TrafficGraph(adjacency=a)


def save_adjacency(graph: TrafficGraph, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("from,to,cost\n")
        a = graph.adjacency
        for u in range(graph.num_nodes):
            for v in range(u + 1, graph.num_nodes):
                if a[u, v] > 0:
                    fh.write(f"{u},{v},{repr(float(a[u, v]))}\n")


def load_holidays(path):
    """One YYYY-MM-DD per line -> set of dates."""
    days = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                days.add(date.fromisoformat(line))
    return days


# --------------------------------------------------------------------------
# splits / normalization / calendar
# --------------------------------------------------------------------------


def chronological_split(series: RawSeries, ratios=(6, 2, 2)):
    """Contiguous (train, val, test) index ranges in 6:2:2 proportions.

    Train and val get the floor of their share; the remainder goes to test.
    """
    t_total = series.n_steps
    if t_total < 10:
        raise ValueError(f"series too short to split: {t_total} steps")
    total = sum(ratios)
    n_train = int(t_total * ratios[0] / total)
    n_val = int(t_total * ratios[1] / total)
    return (0, n_train), (n_train, n_train + n_val), (n_train + n_val, t_total)


def fit_normalizer(series: RawSeries, train_range) -> NormalizationStats:
    """Per-feature mean and population std over the training slice only."""
    lo, hi = train_range
    chunk = series.values[lo:hi]
    mean = chunk.mean(axis=(0, 1))
    std = chunk.std(axis=(0, 1))
    if np.any(std <= 1e-12):
        feat = int(np.nonzero(std <= 1e-12)[0][0])
        raise ValueError(f"feature {feat} is constant on the training range")
    return NormalizationStats(mean=mean, std=std)


def calendar_features(series: RawSeries, holidays=()) -> CalendarFeatures:
    holidays = set(holidays)
    t_total = series.n_steps
    start_minute = series.start.hour * 60 + series.start.minute
    idx = np.arange(t_total, dtype=np.int64)
    minute = (start_minute + idx * series.step_minutes) % MINUTES_PER_DAY
    # day boundaries: whole days elapsed since the start timestamp's midnight
    days_elapsed = (start_minute + idx * series.step_minutes) // MINUTES_PER_DAY
    start_dow = series.start.weekday()
    dow = (start_dow + days_elapsed) % 7
    if holidays:
        start_date = series.start.date()
        uniq = np.unique(days_elapsed)
        flag_by_day = {
            int(d): int(start_date + timedelta(days=int(d)) in holidays) for d in uniq
        }
        hol = np.asarray([flag_by_day[int(d)] for d in days_elapsed], dtype=np.int64)
    else:
        hol = np.zeros(t_total, dtype=np.int64)
    return CalendarFeatures(
        minute_of_day=minute.astype(np.int64),
        day_of_week=dow.astype(np.int64),
        is_holiday=hol,
    )


# --------------------------------------------------------------------------
# windowing
# --------------------------------------------------------------------------


def make_windows(series: RawSeries, split_range, m, n, periods,
                 calendar: CalendarFeatures = None, anchor_floor=None):
    """Materialize every valid WindowSample for one chronological split.

    For anchor t: recent = [t-m+1, t], target = [t+1, t+n]; period branch i
    spans [t-m-P_i+1, t+n-P_i]. Recent and target stay inside the split;
    period branches are inputs and may reach into earlier history, but
    anchors whose largest-period window underflows the series are dropped.
    ``anchor_floor`` optionally raises the first admissible anchor (used to
    keep anchor sets identical across period configurations).
    """
    periods = list(periods)
    if sorted(periods) != periods:
        raise ValueError(f"periods must be sorted ascending, got {periods}")
    for p in periods:
        if p < m + n:
            raise ValueError(f"period {p} is shorter than m+n={m + n}")
    if calendar is None:
        calendar = calendar_features(series)

    lo, hi = split_range
    max_period = max(periods) if periods else 0
    first = max(lo + m - 1, m + max_period - 1 if periods else 0)
    if anchor_floor is not None:
        first = max(first, anchor_floor)
    last = hi - 1 - n  # target must end inside the split
    values = series.values

    samples = []
    for t in range(first, last + 1):
        rec_lo, rec_hi = t - m + 1, t + 1
        blocks = []
        cal_min, cal_dow, cal_hol = [], [], []
        for p in periods:
            w_lo, w_hi = t - m - p + 1, t + n - p + 1
            blocks.append(values[w_lo:w_hi])
            mn, dw, hl = calendar.slice(w_lo, w_hi)
            cal_min.append(mn)
            cal_dow.append(dw)
            cal_hol.append(hl)
        rmn, rdw, rhl = calendar.slice(rec_lo, rec_hi)
        samples.append(
            WindowSample(
                anchor=t,
                recent=values[rec_lo:rec_hi].copy(),
                periods=np.stack(blocks) if blocks else np.zeros((0, m + n) + values.shape[1:]),
                target=values[t + 1:t + n + 1, :, 0].copy(),
                recent_minute=rmn.copy(),
                recent_dow=rdw.copy(),
                recent_holiday=rhl.copy(),
                period_minute=np.stack(cal_min) if blocks else np.zeros((0, m + n), dtype=np.int64),
                period_dow=np.stack(cal_dow) if blocks else np.zeros((0, m + n), dtype=np.int64),
                period_holiday=np.stack(cal_hol) if blocks else np.zeros((0, m + n), dtype=np.int64),
            )
        )
    if not samples:
        raise ValueError(
            f"no valid anchors in split {split_range} for m={m}, n={n}, periods={periods}"
        )
    return samples


# --------------------------------------------------------------------------
# synthetic data
# --------------------------------------------------------------------------


def synth_generate(n_nodes, days, step_minutes, daily_amp=50.0, weekly_amp=15.0,
                   noise_std=5.0, graph_model="ring", seed=0):
    """Deterministic periodic flows plus a sensor graph; desk-scale PEMS stand-in.

    Per-node flow = base + daily sinusoid + weekly sinusoid + smoothed
    same-step neighbor coupling + Gaussian noise. Sinusoid phases use the
    step index modulo the period, so a noise-free daily-only series is
    bit-exactly 1-day periodic.
    """
    if MINUTES_PER_DAY % step_minutes != 0:
        raise ValueError(f"step_minutes={step_minutes} must divide {MINUTES_PER_DAY}")
    if weekly_amp > 0 and days < 15:
        raise ValueError("need days >= 15 when the weekly component is active")
    spd = MINUTES_PER_DAY // step_minutes
    t_total = days * spd
    rng = np.random.Generator(np.random.Philox(key=seed))

    a = np.zeros((n_nodes, n_nodes))
    if graph_model == "ring":
        for i in range(n_nodes):
            a[i, (i + 1) % n_nodes] = 1.0
            a[(i + 1) % n_nodes, i] = 1.0
    elif graph_model == "random":
        upper = rng.random((n_nodes, n_nodes)) < 0.15
        a = np.triu(upper, k=1).astype(np.float64)
        a = np.maximum(a, a.T)
    else:
        raise ValueError(f"unknown graph_model {graph_model!r}")
    graph = TrafficGraph(adjacency=a)

    idx = np.arange(t_total)
    base = rng.uniform(80.0, 120.0, n_nodes)
    daily_phase = rng.uniform(0.0, 2.0 * np.pi, n_nodes)
    weekly_phase = rng.uniform(0.0, 2.0 * np.pi, n_nodes)
    daily = daily_amp * np.sin(
        2.0 * np.pi * (idx % spd)[:, None] / spd + daily_phase[None, :]
    )
    wpd = 7 * spd
    weekly = weekly_amp * np.sin(
        2.0 * np.pi * (idx % wpd)[:, None] / wpd + weekly_phase[None, :]
    )
    signal = base[None, :] + daily + weekly

    deg = graph.degree
    coupled = signal.copy()
    if np.any(deg > 0):
        neighbor_mean = signal @ a.T / np.where(deg > 0, deg, 1.0)[None, :]
        coupled = coupled + 0.25 * np.where(deg > 0, 1.0, 0.0)[None, :] * (
            neighbor_mean - signal
        )
    noise = rng.normal(0.0, noise_std, (t_total, n_nodes)) if noise_std > 0 else 0.0
    flow = coupled + noise

    series = RawSeries(
        values=flow[:, :, None],
        start=datetime(2023, 4, 3, 0, 0),  # a Monday
        step_minutes=step_minutes,
    )
    return series, graph
